//! Cascaded 3D U-net quantification of lung involvement in chest CT.
//!
//! A first network segments the lungs, a connected-component rule cleans the
//! result, and a second network segments lesions inside a padded bounding box
//! around the lungs. The ratio of lesion to lung volume gives the affected
//! percentage, which maps onto a five-level CT severity score.
//!
//! The guide in `book/` walks through each stage; its code listings are
//! compiled as doctests of this crate.

pub mod augment;
pub mod cascade;
pub mod classical;
pub mod cli;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod refine;
pub mod trainer;
pub mod volume;
pub mod volume_io;

pub use cascade::{ct_severity_score, run_pipeline, CtSeverityScore, SeverityReport, Segmenter};
pub use error::{Error, Result, Stage};
pub use metrics::dice_metric;
pub use volume::{BinaryMask3D, CtVolume, Grid};

#[cfg(doctest)]
mod guide {
    macro_rules! chapters {
        ($($name:ident => $file:literal),* $(,)?) => {
            $(
                #[doc = include_str!(concat!("../../../book/src/", $file))]
                struct $name;
            )*
        };
    }
    chapters! {
        Introduction => "introduction.md",
        Volumes => "volumes.md",
        Network => "network.md",
        Augmentation => "augmentation.md",
        Cascade => "cascade.md",
        Classical => "classical.md",
        Training => "training.md",
        Evaluation => "evaluation.md",
        Cli => "cli.md",
        Reproduction => "reproduction.md",
    }
}
