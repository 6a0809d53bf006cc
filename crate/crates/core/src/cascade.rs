//! The two-network cascade and the severity quantities derived from it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage, StageExt};
use crate::nn::UNetModel;
use crate::preprocess::{network_input, resample_mask_to_original, HuWindow};
use crate::refine::{bounding_box, crop, refine_lung_mask, uncrop_mask, BoundingBox, DEFAULT_PADDING_MM};
use crate::volume::{BinaryMask3D, CtVolume};

/// Five-level CT severity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CtSeverityScore(u8);

impl CtSeverityScore {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=5).contains(&value) {
            Ok(CtSeverityScore(value))
        } else {
            Err(Error::InvalidArgument(format!("CT-SS must be in 1..=5, got {value}")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for CtSeverityScore {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        CtSeverityScore::new(v)
    }
}

impl From<CtSeverityScore> for u8 {
    fn from(s: CtSeverityScore) -> u8 {
        s.0
    }
}

impl fmt::Display for CtSeverityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Maps the affected percentage onto the score. Intervals are closed on the
/// left: 5, 25, 50 and 75 belong to the higher class.
pub fn ct_severity_score(p: f64) -> Result<CtSeverityScore> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentage must lie in [0, 100], got {p}")));
    }
    let s = match p {
        p if p < 5.0 => 1,
        p if p < 25.0 => 2,
        p if p < 50.0 => 3,
        p if p < 75.0 => 4,
        _ => 5,
    };
    Ok(CtSeverityScore(s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageWarning {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityReport {
    pub case_id: String,
    pub lung_volume_ml: f64,
    pub lesion_volume_ml: f64,
    pub percentage_p: f64,
    pub ct_ss: CtSeverityScore,
    #[serde(default)]
    pub stage_warnings: Vec<StageWarning>,
}

/// Lesion burden from a final lung mask and a lesion mask inside it.
pub fn quantify(case_id: &str, lung: &BinaryMask3D, lesion: &BinaryMask3D) -> Result<SeverityReport> {
    lung.ensure_same_dims(lesion)?;
    if !lesion.is_subset_of(lung) {
        return Err(Error::InvalidArgument("lesion mask extends outside the lung mask".into()));
    }
    let n_lung = lung.count();
    if n_lung == 0 {
        return Err(Error::EmptyMask);
    }
    let n_lesion = lesion.count();
    let p = 100.0 * n_lesion as f64 / n_lung as f64;
    let ml = lung.voxel_volume_ml();
    Ok(SeverityReport {
        case_id: case_id.to_owned(),
        lung_volume_ml: n_lung as f64 * ml,
        lesion_volume_ml: n_lesion as f64 * ml,
        percentage_p: p,
        ct_ss: ct_severity_score(p)?,
        stage_warnings: Vec::new(),
    })
}

/// Voxelwise OR of the two network outputs.
pub fn final_lung_mask(unet1_mask: &BinaryMask3D, unet2_mask: &BinaryMask3D) -> Result<BinaryMask3D> {
    unet1_mask.union(unet2_mask)
}

/// What fills a network slot of the cascade.
#[derive(Debug, Clone, Copy)]
pub enum Segmenter<'a> {
    /// A trained network and the window it was trained with.
    Network { model: &'a UNetModel, window: HuWindow },
    /// A known mask on the scan grid, standing in for the network.
    Oracle(&'a BinaryMask3D),
}

impl<'a> Segmenter<'a> {
    pub fn network(model: &'a UNetModel, window: HuWindow) -> Self {
        Segmenter::Network { model, window }
    }
}

/// Windowed, resampled network prediction on the network lattice.
fn network_mask(model: &UNetModel, window: HuWindow, vol: &CtVolume) -> Result<BinaryMask3D> {
    let input = network_input(vol, window, model.config().input_dims)?;
    model.predict_mask(&input)
}

/// Lung mask after refinement, plus any warning the refinement raised.
#[derive(Debug, Clone, PartialEq)]
pub struct LungSegmentation {
    pub mask: BinaryMask3D,
    pub warning: Option<String>,
}

pub fn segment_lungs(vol: &CtVolume, unet1: &Segmenter) -> Result<LungSegmentation> {
    match *unet1 {
        Segmenter::Network { model, window } => {
            let raw = network_mask(model, window, vol).at_stage(Stage::LungSegmentation)?;
            // refinement runs on the network lattice
            let refined = refine_lung_mask(&raw).at_stage(Stage::LungRefinement)?;
            let mask = resample_mask_to_original(&refined.mask, vol).at_stage(Stage::LungSegmentation)?;
            Ok(LungSegmentation {
                mask,
                warning: refined.warning(),
            })
        }
        Segmenter::Oracle(m) => {
            vol.ensure_same_dims(m).at_stage(Stage::LungSegmentation)?;
            let refined = refine_lung_mask(m).at_stage(Stage::LungRefinement)?;
            Ok(LungSegmentation {
                warning: refined.warning(),
                mask: refined.mask.with_spacing(vol.spacing())?.with_origin(vol.origin()),
            })
        }
    }
}

/// Lesion mask on the original grid, confined to the padded lung box.
pub fn segment_lesions(vol: &CtVolume, refined_lungs: &BinaryMask3D, unet2: &Segmenter) -> Result<BinaryMask3D> {
    let bbox = bounding_box(refined_lungs, vol.spacing(), DEFAULT_PADDING_MM).at_stage(Stage::BoundingBox)?;
    segment_lesions_in(vol, &bbox, unet2).at_stage(Stage::LesionSegmentation)
}

fn segment_lesions_in(vol: &CtVolume, bbox: &BoundingBox, unet2: &Segmenter) -> Result<BinaryMask3D> {
    let cropped = match *unet2 {
        Segmenter::Network { model, window } => {
            let sub = crop(vol, bbox)?;
            let pred = network_mask(model, window, &sub)?;
            resample_mask_to_original(&pred, &sub)?
        }
        Segmenter::Oracle(m) => {
            vol.ensure_same_dims(m)?;
            crop(m, bbox)?
        }
    };
    let out = uncrop_mask(&cropped, bbox, vol.dims())?;
    Ok(out.with_spacing(vol.spacing())?.with_origin(vol.origin()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub lungs: BinaryMask3D,
    pub lesions: BinaryMask3D,
    pub report: SeverityReport,
}

/// Full cascade: lungs, refinement, lung box, lesions, union, quantification.
pub fn run_pipeline(case_id: &str, vol: &CtVolume, unet1: &Segmenter, unet2: &Segmenter) -> Result<PipelineOutput> {
    vol.ensure_finite().at_stage(Stage::LungSegmentation)?;
    let lungs1 = segment_lungs(vol, unet1)?;
    let lesions = segment_lesions(vol, &lungs1.mask, unet2)?;
    let lungs = final_lung_mask(&lungs1.mask, &lesions).at_stage(Stage::MaskUnion)?;
    let mut report = quantify(case_id, &lungs, &lesions).at_stage(Stage::Quantification)?;
    if let Some(message) = lungs1.warning {
        report.stage_warnings.push(StageWarning {
            stage: Stage::LungRefinement,
            message,
        });
    }
    Ok(PipelineOutput { lungs, lesions, report })
}
