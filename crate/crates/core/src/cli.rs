//! Command-line workflows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationRecord, AugmentationSpec};
use crate::cascade::{run_pipeline, Segmenter, SeverityReport};
use crate::classical::classical_lung_segmentation;
use crate::error::{Error, Result};
use crate::eval::{evaluate_cases, mosmed_ctss_reference, write_overlay_png, CasePrediction, CaseReference};
use crate::nn::{load_checkpoint, save_checkpoint, CheckpointSidecar, UNetConfig};
use crate::phantom::{generate_phantom_with, PhantomSpec};
use crate::preprocess::HuWindow;
use crate::trainer::{
    load_manifest, split_dataset, train_network, validate_manifest, LungBoxSource, ManifestEntry, NetworkJob, SplitPlan,
    Task, TrainConfig,
};
use crate::volume_io::{load_mask, load_volume, save_mask, save_volume};

#[derive(Debug, Parser)]
#[command(name = "lungquant", version, about = "Lung and lesion quantification for chest CT")]
pub struct Cli {
    /// Cases processed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Seed for every random choice of the invocation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantoms with exact masks and a manifest.
    Phantom(PhantomArgs),
    /// Write augmented copies of manifest cases.
    Augment(AugmentArgs),
    /// Train one network of the cascade.
    Train(TrainArgs),
    /// Run the cascade on one scan.
    Quantify(QuantifyArgs),
    /// Compare predictions with reference annotations.
    Evaluate(EvaluateArgs),
    /// Segment lungs without a network.
    ClassicalSeg(ClassicalArgs),
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(['x', ',']).collect();
    match parts.as_slice() {
        [a, b, c] => {
            let p = |v: &str| v.trim().parse::<T>().map_err(|_| format!("bad value {v:?}"));
            Ok([p(a)?, p(b)?, p(c)?])
        }
        _ => Err(format!("expected three values like 96x72x48, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: usize,
    /// Lesion fractions in [0, 1), used in turn.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lesion_fractions: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size, e.g. 96x72x48.
    #[arg(long, value_parser = parse_triple::<usize>)]
    pub dims: Option<[usize; 3]>,
    /// Voxel spacing in mm, e.g. 3.5x3.5x6.
    #[arg(long, value_parser = parse_triple::<f64>)]
    pub spacing: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Which mask travels with each image.
    #[arg(long, value_enum, default_value = "lesions")]
    pub mask: Task,
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lung network used to crop cases without a reference lung mask.
    #[arg(long)]
    pub unet1: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantifyArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub unet1: PathBuf,
    #[arg(long)]
    pub unet2: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the image file name without extensions.
    #[arg(long)]
    pub case_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// One subdirectory per case, as written by `quantify`.
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub ref_manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an axial overlay PNG per case.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Debug, Args)]
pub struct ClassicalArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub unet: UNetConfig,
    /// Overrides of the task's training defaults.
    #[serde(default)]
    pub train: serde_json::Value,
    #[serde(default)]
    pub split: SplitPlan,
    #[serde(default)]
    pub window: Option<HuWindow>,
}

pub const REPORT_FILE: &str = "report.json";
pub const LUNG_FILE: &str = "lungs.nii.gz";
pub const LESION_FILE: &str = "lesions.nii.gz";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => phantom(&a, cli.seed.unwrap_or(0), cli.jobs),
        Command::Augment(a) => augment(&a, cli.seed, cli.jobs),
        Command::Train(a) => train(&a, cli.seed),
        Command::Quantify(a) => quantify(&a),
        Command::Evaluate(a) => evaluate(&a, cli.jobs),
        Command::ClassicalSeg(a) => {
            let vol = load_volume(&a.image)?;
            save_mask(&classical_lung_segmentation(&vol)?, &a.out)
        }
    }
}

fn phantom(a: &PhantomArgs, seed: u64, jobs: usize) -> Result<()> {
    if a.count == 0 {
        return Err(Error::InvalidArgument("--count must be >= 1".into()));
    }
    if let Some(f) = a.lesion_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("lesion fraction {f} is not in [0, 1)")));
    }
    let defaults = PhantomSpec::default();
    let spec = PhantomSpec {
        dims: a.dims.unwrap_or(defaults.dims),
        spacing: a.spacing.unwrap_or(defaults.spacing),
        ..defaults
    };
    create_dir(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..a.count).map(|_| rng.random()).collect();
    let entries = pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let fraction = a.lesion_fractions[i % a.lesion_fractions.len()];
                let p = generate_phantom_with(&spec, s, fraction)?;
                let id = format!("phantom_{i:03}");
                let names = ["image", "lungs", "lesions"].map(|k| format!("{id}_{k}.nii.gz"));
                save_volume(&p.volume, a.out.join(&names[0]))?;
                save_mask(&p.lungs, a.out.join(&names[1]))?;
                save_mask(&p.lesions, a.out.join(&names[2]))?;
                let [image, lungs, lesions] = names.map(PathBuf::from);
                Ok(ManifestEntry {
                    case_id: id,
                    image_path: image,
                    lung_mask_path: Some(lungs),
                    lesion_mask_path: Some(lesions),
                    source_dataset: "phantom".into(),
                    target_p: Some(100.0 * fraction),
                    mosmed_category: None,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_json(&a.out.join("manifest.json"), &entries)
}

#[derive(Debug, Serialize)]
struct AugmentedCase<'a> {
    case_id: String,
    source_case: &'a str,
    #[serde(flatten)]
    record: AugmentationRecord,
}

fn augment(a: &AugmentArgs, seed: Option<u64>, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    validate_manifest(&manifest.entries, a.mask)?;
    let spec = AugmentationSpec {
        factor: a.factor,
        rng_seed: seed.unwrap_or(0),
        ..Default::default()
    };
    spec.validate()?;
    create_dir(&a.out)?;
    let per_case = pool(jobs)?.install(|| {
        manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(index, e)| {
                let mask_path = match a.mask {
                    Task::Lungs => e.lung_mask_path.as_ref(),
                    Task::Lesions => e.lesion_mask_path.as_ref(),
                }
                .expect("validated");
                let pair = (load_volume(&e.image_path)?, load_mask(mask_path)?);
                pair.0.ensure_same_dims(&pair.1)?;
                // one-pair call with the case's own index keeps the streams of the full dataset
                let mut out = Vec::new();
                for copy in 0..spec.factor {
                    let record = crate::augment::sample_record(&spec, index, copy);
                    let (mut v, mut m) = pair.clone();
                    for t in &record.transforms {
                        (v, m) = t.apply(&v, &m)?;
                    }
                    let id = format!("{}_aug{copy}", e.case_id);
                    let (img, msk) = (format!("{id}_image.nii.gz"), format!("{id}_mask.nii.gz"));
                    save_volume(&v, a.out.join(&img))?;
                    save_mask(&m, a.out.join(&msk))?;
                    let mut entry = ManifestEntry {
                        case_id: id.clone(),
                        image_path: img.into(),
                        lung_mask_path: None,
                        lesion_mask_path: None,
                        source_dataset: e.source_dataset.clone(),
                        target_p: None,
                        mosmed_category: None,
                    };
                    match a.mask {
                        Task::Lungs => entry.lung_mask_path = Some(msk.into()),
                        Task::Lesions => entry.lesion_mask_path = Some(msk.into()),
                    }
                    out.push((entry, AugmentedCase { case_id: id, source_case: &e.case_id, record }));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (entries, records): (Vec<_>, Vec<_>) = per_case.into_iter().flatten().unzip();
    write_json(&a.out.join("manifest.json"), &entries)?;
    write_json(&a.out.join("augmentations.json"), &records)
}

/// Reads and checks everything `train` needs, reporting all problems at once.
fn prepare_training(a: &TrainArgs, seed: Option<u64>) -> Result<(crate::trainer::Manifest, NetworkJob, SplitPlan)> {
    let mut problems = Vec::new();
    let manifest = match load_manifest(&a.manifest) {
        Ok(m) => {
            if let Err(e) = validate_manifest(&m.entries, a.task) {
                problems.push(e.to_string());
            }
            Some(m)
        }
        Err(e) => {
            problems.push(format!("manifest: {e}"));
            None
        }
    };
    let file: Option<TrainFile> = match fs::read_to_string(&a.config) {
        Ok(text) => match serde_json::from_str(&text) {
            Ok(f) => Some(f),
            Err(e) => {
                problems.push(format!("config {}: {e}", a.config.display()));
                None
            }
        },
        Err(e) => {
            problems.push(format!("config {}: {e}", a.config.display()));
            None
        }
    };
    let mut job = None;
    if let Some(f) = &file {
        match TrainConfig::from_json_for_task(&f.train, a.task) {
            Ok(mut train) => {
                let mut unet = f.unet.clone();
                if let Some(s) = seed {
                    train.seed = s;
                    unet.init_seed = s;
                    if let Some(aug) = &mut train.augmentation {
                        aug.rng_seed = s;
                    }
                }
                let j = NetworkJob {
                    task: a.task,
                    unet,
                    train,
                    window: f.window.unwrap_or(a.task.window()),
                };
                if let Err(e) = j.validate() {
                    problems.push(format!("config: {e}"));
                }
                if let Err(e) = f.split.validate() {
                    problems.push(format!("config: {e}"));
                }
                job = Some(j);
            }
            Err(e) => problems.push(format!("config train section: {e}")),
        }
    }
    if let Some(p) = &a.unet1 {
        if !p.is_file() {
            problems.push(format!("lung network {} does not exist", p.display()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("\n")));
    }
    let mut split = file.expect("checked").split;
    if let Some(s) = seed {
        split.seed = s;
    }
    Ok((manifest.expect("checked"), job.expect("checked"), split))
}

fn train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let (manifest, job, plan) = prepare_training(a, seed)?;
    let unet1 = a.unet1.as_ref().map(load_checkpoint).transpose()?;
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in &manifest.entries {
        groups.entry(e.source_dataset.clone()).or_default().push(e.case_id.clone());
    }
    let split = split_dataset(&groups, &plan)?;
    let pick = |ids: &[String]| -> Vec<ManifestEntry> {
        manifest.entries.iter().filter(|e| ids.contains(&e.case_id)).cloned().collect()
    };
    let (train_entries, val_entries) = (pick(&split.train), pick(&split.val));
    let source = LungBoxSource::ReferenceFirst(unet1.as_ref().map(|(m, s)| (m, s.window)));
    let outcome = train_network(&job, &train_entries, &val_entries, source, Some(&manifest.hash))?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    create_dir(&a.out)?;
    let sidecar = CheckpointSidecar {
        learning_rate: job.train.learning_rate,
        batch_size: job.train.batch_size,
        epochs_trained: outcome.history.len(),
        best_epoch: Some(outcome.best_epoch),
        best_val_dice: outcome.best_val_dice,
        seed: job.train.seed,
        manifest_hash: Some(manifest.hash.clone()),
        ..CheckpointSidecar::new(outcome.model.config().clone(), job.window, job.train.loss)
    };
    save_checkpoint(&outcome.model, &sidecar, a.out.join("model.weights"))?;
    let history = a.out.join("history.jsonl");
    fs::write(&history, outcome.history_jsonl()?).map_err(|e| Error::io(&history, e))?;
    write_json(&a.out.join("split.json"), &split)
}

/// File name without any `.nii`/`.gz` style extensions.
fn case_id_of(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn quantify(a: &QuantifyArgs) -> Result<()> {
    let vol = load_volume(&a.image)?;
    let (m1, s1) = load_checkpoint(&a.unet1)?;
    let (m2, s2) = load_checkpoint(&a.unet2)?;
    let id = a.case_id.clone().unwrap_or_else(|| case_id_of(&a.image));
    let out = run_pipeline(&id, &vol, &Segmenter::network(&m1, s1.window), &Segmenter::network(&m2, s2.window))?;
    for w in &out.report.stage_warnings {
        log::warn!("{}: {}", w.stage, w.message);
    }
    create_dir(&a.out)?;
    save_mask(&out.lungs, a.out.join(LUNG_FILE))?;
    save_mask(&out.lesions, a.out.join(LESION_FILE))?;
    let report_path = a.out.join(REPORT_FILE);
    write_json(&report_path, &out.report)?;
    // read back so a zero exit means the report parses
    let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let _: SeverityReport = serde_json::from_str(&text)?;
    Ok(())
}

fn load_prediction(dir: &Path) -> Result<CasePrediction> {
    let report_path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let report: SeverityReport = serde_json::from_str(&text)?;
    let optional = |name: &str| {
        let p = dir.join(name);
        p.is_file().then(|| load_mask(&p)).transpose()
    };
    Ok(CasePrediction {
        lungs: optional(LUNG_FILE)?,
        lesions: optional(LESION_FILE)?,
        p: report.percentage_p,
        ct_ss: report.ct_ss,
    })
}

fn load_reference(e: &ManifestEntry) -> Result<CaseReference> {
    let lungs = e.lung_mask_path.as_ref().map(load_mask).transpose()?;
    let lesions = e.lesion_mask_path.as_ref().map(load_mask).transpose()?;
    let from_masks = lungs.is_some() && lesions.is_some();
    Ok(CaseReference {
        source_dataset: e.source_dataset.clone(),
        p: if from_masks { None } else { e.target_p },
        score: e.mosmed_category.map(mosmed_ctss_reference).transpose()?,
        lungs,
        lesions,
    })
}

fn evaluate(a: &EvaluateArgs, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&a.ref_manifest)?;
    let pred_dirs: BTreeMap<String, PathBuf> = fs::read_dir(&a.pred_dir)
        .map_err(|e| Error::io(&a.pred_dir, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.join(REPORT_FILE).is_file())
        .map(|p| (p.file_name().expect("dir entry").to_string_lossy().into_owned(), p))
        .collect();
    let entries: BTreeMap<String, &ManifestEntry> = manifest.entries.iter().map(|e| (e.case_id.clone(), e)).collect();
    let mut unpaired: Vec<String> = pred_dirs.keys().filter(|k| !entries.contains_key(*k)).cloned().collect();
    unpaired.extend(entries.keys().filter(|k| !pred_dirs.contains_key(*k)).cloned());
    if !unpaired.is_empty() {
        unpaired.sort();
        return Err(Error::Unpaired(unpaired));
    }
    let loaded = pool(jobs)?.install(|| {
        entries
            .par_iter()
            .map(|(id, e)| Ok((id.clone(), (load_prediction(&pred_dirs[id])?, load_reference(e)?))))
            .collect::<Result<Vec<_>>>()
    })?;
    let (pred, reference): (BTreeMap<_, _>, BTreeMap<_, _>) =
        loaded.into_iter().map(|(id, (p, r))| ((id.clone(), p), (id, r))).unzip();
    let summary = evaluate_cases(&pred, &reference)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("summary.json"), &summary)?;
    let text_path = a.out.join("summary.txt");
    fs::write(&text_path, summary.to_text()).map_err(|e| Error::io(&text_path, e))?;
    if a.overlays {
        let dir = a.out.join("overlays");
        create_dir(&dir)?;
        for (id, p) in &pred {
            let r = &reference[id];
            let pair = p.lesions.as_ref().zip(r.lesions.as_ref()).or(p.lungs.as_ref().zip(r.lungs.as_ref()));
            if let Some((pm, rm)) = pair {
                let vol = load_volume(&entries[id].image_path)?;
                write_overlay_png(dir.join(format!("{id}.png")), &vol, pm, rm)?;
            }
        }
    }
    Ok(())
}

