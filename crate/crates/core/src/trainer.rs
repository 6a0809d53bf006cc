//! Dataset splitting, the training loop with best-validation selection, and
//! manifest-driven training of both cascade networks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_dataset, AugmentationSpec};
use crate::cascade::{segment_lungs, Segmenter};
use crate::error::{Error, Result};
use crate::metrics::dice_metric;
use crate::nn::{build_unet, compute_class_weights, Adam, ClassWeights, LossKind, UNetConfig, UNetModel};
use crate::preprocess::{network_input, HuWindow, Resample};
use crate::refine::{bounding_box, crop, BoundingBox, DEFAULT_PADDING_MM};
use crate::volume::{BinaryMask3D, CtVolume};
use crate::volume_io::{load_mask, load_volume, save_mask, save_volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPlan {
    /// `(train, val, test)`.
    pub fractions: [f64; 3],
    pub seed: u64,
    /// Split each source separately instead of the pooled id list.
    pub per_source: bool,
}

impl SplitPlan {
    pub fn sixty_twenty_twenty(seed: u64) -> Self {
        SplitPlan {
            fractions: [0.6, 0.2, 0.2],
            seed,
            per_source: true,
        }
    }

    pub fn ninety_ten(seed: u64) -> Self {
        SplitPlan {
            fractions: [0.9, 0.1, 0.0],
            seed,
            per_source: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions;
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be nonnegative and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan::sixty_twenty_twenty(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partition sizes for `n` items: floors of `f * n`, with the leftover items
/// going to the largest fractional remainders (earlier partitions win ties).
pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Splits ids grouped by source dataset into train, validation and test lists.
pub fn split_dataset(groups: &BTreeMap<String, Vec<String>>, plan: &SplitPlan) -> Result<Split> {
    plan.validate()?;
    let mut seen = BTreeSet::new();
    for (source, ids) in groups {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!("source {source:?} has no cases")));
        }
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("case id {id:?} appears more than once")));
            }
        }
    }
    let pooled: BTreeMap<String, Vec<String>>;
    let groups = if plan.per_source {
        groups
    } else {
        pooled = BTreeMap::from([(String::new(), groups.values().flatten().cloned().collect())]);
        &pooled
    };
    let mut split = Split::default();
    for (g, ids) in groups.values().enumerate() {
        let mut ids = ids.clone();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(g as u64);
        ids.shuffle(&mut rng);
        let [a, b, _] = largest_remainder(ids.len(), plan.fractions);
        split.train.extend_from_slice(&ids[..a]);
        split.val.extend_from_slice(&ids[a..a + b]);
        split.test.extend_from_slice(&ids[a + b..]);
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// Which network of the cascade is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lungs,
    Lesions,
}

impl Task {
    pub fn window(self) -> HuWindow {
        match self {
            Task::Lungs => HuWindow::LUNG,
            Task::Lesions => HuWindow::LESION,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Task::Lungs => LossKind::Dice,
            Task::Lesions => LossKind::DiceWeightedCe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Applied to the training pairs before windowing; `None` trains on the
    /// originals only.
    pub augmentation: Option<AugmentationSpec>,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
    /// Stops once the mean training Dice of an epoch reaches this value.
    #[serde(default)]
    pub stop_at_train_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_task(Task::Lungs)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        TrainConfig {
            epochs: 300,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-4,
            batch_size: 1,
            loss: task.loss(),
            augmentation: (task == Task::Lesions).then(AugmentationSpec::default),
            seed: 0,
            stop_at_train_dice: None,
        }
    }

    /// Task defaults overlaid with the keys present in `overrides`.
    pub fn from_json_for_task(overrides: &serde_json::Value, task: Task) -> Result<Self> {
        let mut base = serde_json::to_value(TrainConfig::for_task(task))?;
        if let (Some(b), Some(o)) = (base.as_object_mut(), overrides.as_object()) {
            for (k, v) in o {
                b.insert(k.clone(), v.clone());
            }
        } else if !overrides.is_null() {
            return Err(Error::InvalidConfig("train config must be a JSON object".into()));
        }
        Ok(serde_json::from_value(base)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    pub fn validate_for(&self, task: Task) -> Result<()> {
        self.validate()?;
        if self.loss != task.loss() {
            return Err(Error::InvalidConfig(format!(
                "{task:?} networks are trained with the {:?} loss, config has {:?}",
                task.loss(),
                self.loss
            )));
        }
        Ok(())
    }
}

/// One network-ready sample: a normalised input and its target mask on the
/// network lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub case_id: String,
    pub input: CtVolume,
    pub target: BinaryMask3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean Dice of the training predictions seen during the epoch.
    pub train_dice: f64,
    pub val_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UNetModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    /// History as JSON lines.
    pub fn history_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.history {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean Dice of the model's predictions over `pairs`.
pub fn mean_dice(model: &UNetModel, pairs: &[TrainingPair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        total += dice_metric(&p.target, &model.predict_mask(&p.input)?)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Diagnoses a diverged step from its loss and the accumulated gradients.
fn check_step(model: &mut UNetModel, epoch: usize, loss: f64, case_id: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, loss });
    }
    if model.params_mut().iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient {
            epoch,
            case_id: case_id.to_string(),
        });
    }
    Ok(())
}

/// Trains `model` and returns the weights of the epoch with the best mean
/// validation Dice. Without validation pairs the last epoch is kept.
pub fn train(mut model: UNetModel, train_pairs: &[TrainingPair], val_pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for p in train_pairs.iter().chain(val_pairs) {
        p.input.ensure_same_dims(&p.target)?;
        p.input
            .ensure_finite()
            .map_err(|e| Error::InvalidArgument(format!("case {}: {e}", p.case_id)))?;
    }
    let weights = match cfg.loss {
        LossKind::Dice => ClassWeights::uniform(),
        LossKind::DiceWeightedCe => {
            let masks: Vec<BinaryMask3D> = train_pairs.iter().map(|p| p.target.clone()).collect();
            compute_class_weights(&masks)?
        }
    };
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut warnings = Vec::new();
    let mut best: Option<(usize, f64, UNetModel)> = None;
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let p = &train_pairs[i];
                let loss = model.accumulate_gradients(&p.input, &p.target, cfg.loss, &weights)?;
                check_step(&mut model, epoch, loss, &p.case_id)?;
                loss_sum += loss;
                let seen = model.last_training_output().expect("just trained").argmax_mask();
                dice_sum += dice_metric(&p.target, &seen)?;
            }
            adam.step(model.params_mut(), 1.0 / batch.len() as f32);
        }
        let n = train_pairs.len() as f64;
        let val_dice = if val_pairs.is_empty() {
            None
        } else {
            Some(mean_dice(&model, val_pairs)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_dice: dice_sum / n,
            val_dice,
            manifest_hash: None,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train dice {:.4} val dice {:?}",
            record.train_loss,
            record.train_dice,
            val_dice
        );
        if let Some(v) = val_dice {
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((epoch, v, model.clone()));
            }
        }
        let stop = cfg.stop_at_train_dice.is_some_and(|t| record.train_dice >= t);
        history.push(record);
        if stop {
            break;
        }
    }
    let last_epoch = history.len();
    let (best_epoch, best_val_dice, model) = match best {
        Some((e, v, m)) => (e, Some(v), m),
        None => {
            let w = "no validation cases; keeping the last epoch".to_string();
            log::warn!("{w}");
            warnings.push(w);
            (last_epoch, None, model)
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_dice,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lung_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_mask_path: Option<PathBuf>,
    pub source_dataset: String,
    /// Constructed lesion percentage, for synthetic cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_p: Option<f64>,
    /// Radiological category (0..=4) for cases scored that way.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mosmed_category: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Entries with paths resolved against the manifest's directory.
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 of the entries as written.
    pub hash: String,
}

pub fn manifest_hash(entries: &[ManifestEntry]) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(entries)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let hash = manifest_hash(&raw)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let entries = raw
        .into_iter()
        .map(|mut e| {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            resolve(&mut e.image_path);
            e.lung_mask_path.as_mut().map(resolve);
            e.lesion_mask_path.as_mut().map(resolve);
            e
        })
        .collect();
    Ok(Manifest { entries, hash })
}

/// Every problem that would stop training on `entries`, or `Ok`.
pub fn validate_manifest(entries: &[ManifestEntry], task: Task) -> Result<()> {
    let mut problems = Vec::new();
    if entries.is_empty() {
        problems.push("manifest has no cases".to_string());
    }
    let mut ids = BTreeSet::new();
    for e in entries {
        if !ids.insert(&e.case_id) {
            problems.push(format!("{}: duplicate case id", e.case_id));
        }
        let mut check = |what: &str, p: &Option<PathBuf>, required: bool| match p {
            Some(p) if !p.is_file() => problems.push(format!("{}: {what} {} does not exist", e.case_id, p.display())),
            None if required => problems.push(format!("{}: missing {what}", e.case_id)),
            _ => {}
        };
        check("image", &Some(e.image_path.clone()), true);
        check("lung mask", &e.lung_mask_path, task == Task::Lungs);
        check("lesion mask", &e.lesion_mask_path, task == Task::Lesions);
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("manifest problems:\n  {}", problems.join("\n  "))))
    }
}

/// Directory for cached network inputs, from `LUNGQUANT_CACHE`.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("LUNGQUANT_CACHE").filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn file_stamp(p: &Path) -> String {
    match fs::metadata(p) {
        Ok(m) => format!(
            "{}:{}:{:?}",
            p.display(),
            m.len(),
            m.modified().ok().and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        ),
        Err(_) => p.display().to_string(),
    }
}

/// Loads a prepared pair from the cache, or builds and stores it.
fn cached_pair(key: &str, build: impl FnOnce() -> Result<(CtVolume, BinaryMask3D)>) -> Result<(CtVolume, BinaryMask3D)> {
    let Some(dir) = cache_dir() else { return build() };
    let digest: String = Sha256::digest(key.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    let img = dir.join(format!("{digest}-input.nii.gz"));
    let msk = dir.join(format!("{digest}-target.nii.gz"));
    if img.is_file() && msk.is_file() {
        if let (Ok(v), Ok(m)) = (load_volume(&img), load_mask(&msk)) {
            return Ok((v, m));
        }
    }
    let (v, m) = build()?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_volume(&v, &img)?;
    save_mask(&m, &msk)?;
    Ok((v, m))
}

/// Where the lung box for lesion training comes from.
#[derive(Debug, Clone, Copy)]
pub enum LungBoxSource<'a> {
    /// Reference lung masks when the manifest lists them, the network otherwise.
    ReferenceFirst(Option<(&'a UNetModel, HuWindow)>),
    /// Always the network's refined prediction.
    Predicted(&'a UNetModel, HuWindow),
}

fn lesion_box(entry: &ManifestEntry, image: &CtVolume, source: LungBoxSource) -> Result<BoundingBox> {
    let predicted = |model, window| -> Result<BinaryMask3D> {
        Ok(segment_lungs(image, &Segmenter::network(model, window))?.mask)
    };
    let lungs = match (source, &entry.lung_mask_path) {
        (LungBoxSource::ReferenceFirst(_), Some(p)) => load_mask(p)?,
        (LungBoxSource::ReferenceFirst(Some((m, w))), None) | (LungBoxSource::Predicted(m, w), _) => predicted(m, w)?,
        (LungBoxSource::ReferenceFirst(None), None) => {
            return Err(Error::InvalidArgument(format!(
                "{}: no lung mask and no lung network for the lesion crop",
                entry.case_id
            )))
        }
    };
    image.ensure_same_dims(&lungs)?;
    bounding_box(&lungs, image.spacing(), DEFAULT_PADDING_MM)
}

/// Builds network-ready pairs for `entries`: one per case plus, when
/// `augmentation` is given, its augmented copies.
pub fn prepare_pairs(
    entries: &[ManifestEntry],
    task: Task,
    window: HuWindow,
    input_dims: [usize; 3],
    augmentation: Option<&AugmentationSpec>,
    box_source: LungBoxSource,
) -> Result<Vec<TrainingPair>> {
    let augmenting = augmentation.is_some_and(|a| a.factor > 0);
    let mut out = Vec::new();
    let mut originals = Vec::new();
    for e in entries {
        let target_path = match task {
            Task::Lungs => e.lung_mask_path.as_ref(),
            Task::Lesions => e.lesion_mask_path.as_ref(),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("{}: no {task:?} mask", e.case_id)))?;
        let box_key = match (task, box_source, &e.lung_mask_path) {
            (Task::Lungs, ..) => Some("full".to_string()),
            (Task::Lesions, LungBoxSource::ReferenceFirst(_), Some(p)) => Some(file_stamp(p)),
            _ => None,
        };
        let load = || -> Result<(CtVolume, BinaryMask3D)> {
            let image = load_volume(&e.image_path)?;
            let target = load_mask(target_path)?;
            image.ensure_same_dims(&target)?;
            match task {
                Task::Lungs => Ok((image, target)),
                Task::Lesions => {
                    let bbox = lesion_box(e, &image, box_source)?;
                    Ok((crop(&image, &bbox)?, crop(&target, &bbox)?))
                }
            }
        };
        let prepare = |v: &CtVolume, m: &BinaryMask3D| -> Result<(CtVolume, BinaryMask3D)> {
            Ok((network_input(v, window, input_dims)?, m.resample(input_dims)?))
        };
        let (input, target) = match (&box_key, augmenting) {
            (Some(k), false) => {
                let key = format!(
                    "{task:?}|{}|{}|{k}|{}:{}|{input_dims:?}",
                    file_stamp(&e.image_path),
                    file_stamp(target_path),
                    window.lo(),
                    window.hi()
                );
                cached_pair(&key, || {
                    let (v, m) = load()?;
                    prepare(&v, &m)
                })?
            }
            _ => {
                let (v, m) = load()?;
                let prepared = prepare(&v, &m)?;
                if augmenting {
                    originals.push((e.case_id.clone(), v, m));
                }
                prepared
            }
        };
        out.push(TrainingPair {
            case_id: e.case_id.clone(),
            input,
            target,
        });
    }
    if let Some(spec) = augmentation.filter(|_| augmenting) {
        let (ids, pairs): (Vec<String>, Vec<(CtVolume, BinaryMask3D)>) =
            originals.into_iter().map(|(id, v, m)| (id, (v, m))).unzip();
        for a in augment_dataset(&pairs, spec)? {
            let (input, target) = (network_input(&a.vol, window, input_dims)?, a.mask.resample(input_dims)?);
            out.push(TrainingPair {
                case_id: format!("{}#aug{}", ids[a.record.source_index], a.record.copy),
                input,
                target,
            });
        }
    }
    Ok(out)
}

/// Everything needed to train one network of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkJob {
    pub task: Task,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub window: HuWindow,
}

impl NetworkJob {
    pub fn new(task: Task, unet: UNetConfig) -> Self {
        NetworkJob {
            task,
            unet,
            train: TrainConfig::for_task(task),
            window: task.window(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.train.validate_for(self.task)
    }
}

/// Trains one network on the manifest entries and stamps the manifest hash
/// into its history.
pub fn train_network(
    job: &NetworkJob,
    train_entries: &[ManifestEntry],
    val_entries: &[ManifestEntry],
    box_source: LungBoxSource,
    manifest_hash: Option<&str>,
) -> Result<TrainOutcome> {
    job.validate()?;
    let dims = job.unet.input_dims;
    let train_pairs = prepare_pairs(train_entries, job.task, job.window, dims, job.train.augmentation.as_ref(), box_source)?;
    let val_pairs = prepare_pairs(val_entries, job.task, job.window, dims, None, box_source)?;
    let model = build_unet(job.unet.clone())?;
    let mut outcome = train(model, &train_pairs, &val_pairs, &job.train)?;
    for r in &mut outcome.history {
        r.manifest_hash = manifest_hash.map(str::to_string);
    }
    Ok(outcome)
}

/// Lung network first, then the lesion network on crops from the reference
/// lung masks when listed and the freshly trained lung network otherwise.
pub fn train_cascade(
    lung_data: (&[ManifestEntry], &[ManifestEntry]),
    lesion_data: (&[ManifestEntry], &[ManifestEntry]),
    job1: &NetworkJob,
    job2: &NetworkJob,
) -> Result<(TrainOutcome, TrainOutcome)> {
    job1.validate()?;
    job2.validate()?;
    let hash = |a: &[ManifestEntry], b: &[ManifestEntry]| manifest_hash(&[a, b].concat());
    let h1 = hash(lung_data.0, lung_data.1)?;
    let unet1 = train_network(job1, lung_data.0, lung_data.1, LungBoxSource::ReferenceFirst(None), Some(&h1))?;
    let h2 = hash(lesion_data.0, lesion_data.1)?;
    let source = LungBoxSource::ReferenceFirst(Some((&unet1.model, job1.window)));
    let unet2 = train_network(job2, lesion_data.0, lesion_data.1, source, Some(&h2))?;
    Ok((unet1, unet2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom_with, PhantomSpec};
    use proptest::prelude::*;

    fn groups(spec: &[(&str, usize)]) -> BTreeMap<String, Vec<String>> {
        spec.iter()
            .map(|&(s, n)| (s.to_string(), (0..n).map(|i| format!("{s}-{i:03}")).collect()))
            .collect()
    }

    #[test]
    fn split_sizes() {
        let plan = SplitPlan {
            fractions: [0.8, 0.1, 0.1],
            seed: 3,
            per_source: true,
        };
        let s = split_dataset(&groups(&[("plethora", 399)]), &plan).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (319, 40, 40));
        let s = split_dataset(&groups(&[("a", 10)]), &SplitPlan::sixty_twenty_twenty(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = split_dataset(&groups(&[("a", 10)]), &SplitPlan::ninety_ten(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (9, 1, 0));
    }

    #[test]
    fn split_errors() {
        let plan = SplitPlan::default();
        assert!(split_dataset(&groups(&[("a", 4), ("b", 0)]), &plan).is_err());
        let mut dup = groups(&[("a", 3)]);
        dup.insert("b".into(), vec!["a-000".into()]);
        assert!(split_dataset(&dup, &plan).is_err());
        let skewed = SplitPlan {
            fractions: [0.7, 0.2, 0.2],
            ..plan
        };
        assert!(split_dataset(&groups(&[("a", 4)]), &skewed).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let g = groups(&[("a", 30), ("b", 17)]);
        let a = split_dataset(&g, &SplitPlan::sixty_twenty_twenty(5)).unwrap();
        assert_eq!(a, split_dataset(&g, &SplitPlan::sixty_twenty_twenty(5)).unwrap());
        assert_ne!(a, split_dataset(&g, &SplitPlan::sixty_twenty_twenty(6)).unwrap());
    }

    proptest! {
        #[test]
        fn split_partitions(sizes in prop::collection::vec(1usize..40, 1..4), f0 in 0.0f64..1.0, f1 in 0.0f64..1.0, per_source: bool, seed: u64) {
            let f1 = f1 * (1.0 - f0);
            let plan = SplitPlan { fractions: [f0, f1, 1.0 - f0 - f1], seed, per_source };
            let spec: Vec<(String, usize)> = sizes.iter().enumerate().map(|(i, &n)| (format!("s{i}"), n)).collect();
            let g: BTreeMap<String, Vec<String>> = spec.iter()
                .map(|(s, n)| (s.clone(), (0..*n).map(|i| format!("{s}-{i}")).collect()))
                .collect();
            let s = split_dataset(&g, &plan).unwrap();
            let mut all: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
            let total: usize = sizes.iter().sum();
            prop_assert_eq!(all.len(), total);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), total);
            if per_source {
                for (src, ids) in &g {
                    let want = largest_remainder(ids.len(), plan.fractions);
                    let count = |v: &Vec<String>| v.iter().filter(|id| id.starts_with(&format!("{src}-"))).count();
                    prop_assert_eq!([count(&s.train), count(&s.val), count(&s.test)], want);
                }
            }
        }

        #[test]
        fn remainder_counts_are_fair(n in 0usize..500, f0 in 0.0f64..1.0, f1 in 0.0f64..1.0) {
            let f1 = f1 * (1.0 - f0);
            let f = [f0, f1, 1.0 - f0 - f1];
            let c = largest_remainder(n, f);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for k in 0..3 {
                prop_assert!((c[k] as f64 - f[k] * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn config_overrides_and_checks() {
        let c = TrainConfig::from_json_for_task(&serde_json::json!({"epochs": 7}), Task::Lesions).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.loss, LossKind::DiceWeightedCe);
        assert_eq!(c.augmentation.as_ref().unwrap().factor, 2);
        assert_eq!(c.learning_rate, 1e-4);
        assert!(TrainConfig::from_json_for_task(&serde_json::json!({"epochs": 0}), Task::Lungs).unwrap().validate().is_err());
        assert!(TrainConfig::for_task(Task::Lungs).validate_for(Task::Lesions).is_err());
        assert!(TrainConfig::from_json_for_task(&serde_json::json!([1]), Task::Lungs).is_err());
    }

    fn tiny_pairs(seeds: &[u64], dims: [usize; 3]) -> Vec<TrainingPair> {
        let spec = PhantomSpec {
            dims: [32, 24, 16],
            spacing: [10.0, 10.0, 15.0],
            vessels: 1,
            ..Default::default()
        };
        seeds
            .iter()
            .map(|&s| {
                let p = generate_phantom_with(&spec, s, 0.0).unwrap();
                TrainingPair {
                    case_id: s.to_string(),
                    input: network_input(&p.volume, HuWindow::LUNG, dims).unwrap(),
                    target: p.lungs.resample(dims).unwrap(),
                }
            })
            .collect()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: 3e-3,
            seed: 1,
            ..TrainConfig::for_task(Task::Lungs)
        }
    }

    #[test]
    fn overfits_two_phantoms() {
        let dims = [16, 12, 8];
        let pairs = tiny_pairs(&[1, 2], dims);
        let cfg = UNetConfig {
            depth: 2,
            ..UNetConfig::toy(dims)
        };
        let out = train(build_unet(cfg).unwrap(), &pairs, &pairs, &tiny_config(60)).unwrap();
        let first = out.history[0].train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 0.25 * first, "loss {first} -> {last}");
        assert!(mean_dice(&out.model, &pairs).unwrap() >= 0.9);
        // the kept model is the best recorded epoch
        let max = out.history.iter().filter_map(|r| r.val_dice).fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_dice, Some(max));
        assert_eq!(mean_dice(&out.model, &pairs).unwrap(), max);
        assert!(max >= out.history.last().unwrap().val_dice.unwrap());
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn no_validation_keeps_last_epoch() {
        let dims = [8, 8, 8];
        let pairs = tiny_pairs(&[3], dims);
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            ..UNetConfig::toy(dims)
        };
        let out = train(build_unet(cfg).unwrap(), &pairs, &[], &tiny_config(3)).unwrap();
        assert_eq!(out.best_epoch, 3);
        assert_eq!(out.best_val_dice, None);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.history.iter().all(|r| r.val_dice.is_none()));
        let again = train(build_unet(out.model.config().clone()).unwrap(), &pairs, &[], &tiny_config(3)).unwrap();
        assert_eq!(out.history, again.history);
        assert!(out.history_jsonl().unwrap().lines().count() == 3);
        assert!(train(build_unet(out.model.config().clone()).unwrap(), &[], &[], &tiny_config(3)).is_err());
    }

    #[test]
    fn divergence_is_diagnosed() {
        let dims = [8, 8, 8];
        let mut pairs = tiny_pairs(&[4], dims);
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            ..UNetConfig::toy(dims)
        };
        let mut model = build_unet(cfg).unwrap();
        assert!(matches!(
            check_step(&mut model, 3, f64::NAN, "a"),
            Err(Error::NonFiniteLoss { epoch: 3, .. })
        ));
        check_step(&mut model, 3, 0.5, "a").unwrap();
        model.params_mut()[0].grad[0] = f32::INFINITY;
        let err = check_step(&mut model, 4, 0.5, "b").unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { epoch: 4, .. }), "{err}");

        pairs[0].input.data_mut()[0] = f32::NAN;
        let model = build_unet(model.config().clone()).unwrap();
        assert!(matches!(train(model, &pairs, &[], &tiny_config(2)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_phantom_with(
            &PhantomSpec {
                dims: [24, 20, 12],
                spacing: [12.0, 12.0, 20.0],
                vessels: 1,
                ..Default::default()
            },
            1,
            0.2,
        )
        .unwrap();
        save_volume(&p.volume, dir.path().join("img.nii.gz")).unwrap();
        save_mask(&p.lungs, dir.path().join("lung.nii.gz")).unwrap();
        let entries = vec![ManifestEntry {
            case_id: "c1".into(),
            image_path: "img.nii.gz".into(),
            lung_mask_path: Some("lung.nii.gz".into()),
            lesion_mask_path: None,
            source_dataset: "phantom".into(),
            target_p: Some(20.0),
            mosmed_category: None,
        }];
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::to_string(&entries).unwrap()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.hash, manifest_hash(&entries).unwrap());
        assert_eq!(m.hash.len(), 64);
        assert_eq!(m.entries[0].image_path, dir.path().join("img.nii.gz"));
        validate_manifest(&m.entries, Task::Lungs).unwrap();
        let err = validate_manifest(&m.entries, Task::Lesions).unwrap_err().to_string();
        assert!(err.contains("c1: missing lesion mask"), "{err}");
        let mut twice = m.entries.clone();
        twice.push(m.entries[0].clone());
        twice[1].image_path = dir.path().join("nope.nii");
        let err = validate_manifest(&twice, Task::Lungs).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("does not exist"), "{err}");

        let pairs = prepare_pairs(&m.entries, Task::Lungs, HuWindow::LUNG, [8, 8, 8], None, LungBoxSource::ReferenceFirst(None)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].input.dims(), [8, 8, 8]);
    }
}
