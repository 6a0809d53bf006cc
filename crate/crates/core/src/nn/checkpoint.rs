//! Checkpoints: a flat little-endian weight blob plus a JSON sidecar holding
//! the architecture, the intensity window used in training and the training
//! settings.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::unet::{build_unet, UNetConfig, UNetModel};
use crate::error::{Error, Result};
use crate::preprocess::HuWindow;

const MAGIC: &[u8; 4] = b"LQW1";
pub const SIDECAR_FORMAT: &str = "lungquant-unet/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format: String,
    pub config: UNetConfig,
    pub window: HuWindow,
    pub loss: LossKind,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub initialization: String,
    pub epochs_trained: usize,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub seed: u64,
    pub manifest_hash: Option<String>,
}

impl CheckpointSidecar {
    pub fn new(config: UNetConfig, window: HuWindow, loss: LossKind) -> Self {
        CheckpointSidecar {
            format: SIDECAR_FORMAT.into(),
            config,
            window,
            loss,
            learning_rate: 1e-4,
            batch_size: 1,
            initialization: "he_normal".into(),
            epochs_trained: 0,
            best_epoch: None,
            best_val_dice: None,
            seed: 0,
            manifest_hash: None,
        }
    }
}

/// Weight blob and sidecar paths for a checkpoint given either of them.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "json") {
        (path.with_extension("weights"), path.to_owned())
    } else {
        (path.to_owned(), path.with_extension("json"))
    }
}

pub fn save_checkpoint(model: &UNetModel, sidecar: &CheckpointSidecar, path: impl AsRef<Path>) -> Result<()> {
    let (weights_path, sidecar_path) = checkpoint_paths(path.as_ref());
    let mut model = model.clone();
    let params = model.params_mut();
    let count: usize = params.iter().map(|p| p.value.len()).sum();
    let mut buf = Vec::with_capacity(12 + 4 * count);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for p in params {
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&weights_path, e))?;
    let json = serde_json::to_string_pretty(sidecar)?;
    fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(UNetModel, CheckpointSidecar)> {
    let (weights_path, sidecar_path) = checkpoint_paths(path.as_ref());
    let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: CheckpointSidecar = serde_json::from_str(&text)?;
    if sidecar.format != SIDECAR_FORMAT {
        return Err(Error::InvalidConfig(format!(
            "unknown checkpoint format {:?}",
            sidecar.format
        )));
    }
    let mut model = build_unet(sidecar.config.clone())?;
    let mut bytes = Vec::new();
    fs::File::open(&weights_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&weights_path, e))?;
    let corrupt = |m: &str| Error::InvalidConfig(format!("{}: {m}", weights_path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a weight file"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let expected = model.parameter_count();
    if count != expected || bytes.len() != 12 + 4 * count {
        return Err(corrupt(&format!(
            "weight count {count} does not match architecture ({expected})"
        )));
    }
    let mut values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for p in model.params_mut() {
        for v in p.value.iter_mut() {
            *v = values.next().expect("count checked");
        }
    }
    model.ensure_buffers();
    Ok((model, sidecar))
}
