//! Versioned binary container for [`MiniDetector`] parameters.
//!
//! Layout: `b"MSKW"`, format version (`u32` LE), header length (`u64` LE), a
//! JSON header (detector config, training metadata, per-layer tensor sizes),
//! then every parameter as `f64` LE in layer order (weights then bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mini::{MiniDetector, Params};
use super::DetectorConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MSKW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub heldout_map: f64,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    meta: Option<TrainingMeta>,
    layers: Vec<[usize; 2]>,
}

pub fn to_bytes(det: &MiniDetector) -> Result<Vec<u8>> {
    let params = det.params();
    let header = Header {
        config: super::Detector::config(det).clone(),
        meta: det.training_meta().cloned(),
        layers: params.tensors().iter().map(|(w, b)| [w.len(), b.len()]).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (w, b) in params.tensors() {
        for v in w.iter().chain(b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<MiniDetector> {
    let bad = |m: &str| Error::WeightsFormat(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a weights file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(Error::WeightsFormat(format!(
            "weights format version {version} is not supported (expected {WEIGHTS_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    header.config.validate()?;
    let mut params = Params::init(header.config.num_classes, 0);
    let shapes: Vec<[usize; 2]> = params.tensors().iter().map(|(w, b)| [w.len(), b.len()]).collect();
    if shapes != header.layers {
        return Err(bad("layer shapes do not match this detector architecture"));
    }
    let raw = &body[hlen..];
    if raw.len() != params.parameter_count() * 8 {
        return Err(Error::WeightsFormat(format!(
            "expected {} parameters, file holds {} bytes of data",
            params.parameter_count(),
            raw.len()
        )));
    }
    let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for (w, b) in params.tensors_mut() {
        for v in w.iter_mut().chain(b.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    MiniDetector::from_parts(header.config, params, header.meta)
}

pub fn save_weights(det: &MiniDetector, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_bytes(det)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<MiniDetector> {
    from_bytes(&fs::read(path)?)
}
