//! Output formatting and on-disk formats: checkpoints and dataset dumps are
//! a JSON manifest next to one raw little-endian `f64` file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSample;
use crate::error::{invalid, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// `%.6g`: six significant digits, trailing zeros removed, exponent form
/// outside `1e-4 ≤ |v| < 1e6`.
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.is_nan() {
        return "nan".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Hex SHA-256 of the raw config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First line of every output file.
pub fn header_comment(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub model: ModelConfig,
    /// Free-form training hyperparameters.
    pub hyperparams: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_raw(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(invalid(format!("{} is not a whole number of f64 values", path.display())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn file_name(name: &str) -> String {
    format!("{}.f64", name.replace(['/', '\\'], "_"))
}

/// Write `manifest.json` and one buffer per parameter tensor into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    model: &ModelConfig,
    seed: u64,
    hyperparams: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.entries() {
        let file = file_name(name);
        write_raw(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        seed,
        model: model.clone(),
        hyperparams,
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let entries = manifest
        .tensors
        .iter()
        .map(|e| Ok((e.name.clone(), read_raw(&dir.join(&e.file), &e.shape)?)))
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_entries(entries);
    if !params.same_layout(&ModelParams::zeros(&manifest.model)) {
        return Err(invalid("checkpoint tensors do not match its model configuration"));
    }
    Ok((params, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub sample_ids: Vec<u64>,
    /// Native-pixel (row, col) keypoints per sample.
    pub keypoints: Vec<Vec<(f64, f64)>>,
    pub tensors: Vec<TensorEntry>,
}

/// Images and targets as `image_{id}.f64` and `target_{id}.f64` buffers.
pub fn save_dataset(dir: &Path, samples: &[SyntheticSample], seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        for (kind, t) in [("image", &s.image), ("target", &s.target)] {
            let name = format!("{kind}_{}", s.sample_id);
            let file = file_name(&name);
            write_raw(&dir.join(&file), t)?;
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            });
        }
    }
    let manifest = DatasetManifest {
        seed,
        sample_ids: samples.iter().map(|s| s.sample_id).collect(),
        keypoints: samples.iter().map(|s| s.keypoints.clone()).collect(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.tensors.len() != 2 * m.sample_ids.len() || m.keypoints.len() != m.sample_ids.len() {
        return Err(invalid("dataset manifest is inconsistent"));
    }
    m.sample_ids
        .iter()
        .zip(&m.keypoints)
        .zip(m.tensors.chunks_exact(2))
        .map(|((&id, kps), pair)| {
            Ok(SyntheticSample {
                sample_id: id,
                image: read_raw(&dir.join(&pair[0].file), &pair[0].shape)?,
                keypoints: kps.clone(),
                target: read_raw(&dir.join(&pair[1].file), &pair[1].shape)?,
            })
        })
        .collect()
}
