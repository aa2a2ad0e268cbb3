//! Model, dataset, and result files.
//!
//! Model: a JSON manifest next to a blob of little-endian binary32 values
//! (per layer: `out * in` weights, then `out` biases if present). The
//! manifest carries the blob's SHA-256.
//!
//! Dataset: `SGDS` magic, then `version, samples, features, classes` as
//! little-endian `u32`, then `samples * features` binary32 features and
//! `samples` `u32` labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guard::LayerGuard;
use crate::inference::{Activation, Dataset, DenseLayer, Model, Tensor};

pub const MODEL_FORMAT: &str = "scaleguard-model";
pub const DATASET_MAGIC: &[u8; 4] = b"SGDS";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub in_features: usize,
    pub out_features: usize,
    pub activation: Activation,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    /// Storage precision of the weight blob.
    pub dtype: String,
    pub weights: String,
    pub sha256: String,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guards: Option<Vec<LayerGuard>>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32s_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the manifest path.
pub fn save_model(model: &Model, dir: &Path, stem: &str) -> Result<PathBuf> {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        for v in l.weights.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(b) = &l.bias {
            for v in b {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        layers.push(LayerEntry {
            in_features: l.in_features(),
            out_features: l.out_features(),
            activation: l.activation,
            bias: l.bias.is_some(),
        });
    }
    let blob_name = format!("{stem}.bin");
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        version: 1,
        dtype: "fp32".to_string(),
        weights: blob_name.clone(),
        sha256: sha256_hex(&blob),
        layers,
        guards: model.guards.clone(),
    };
    write(&dir.join(&blob_name), &blob)?;
    let path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&path, text.as_bytes())?;
    Ok(path)
}

/// Loads a model from its manifest, validating shapes and checksum.
pub fn load_weights(manifest_path: &Path) -> Result<Model> {
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.format != MODEL_FORMAT {
        return Err(malformed(format!("unexpected format {:?}", manifest.format)));
    }
    if manifest.dtype != "fp32" {
        return Err(malformed(format!("unsupported weight dtype {:?}", manifest.dtype)));
    }
    if manifest.layers.is_empty() {
        return Err(malformed("no layers".into()));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.weights);
    let blob = read(&blob_path)?;
    let expected: usize = manifest
        .layers
        .iter()
        .map(|l| 4 * (l.in_features * l.out_features + if l.bias { l.out_features } else { 0 }))
        .sum();
    if blob.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} bytes, layers need {expected}",
            blob_path.display(),
            blob.len()
        )));
    }
    if sha256_hex(&blob) != manifest.sha256 {
        return Err(Error::ChecksumFailure(blob_path));
    }
    let mut offset = 0;
    let mut take = |n: usize| {
        let v = f32s_le(&blob[offset..offset + 4 * n]);
        offset += 4 * n;
        v
    };
    let layers = manifest
        .layers
        .iter()
        .map(|l| {
            let w = Tensor::new(vec![l.out_features, l.in_features], take(l.in_features * l.out_features))?;
            let b = l.bias.then(|| take(l.out_features));
            DenseLayer::new(w, b, l.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(layers)?;
    if let Some(guards) = manifest.guards {
        if guards.len() != model.layers.len() {
            return Err(malformed(format!(
                "{} guards for {} layers",
                guards.len(),
                model.layers.len()
            )));
        }
        model.guards = Some(guards);
    }
    Ok(model)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    for v in [
        1u32,
        dataset.len() as u32,
        dataset.features.cols() as u32,
        dataset.classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in dataset.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &dataset.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    write(path, &out)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    let malformed = |reason: &str| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..4] != DATASET_MAGIC {
        return Err(malformed("missing dataset header"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[4 + 4 * i], bytes[5 + 4 * i], bytes[6 + 4 * i], bytes[7 + 4 * i]]) as usize;
    let (version, samples, features, classes) = (word(0), word(1), word(2), word(3));
    if version != 1 {
        return Err(malformed("unsupported dataset version"));
    }
    let body = &bytes[20..];
    let need = 4 * samples * (features + 1);
    if body.len() != need {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} payload bytes, header describes {need}",
            path.display(),
            body.len()
        )));
    }
    let (x, y) = body.split_at(4 * samples * features);
    let labels = y
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Dataset::new(Tensor::new(vec![samples, features], f32s_le(x))?, labels, classes)
}

/// Writes text with a trailing newline, creating parent directories.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(vec![
            DenseLayer::new(
                Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1e-8, -1.5, 0.0]).unwrap(),
                Some(vec![0.5, -0.5]),
                Activation::Relu,
            )
            .unwrap(),
            DenseLayer::new(Tensor::new(vec![1, 2], vec![f32::MIN_POSITIVE, -0.0]).unwrap(), None, Activation::None)
                .unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn model_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let path = save_model(&m, dir.path(), "m").unwrap();
        let back = load_weights(&path).unwrap();
        for (a, b) in m.layers.iter().zip(&back.layers) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weights), bits(&b.weights));
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.activation, b.activation);
        }
    }

    #[test]
    fn truncated_weights_are_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_model(&model(), dir.path(), "m").unwrap();
        let bin = dir.path().join("m.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn corrupted_weights_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_model(&model(), dir.path(), "m").unwrap();
        let bin = dir.path().join("m.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::ChecksumFailure(_))));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"format\": 3}").unwrap();
        assert!(matches!(load_weights(&path), Err(Error::MalformedManifest { .. })));
    }

    #[test]
    fn dataset_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), vec![0, 2, 1], 3).unwrap();
        let path = dir.path().join("d.sgds");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::ShapeMismatch(_))));
        fs::write(&path, b"nope").unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
