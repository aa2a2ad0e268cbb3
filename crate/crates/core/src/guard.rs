//! Per-layer weight scaling.
//!
//! Weights of layer `i` are multiplied by a constant `c_i` before they are
//! written to fault-prone storage and divided by it after readout. With
//! `c_i = t / max|W_i|` the largest scaled weight lands on `t`, just under the
//! point where a format starts losing headroom (2 for floats, where the
//! exponent MSB turns on; the top of the range for fixed point).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_bits, encode, BitPattern, DataTypeSpec};
use crate::error::{Error, Result};
use crate::fault::BitFlipMask;

pub const DEFAULT_T_FLOAT: f64 = 1.9999;
pub const DEFAULT_T_QFIXED: f64 = 1.97;

pub fn default_t(spec: &DataTypeSpec) -> f64 {
    if spec.is_float() {
        DEFAULT_T_FLOAT
    } else {
        DEFAULT_T_QFIXED
    }
}

/// `t / max|w|`, rounded to an `f32` that keeps `c * max|w| <= t`.
///
/// An all-zero layer gets `c = 1`.
pub fn compute_constant(weights: &[f32], t: f64) -> Result<f32> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidConfig(format!("t must be positive, got {t}")));
    }
    let max = weights.iter().fold(0.0f64, |m, &w| m.max((w as f64).abs()));
    if max == 0.0 {
        return Ok(1.0);
    }
    let mut c = (t / max) as f32;
    while c as f64 * max > t {
        c = c.next_down();
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierMode {
    /// Out-of-range weights are clamped just inside the bound; originals are kept for reference.
    #[default]
    Clamp,
    /// Out-of-range weights are removed from storage and reinserted exactly on recovery.
    Lossless,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub index: usize,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutlierStore {
    pub mode: OutlierMode,
    pub entries: Vec<Outlier>,
}

impl OutlierStore {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Open interval bounding the weights exposed to storage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub low: f64,
    pub high: f64,
}

impl Default for Bound {
    fn default() -> Self {
        Bound {
            low: -2.0,
            high: 2.0,
        }
    }
}

impl Bound {
    pub fn contains(&self, v: f64) -> bool {
        v > self.low && v < self.high
    }
}

/// Largest `f32` strictly below `bound` that the format represents exactly.
fn step_inside(bound: f64, toward_zero_from_above: bool, spec: &DataTypeSpec) -> f32 {
    // Walk f32 values toward zero until one is inside and round-trips through the format.
    let mut v = bound as f32;
    loop {
        v = if toward_zero_from_above {
            v.next_down()
        } else {
            v.next_up()
        };
        let inside = if toward_zero_from_above {
            (v as f64) < bound
        } else {
            (v as f64) > bound
        };
        if inside {
            if let Ok(p) = encode(v as f64, spec) {
                if decode_bits(p.raw(), spec.kind) == v as f64 {
                    return v;
                }
            }
        }
    }
}

/// Separates weights outside `bound` from the ones exposed to storage.
///
/// In clamp mode the returned vector has the same length as the input; in
/// lossless mode the outliers are removed from it.
pub fn extract_outliers(
    weights: &[f32],
    bound: Bound,
    mode: OutlierMode,
    spec: &DataTypeSpec,
) -> (Vec<f32>, OutlierStore) {
    let mut store = OutlierStore {
        mode,
        entries: Vec::new(),
    };
    if weights.iter().all(|&w| bound.contains(w as f64)) {
        return (weights.to_vec(), store);
    }
    let mut exposed = Vec::with_capacity(weights.len());
    let (mut hi, mut lo) = (None, None);
    for (index, &w) in weights.iter().enumerate() {
        if bound.contains(w as f64) {
            exposed.push(w);
            continue;
        }
        store.entries.push(Outlier { index, value: w });
        if mode == OutlierMode::Clamp {
            let v = if (w as f64) >= bound.high {
                *hi.get_or_insert_with(|| step_inside(bound.high, true, spec))
            } else {
                *lo.get_or_insert_with(|| step_inside(bound.low, false, spec))
            };
            exposed.push(v);
        }
    }
    (exposed, store)
}

/// Protection record for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGuard {
    pub layer_index: usize,
    pub constant: f32,
    pub t: f64,
    pub spec: DataTypeSpec,
    #[serde(default)]
    pub outliers: OutlierStore,
    /// Reject float weights whose scaled magnitude reaches 2.
    #[serde(default)]
    pub enforce_exponent_msb: bool,
}

impl LayerGuard {
    /// Guard with an explicit constant (`c = 1` is the unprotected baseline).
    pub fn with_constant(layer_index: usize, constant: f32, t: f64, spec: DataTypeSpec) -> Result<Self> {
        if !(constant > 0.0) || !constant.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "constant must be positive, got {constant}"
            )));
        }
        Ok(LayerGuard {
            layer_index,
            constant,
            t,
            spec,
            outliers: OutlierStore::default(),
            enforce_exponent_msb: false,
        })
    }

    /// Unit-constant guard: plain storage without scaling.
    pub fn baseline(layer_index: usize, spec: DataTypeSpec) -> Self {
        Self::with_constant(layer_index, 1.0, 1.0, spec).expect("unit constant is valid")
    }

    /// Builds the optimal guard for `weights`. Returns the guard and the
    /// weights to pass to [`protect`].
    ///
    /// Outliers outside `(-2, 2)` are split off for float formats only; the
    /// saturating fixed-point quantizer bounds values on its own.
    pub fn optimal(
        layer_index: usize,
        weights: &[f32],
        t: f64,
        spec: DataTypeSpec,
        outlier_mode: OutlierMode,
    ) -> Result<(Self, Vec<f32>)> {
        let (exposed, outliers) = if spec.is_float() {
            extract_outliers(weights, Bound::default(), outlier_mode, &spec)
        } else {
            (weights.to_vec(), OutlierStore::default())
        };
        let mut constant = compute_constant(&exposed, t)?;
        let enforce = spec.is_float() && t < 2.0;
        if enforce {
            // c * max can still round up to 2.0 in the stored format (1.9999 does in FP16).
            let max = exposed.iter().fold(0.0f64, |m, &w| m.max((w as f64).abs()));
            while max > 0.0 && encode(constant as f64 * max, &spec)?.bit(2) {
                constant = constant.next_down();
            }
        }
        let mut guard = Self::with_constant(layer_index, constant, t, spec)?;
        guard.outliers = outliers;
        guard.enforce_exponent_msb = enforce;
        Ok((guard, exposed))
    }
}

/// Scaled weights as written to storage.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub patterns: Vec<BitPattern>,
    pub shape: Vec<usize>,
    pub guard: LayerGuard,
}

impl StoredLayer {
    /// Number of weights in the recovered layer, including lossless outliers.
    pub fn len(&self) -> usize {
        self.patterns.len()
            + match self.guard.outliers.mode {
                OutlierMode::Lossless => self.guard.outliers.entries.len(),
                OutlierMode::Clamp => 0,
            }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights read back through `faulty` (one raw mask word per pattern),
    /// left at scale `c` and without outlier reinsertion.
    pub(crate) fn read_scaled(&self, mut next_mask: impl FnMut() -> u32) -> Vec<f64> {
        let kind = self.guard.spec.kind;
        self.patterns
            .iter()
            .map(|p| decode_bits(p.raw() ^ next_mask(), kind))
            .collect()
    }

    /// Divides scaled readouts by `c` and reinserts lossless outliers.
    pub(crate) fn finish_recover(&self, scaled: Vec<f64>) -> Vec<f64> {
        let c = self.guard.constant as f64;
        let rescaled = scaled.into_iter().map(|v| v / c);
        reinsert(rescaled, &self.guard.outliers, self.len())
    }

    /// Lossless outliers at scale `c` in their original positions, for
    /// consumers that keep weights scaled.
    pub(crate) fn finish_scaled(&self, scaled: Vec<f64>) -> Vec<f64> {
        let c = self.guard.constant as f64;
        let store = OutlierStore {
            mode: self.guard.outliers.mode,
            entries: self
                .guard
                .outliers
                .entries
                .iter()
                .map(|o| Outlier {
                    index: o.index,
                    value: (o.value as f64 * c) as f32,
                })
                .collect(),
        };
        reinsert(scaled.into_iter(), &store, self.len())
    }
}

fn reinsert(values: impl Iterator<Item = f64>, store: &OutlierStore, len: usize) -> Vec<f64> {
    if store.mode == OutlierMode::Clamp || store.entries.is_empty() {
        return values.collect();
    }
    let mut out = Vec::with_capacity(len);
    let mut values = values;
    let mut entries = store.entries.iter().peekable();
    for index in 0..len {
        match entries.peek() {
            Some(o) if o.index == index => {
                out.push(o.value as f64);
                entries.next();
            }
            _ => out.push(values.next().unwrap_or(f64::NAN)),
        }
    }
    out
}

/// Encodes `guard.constant * w` for every weight.
pub fn protect(weights: &[f32], guard: &LayerGuard) -> Result<StoredLayer> {
    protect_shaped(weights, vec![weights.len()], guard)
}

pub fn protect_shaped(weights: &[f32], shape: Vec<usize>, guard: &LayerGuard) -> Result<StoredLayer> {
    let c = guard.constant as f64;
    let check_msb = guard.enforce_exponent_msb && guard.spec.is_float();
    let patterns = weights
        .iter()
        .enumerate()
        .map(|(index, &w)| {
            let value = c * w as f64;
            let pattern = encode(value, &guard.spec)?;
            if check_msb && pattern.bit(2) {
                return Err(Error::ExponentMsbViolation { index, value });
            }
            Ok(pattern)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredLayer {
        patterns,
        shape,
        guard: guard.clone(),
    })
}

/// `decode(pattern XOR mask) / c` per weight, with lossless outliers reinserted.
pub fn recover(stored: &StoredLayer, masks: &[BitFlipMask]) -> Result<Vec<f64>> {
    if masks.len() != stored.patterns.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} stored weights",
            masks.len(),
            stored.patterns.len()
        )));
    }
    let width = stored.guard.spec.total_bits();
    if let Some(m) = masks.iter().find(|m| m.width() != width) {
        return Err(Error::WidthMismatch {
            expected: width,
            actual: m.width(),
        });
    }
    let mut it = masks.iter();
    let scaled = stored.read_scaled(|| it.next().map_or(0, |m| m.raw()));
    Ok(stored.finish_recover(scaled))
}

/// Manifest entry for one stored layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredLayerEntry {
    pub layer_index: usize,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub constant: f32,
    pub t: f64,
    pub guard: LayerGuard,
    /// Byte offset of this layer's patterns in the blob.
    pub offset: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredManifest {
    pub format: String,
    pub version: u32,
    /// The constant is computed from the source-precision (FP32) weights.
    pub max_abs_source: String,
    pub blob: String,
    pub sha256: String,
    pub layers: Vec<StoredLayerEntry>,
}

pub const STORED_FORMAT: &str = "scaleguard-stored";

/// Little-endian pattern bytes in each format's natural width.
pub fn pattern_bytes(stored: &StoredLayer) -> Vec<u8> {
    let width = stored.guard.spec.total_bits();
    let mut out = Vec::with_capacity(stored.patterns.len() * width as usize / 8);
    for p in &stored.patterns {
        match width {
            8 => out.push(p.raw() as u8),
            16 => out.extend_from_slice(&(p.raw() as u16).to_le_bytes()),
            _ => out.extend_from_slice(&p.raw().to_le_bytes()),
        }
    }
    out
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn write_stored_layers(dir: &Path, stem: &str, layers: &[StoredLayer]) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(layers.len());
    for layer in layers {
        let offset = blob.len() as u64;
        blob.extend(pattern_bytes(layer));
        entries.push(StoredLayerEntry {
            layer_index: layer.guard.layer_index,
            dtype: layer.guard.spec.kind.name().to_string(),
            shape: layer.shape.clone(),
            constant: layer.guard.constant,
            t: layer.guard.t,
            guard: layer.guard.clone(),
            offset,
            count: layer.patterns.len(),
        });
    }
    let blob_name = format!("{stem}.bin");
    let manifest = StoredManifest {
        format: STORED_FORMAT.to_string(),
        version: 1,
        max_abs_source: "fp32".to_string(),
        blob: blob_name.clone(),
        sha256: crate::harness::io::sha256_hex(&blob),
        layers: entries,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let mut f = fs::File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(&json_path, e))
}

/// Reads layers written by [`write_stored_layers`].
pub fn read_stored_layers(manifest_path: &Path) -> Result<Vec<StoredLayer>> {
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: StoredManifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.format != STORED_FORMAT {
        return Err(malformed(format!("unexpected format {:?}", manifest.format)));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected_len: u64 = manifest
        .layers
        .iter()
        .map(|l| l.count as u64 * l.guard.spec.total_bits() as u64 / 8)
        .sum();
    if blob.len() as u64 != expected_len {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} bytes, manifest describes {expected_len}",
            blob_path.display(),
            blob.len()
        )));
    }
    if crate::harness::io::sha256_hex(&blob) != manifest.sha256 {
        return Err(Error::ChecksumFailure(blob_path));
    }
    manifest
        .layers
        .into_iter()
        .map(|entry| {
            let width = entry.guard.spec.total_bits();
            let bytes = (width / 8) as usize;
            let start = entry.offset as usize;
            let end = start + entry.count * bytes;
            let raw = blob
                .get(start..end)
                .ok_or_else(|| malformed(format!("layer {} out of bounds", entry.layer_index)))?;
            let patterns = raw
                .chunks_exact(bytes)
                .map(|ch| {
                    let bits = match bytes {
                        1 => ch[0] as u32,
                        2 => u16::from_le_bytes([ch[0], ch[1]]) as u32,
                        _ => u32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]),
                    };
                    BitPattern::new(bits, width)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StoredLayer {
                patterns,
                shape: entry.shape,
                guard: entry.guard,
            })
        })
        .collect()
}
