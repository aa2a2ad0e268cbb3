//! Bernoulli bit-flip fault model.
//!
//! Every stored bit flips independently with probability `ber`. Masks are
//! drawn from ChaCha8 substreams: a `(seed, stream)` pair always produces the
//! same sequence, and distinct streams never overlap, so Monte Carlo rounds
//! can run in any order or in parallel.

use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, width_mask, BitPattern, DataTypeSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protection {
    #[serde(rename = "none")]
    None,
    /// Bit 2 (the most significant exponent bit) never flips on float formats.
    #[serde(rename = "exp-msb")]
    ExponentMsb,
}

impl Protection {
    /// Default for a format: exponent-MSB protection on floats, nothing on fixed point.
    pub fn default_for(spec: &DataTypeSpec) -> Self {
        if spec.is_float() {
            Protection::ExponentMsb
        } else {
            Protection::None
        }
    }

    /// Raw-word bits that can never flip under this protection.
    pub fn protected_bits(self, spec: &DataTypeSpec) -> u32 {
        match self {
            Protection::ExponentMsb if spec.is_float() => {
                BitPattern::position_mask(spec.total_bits(), 2)
            }
            _ => 0,
        }
    }
}

impl FromStr for Protection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "off" => Ok(Protection::None),
            "exp-msb" | "exponent-msb" | "on" => Ok(Protection::ExponentMsb),
            _ => Err(Error::InvalidConfig(format!("unknown protection {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub ber: f64,
    pub protection: Protection,
    pub seed: u64,
    pub rounds: u32,
}

impl FaultConfig {
    pub fn new(ber: f64, protection: Protection, seed: u64, rounds: u32) -> Result<Self> {
        let cfg = FaultConfig {
            ber,
            protection,
            seed,
            rounds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ber) {
            return Err(Error::InvalidBer(self.ber));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Flip events for one stored weight; a set bit flips the stored bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitFlipMask(BitPattern);

impl BitFlipMask {
    pub fn new(bits: u32, width: u32) -> Result<Self> {
        BitPattern::new(bits, width).map(BitFlipMask)
    }

    pub fn zeros(width: u32) -> Result<Self> {
        Self::new(0, width)
    }

    /// Mask flipping exactly the given 1-based positions (1 = MSB).
    pub fn from_positions(width: u32, positions: &[u32]) -> Result<Self> {
        let mut p = BitPattern::zeros(width)?;
        for &i in positions {
            if !(1..=width).contains(&i) {
                return Err(Error::InvalidConfig(format!(
                    "bit position {i} outside 1..={width}"
                )));
            }
            p = p.with_bit(i, true);
        }
        Ok(BitFlipMask(p))
    }

    pub(crate) fn from_raw(bits: u32, width: u32) -> Self {
        BitFlipMask(BitPattern::from_raw(bits, width))
    }

    pub fn pattern(&self) -> BitPattern {
        self.0
    }

    pub fn raw(&self) -> u32 {
        self.0.raw()
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn flips(&self, index: u32) -> bool {
        self.0.bit(index)
    }
}

/// One deterministic random substream.
#[derive(Debug, Clone)]
pub struct MaskStream {
    rng: ChaCha8Rng,
}

impl MaskStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        MaskStream { rng }
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `(0, 1]`.
    #[inline]
    fn next_open_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// `P(u64 < threshold) = ber` up to 2^-64.
fn ber_threshold(ber: f64) -> u64 {
    (ber * 18_446_744_073_709_551_616.0) as u64
}

/// Draws one mask with an independent Bernoulli(`ber`) trial per bit.
///
/// The protected bit (bit 2 on floats under [`Protection::ExponentMsb`]) is
/// forced to zero.
pub fn sample_mask(
    spec: &DataTypeSpec,
    cfg: &FaultConfig,
    stream: &mut MaskStream,
) -> Result<BitFlipMask> {
    if !(0.0..=1.0).contains(&cfg.ber) {
        return Err(Error::InvalidBer(cfg.ber));
    }
    let width = spec.total_bits();
    let protected = cfg.protection.protected_bits(spec);
    let bits = if cfg.ber == 0.0 {
        0
    } else if cfg.ber == 1.0 {
        width_mask(width)
    } else {
        let threshold = ber_threshold(cfg.ber);
        (0..width).fold(0u32, |acc, _| {
            (acc << 1) | (stream.next_u64() < threshold) as u32
        })
    };
    Ok(BitFlipMask::from_raw(bits & !protected, width))
}

#[derive(Debug, Clone)]
enum Method {
    Never,
    Always,
    PerBit { threshold: u64 },
    // Gap lengths between flips along the concatenated bit stream are
    // geometric, which keeps sparse sampling O(flips) instead of O(bits).
    Skip { ln_keep: f64, gap: u64 },
}

/// Bulk mask sampler over one substream, for tensors and Monte Carlo loops.
///
/// Dense rates draw one trial per bit; rates below 2% skip directly to the
/// next flip. Both produce i.i.d. Bernoulli bits.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    stream: MaskStream,
    width: u32,
    keep: u32,
    method: Method,
}

const SKIP_BELOW: f64 = 0.02;

impl MaskSampler {
    pub fn new(spec: &DataTypeSpec, cfg: &FaultConfig, stream_id: u64) -> Result<Self> {
        Self::from_stream(spec, cfg, MaskStream::new(cfg.seed, stream_id))
    }

    pub fn from_stream(spec: &DataTypeSpec, cfg: &FaultConfig, stream: MaskStream) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.ber) {
            return Err(Error::InvalidBer(cfg.ber));
        }
        let width = spec.total_bits();
        let method = if cfg.ber == 0.0 {
            Method::Never
        } else if cfg.ber == 1.0 {
            Method::Always
        } else if cfg.ber < SKIP_BELOW {
            Method::Skip {
                ln_keep: (-cfg.ber).ln_1p(),
                gap: 0,
            }
        } else {
            Method::PerBit {
                threshold: ber_threshold(cfg.ber),
            }
        };
        let mut sampler = MaskSampler {
            stream,
            width,
            keep: width_mask(width) & !cfg.protection.protected_bits(spec),
            method,
        };
        if let Method::Skip { ln_keep, .. } = sampler.method {
            let g = sampler.draw_gap(ln_keep);
            sampler.method = Method::Skip { ln_keep, gap: g };
        }
        Ok(sampler)
    }

    #[inline]
    fn draw_gap(&mut self, ln_keep: f64) -> u64 {
        let g = self.stream.next_open_unit().ln() / ln_keep;
        if g >= u64::MAX as f64 {
            u64::MAX
        } else {
            g as u64
        }
    }

    #[inline]
    pub(crate) fn next_raw(&mut self) -> u32 {
        let width = self.width;
        let bits = match self.method {
            Method::Never => 0,
            Method::Always => u32::MAX,
            Method::PerBit { threshold } => {
                let mut acc = 0u32;
                for _ in 0..width {
                    acc = (acc << 1) | (self.stream.next_u64() < threshold) as u32;
                }
                acc
            }
            Method::Skip { ln_keep, mut gap } => {
                let mut acc = 0u32;
                let mut pos = 0u32;
                loop {
                    let remaining = (width - pos) as u64;
                    if gap >= remaining {
                        gap -= remaining;
                        break;
                    }
                    pos += gap as u32;
                    acc |= 1 << (width - 1 - pos);
                    pos += 1;
                    gap = self.draw_gap(ln_keep);
                }
                self.method = Method::Skip { ln_keep, gap };
                acc
            }
        };
        bits & self.keep
    }

    pub fn next_mask(&mut self) -> BitFlipMask {
        BitFlipMask::from_raw(self.next_raw(), self.width)
    }
}

/// XOR of a stored pattern with a flip mask.
pub fn inject(pattern: BitPattern, mask: BitFlipMask) -> Result<BitPattern> {
    pattern ^ mask.0
}

/// Signed error `value - decode(encode(value) XOR mask)`.
///
/// `value` is the real-valued weight before storage, so quantization and
/// saturation show up in the error even under an all-zero mask. Infinite and
/// NaN results from float formats are returned as-is.
pub fn error(value: f64, mask: BitFlipMask, spec: &DataTypeSpec) -> Result<f64> {
    let stored = encode(value, spec)?;
    let read = decode(inject(stored, mask)?, spec)?;
    Ok(value - read)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decode;

    fn cfg(ber: f64, protection: Protection) -> FaultConfig {
        FaultConfig::new(ber, protection, 11, 1).unwrap()
    }

    #[test]
    fn mask_extremes() {
        let mut s = MaskStream::new(1, 0);
        let m = sample_mask(&DataTypeSpec::FP32, &cfg(0.0, Protection::None), &mut s).unwrap();
        assert_eq!(m.raw(), 0);
        let m = sample_mask(&DataTypeSpec::FP32, &cfg(1.0, Protection::None), &mut s).unwrap();
        assert_eq!(m.raw(), u32::MAX);
        let m = sample_mask(&DataTypeSpec::FP32, &cfg(1.0, Protection::ExponentMsb), &mut s).unwrap();
        assert_eq!(m.raw(), 0xBFFF_FFFF);
        assert!(!m.flips(2));
        let m = sample_mask(&DataTypeSpec::QFIXED, &cfg(1.0, Protection::ExponentMsb), &mut s).unwrap();
        assert_eq!(m.raw(), 0xFF);
        let m = sample_mask(&DataTypeSpec::FP16, &cfg(1.0, Protection::ExponentMsb), &mut s).unwrap();
        assert_eq!(m.raw(), 0xBFFF);
    }

    #[test]
    fn bad_ber_rejected() {
        assert!(matches!(
            FaultConfig::new(1.5, Protection::None, 0, 1),
            Err(Error::InvalidBer(_))
        ));
        let bad = FaultConfig {
            ber: -0.1,
            protection: Protection::None,
            seed: 0,
            rounds: 1,
        };
        let mut s = MaskStream::new(0, 0);
        assert!(sample_mask(&DataTypeSpec::FP16, &bad, &mut s).is_err());
        assert!(MaskSampler::new(&DataTypeSpec::FP16, &bad, 0).is_err());
        assert!(FaultConfig::new(0.1, Protection::None, 0, 0).is_err());
    }

    #[test]
    fn exponent_msb_flip_examples() {
        let spec = DataTypeSpec::FP32;
        let m = BitFlipMask::from_positions(32, &[2]).unwrap();
        let one = inject(encode(1.0, &spec).unwrap(), m).unwrap();
        assert_eq!(decode(one, &spec).unwrap(), f64::INFINITY);
        let tenth = inject(encode(0.1, &spec).unwrap(), m).unwrap();
        let v = decode(tenth, &spec).unwrap();
        assert!((v / 3.403e37 - 1.0).abs() < 1e-3, "{v}");
    }

    #[test]
    fn q_error_examples() {
        let spec = DataTypeSpec::QFIXED;
        let lsb = BitFlipMask::from_positions(8, &[8]).unwrap();
        assert_eq!(error(0.5, lsb, &spec).unwrap(), -0.015625);
        let sign = BitFlipMask::from_positions(8, &[1]).unwrap();
        assert_eq!(error(0.5, sign, &spec).unwrap(), 2.0);
        assert_eq!(error(0.5, BitFlipMask::zeros(8).unwrap(), &spec).unwrap(), 0.0);
    }

    #[test]
    fn inject_width_mismatch() {
        let p = encode(1.0, &DataTypeSpec::FP16).unwrap();
        let m = BitFlipMask::zeros(32).unwrap();
        assert!(matches!(inject(p, m), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let c = cfg(0.1, Protection::None);
        let draw = |stream| {
            let mut s = MaskSampler::new(&DataTypeSpec::FP32, &c, stream).unwrap();
            (0..64).map(|_| s.next_raw()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    fn flip_rates(spec: &DataTypeSpec, c: &FaultConfig, n: usize, bulk: bool) -> Vec<f64> {
        let w = spec.total_bits();
        let mut counts = vec![0u64; w as usize];
        let mut sampler = MaskSampler::new(spec, c, 9).unwrap();
        let mut stream = MaskStream::new(c.seed, 9);
        for _ in 0..n {
            let m = if bulk {
                sampler.next_mask()
            } else {
                sample_mask(spec, c, &mut stream).unwrap()
            };
            for i in 1..=w {
                counts[(i - 1) as usize] += m.flips(i) as u64;
            }
        }
        counts.iter().map(|&k| k as f64 / n as f64).collect()
    }

    fn assert_rates(rates: &[f64], ber: f64, n: usize, protected: Option<usize>) {
        let se = (ber * (1.0 - ber) / n as f64).sqrt();
        for (i, &r) in rates.iter().enumerate() {
            if Some(i + 1) == protected {
                assert_eq!(r, 0.0);
            } else {
                assert!((r - ber).abs() <= 4.0 * se, "bit {} rate {r} vs {ber}", i + 1);
            }
        }
    }

    #[test]
    fn per_bit_flip_rate_dense() {
        let n = 100_000;
        let c = cfg(0.1, Protection::ExponentMsb);
        assert_rates(&flip_rates(&DataTypeSpec::FP16, &c, n, false), 0.1, n, Some(2));
        assert_rates(&flip_rates(&DataTypeSpec::FP16, &c, n, true), 0.1, n, Some(2));
        assert_rates(&flip_rates(&DataTypeSpec::QFIXED, &c, n, true), 0.1, n, None);
    }

    #[test]
    fn per_bit_flip_rate_sparse() {
        let n = 400_000;
        let c = cfg(0.005, Protection::ExponentMsb);
        assert_rates(&flip_rates(&DataTypeSpec::FP32, &c, n, true), 0.005, n, Some(2));
        let c = cfg(0.005, Protection::None);
        assert_rates(&flip_rates(&DataTypeSpec::QFIXED, &c, n, true), 0.005, n, None);
    }
}
