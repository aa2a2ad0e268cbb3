//! Bit-exact conversion between real values and the three storage formats.
//!
//! * `fp32`: IEEE-754 binary32.
//! * `fp16`: IEEE-754 binary16, rounded directly from `f64` (no double rounding).
//! * `q2.5`: 8-bit two's complement with a step of 2^-6, covering
//!   `[-2, 1.984375]`. Out-of-range inputs saturate by default; wraparound
//!   is available through [`Overflow::Wrap`].
//!
//! Bit positions are 1-based with index 1 the MSB (sign bit) and index
//! `width` the LSB.

use std::fmt;
use std::ops::BitXor;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of fraction bits in the 8-bit fixed-point format.
pub const Q_FRACTION_BITS: i32 = 6;
/// Quantization step of the 8-bit fixed-point format.
pub const Q_STEP: f64 = 1.0 / 64.0;
pub const Q_MIN: f64 = -2.0;
pub const Q_MAX: f64 = 127.0 / 64.0;

pub const FP32_CANONICAL_NAN: u32 = 0x7FC0_0000;
pub const FP16_CANONICAL_NAN: u32 = 0x7E00;

const F16_MIN_NORMAL: f64 = 6.103515625e-5; // 2^-14
const F16_OVERFLOW: f64 = 65520.0; // halfway between 65504 and 2^16

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "fp32")]
    Fp32,
    #[serde(rename = "fp16")]
    Fp16,
    #[serde(rename = "q2.5")]
    QFixed,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Fp32 => "fp32",
            DType::Fp16 => "fp16",
            DType::QFixed => "q2.5",
        }
    }

    pub fn is_float(self) -> bool {
        !matches!(self, DType::QFixed)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "f32" => Ok(DType::Fp32),
            "fp16" | "f16" => Ok(DType::Fp16),
            "q2.5" | "qfixed" | "q8" => Ok(DType::QFixed),
            _ => Err(Error::UnknownDtype(s.to_string())),
        }
    }
}

/// Overflow behaviour of the fixed-point quantizer. Ignored for float formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overflow {
    #[default]
    Saturate,
    Wrap,
}

impl FromStr for Overflow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "saturate" | "sat" => Ok(Overflow::Saturate),
            "wrap" => Ok(Overflow::Wrap),
            _ => Err(Error::InvalidConfig(format!("unknown overflow mode {s:?}"))),
        }
    }
}

/// One of the three storage formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataTypeSpec {
    pub kind: DType,
    #[serde(default)]
    pub overflow: Overflow,
}

impl DataTypeSpec {
    pub const FP32: DataTypeSpec = DataTypeSpec {
        kind: DType::Fp32,
        overflow: Overflow::Saturate,
    };
    pub const FP16: DataTypeSpec = DataTypeSpec {
        kind: DType::Fp16,
        overflow: Overflow::Saturate,
    };
    pub const QFIXED: DataTypeSpec = DataTypeSpec {
        kind: DType::QFixed,
        overflow: Overflow::Saturate,
    };
    pub const QFIXED_WRAP: DataTypeSpec = DataTypeSpec {
        kind: DType::QFixed,
        overflow: Overflow::Wrap,
    };

    pub fn new(kind: DType) -> Self {
        DataTypeSpec {
            kind,
            overflow: Overflow::Saturate,
        }
    }

    pub fn with_overflow(mut self, overflow: Overflow) -> Self {
        self.overflow = overflow;
        self
    }

    pub fn total_bits(&self) -> u32 {
        match self.kind {
            DType::Fp32 => 32,
            DType::Fp16 => 16,
            DType::QFixed => 8,
        }
    }

    pub fn is_float(&self) -> bool {
        self.kind.is_float()
    }

    pub fn representable_min(&self) -> f64 {
        match self.kind {
            DType::Fp32 => -(f32::MAX as f64),
            DType::Fp16 => -65504.0,
            DType::QFixed => Q_MIN,
        }
    }

    pub fn representable_max(&self) -> f64 {
        match self.kind {
            DType::Fp32 => f32::MAX as f64,
            DType::Fp16 => 65504.0,
            DType::QFixed => Q_MAX,
        }
    }

    /// Largest representable value strictly below 2.
    pub fn largest_below_two(&self) -> f64 {
        match self.kind {
            DType::Fp32 => 2.0 - f32::EPSILON as f64,
            DType::Fp16 => 2.0 - 1.0 / 1024.0,
            DType::QFixed => Q_MAX,
        }
    }

    /// The fixed quiet-NaN pattern produced when re-encoding any NaN.
    pub fn canonical_nan(&self) -> Option<BitPattern> {
        match self.kind {
            DType::Fp32 => Some(BitPattern::from_raw(FP32_CANONICAL_NAN, 32)),
            DType::Fp16 => Some(BitPattern::from_raw(FP16_CANONICAL_NAN, 16)),
            DType::QFixed => None,
        }
    }
}

impl fmt::Display for DataTypeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.overflow) {
            (DType::QFixed, Overflow::Wrap) => f.write_str("q2.5-wrap"),
            (kind, _) => kind.fmt(f),
        }
    }
}

/// A stored weight: `width` bits held in the low bits of a `u32`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitPattern {
    bits: u32,
    width: u8,
}

pub(crate) fn width_mask(width: u32) -> u32 {
    if width >= 32 {
        u32::MAX
    } else {
        (1u32 << width) - 1
    }
}

impl BitPattern {
    pub fn new(bits: u32, width: u32) -> Result<Self> {
        if !matches!(width, 8 | 16 | 32) {
            return Err(Error::InvalidWidth(width));
        }
        if bits & !width_mask(width) != 0 {
            return Err(Error::WidthMismatch {
                expected: width,
                actual: 32 - bits.leading_zeros(),
            });
        }
        Ok(BitPattern {
            bits,
            width: width as u8,
        })
    }

    pub(crate) fn from_raw(bits: u32, width: u32) -> Self {
        debug_assert!(bits & !width_mask(width) == 0);
        BitPattern {
            bits,
            width: width as u8,
        }
    }

    pub fn zeros(width: u32) -> Result<Self> {
        Self::new(0, width)
    }

    pub fn ones(width: u32) -> Result<Self> {
        Self::new(width_mask(width), width)
    }

    pub fn raw(&self) -> u32 {
        self.bits
    }

    pub fn width(&self) -> u32 {
        self.width as u32
    }

    /// Raw-word bit corresponding to 1-based position `index` (1 = MSB).
    pub fn position_mask(width: u32, index: u32) -> u32 {
        assert!(
            (1..=width).contains(&index),
            "bit index {index} out of 1..={width}"
        );
        1u32 << (width - index)
    }

    /// Bit at 1-based position `index`, where 1 is the MSB.
    pub fn bit(&self, index: u32) -> bool {
        self.bits & Self::position_mask(self.width(), index) != 0
    }

    pub fn with_bit(self, index: u32, value: bool) -> Self {
        let m = Self::position_mask(self.width(), index);
        let bits = if value { self.bits | m } else { self.bits & !m };
        BitPattern { bits, ..self }
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Bits from MSB to LSB, for display and diagnostics.
    pub fn to_bit_string(&self) -> String {
        (1..=self.width())
            .map(|i| if self.bit(i) { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Debug for BitPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitPattern({}:0b{})", self.width, self.to_bit_string())
    }
}

impl BitXor for BitPattern {
    type Output = Result<BitPattern>;

    fn bitxor(self, rhs: BitPattern) -> Result<BitPattern> {
        if self.width != rhs.width {
            return Err(Error::WidthMismatch {
                expected: self.width(),
                actual: rhs.width(),
            });
        }
        Ok(BitPattern {
            bits: self.bits ^ rhs.bits,
            width: self.width,
        })
    }
}

/// Encodes a finite value for writing to storage.
///
/// Float formats round to nearest even; a finite value that rounds past the
/// largest finite magnitude is rejected. The fixed-point format rounds to the
/// nearest multiple of 2^-6 (ties to even) and then saturates or wraps.
pub fn encode(value: f64, spec: &DataTypeSpec) -> Result<BitPattern> {
    let unencodable = || Error::Unencodable {
        value,
        dtype: spec.kind.name(),
    };
    if !value.is_finite() {
        return Err(unencodable());
    }
    let bits = match spec.kind {
        DType::Fp32 => {
            let f = value as f32;
            if f.is_infinite() {
                return Err(unencodable());
            }
            f.to_bits()
        }
        DType::Fp16 => {
            if value.abs() >= F16_OVERFLOW {
                return Err(unencodable());
            }
            f64_to_f16_bits(value) as u32
        }
        DType::QFixed => quantize_q(value, spec.overflow) as u32,
    };
    Ok(BitPattern::from_raw(bits, spec.total_bits()))
}

/// Re-encodes a value read back from storage.
///
/// Unlike [`encode`] this accepts infinities, and maps every NaN to the
/// canonical quiet NaN of the format. The fixed-point format has neither, so
/// non-finite input is still an error there.
pub fn reencode(value: f64, spec: &DataTypeSpec) -> Result<BitPattern> {
    if value.is_finite() {
        return encode(value, spec);
    }
    match (spec.kind, value.is_nan()) {
        (DType::QFixed, _) => Err(Error::Unencodable {
            value,
            dtype: spec.kind.name(),
        }),
        (_, true) => Ok(spec.canonical_nan().expect("float formats have a NaN")),
        (DType::Fp32, false) => Ok(BitPattern::from_raw((value as f32).to_bits(), 32)),
        (DType::Fp16, false) => Ok(BitPattern::from_raw(f64_to_f16_bits(value) as u32, 16)),
    }
}

/// Exact value of a stored pattern. Float formats may yield ±Inf or NaN.
pub fn decode(pattern: BitPattern, spec: &DataTypeSpec) -> Result<f64> {
    if pattern.width() != spec.total_bits() {
        return Err(Error::WidthMismatch {
            expected: spec.total_bits(),
            actual: pattern.width(),
        });
    }
    Ok(decode_bits(pattern.raw(), spec.kind))
}

#[inline]
pub(crate) fn decode_bits(bits: u32, kind: DType) -> f64 {
    match kind {
        DType::Fp32 => f32::from_bits(bits) as f64,
        DType::Fp16 => f16_bits_to_f64(bits as u16),
        DType::QFixed => (bits as u8 as i8) as f64 * Q_STEP,
    }
}

fn quantize_q(value: f64, overflow: Overflow) -> u8 {
    let q = (value * 64.0).round_ties_even();
    match overflow {
        Overflow::Saturate => q.clamp(-128.0, 127.0) as i8 as u8,
        Overflow::Wrap => q.rem_euclid(256.0) as u8,
    }
}

fn f64_to_f16_bits(value: f64) -> u16 {
    let sign: u16 = if value.is_sign_negative() { 0x8000 } else { 0 };
    let a = value.abs();
    if a >= F16_OVERFLOW {
        return sign | 0x7C00;
    }
    if a < F16_MIN_NORMAL {
        // Subnormal grid has spacing 2^-24; m == 1024 lands on the smallest normal.
        let m = (a * 16_777_216.0).round_ties_even() as u16;
        return sign | m;
    }
    let exp = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    let mut m = (a * 2f64.powi(10 - exp)).round_ties_even() as u32;
    let mut exp = exp;
    if m == 2048 {
        m = 1024;
        exp += 1;
    }
    sign | (((exp + 15) as u16) << 10) | (m - 1024) as u16
}

fn f16_bits_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1F) as i32;
    let man = (h & 0x3FF) as f64;
    match exp {
        0 => sign * man * 2f64.powi(-24),
        31 if man == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        _ => sign * (1024.0 + man) * 2f64.powi(exp - 25),
    }
}

/// Outcome of a decode→re-encode sweep over stored patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundTripReport {
    pub spec: DataTypeSpec,
    pub checked: u64,
    pub nan_patterns: u64,
    pub exhaustive: bool,
    /// `(original pattern, re-encoded pattern)` for every mismatch.
    pub violations: Vec<(u32, u32)>,
}

impl RoundTripReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn roundtrip_one(bits: u32, spec: &DataTypeSpec, report: &mut RoundTripReport) {
    let pattern = BitPattern::from_raw(bits, spec.total_bits());
    let value = decode_bits(bits, spec.kind);
    report.checked += 1;
    let expected = if value.is_nan() {
        report.nan_patterns += 1;
        spec.canonical_nan().expect("NaN only decodes from float formats")
    } else {
        pattern
    };
    match reencode(value, spec) {
        Ok(p) if p == expected => {}
        Ok(p) => report.violations.push((bits, p.raw())),
        Err(_) => report.violations.push((bits, u32::MAX)),
    }
}

/// Exhaustive round trip for the 8- and 16-bit formats; FP32 is sampled with
/// one million random finite patterns from a fixed seed.
pub fn roundtrip_check(spec: &DataTypeSpec) -> RoundTripReport {
    match spec.kind {
        DType::Fp32 => roundtrip_check_sampled(spec, 1_000_000, 0x5EED_F32),
        _ => {
            let mut report = RoundTripReport {
                spec: *spec,
                checked: 0,
                nan_patterns: 0,
                exhaustive: true,
                violations: Vec::new(),
            };
            for bits in 0..=width_mask(spec.total_bits()) {
                roundtrip_one(bits, spec, &mut report);
            }
            report
        }
    }
}

/// Round trip over `samples` uniformly random finite patterns.
pub fn roundtrip_check_sampled(spec: &DataTypeSpec, samples: u64, seed: u64) -> RoundTripReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = width_mask(spec.total_bits());
    let mut report = RoundTripReport {
        spec: *spec,
        checked: 0,
        nan_patterns: 0,
        exhaustive: false,
        violations: Vec::new(),
    };
    while report.checked < samples {
        let bits = rng.gen::<u32>() & mask;
        if !decode_bits(bits, spec.kind).is_finite() {
            continue;
        }
        roundtrip_one(bits, spec, &mut report);
    }
    report
}
