//! Monte Carlo error curves over a grid of pseudo-weights, and an exact
//! 256-mask enumeration for the 8-bit format that the Monte Carlo estimate
//! is checked against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_bits, encode, DType, DataTypeSpec};
use crate::error::{Error, Result};
use crate::fault::{error, BitFlipMask, FaultConfig, MaskSampler, Protection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStudyConfig {
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub ber: f64,
    pub rounds: u32,
    pub constants: Vec<f64>,
    pub spec: DataTypeSpec,
    pub protection: Protection,
    pub seed: u64,
    /// Reuse one mask sequence per grid point for every constant.
    #[serde(default)]
    pub common_masks: bool,
}

impl CurveStudyConfig {
    /// Grid `[-0.5, 0.5]` in steps of 0.01, BER 0.1, 10^5 rounds.
    pub fn new(spec: DataTypeSpec, constants: Vec<f64>) -> Self {
        CurveStudyConfig {
            grid_min: -0.5,
            grid_max: 0.5,
            grid_step: 0.01,
            ber: 0.1,
            rounds: 100_000,
            constants,
            spec,
            protection: Protection::default_for(&spec),
            seed: 0,
            common_masks: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_step > 0.0) || !(self.grid_min < self.grid_max) {
            return Err(Error::InvalidConfig(format!(
                "grid [{}, {}] step {} is empty",
                self.grid_min, self.grid_max, self.grid_step
            )));
        }
        if self.constants.is_empty() || self.constants.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidConfig(
                "constants must be a non-empty list of positive values".into(),
            ));
        }
        self.fault_config().validate()
    }

    pub fn fault_config(&self) -> FaultConfig {
        FaultConfig {
            ber: self.ber,
            protection: self.protection,
            seed: self.seed,
            rounds: self.rounds,
        }
    }

    /// Grid points, endpoints inclusive, snapped to 12 decimals so that e.g.
    /// `-0.4` is the nearest double to -0.4 rather than an accumulated sum.
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.grid_max - self.grid_min) / self.grid_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| {
                let w = self.grid_min + k as f64 * self.grid_step;
                (w * 1e12).round() / 1e12
            })
            .collect()
    }

    fn stream_id(&self, grid_index: usize, constant_index: usize) -> u64 {
        if self.common_masks {
            grid_index as u64
        } else {
            ((grid_index as u64) << 16) | constant_index as u64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub weight: f64,
    pub constant: f64,
    /// Mean of `|e(c w, M) / c|` over finite samples.
    pub mean_abs_error: f64,
    /// Sample standard deviation of the same quantity.
    pub std_abs_error: f64,
    pub finite_fraction: f64,
    pub rounds: u32,
}

impl CurvePoint {
    /// Standard error of `mean_abs_error`.
    pub fn std_error(&self) -> f64 {
        let n = (self.finite_fraction * self.rounds as f64).round();
        if n > 0.0 {
            self.std_abs_error / n.sqrt()
        } else {
            0.0
        }
    }
}

/// Welford accumulator: constant input yields that constant exactly.
#[derive(Debug, Default, Clone, Copy)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    #[inline]
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn std(&self) -> f64 {
        if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).sqrt()
        } else {
            0.0
        }
    }
}

fn simulate_cell(cfg: &CurveStudyConfig, weight: f64, constant: f64, stream: u64) -> Result<CurvePoint> {
    let scaled = constant * weight;
    let stored = encode(scaled, &cfg.spec)?.raw();
    let mut sampler = MaskSampler::new(&cfg.spec, &cfg.fault_config(), stream)?;
    let kind = cfg.spec.kind;
    let mut acc = Running::default();
    for _ in 0..cfg.rounds {
        let read = decode_bits(stored ^ sampler.next_raw(), kind);
        let e = ((scaled - read) / constant).abs();
        if e.is_finite() {
            acc.push(e);
        }
    }
    Ok(CurvePoint {
        weight,
        constant,
        mean_abs_error: acc.mean,
        std_abs_error: acc.std(),
        finite_fraction: acc.n as f64 / cfg.rounds as f64,
        rounds: cfg.rounds,
    })
}

/// One point per `(weight, constant)`, weight-major. Deterministic for a
/// fixed seed regardless of thread count.
pub fn run_curve_study(cfg: &CurveStudyConfig) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let grid = cfg.grid();
    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..cfg.constants.len()).map(move |c| (g, c)))
        .collect();
    cells
        .par_iter()
        .map(|&(g, c)| simulate_cell(cfg, grid[g], cfg.constants[c], cfg.stream_id(g, c)))
        .collect()
}

/// Exact `E|e(c w, M) / c|` for the 8-bit format by enumerating all 256 masks.
pub fn exact_expected_abs_error_q(
    value: f64,
    constant: f64,
    ber: f64,
    spec: &DataTypeSpec,
) -> Result<f64> {
    if spec.kind != DType::QFixed {
        return Err(Error::EnumerationInfeasible(spec.kind.name()));
    }
    if !(0.0..=1.0).contains(&ber) {
        return Err(Error::InvalidBer(ber));
    }
    let mut total = 0.0;
    for m in 0u32..256 {
        let k = m.count_ones() as i32;
        let p = ber.powi(k) * (1.0 - ber).powi(8 - k);
        if p == 0.0 {
            continue;
        }
        let e = error(constant * value, BitFlipMask::new(m, 8)?, spec)?;
        total += p * (e / constant).abs();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCell {
    pub weight: f64,
    pub constant: f64,
    pub monte_carlo: f64,
    pub exact: f64,
    pub std_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub cells: Vec<OracleCell>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.cells.iter().all(|c| c.passed)
    }

    pub fn worst_z(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| {
                let d = (c.monte_carlo - c.exact).abs();
                if d == 0.0 {
                    0.0
                } else {
                    d / c.std_error
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Checks every Monte Carlo grid point against exact enumeration:
/// `|mc - exact| <= 4 sigma / sqrt(rounds)`.
pub fn compare_oracle(cfg: &CurveStudyConfig) -> Result<OracleReport> {
    if cfg.spec.kind != DType::QFixed {
        return Err(Error::EnumerationInfeasible(cfg.spec.kind.name()));
    }
    let points = run_curve_study(cfg)?;
    let cells = points
        .into_iter()
        .map(|p| {
            let exact = exact_expected_abs_error_q(p.weight, p.constant, cfg.ber, &cfg.spec)?;
            let std_error = p.std_error();
            let passed = (p.mean_abs_error - exact).abs() <= 4.0 * std_error;
            Ok(OracleCell {
                weight: p.weight,
                constant: p.constant,
                monte_carlo: p.mean_abs_error,
                exact,
                std_error,
                passed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spec: DataTypeSpec, constants: Vec<f64>) -> CurveStudyConfig {
        CurveStudyConfig {
            rounds: 20_000,
            seed: 5,
            ..CurveStudyConfig::new(spec, constants)
        }
    }

    #[test]
    fn grid_is_inclusive() {
        let g = small(DataTypeSpec::QFIXED, vec![1.0]).grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], -0.5);
        assert_eq!(g[100], 0.5);
        assert_eq!(g[10], -0.4);
        assert_eq!(g[50], 0.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = small(DataTypeSpec::QFIXED, vec![1.0]);
        c.grid_step = 0.0;
        assert!(run_curve_study(&c).is_err());
        let c = small(DataTypeSpec::QFIXED, vec![]);
        assert!(run_curve_study(&c).is_err());
        let mut c = small(DataTypeSpec::QFIXED, vec![1.0]);
        c.ber = 2.0;
        assert!(run_curve_study(&c).is_err());
    }

    #[test]
    fn zero_ber_leaves_only_quantization() {
        let mut c = small(DataTypeSpec::QFIXED, vec![1.0, 2.0]);
        c.ber = 0.0;
        c.rounds = 50;
        for p in run_curve_study(&c).unwrap() {
            let q = exact_expected_abs_error_q(p.weight, p.constant, 0.0, &c.spec).unwrap();
            assert_eq!(p.mean_abs_error, q);
            assert_eq!(p.std_abs_error, 0.0);
            // Grid weights on the 2^-6 lattice are stored exactly.
            if (p.weight * p.constant * 64.0).fract() == 0.0 {
                assert_eq!(p.mean_abs_error, 0.0);
            }
        }
    }

    #[test]
    fn zero_ber_fp32_exact_for_representable() {
        let mut c = small(DataTypeSpec::FP32, vec![1.0, 2.0]);
        c.ber = 0.0;
        c.rounds = 10;
        c.grid_min = -0.5;
        c.grid_max = 0.5;
        c.grid_step = 0.25;
        for p in run_curve_study(&c).unwrap() {
            assert_eq!(p.mean_abs_error, 0.0);
            assert_eq!(p.finite_fraction, 1.0);
        }
    }

    #[test]
    fn exact_oracle_edges() {
        let q = DataTypeSpec::QFIXED;
        assert_eq!(exact_expected_abs_error_q(0.5, 1.0, 0.0, &q).unwrap(), 0.0);
        let all = BitFlipMask::new(0xFF, 8).unwrap();
        let want = (error(0.75, all, &q).unwrap() / 3.0).abs();
        assert_eq!(exact_expected_abs_error_q(0.25, 3.0, 1.0, &q).unwrap(), want);
        assert!(matches!(
            exact_expected_abs_error_q(0.5, 1.0, 0.1, &DataTypeSpec::FP16),
            Err(Error::EnumerationInfeasible(_))
        ));
    }

    #[test]
    fn saturation_floor() {
        let v = exact_expected_abs_error_q(0.5, 5.0, 0.1, &DataTypeSpec::QFIXED).unwrap();
        assert!(v >= 0.9 * (2.5 - 1.984375) / 5.0, "{v}");
    }

    #[test]
    fn qfixed_always_finite() {
        let c = small(DataTypeSpec::QFIXED, vec![1.0, 5.0]);
        assert!(run_curve_study(&c).unwrap().iter().all(|p| p.finite_fraction == 1.0));
    }

    #[test]
    fn unprotected_fp_has_non_finite_samples() {
        let mut c = small(DataTypeSpec::FP16, vec![1.0]);
        c.protection = Protection::None;
        c.grid_min = 0.5;
        c.grid_max = 0.6;
        c.grid_step = 0.1;
        let pts = run_curve_study(&c).unwrap();
        assert!(pts.iter().all(|p| p.finite_fraction < 1.0 && p.finite_fraction > 0.9));
    }

    #[test]
    fn deterministic_and_common_masks_pass() {
        let mut c = small(DataTypeSpec::QFIXED, vec![1.0, 2.0, 3.0]);
        c.grid_step = 0.25;
        assert_eq!(run_curve_study(&c).unwrap(), run_curve_study(&c).unwrap());
        assert!(compare_oracle(&c).unwrap().passed());
        c.common_masks = true;
        assert!(compare_oracle(&c).unwrap().passed());
        c.ber = 0.0;
        let r = compare_oracle(&c).unwrap();
        assert!(r.cells.iter().all(|x| x.monte_carlo == x.exact));
    }
}
