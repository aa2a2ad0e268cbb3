//! Experiment configuration, orchestration, and result emission.

pub mod io;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{compare_oracle, run_curve_study, CurveStudyConfig};
use crate::codec::{roundtrip_check, DType, DataTypeSpec, Overflow};
use crate::error::{Error, Result};
use crate::fault::{FaultConfig, Protection};
use crate::guard::default_t;
use crate::inference::{evaluate_top1, Dataset, EvalResult, ExecMode, FaultPlan, Model};

pub const SEED_ENV: &str = "SCALEGUARD_SEED";
pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Curves,
    BerSweep,
    ModelFault,
    LogitDivision,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Curves => "curves",
            Experiment::BerSweep => "ber-sweep",
            Experiment::ModelFault => "model-fault",
            Experiment::LogitDivision => "logit-div",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curves" => Ok(Experiment::Curves),
            "ber-sweep" => Ok(Experiment::BerSweep),
            "model-fault" => Ok(Experiment::ModelFault),
            "logit-div" | "logit-division" => Ok(Experiment::LogitDivision),
            _ => Err(Error::InvalidConfig(format!("unknown experiment {s:?}"))),
        }
    }
}

/// The `t` values swept by default; the format's optimum sits between 1.5 and 2.5.
pub fn default_t_sweep(dtype: DType) -> Vec<f64> {
    let opt = default_t(&DataTypeSpec::new(dtype));
    vec![0.5, 1.0, 1.5, opt, 2.5, 3.0, 3.5, 4.0]
}

/// Fully resolved experiment settings. Echoed into every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub dtype: DType,
    pub overflow: Overflow,
    pub ber: Vec<f64>,
    pub t: Vec<f64>,
    pub rounds: u32,
    pub seed: u64,
    pub protection: Protection,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Constants for the error-curve study.
    pub constants: Vec<f64>,
    pub grid: [f64; 3],
    pub inject_bias: bool,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment, dtype: DType) -> Self {
        let spec = DataTypeSpec::new(dtype);
        let (ber, t, rounds) = match experiment {
            Experiment::Curves => (vec![0.1], vec![default_t(&spec)], 100_000),
            Experiment::BerSweep => (vec![1e-3, 1e-4, 1e-5], default_t_sweep(dtype), 10),
            Experiment::ModelFault | Experiment::LogitDivision => {
                let ber = if dtype.is_float() { 1e-3 } else { 1e-4 };
                (vec![ber], vec![default_t(&spec)], 10)
            }
        };
        ExperimentConfig {
            experiment,
            dtype,
            overflow: Overflow::Saturate,
            ber,
            t,
            rounds,
            seed: DEFAULT_SEED,
            protection: Protection::default_for(&spec),
            model: None,
            dataset: None,
            output: None,
            constants: vec![1.0, 2.0, 3.0, 5.0],
            grid: [-0.5, 0.5, 0.01],
            inject_bias: false,
        }
    }

    pub fn spec(&self) -> DataTypeSpec {
        DataTypeSpec::new(self.dtype).with_overflow(self.overflow)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.ber.is_empty() {
            return invalid("ber list is empty");
        }
        if let Some(&b) = self.ber.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidBer(b));
        }
        if self.rounds == 0 {
            return invalid("rounds must be at least 1");
        }
        match self.experiment {
            Experiment::Curves => {
                if self.constants.is_empty() || self.constants.iter().any(|&c| !(c > 0.0)) {
                    return invalid("constants must be a non-empty list of positive values");
                }
            }
            _ => {
                if self.t.is_empty() {
                    return invalid("t list is empty");
                }
                if self.t.iter().any(|&t| !(t > 0.0)) {
                    return invalid("t values must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn fault_config(&self, ber: f64) -> FaultConfig {
        FaultConfig {
            ber,
            protection: self.protection,
            seed: self.seed,
            rounds: self.rounds,
        }
    }

    /// `<experiment>-<dtype>-<seed hex>`, used as the record id.
    pub fn id(&self) -> String {
        format!("{}-{}-{:016x}", self.experiment.name(), self.spec(), self.seed)
    }
}

/// Layered settings: every field optional. Later layers win on merge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub dtype: Option<String>,
    pub overflow: Option<String>,
    pub ber: Option<Vec<f64>>,
    pub t: Option<Vec<f64>>,
    pub rounds: Option<u32>,
    pub seed: Option<u64>,
    pub protection: Option<String>,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub constants: Option<Vec<f64>>,
    pub grid: Option<[f64; 3]>,
    pub inject_bias: Option<bool>,
}

impl PartialConfig {
    pub fn merge(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            dtype: over.dtype.or(self.dtype),
            overflow: over.overflow.or(self.overflow),
            ber: over.ber.or(self.ber),
            t: over.t.or(self.t),
            rounds: over.rounds.or(self.rounds),
            seed: over.seed.or(self.seed),
            protection: over.protection.or(self.protection),
            model: over.model.or(self.model),
            dataset: over.dataset.or(self.dataset),
            output: over.output.or(self.output),
            constants: over.constants.or(self.constants),
            grid: over.grid.or(self.grid),
            inject_bias: over.inject_bias.or(self.inject_bias),
        }
    }

    /// Fills unset fields from the experiment's defaults for the chosen dtype.
    pub fn resolve(self, experiment: Experiment) -> Result<ExperimentConfig> {
        let dtype = match &self.dtype {
            Some(d) => d.parse()?,
            None => DType::Fp32,
        };
        let mut cfg = ExperimentConfig::defaults(experiment, dtype);
        if let Some(o) = self.overflow {
            cfg.overflow = o.parse()?;
        }
        if let Some(p) = self.protection {
            cfg.protection = p.parse()?;
        }
        cfg.ber = self.ber.unwrap_or(cfg.ber);
        cfg.t = self.t.unwrap_or(cfg.t);
        cfg.rounds = self.rounds.unwrap_or(cfg.rounds);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.model = self.model.or(cfg.model);
        cfg.dataset = self.dataset.or(cfg.dataset);
        cfg.output = self.output.or(cfg.output);
        cfg.constants = self.constants.unwrap_or(cfg.constants);
        cfg.grid = self.grid.unwrap_or(cfg.grid);
        cfg.inject_bias = self.inject_bias.unwrap_or(cfg.inject_bias);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One CSV/JSON row.
pub trait Row: Serialize {
    const HEADER: &'static [&'static str];
    fn cells(&self) -> Vec<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub weight: f64,
    pub constant: f64,
    pub dtype: String,
    pub ber: f64,
    pub rounds: u32,
    pub mean_abs_error: f64,
    pub finite_fraction: f64,
}

impl Row for CurveRow {
    const HEADER: &'static [&'static str] = &[
        "weight",
        "constant",
        "dtype",
        "ber",
        "rounds",
        "mean_abs_error",
        "finite_fraction",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            format!("{:.6}", self.weight),
            format!("{:.6}", self.constant),
            self.dtype.clone(),
            format!("{:.8}", self.ber),
            self.rounds.to_string(),
            format!("{:.9e}", self.mean_abs_error),
            format!("{:.6}", self.finite_fraction),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dtype: String,
    pub ber: f64,
    pub t: f64,
    pub rounds: u32,
    pub seed: u64,
    pub mean_top1: f64,
    pub std_top1: f64,
}

impl Row for SweepRow {
    const HEADER: &'static [&'static str] = &["dtype", "ber", "t", "rounds", "seed", "mean_top1", "std_top1"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.dtype.clone(),
            format!("{:.8}", self.ber),
            format!("{:.4}", self.t),
            self.rounds.to_string(),
            self.seed.to_string(),
            format!("{:.4}", self.mean_top1),
            format!("{:.4}", self.std_top1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFaultRow {
    pub dtype: String,
    pub ber: f64,
    pub rounds: u32,
    pub seed: u64,
    pub baseline_mean_top1: f64,
    pub baseline_std_top1: f64,
    pub t: f64,
    pub guarded_mean_top1: f64,
    pub guarded_std_top1: f64,
    pub delta_top1: f64,
}

impl Row for ModelFaultRow {
    const HEADER: &'static [&'static str] = &[
        "dtype",
        "ber",
        "rounds",
        "seed",
        "baseline_mean_top1",
        "baseline_std_top1",
        "t",
        "guarded_mean_top1",
        "guarded_std_top1",
        "delta_top1",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.dtype.clone(),
            format!("{:.8}", self.ber),
            self.rounds.to_string(),
            self.seed.to_string(),
            format!("{:.4}", self.baseline_mean_top1),
            format!("{:.4}", self.baseline_std_top1),
            format!("{:.4}", self.t),
            format!("{:.4}", self.guarded_mean_top1),
            format!("{:.4}", self.guarded_std_top1),
            format!("{:.4}", self.delta_top1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub dtype: String,
    pub ber: f64,
    pub t: f64,
    pub rounds: u32,
    pub seed: u64,
    pub mode: ExecMode,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub division_count: usize,
    pub weight_count: usize,
}

impl Row for LogitRow {
    const HEADER: &'static [&'static str] = &[
        "dtype",
        "ber",
        "t",
        "rounds",
        "seed",
        "mode",
        "mean_top1",
        "std_top1",
        "division_count",
        "weight_count",
    ];

    fn cells(&self) -> Vec<String> {
        let mode = match self.mode {
            ExecMode::Baseline => "baseline",
            ExecMode::RescaledWeights => "rescaled-weights",
            ExecMode::LogitDivision => "logit-division",
        };
        vec![
            self.dtype.clone(),
            format!("{:.8}", self.ber),
            format!("{:.4}", self.t),
            self.rounds.to_string(),
            self.seed.to_string(),
            mode.to_string(),
            format!("{:.4}", self.mean_top1),
            format!("{:.4}", self.std_top1),
            self.division_count.to_string(),
            self.weight_count.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows", rename_all = "kebab-case")]
pub enum Rows {
    Curves(Vec<CurveRow>),
    BerSweep(Vec<SweepRow>),
    ModelFault(Vec<ModelFaultRow>),
    LogitDivision(Vec<LogitRow>),
}

impl Rows {
    pub fn len(&self) -> usize {
        match self {
            Rows::Curves(r) => r.len(),
            Rows::BerSweep(r) => r.len(),
            Rows::ModelFault(r) => r.len(),
            Rows::LogitDivision(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn csv_of<R: Row>(rows: &[R]) -> String {
    let mut out = R::HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub results: Rows,
    /// Reported on stderr only; never written to result files.
    #[serde(skip)]
    pub wall_clock: Option<Duration>,
}

impl ResultRecord {
    fn new(cfg: &ExperimentConfig, results: Rows) -> Self {
        ResultRecord {
            experiment_id: cfg.id(),
            seed: cfg.seed,
            config: cfg.clone(),
            results,
            wall_clock: None,
        }
    }

    pub fn to_csv(&self) -> String {
        match &self.results {
            Rows::Curves(r) => csv_of(r),
            Rows::BerSweep(r) => csv_of(r),
            Rows::ModelFault(r) => csv_of(r),
            Rows::LogitDivision(r) => csv_of(r),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }
}

/// Writes JSON for a `.json` path, CSV otherwise.
pub fn write_results(record: &ResultRecord, path: &Path) -> Result<()> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => record.to_json(),
        _ => record.to_csv(),
    };
    io::write_text(path, &text)
}

fn fmt_dtype(cfg: &ExperimentConfig) -> String {
    cfg.spec().to_string()
}

pub fn run_curves(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let mut rows = Vec::new();
    for &ber in &cfg.ber {
        let study = CurveStudyConfig {
            grid_min: cfg.grid[0],
            grid_max: cfg.grid[1],
            grid_step: cfg.grid[2],
            ber,
            rounds: cfg.rounds,
            constants: cfg.constants.clone(),
            spec: cfg.spec(),
            protection: cfg.protection,
            seed: cfg.seed,
            common_masks: false,
        };
        rows.extend(run_curve_study(&study)?.into_iter().map(|p| CurveRow {
            weight: p.weight,
            constant: p.constant,
            dtype: fmt_dtype(cfg),
            ber,
            rounds: cfg.rounds,
            mean_abs_error: p.mean_abs_error,
            finite_fraction: p.finite_fraction,
        }));
    }
    Ok(ResultRecord::new(cfg, Rows::Curves(rows)))
}

fn cross<A: Copy + Send + Sync, B: Copy + Send + Sync>(a: &[A], b: &[B]) -> Vec<(A, B)> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).collect()
}

/// Top-1 over the `(ber, t)` grid with `c_i = t / max|W_i|` on every layer.
pub fn run_ber_sweep(cfg: &ExperimentConfig, model: &Model, dataset: &Dataset) -> Result<ResultRecord> {
    let cells = cross(&cfg.ber, &cfg.t);
    let spec = cfg.spec();
    let results = cells
        .par_iter()
        .map(|&(ber, t)| {
            let plan = FaultPlan {
                inject_bias: cfg.inject_bias,
                ..FaultPlan::scaled(model, spec, cfg.fault_config(ber), t, ExecMode::RescaledWeights)?
            };
            let r = evaluate_top1(model, dataset, &plan, cfg.rounds)?;
            Ok(SweepRow {
                dtype: fmt_dtype(cfg),
                ber,
                t,
                rounds: cfg.rounds,
                seed: cfg.seed,
                mean_top1: r.mean,
                std_top1: r.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(results.len(), cfg.ber.len() * cfg.t.len());
    Ok(ResultRecord::new(cfg, Rows::BerSweep(results)))
}

/// `c = 1` against the guarded model at `cfg.t[0]`, per BER.
pub fn run_model_fault(cfg: &ExperimentConfig, model: &Model, dataset: &Dataset) -> Result<ResultRecord> {
    let spec = cfg.spec();
    let t = cfg.t[0];
    let rows = cfg
        .ber
        .par_iter()
        .map(|&ber| {
            let fault = cfg.fault_config(ber);
            let base = FaultPlan {
                inject_bias: cfg.inject_bias,
                ..FaultPlan::baseline(model, spec, fault)
            };
            let guarded = FaultPlan {
                inject_bias: cfg.inject_bias,
                ..FaultPlan::scaled(model, spec, fault, t, ExecMode::RescaledWeights)?
            };
            let b = evaluate_top1(model, dataset, &base, cfg.rounds)?;
            let g = evaluate_top1(model, dataset, &guarded, cfg.rounds)?;
            Ok(ModelFaultRow {
                dtype: fmt_dtype(cfg),
                ber,
                rounds: cfg.rounds,
                seed: cfg.seed,
                baseline_mean_top1: b.mean,
                baseline_std_top1: b.std,
                t,
                guarded_mean_top1: g.mean,
                guarded_std_top1: g.std,
                delta_top1: g.mean - b.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultRecord::new(cfg, Rows::ModelFault(rows)))
}

/// Per-weight rescaling against logit division on the same fault draws.
pub fn run_logit_division(cfg: &ExperimentConfig, model: &Model, dataset: &Dataset) -> Result<ResultRecord> {
    let spec = cfg.spec();
    let cells = cross(&cfg.ber, &cfg.t);
    let rows = cells
        .par_iter()
        .map(|&(ber, t)| {
            [ExecMode::RescaledWeights, ExecMode::LogitDivision]
                .into_iter()
                .map(|mode| {
                    let plan = FaultPlan {
                        inject_bias: cfg.inject_bias,
                        ..FaultPlan::scaled(model, spec, cfg.fault_config(ber), t, mode)?
                    };
                    let r: EvalResult = evaluate_top1(model, dataset, &plan, cfg.rounds)?;
                    Ok(LogitRow {
                        dtype: fmt_dtype(cfg),
                        ber,
                        t,
                        rounds: cfg.rounds,
                        seed: cfg.seed,
                        mode,
                        mean_top1: r.mean,
                        std_top1: r.std,
                        division_count: r.division_count,
                        weight_count: model.weight_count(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultRecord::new(
        cfg,
        Rows::LogitDivision(rows.into_iter().flatten().collect()),
    ))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("{what} path is required")))
}

/// Runs the configured experiment, loading model and dataset as needed.
pub fn run(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut record = match cfg.experiment {
        Experiment::Curves => run_curves(cfg)?,
        other => {
            let model = io::load_weights(required(&cfg.model, "model")?)?;
            let dataset = io::load_dataset(required(&cfg.dataset, "dataset")?)?;
            match other {
                Experiment::BerSweep => run_ber_sweep(cfg, &model, &dataset)?,
                Experiment::ModelFault => run_model_fault(cfg, &model, &dataset)?,
                _ => run_logit_division(cfg, &model, &dataset)?,
            }
        }
    };
    record.wall_clock = Some(start.elapsed());
    Ok(record)
}

/// Codec round trips plus Monte Carlo vs exact enumeration for the 8-bit format.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub lines: Vec<(String, bool)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|(_, ok)| *ok)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (line, ok) in &self.lines {
            let _ = writeln!(s, "{} {line}", if *ok { "PASS" } else { "FAIL" });
        }
        s
    }
}

pub fn verify(seed: u64, rounds: u32) -> Result<VerifyReport> {
    let mut lines = Vec::new();
    for spec in [DataTypeSpec::QFIXED, DataTypeSpec::FP16, DataTypeSpec::FP32] {
        let r = roundtrip_check(&spec);
        lines.push((
            format!(
                "roundtrip {spec}: {} patterns, {} NaN, {} violations",
                r.checked,
                r.nan_patterns,
                r.violations.len()
            ),
            r.passed(),
        ));
    }
    let mut study = CurveStudyConfig::new(DataTypeSpec::QFIXED, vec![1.0, 2.0, 3.0]);
    study.seed = seed;
    study.rounds = rounds;
    study.grid_step = 0.25;
    let report = compare_oracle(&study)?;
    lines.push((
        format!(
            "oracle q2.5: {} cells, worst |mc - exact| = {:.2} standard errors",
            report.cells.len(),
            report.worst_z()
        ),
        report.passed(),
    ));
    Ok(VerifyReport { lines })
}
