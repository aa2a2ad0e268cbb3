use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use scaleguard::harness::{self, Experiment, PartialConfig, SEED_ENV};

/// Bit-flip fault injection and weight-scaling experiments.
#[derive(Parser, Debug)]
#[command(name = "scaleguard", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo absolute-error curves over a pseudo-weight grid
    Curves(RunArgs),
    /// Top-1 accuracy over a BER x t grid
    BerSweep(RunArgs),
    /// Unscaled (c = 1) model against the optimal-t guard
    ModelFault(RunArgs),
    /// Per-weight rescaling against logit division
    LogitDiv(RunArgs),
    /// Codec round trips and Monte Carlo vs exact-enumeration checks
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100_000)]
        rounds: u32,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Storage format: fp32, fp16 or q2.5
    #[arg(long)]
    dtype: Option<String>,
    /// Bit-error rates (comma separated)
    #[arg(long, value_delimiter = ',')]
    ber: Option<Vec<f64>>,
    /// Target maxima for scaled weights (comma separated)
    #[arg(long, value_delimiter = ',')]
    t: Option<Vec<f64>>,
    /// Constants for the error-curve study (comma separated)
    #[arg(long, value_delimiter = ',')]
    constants: Option<Vec<f64>>,
    /// Pseudo-weight grid as min,max,step
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// none or exp-msb
    #[arg(long)]
    protection: Option<String>,
    /// Fixed-point overflow: saturate or wrap
    #[arg(long)]
    overflow: Option<String>,
    /// Also store and fault biases
    #[arg(long)]
    inject_bias: bool,
    /// Result file; .json writes JSON, anything else CSV. Defaults to stdout CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model manifest (.json)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset file (.sgds)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn as_partial(&self) -> Result<PartialConfig> {
        let grid = match self.grid.as_deref() {
            None => None,
            Some(&[lo, hi, step]) => Some([lo, hi, step]),
            Some(g) => anyhow::bail!(scaleguard::Error::InvalidConfig(format!(
                "--grid takes min,max,step; got {} values",
                g.len()
            ))),
        };
        Ok(PartialConfig {
            dtype: self.dtype.clone(),
            overflow: self.overflow.clone(),
            ber: self.ber.clone(),
            t: self.t.clone(),
            rounds: self.rounds,
            seed: self.seed,
            protection: self.protection.clone(),
            model: self.model.clone(),
            dataset: self.dataset.clone(),
            output: self.out.clone(),
            constants: self.constants.clone(),
            grid,
            inject_bias: self.inject_bias.then_some(true),
        })
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={s:?} is not an integer"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn load_config_file(path: &Path) -> Result<PartialConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: PartialConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    // Relative paths in a config file are relative to the file.
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.model, &mut cfg.dataset, &mut cfg.output].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

fn run_experiment(experiment: Experiment, args: &RunArgs) -> Result<()> {
    let env = PartialConfig {
        seed: env_seed()?,
        ..Default::default()
    };
    let file = match &args.config {
        Some(p) => load_config_file(p)?,
        None => PartialConfig::default(),
    };
    let cfg = env.merge(file).merge(args.as_partial()?).resolve(experiment)?;
    let record = harness::run(&cfg)?;
    match &cfg.output {
        Some(path) => harness::write_results(&record, path)?,
        None => print!("{}", record.to_csv()),
    }
    if let Some(t) = record.wall_clock {
        eprintln!(
            "{}: {} rows in {:.2}s",
            record.experiment_id,
            record.results.len(),
            t.as_secs_f64()
        );
    }
    Ok(())
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .downcast_ref::<scaleguard::Error>()
        .map_or("error", |e| e.kind());
    serde_json::json!({ "error": kind, "message": format!("{err:#}") }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Curves(a) => run_experiment(Experiment::Curves, a),
        Command::BerSweep(a) => run_experiment(Experiment::BerSweep, a),
        Command::ModelFault(a) => run_experiment(Experiment::ModelFault, a),
        Command::LogitDiv(a) => run_experiment(Experiment::LogitDivision, a),
        Command::Verify { seed, rounds } => (|| {
            let seed = match seed {
                Some(s) => *s,
                None => env_seed()?.unwrap_or(harness::DEFAULT_SEED),
            };
            let report = harness::verify(seed, *rounds)?;
            print!("{}", report.render());
            anyhow::ensure!(report.passed(), "verification failed");
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
