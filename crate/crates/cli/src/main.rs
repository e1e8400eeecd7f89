use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ctg_core::harness::{
    calibrate, correlate, default_taus, read_corpus, sweep_tau, write_atomic, write_sweep_csv, BackendKind, Overrides,
    Pipeline, RunConfig, RunReport, Scenario,
};
use ctg_core::scoring::DEFAULT_ECE_BINS;

/// Multi-attribute controlled text generation.
///
/// Flags given on the command line override the values in the config file.
#[derive(Parser)]
#[command(name = "ctg", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Synthetic,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Conflict,
    Overlap,
}

#[derive(clap::Args)]
struct RunFlags {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Energy convergence threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "max-iters")]
    max_iters: Option<u32>,
    /// Rewrite attempts per iteration.
    #[arg(long)]
    attempts: Option<u32>,
    /// Rewrite backend. The http backend reads a bearer token from
    /// CTG_BACKEND_TOKEN when set.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
}

impl RunFlags {
    fn load(&self) -> Result<Pipeline> {
        let mut config = RunConfig::load(&self.config)?;
        config.apply(&Overrides {
            seed: self.seed,
            tau: self.tau,
            max_iterations: self.max_iters,
            attempts: self.attempts,
            backend: self.backend.map(|b| match b {
                BackendArg::Synthetic => BackendKind::Synthetic,
                BackendArg::Http => BackendKind::Http,
            }),
        })?;
        Ok(Pipeline::new(config)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the text(s) in --input and write a JSON report.
    ///
    /// Exit status: 0 converged or early-stopped, 2 budget exhausted,
    /// 3 backend failure, 1 any other error.
    Run {
        #[command(flatten)]
        flags: RunFlags,
        /// Input text file, one text per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the convergence threshold over a corpus and write a CSV summary.
    SweepTau {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated τ values; defaults to the standard 13-point grid.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Compare the full loop with a one-shot rewrite on a conflicting or
    /// overlapping attribute pair.
    Conflict {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson matrix and penalty coefficients from a CSV of classifier scores.
    Correlate {
        /// CSV with one column per dimension.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = ctg_core::correlation::DEFAULT_C)]
        c: f64,
        /// Comma-separated target dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        /// Output CSV for the matrix.
        #[arg(long)]
        out_matrix: PathBuf,
        /// Output JSON for the coefficients.
        #[arg(long)]
        out_betas: PathBuf,
    },
    /// Fit a calibration temperature from a CSV with columns logit,label.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ECE_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draft texts from fused attribute priors (needs a generation section).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn corpus(path: &Path) -> Result<Vec<String>> {
    let texts = read_corpus(path)?;
    if texts.is_empty() {
        bail!(ctg_core::Error::Validation(format!(
            "{} contains no texts",
            path.display()
        )));
    }
    Ok(texts)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { flags, input, out } => {
            let pipeline = flags.load()?;
            let texts = corpus(&input)?;
            if texts.len() == 1 {
                let report = pipeline.run_text(&texts[0], pipeline.config.optimization.seed)?;
                log::info!("{:?} after {} iterations", report.status, report.run.iterations.len());
                write_atomic(&out, report.to_json()?.as_bytes())?;
                Ok(report.exit_code())
            } else {
                let reports = pipeline.run_corpus(&texts)?;
                write_json(&out, &reports)?;
                Ok(reports.iter().map(RunReport::exit_code).max().unwrap_or(0))
            }
        }
        Command::SweepTau {
            flags,
            input,
            out,
            taus,
        } => {
            let pipeline = flags.load()?;
            let rows = sweep_tau(&pipeline, &taus.unwrap_or_else(default_taus), &corpus(&input)?)?;
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            write_atomic(&out, &buf)?;
            Ok(0)
        }
        Command::Conflict {
            flags,
            scenario,
            input,
            out,
        } => {
            let pipeline = flags.load()?;
            let scenario = match scenario {
                ScenarioArg::Conflict => Scenario::Conflict,
                ScenarioArg::Overlap => Scenario::Overlap,
            };
            let summary = pipeline.conflict_experiment(scenario, &corpus(&input)?)?;
            log::info!(
                "loop beats one-shot on {:.0}% of texts",
                summary.loop_better_fraction * 100.0
            );
            write_json(&out, &summary)?;
            Ok(0)
        }
        Command::Correlate {
            input,
            c,
            targets,
            out_matrix,
            out_betas,
        } => {
            let file = std::fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let result = correlate(file, c, &targets)?;
            let mut buf = Vec::new();
            result.matrix.write_csv(&mut buf)?;
            write_atomic(&out_matrix, &buf)?;
            write_json(&out_betas, &result.penalty)?;
            Ok(0)
        }
        Command::Calibrate { input, bins, out } => {
            let file = std::fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let params = calibrate(file, bins)?;
            write_json(&out, &params)?;
            Ok(0)
        }
        Command::Generate { config, seed, out } => {
            let pipeline = Pipeline::new(RunConfig::load(&config)?)?;
            let texts = pipeline.generate(seed)?;
            write_atomic(&out, (texts.join("\n") + "\n").as_bytes())?;
            Ok(0)
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<ctg_core::Error>())
        .map_or("internal", ctg_core::Error::kind)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let line = serde_json::json!({
                "error": { "kind": error_kind(&e), "message": format!("{e:#}") }
            });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
