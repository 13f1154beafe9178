use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssvi::config::{Flags, Settings};
use ssvi::run::{self, ModelKind, RunError, Verb};
use ssvi::trace;

#[derive(Parser)]
#[command(name = "ssvi", version, about = "Structured stochastic variational inference for two-level latent variable models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bayesian generalized linear model
    Glm(ModelArgs),
    /// Mixed-effects GLM with Rayleigh noise variance
    Gme(ModelArgs),
    /// Sparse Gaussian process regression
    Sgp(ModelArgs),
    /// Probabilistic matrix factorization
    Pmf(ModelArgs),
    /// Correlated topic model
    Ctm(ModelArgs),
    /// Summarize two or more metrics traces
    Compare {
        traces: Vec<PathBuf>,
        /// METRIC=VALUE; reports the first row at or below VALUE
        #[arg(long)]
        threshold: Vec<String>,
        /// Also write the summary as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ModelArgs {
    #[arg(value_enum)]
    verb: Verb,
    #[command(flatten)]
    flags: Flags,
}

fn compare(traces: &[PathBuf], thresholds: &[String], csv: Option<&PathBuf>) -> Result<String, RunError> {
    if traces.is_empty() {
        return Err(RunError::Usage("compare needs at least one trace".into()));
    }
    let mut loaded = Vec::new();
    for p in traces {
        loaded.push((p.display().to_string(), trace::read_trace(p)?));
    }
    let mut th = Vec::new();
    for t in thresholds {
        let (m, v) = t.split_once('=').ok_or_else(|| RunError::Usage(format!("threshold {t:?} is not METRIC=VALUE")))?;
        let v: f64 = v.parse().map_err(|_| RunError::Usage(format!("threshold {t:?} has a bad value")))?;
        th.push((m.to_string(), v));
    }
    let lines = trace::compare(&loaded, &th)?;
    if let Some(p) = csv {
        trace::write_summary_csv(std::fs::File::create(p)?, &lines)?;
    }
    Ok(trace::render_text(&lines))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compare { traces, threshold, csv } => compare(&traces, &threshold, csv.as_ref()).map(|s| print!("{s}")),
        Command::Glm(a) => model(ModelKind::Glm, a),
        Command::Gme(a) => model(ModelKind::Gme, a),
        Command::Sgp(a) => model(ModelKind::Sgp, a),
        Command::Pmf(a) => model(ModelKind::Pmf, a),
        Command::Ctm(a) => model(ModelKind::Ctm, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn model(kind: ModelKind, a: ModelArgs) -> Result<(), RunError> {
    let settings = Settings::from_flags(&a.flags)?;
    let report = run::run(kind, a.verb, &settings)?;
    for m in &report.metrics {
        println!("{m}");
    }
    Ok(())
}
