use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use duelbench::dataset::{self, FitHyper};
use duelbench::harness::{self, HarnessError, JOBS_ENV};

#[derive(Parser)]
#[command(name = "duelbench", version, about = "Contextual dueling bandit benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write per-round results as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; falls back to DUELBENCH_JOBS, then 1.
        #[arg(long, env = JOBS_ENV)]
        jobs: Option<usize>,
        /// Also write per-round VACDB diagnostics as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fit item embeddings and a preference direction to a pairwise count matrix.
    Fit {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// ℓ2 penalty on embeddings and direction.
        #[arg(long, default_value_t = FitHyper::default().penalty)]
        penalty: f64,
        #[arg(long, default_value_t = FitHyper::default().max_epochs)]
        max_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print mean ± std of final cumulative regret per algorithm and scale.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            out,
            jobs,
            trace,
        } => {
            let cfg = harness::load_config(&config).map_err(|e| Failure::Validation(e.into()))?;
            let jobs = harness::resolve_jobs(jobs);
            log::info!(
                "running {} cells of {} rounds on {jobs} worker(s)",
                cfg.scales.len() * cfg.runs * cfg.algorithms.len(),
                cfg.horizon
            );
            let records = harness::run_experiment(&cfg, jobs)?;
            harness::write_csv(&records, &out)?;
            if let Some(trace) = trace {
                harness::write_trace(&records, trace)?;
            }
            Ok(())
        }
        Command::Fit {
            counts,
            dim,
            out,
            penalty,
            max_epochs,
            seed,
        } => {
            let counts = dataset::load_count_matrix(&counts)
                .with_context(|| format!("reading {}", counts.display()))
                .map_err(Failure::Validation)?;
            let hyper = FitHyper {
                penalty,
                max_epochs,
                seed,
                ..FitHyper::default()
            };
            let fit = dataset::fit_joint_mle(&counts, dim, hyper)
                .context("fitting embeddings")
                .map_err(Failure::Validation)?;
            if !fit.converged {
                log::warn!("fit did not meet its tolerance within {} epochs", fit.epochs);
            }
            std::fs::write(&out, fit.model.to_json().map_err(|e| Failure::Runtime(e.into()))?)
                .with_context(|| format!("writing {}", out.display()))
                .map_err(Failure::Runtime)?;
            println!("K={} d={} final_loglik={:.6} epochs={}", fit.model.k, fit.model.d, fit.model.final_loglik, fit.epochs);
            Ok(())
        }
        Command::Report { input } => {
            let rows = harness::read_csv(&input)?;
            for s in harness::summarize(&rows) {
                println!("{s}");
            }
            Ok(())
        }
    }
}

/// `a: b: c` over the error chain, skipping causes a message already embeds.
fn render(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(2)
        }
    }
}
