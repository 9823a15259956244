use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use learnopt_bench::config::ExperimentConfig;
use learnopt_bench::{commands, flush_subnormals, report, tune_allocator, BenchError, Result};

#[derive(Parser)]
#[command(name = "learnopt", version, about = "Meta-train, evaluate and compare learned optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Key-value experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    steps: Option<usize>,

    #[arg(long, global = true)]
    repeats: Option<usize>,

    /// Output directory (results directory for `report`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a learned optimizer and select a checkpoint.
    MetaTrain,
    /// Run an optimizer on a task and record trajectories.
    Evaluate,
    /// Learning-rate sweep of a classic optimizer.
    Sweep,
    /// Meta-train variants on equal budgets and compare them.
    Control,
    /// Summarize every finals.csv below the results directory.
    Report {
        /// Also drop finite runs whose final loss exceeds this multiple of
        /// the group median.
        #[arg(long)]
        drop_outliers: Option<f64>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(s) = common.steps {
        c.steps = s;
    }
    if let Some(r) = common.repeats {
        c.repeats = r;
    }
    if let Some(o) = &common.out {
        c.out = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let config = load(&cli.common)?;
    match cli.command {
        Command::MetaTrain => {
            let out = commands::meta_train(&config)?;
            println!(
                "selected checkpoint: iteration {} (moving-average loss {:.6})",
                out.summary.selected.iteration, out.summary.selected.ema_loss
            );
        }
        Command::Evaluate => {
            let records = commands::evaluate(&config)?;
            let diverged = records.iter().filter(|r| r.summary.diverged).count();
            println!("{} runs written to {} ({diverged} diverged)", records.len(), config.out.display());
        }
        Command::Sweep => {
            for p in commands::sweep(&config)? {
                println!("lr {:e}: final average loss {:.6} ({} diverged)", p.lr, p.final_average_loss, p.diverged);
            }
        }
        Command::Control => {
            let rows = commands::control(&config)?;
            println!("{} rows written to {}", rows.len(), config.out.join("control.csv").display());
        }
        Command::Report { drop_outliers } => {
            let summaries = report::report(&config.out, drop_outliers)?;
            println!("{}", serde_json::to_string_pretty(&summaries)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    tune_allocator();
    flush_subnormals();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &BenchError) -> ExitCode {
    let line = serde_json::json!({ "error": e.category(), "message": e.to_string() });
    eprintln!("{line}");
    ExitCode::from(e.exit_code() as u8)
}
