use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mqmk_core::harness::{
    cmd_ablate, cmd_cost, cmd_pretrain, cmd_report, cmd_run, to_json, Axis, ExperimentConfig,
    HarnessError,
};

/// Continual-learning prompt matching experiments.
#[derive(Parser)]
#[command(name = "mqmk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen backbone on pretext classes.
    Pretrain {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the continual protocol for every configured seed.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Sweep one axis and write a mean/std table.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        /// paradigm, key_granularity, K, prompt_depth or prompt_length.
        #[arg(short, long)]
        axis: String,
        /// Comma-separated axis values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Parameter counts and the pass-count model checked against counters.
    Cost {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Re-render CSV and JSON reports from a run directory.
    Report { dir: PathBuf },
    /// Print the default configuration.
    Config,
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig, HarnessError> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Pretrain { config } => {
            let s = cmd_pretrain(&load(&config)?)?;
            eprintln!(
                "pretext accuracy {:.4} over {} classes, checkpoint {}",
                s.test_accuracy,
                s.pretext_classes,
                s.checkpoint.display()
            );
            print!("{}", to_json(&s));
        }
        Command::Run { config } => {
            let cfg = load(&config)?;
            let agg = cmd_run(&cfg)?;
            for r in &agg.runs {
                eprintln!(
                    "seed {}: A_T {:.4} F_T {:.4} matching {:.4}",
                    r.seed,
                    r.final_accuracy(),
                    r.final_forgetting(),
                    r.final_matching_rate()
                );
            }
            eprintln!(
                "{} median: A_T {:.4} matching {:.4} -> {}",
                agg.paradigm,
                agg.median_average_accuracy,
                agg.median_matching_rate,
                cfg.experiment.output_dir.display()
            );
        }
        Command::Ablate {
            config,
            axis,
            values,
        } => {
            let axis: Axis = axis
                .parse()
                .map_err(|e: String| HarnessError::Validation(vec![e]))?;
            let rows = cmd_ablate(&load(&config)?, axis, values)?;
            print!("{}", mqmk_core::harness::sweep_csv(&rows));
        }
        Command::Cost { config } => {
            let r = cmd_cost(&load(&config)?)?;
            print!("{}", to_json(&r));
            if !r.checks.iter().all(|c| c.matches()) {
                return Err(HarnessError::Runtime(
                    "pass counters disagree with the cost model".into(),
                ));
            }
        }
        Command::Report { dir } => {
            let agg = cmd_report(&dir)?;
            eprintln!("re-rendered {} runs in {}", agg.runs.len(), dir.display());
        }
        Command::Config => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
