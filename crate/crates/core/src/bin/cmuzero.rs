use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use cmuzero::run::{eval_checkpoint, train_until, RunConfig};

#[derive(Parser)]
#[command(name = "cmuzero", version, about = "Continuous-action MuZero: train, evaluate, self-test")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 50)]
        simulations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for eval_metrics.csv (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast property suites.
    Selftest,
}

fn run(cli: Cli) -> cmuzero::Result<bool> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let interrupt = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&interrupt);
            if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)) {
                log::warn!("no interrupt handler: {e}");
            }
            let outcome = train_until(cfg, &interrupt)?;
            let eval = outcome.last_eval.as_ref().map_or("none".to_string(), |e| format!("{:.3}", e.mean));
            println!(
                "trained {} steps, last eval mean {eval}{}{}, outputs in {}",
                outcome.steps,
                if outcome.early_stopped { " (target reached)" } else { "" },
                if outcome.interrupted { " (interrupted)" } else { "" },
                outcome.output_dir.display()
            );
            Ok(true)
        }
        Command::Eval { checkpoint, env, episodes, simulations, seed, out } => {
            let dir = out.or_else(|| checkpoint.parent().map(PathBuf::from));
            let s = eval_checkpoint(&checkpoint, &env, episodes, simulations, seed, dir.as_deref())?;
            println!("episodes {episodes} simulations {simulations} mean {:.4} std {:.4} min {:.4} max {:.4}", s.mean, s.std, s.min, s.max);
            Ok(true)
        }
        Command::Selftest => {
            let reports = cmuzero::selftest::run_all();
            for r in &reports {
                println!("{} {:<16} {:>7.2}s  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
            }
            Ok(reports.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
