//! Cart-pole training with the shipped config.
//!
//! `cargo run --release --example train_cartpole -- [steps]` (default 2000).
//! Learning curves land in `runs/example-cartpole/train_metrics.csv` and
//! `eval_metrics.csv`.

use std::path::Path;

use cmuzero::run::{train, RunConfig};

fn main() -> cmuzero::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let mut config = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/cartpole.json"))?;
    config.output_dir = "runs/example-cartpole".into();
    config.total_steps = steps;
    let outcome = train(config)?;
    if let Some(eval) = outcome.last_eval {
        println!("{} steps: greedy return {:.1} +- {:.1}", outcome.steps, eval.mean, eval.std);
    }
    Ok(())
}
