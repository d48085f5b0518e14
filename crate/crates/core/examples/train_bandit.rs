//! End-to-end training on the bandit, then evaluation of the final checkpoint.
//!
//! Takes about a minute in release mode. Output goes to `runs/example-bandit`.

use std::path::Path;

use cmuzero::run::{checkpoint_path, eval_checkpoint, train, RunConfig};

fn main() -> cmuzero::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bandit.json"))?;
    config.output_dir = "runs/example-bandit".into();
    let outcome = train(config)?;
    println!("trained {} steps, last eval {:?}", outcome.steps, outcome.last_eval.map(|e| e.mean));
    let ckpt = checkpoint_path(&outcome.output_dir, outcome.steps);
    let summary = eval_checkpoint(&ckpt, "bandit", 20, 64, 1, None)?;
    println!("checkpoint {}: mean return {:.4} (optimum 1.0)", ckpt.display(), summary.mean);
    Ok(())
}
