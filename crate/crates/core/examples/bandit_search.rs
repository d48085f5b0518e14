//! Progressive-widening search on the one-step bandit with an exact model.
//!
//! Run with `cargo run --release --example bandit_search`.

use cmuzero::envs::{bandit_reward, BanditModel};
use cmuzero::mcts::{run_search, SearchConfig};

fn main() -> cmuzero::Result<()> {
    let model = BanditModel::default();
    println!("reward at a = 0.3: {:.3}", bandit_reward(0.3));
    println!("{:>6} {:>9} {:>9} {:>9}", "sims", "children", "mean a", "|a - 0.3|");
    for sims in [8, 32, 128, 512, 2048] {
        let config = SearchConfig { num_simulations: sims, seed: 7, ..SearchConfig::default() };
        let result = run_search(&[0.0], &model, &config)?;
        let mean = result.mean_action().expect("search ran")[0];
        println!("{sims:>6} {:>9} {mean:>9.4} {:>9.4}", result.root_actions.len(), (mean - 0.3).abs());
    }
    Ok(())
}
