//! Prioritized sampling frequencies and importance weights.

use cmuzero::replay::{Episode, ReplayBuffer, ReplayConfig, Transition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cmuzero::Result<()> {
    let transition = Transition {
        observation: vec![0.0],
        action: vec![0.0],
        reward: 1.0,
        search_value: 0.0,
        root_actions: vec![vec![0.0]],
        root_visit_counts: vec![1],
        done: true,
    };
    let priorities = [1.0, 2.0, 5.0];
    let mut buffer = ReplayBuffer::new(ReplayConfig { alpha: 1.0, beta: 1.0, ..ReplayConfig::default() })?;
    for p in priorities {
        buffer.push_episode(Episode::new(vec![transition.clone()], vec![p])?);
    }
    let draws = 50_000;
    let ids = buffer.sample_ids(draws, &mut ChaCha8Rng::seed_from_u64(1))?;
    let total: f64 = priorities.iter().sum();
    for (i, p) in priorities.iter().enumerate() {
        let freq = ids.iter().filter(|(id, _)| id.episode == i as u64).count() as f64 / draws as f64;
        println!("priority {p}: expected {:.4} sampled {freq:.4}", p / total);
    }
    for sample in buffer.sample_batch(6, &mut ChaCha8Rng::seed_from_u64(2))? {
        println!("episode {} weight {:.4}", sample.id.episode, sample.weight);
    }
    Ok(())
}
