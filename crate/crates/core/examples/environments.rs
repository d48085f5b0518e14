//! Random-policy rollouts in every built-in environment, plus the
//! double-pendulum energy check with zero force.

use cmuzero::envs::{advance_double_pendulum, double_pendulum_energy, make_env, DoublePendulumState, ENV_KEYS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cmuzero::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for key in ENV_KEYS {
        let mut env = make_env(key)?;
        let spec = env.spec();
        let mut lengths = Vec::new();
        let mut returns = Vec::new();
        for ep in 0..20 {
            env.reset(ep);
            let (mut steps, mut ret) = (0, 0.0);
            loop {
                let action: Vec<f64> = (0..spec.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = env.step(&action);
                steps += 1;
                ret += r.reward;
                if r.done {
                    break;
                }
            }
            lengths.push(steps as f64);
            returns.push(ret);
        }
        println!(
            "{key:>16}: obs {} act {} max {}  random policy: length {:.1} return {:.2}",
            spec.observation_dim,
            spec.action_dim,
            spec.max_steps,
            lengths.iter().sum::<f64>() / 20.0,
            returns.iter().sum::<f64>() / 20.0
        );
    }

    let mut state: DoublePendulumState = [0.0, 0.4, -0.3, 0.0, 0.0, 0.0];
    let e0 = double_pendulum_energy(&state);
    for _ in 0..500 {
        state = advance_double_pendulum(&state, 0.0);
    }
    println!("double pendulum, 10 s unforced: energy drift {:.2e}", (double_pendulum_energy(&state) - e0).abs() / e0.abs());
    Ok(())
}
