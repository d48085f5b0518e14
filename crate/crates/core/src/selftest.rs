//! Fast property suites behind `cmuzero selftest`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::BanditModel;
use crate::mcts::{SearchConfig, SearchTree};
use crate::model::{
    inverse_transform_scalar, scalar_to_support, support_to_scalar, transform_scalar, GaussianPolicy, SUPPORT_MAX,
};
use crate::nn::{DenseNetwork, DenseNetworkSpec, Gradients, OutputActivation, ParameterStore, Tape};
use crate::replay::{Episode, ReplayBuffer, ReplayConfig, Transition};
use crate::training::{kl_estimator, policy_objective, PolicyGradient};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = std::result::Result<String, String>;

fn timed(name: &'static str, f: impl FnOnce() -> Check) -> SuiteReport {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteReport { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

pub fn run_all() -> Vec<SuiteReport> {
    vec![
        timed("transforms", || check_transforms(transform_scalar, inverse_transform_scalar)),
        timed("gradients", check_gradients),
        timed("widening", check_widening),
        timed("kl-estimator", check_kl_estimator),
        timed("replay-sampling", check_replay_sampling),
    ]
}

/// Known values, inverse roundtrip and support roundtrip for a transform pair.
pub fn check_transforms(h: fn(f64) -> f64, h_inv: fn(f64) -> f64) -> Check {
    for (x, want) in [(0.0, 0.0), (3.0, 1.003), (-3.0, -1.003), (99.0, 9.099)] {
        if (h(x) - want).abs() > 1e-9 {
            return Err(format!("h({x}) = {} instead of {want}", h(x)));
        }
    }
    let mut worst: f64 = 0.0;
    let n = 2_000;
    for i in 0..=n {
        let y = f64::from(SUPPORT_MAX) * (2.0 * i as f64 - n as f64) / n as f64;
        let x = h_inv(y);
        worst = worst.max((h_inv(h(x)) - x).abs());
    }
    if worst >= 1e-6 {
        return Err(format!("inverse roundtrip error {worst:e}"));
    }
    let mut support_worst: f64 = 0.0;
    for i in 0..=n {
        let x = f64::from(SUPPORT_MAX) * (2.0 * i as f64 - n as f64) / n as f64;
        support_worst = support_worst.max((support_to_scalar(&scalar_to_support(x)) - x).abs());
    }
    if support_worst >= 1e-9 {
        return Err(format!("support roundtrip error {support_worst:e}"));
    }
    Ok(format!("roundtrip errors {worst:.1e} / {support_worst:.1e}"))
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn check_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParameterStore::new();
    let spec = DenseNetworkSpec::new(vec![3, 6, 4], OutputActivation::Tanh);
    let net = DenseNetwork::new(spec, &mut store, "check", &mut rng).map_err(|e| e.to_string())?;
    let input: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |s: &ParameterStore| -> f64 {
        net.eval(s, &input).map(|y| y.iter().zip(&weights).map(|(a, b)| a * b).sum()).unwrap_or(f64::NAN)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(&input);
    let y = net.forward(&store, &mut tape, x).map_err(|e| e.to_string())?;
    let mut grads = Gradients::zeros_like(&store);
    tape.backward(&store, &[(y, &weights)], &mut grads).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for id in 0..store.len() {
        for k in 0..store.value(id).len() {
            let mut plus = store.clone();
            plus.value_mut(id).data[k] += h;
            let mut minus = store.clone();
            minus.value_mut(id).data[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(grads.get(id)[k], fd, 1e-6));
        }
    }
    if worst >= 1e-4 {
        return Err(format!("network gradient rel. error {worst:e}"));
    }

    let mut policy_worst: f64 = 0.0;
    for _ in 0..20 {
        let mean = [rng.gen_range(-0.9..0.9)];
        let log_std = [rng.gen_range(-2.0..0.5)];
        let actions: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let counts: Vec<u32> = (0..4).map(|_| rng.gen_range(1..20)).collect();
        for mode in [PolicyGradient::Pathwise, PolicyGradient::ScoreFunction] {
            let eval = |m: f64, s: f64| {
                policy_objective(&GaussianPolicy { mean: vec![m], log_std: vec![s] }, &actions, &counts, 1.0, mode)
            };
            let (_, _, gm, gs) = eval(mean[0], log_std[0]).map_err(|e| e.to_string())?;
            let fd_m = (eval(mean[0] + h, log_std[0]).map_err(|e| e.to_string())?.0
                - eval(mean[0] - h, log_std[0]).map_err(|e| e.to_string())?.0)
                / (2.0 * h);
            let fd_s = (eval(mean[0], log_std[0] + h).map_err(|e| e.to_string())?.0
                - eval(mean[0], log_std[0] - h).map_err(|e| e.to_string())?.0)
                / (2.0 * h);
            policy_worst = policy_worst.max(rel_err(gm[0], fd_m, 1e-6)).max(rel_err(gs[0], fd_s, 1e-6));
        }
    }
    if policy_worst >= 1e-4 {
        return Err(format!("policy gradient rel. error {policy_worst:e}"));
    }
    Ok(format!("worst rel. error {:.1e}", worst.max(policy_worst)))
}

fn check_widening() -> Check {
    let model = BanditModel::default();
    let config = SearchConfig { num_simulations: 128, ..SearchConfig::default() };
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = SearchTree::new(&model, &[0.0], &mut rng).map_err(|e| e.to_string())?;
        for sim in 0..config.num_simulations {
            tree.simulate(&model, &config, &mut rng).map_err(|e| e.to_string())?;
            tree.check_invariants(&config).map_err(|e| format!("seed {seed}, simulation {sim}: {e}"))?;
        }
    }
    Ok("10 searches x 128 simulations".into())
}

fn check_kl_estimator() -> Check {
    let p = GaussianPolicy::new(vec![0.0], vec![0.0]);
    let q = GaussianPolicy::new(vec![1.0], vec![0.0]);
    let (mean, var) = kl_estimator(&p, &q, 10_000, &mut ChaCha8Rng::seed_from_u64(3));
    let se = var.sqrt();
    if (mean - 0.5).abs() > 4.0 * se {
        return Err(format!("estimate {mean:.4} is more than 4 SE ({se:.4}) from 0.5"));
    }
    Ok(format!("estimate {mean:.4} +- {se:.4}"))
}

fn check_replay_sampling() -> Check {
    let mut buffer = ReplayBuffer::new(ReplayConfig::default()).map_err(|e| e.to_string())?;
    let transition = Transition {
        observation: vec![0.0],
        action: vec![0.0],
        reward: 0.0,
        search_value: 0.0,
        root_actions: vec![vec![0.0]],
        root_visit_counts: vec![1],
        done: true,
    };
    for p in [1.0, 3.0] {
        let episode = Episode::new(vec![transition.clone()], vec![p]).map_err(|e| e.to_string())?;
        buffer.push_episode(episode);
    }
    let draws = 20_000;
    let ids = buffer.sample_ids(draws, &mut ChaCha8Rng::seed_from_u64(5)).map_err(|e| e.to_string())?;
    let second = ids.iter().filter(|(id, _)| id.episode == 1).count() as f64 / draws as f64;
    if (second - 0.75).abs() > 0.02 {
        return Err(format!("priority-3 item sampled at {second:.4}, expected 0.75"));
    }
    Ok(format!("frequency {second:.4} vs 0.75"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    fn flipped(x: f64) -> f64 {
        -transform_scalar(x)
    }

    fn flipped_inverse(y: f64) -> f64 {
        inverse_transform_scalar(-y)
    }

    #[test]
    fn sign_flip_fails_transform_suite() {
        assert!(check_transforms(flipped, flipped_inverse).is_err());
    }
}
