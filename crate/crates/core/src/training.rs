//! Unrolled training of the three networks.
//!
//! Per sample the model is unrolled `K` steps from the stored observation
//! along the recorded actions. Each position contributes a value loss, a
//! policy loss and an entropy term; positions after the first also carry a
//! reward loss and are scaled by `1/K`. The gradient entering every dynamics
//! hidden-state output is halved. Sample losses are weighted by their
//! importance weight and averaged, and `c * ||theta||^2` is added.
//!
//! The policy term compares the Gaussian log-density at the searched root
//! actions with `tau * log n(a)`. Its reported value is the sample mean
//! `(1/N) sum (log pi(a_i) - tau log n_i)`; by default the update follows the
//! score-function gradient `(1/N) sum grad log pi(a_i) (log pi(a_i) - tau log n_i)`,
//! which is the exact gradient of half the mean squared residual.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_target, log_softmax, softmax, decode_scalar, GaussianPolicy, MuZeroNetwork};
use crate::nn::{Adam, AdamConfig, Gradients, ParameterStore, Tape, Var};
use crate::replay::{compute_priority, PolicyTarget, SampleId, TrainingSample};

/// Which gradient the policy term contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyGradient {
    /// `(1/N) sum grad log pi(a_i) * (log pi(a_i) - tau log n_i)`.
    ScoreFunction,
    /// Direct derivative of `(1/N) sum (log pi(a_i) - tau log n_i)` with the
    /// actions held fixed.
    Pathwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Entropy weight lambda.
    pub entropy_weight: f64,
    /// L2 coefficient c.
    pub l2_weight: f64,
    /// Visit-count temperature tau of the policy target.
    pub tau: f64,
    pub unroll_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub policy_gradient: PolicyGradient,
    /// Factor applied to the gradient entering each dynamics state output.
    pub dynamics_grad_scale: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            entropy_weight: 5e-3,
            l2_weight: 1e-4,
            tau: 1.0,
            unroll_steps: 5,
            learning_rate: 3e-4,
            batch_size: 128,
            policy_gradient: PolicyGradient::ScoreFunction,
            dynamics_grad_scale: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_weight >= 0.0) || !(self.l2_weight >= 0.0) {
            return Err(Error::Config("entropy and l2 weights must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.unroll_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("unroll_steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Policy term that is optimised (see [`PolicyGradient`]).
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    /// Negative entropy, before the lambda weight.
    pub entropy: f64,
    /// `||theta||^2`, before the c weight.
    pub l2: f64,
    pub total: f64,
    /// Sample mean of `log pi(a_i) - tau log n_i`, reported for both modes.
    pub policy_estimate: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, config: &TrainConfig) -> f64 {
        self.reward + self.value + self.policy + config.entropy_weight * self.entropy + config.l2_weight * self.l2
    }

    fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.policy += scale * other.policy;
        self.value += scale * other.value;
        self.reward += scale * other.reward;
        self.entropy += scale * other.entropy;
        self.policy_estimate += scale * other.policy_estimate;
    }
}

// ---------------------------------------------------------------------------
// Loss terms

fn log_prob_and_grads(action: &[f64], mean: &[f64], log_std: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut lp = 0.0;
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_log_std = Vec::with_capacity(mean.len());
    for ((a, m), l) in action.iter().zip(mean).zip(log_std) {
        let inv_std = (-l).exp();
        let z = (a - m) * inv_std;
        lp += -0.5 * z * z - l - 0.5 * (2.0 * PI).ln();
        d_mean.push(z * inv_std);
        d_log_std.push(z * z - 1.0);
    }
    (lp, d_mean, d_log_std)
}

fn check_policy_inputs(policy: &GaussianPolicy, actions: &[Vec<f64>], counts: &[u32]) -> Result<()> {
    if actions.is_empty() || actions.len() != counts.len() {
        return Err(Error::Input("policy loss needs matching, non-empty actions and counts".into()));
    }
    if counts.contains(&0) {
        return Err(Error::Input("zero visit count in policy loss inputs".into()));
    }
    if actions.iter().any(|a| a.len() != policy.dim()) {
        return Err(Error::Input("action dimension does not match the policy".into()));
    }
    Ok(())
}

/// Policy term value with gradients w.r.t. the mean and the (clamped)
/// log-std, for the chosen gradient mode. Returns
/// `(optimised value, sample-mean estimate, d_mean, d_log_std)`.
pub fn policy_objective(
    policy: &GaussianPolicy,
    actions: &[Vec<f64>],
    counts: &[u32],
    tau: f64,
    mode: PolicyGradient,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    check_policy_inputs(policy, actions, counts)?;
    let n = actions.len() as f64;
    let dim = policy.dim();
    let mut estimate = 0.0;
    let mut half_sq = 0.0;
    let mut g_mean = vec![0.0; dim];
    let mut g_log_std = vec![0.0; dim];
    for (a, &c) in actions.iter().zip(counts) {
        let (lp, dm, ds) = log_prob_and_grads(a, &policy.mean, &policy.log_std);
        let residual = lp - tau * f64::from(c).ln();
        estimate += residual / n;
        half_sq += 0.5 * residual * residual / n;
        let coeff = match mode {
            PolicyGradient::ScoreFunction => residual / n,
            PolicyGradient::Pathwise => 1.0 / n,
        };
        for d in 0..dim {
            g_mean[d] += coeff * dm[d];
            g_log_std[d] += coeff * ds[d];
        }
    }
    let value = match mode {
        PolicyGradient::ScoreFunction => half_sq,
        PolicyGradient::Pathwise => estimate,
    };
    Ok((value, estimate, g_mean, g_log_std))
}

/// `(1/N) sum_i (log pi(a_i|s) - tau log n(s, a_i))`
pub fn policy_loss(policy: &GaussianPolicy, actions: &[Vec<f64>], counts: &[u32], tau: f64) -> Result<f64> {
    policy_objective(policy, actions, counts, tau, PolicyGradient::Pathwise).map(|r| r.0)
}

/// Negative closed-form entropy of a diagonal Gaussian.
pub fn entropy_loss(policy: &GaussianPolicy) -> f64 {
    -policy.entropy()
}

/// Cross-entropy between `phi(h(target))` and `softmax(logits)`, with its
/// gradient w.r.t. the logits.
pub fn categorical_loss(target: f64, logits: &[f64]) -> (f64, Vec<f64>) {
    let phi = encode_target(target);
    let log_q = log_softmax(logits);
    let loss = -phi.probabilities().iter().zip(&log_q).map(|(p, lq)| p * lq).sum::<f64>();
    let grad = softmax(logits).iter().zip(phi.probabilities()).map(|(q, p)| q - p).collect();
    (loss, grad)
}

pub fn value_loss(target: f64, value_logits: &[f64]) -> f64 {
    categorical_loss(target, value_logits).0
}

pub fn reward_loss(target: f64, reward_logits: &[f64]) -> f64 {
    categorical_loss(target, reward_logits).0
}

// ---------------------------------------------------------------------------
// Unroll

/// Tape handles for one unroll position.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub state: Var,
    pub mean: Var,
    pub log_std: Var,
    pub value_logits: Var,
    pub reward_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Unroll {
    pub steps: Vec<StepVars>,
    pub dynamics_calls: usize,
    pub predict_calls: usize,
}

/// Unrolls the model along the sample's actions on `tape`.
pub fn unroll_and_predict(
    network: &MuZeroNetwork,
    params: &ParameterStore,
    tape: &mut Tape,
    sample: &TrainingSample,
    unroll_steps: usize,
    dynamics_grad_scale: f64,
) -> Result<Unroll> {
    if sample.actions.len() < unroll_steps || sample.targets.len() < unroll_steps + 1 {
        return Err(Error::Input(format!(
            "sample carries {} actions / {} targets, need {unroll_steps} / {}",
            sample.actions.len(),
            sample.targets.len(),
            unroll_steps + 1
        )));
    }
    let mut state = network.represent_taped(params, tape, &sample.observation)?;
    let p = network.predict_taped(params, tape, state)?;
    let mut steps = vec![StepVars { state, mean: p.mean, log_std: p.log_std, value_logits: p.value_logits, reward_logits: None }];
    let mut dynamics_calls = 0;
    for action in &sample.actions[..unroll_steps] {
        let (reward, next) = network.dynamics_taped(params, tape, state, action)?;
        dynamics_calls += 1;
        state = tape.scale_grad(next, dynamics_grad_scale);
        let p = network.predict_taped(params, tape, state)?;
        steps.push(StepVars { state, mean: p.mean, log_std: p.log_std, value_logits: p.value_logits, reward_logits: Some(reward) });
    }
    let predict_calls = steps.len();
    Ok(Unroll { steps, dynamics_calls, predict_calls })
}

/// Per-sample result of [`sample_loss`].
#[derive(Clone, Debug)]
pub struct SampleLoss {
    /// Unweighted loss terms (no importance weight, no L2).
    pub terms: LossBreakdown,
    pub predicted_value: f64,
    pub target_value: f64,
}

fn check_finite(v: f64, step: usize, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!("non-finite {term} loss at unroll step {step}")))
    }
}

/// Loss of one sample. If `grads` is given, `weight * d(loss)/d(theta)` is
/// accumulated into it.
pub fn sample_loss(
    network: &MuZeroNetwork,
    params: &ParameterStore,
    sample: &TrainingSample,
    config: &TrainConfig,
    weight: f64,
    grads: Option<&mut Gradients>,
) -> Result<SampleLoss> {
    let mut tape = Tape::new();
    let unroll = unroll_and_predict(network, params, &mut tape, sample, config.unroll_steps, config.dynamics_grad_scale)?;
    let k = config.unroll_steps as f64;
    let mut terms = LossBreakdown::default();
    let mut seeds: Vec<(Var, Vec<f64>)> = Vec::new();

    for (step, (vars, target)) in unroll.steps.iter().zip(&sample.targets).enumerate() {
        let scale = if step == 0 { 1.0 } else { 1.0 / k };
        let g = weight * scale;

        let (lv, dv) = categorical_loss(target.value, tape.value(vars.value_logits));
        terms.value += scale * check_finite(lv, step, "value")?;
        seeds.push((vars.value_logits, dv.into_iter().map(|x| x * g).collect()));

        if let Some(r) = vars.reward_logits {
            let (lr, dr) = categorical_loss(target.reward, tape.value(r));
            terms.reward += scale * check_finite(lr, step, "reward")?;
            seeds.push((r, dr.into_iter().map(|x| x * g).collect()));
        }

        let policy = GaussianPolicy { mean: tape.value(vars.mean).to_vec(), log_std: tape.value(vars.log_std).to_vec() };
        let mut d_mean = vec![0.0; policy.dim()];
        let mut d_log_std = vec![0.0; policy.dim()];
        if let Some(PolicyTarget { actions, visit_counts }) = &target.policy {
            let (lp, est, gm, gs) = policy_objective(&policy, actions, visit_counts, config.tau, config.policy_gradient)?;
            terms.policy += scale * check_finite(lp, step, "policy")?;
            terms.policy_estimate += scale * est;
            d_mean = gm;
            d_log_std = gs;
        }
        terms.entropy += scale * entropy_loss(&policy);
        for d in d_log_std.iter_mut() {
            // d(-H)/d(log sigma) = -1 per dimension
            *d -= config.entropy_weight;
        }
        seeds.push((vars.mean, d_mean.into_iter().map(|x| x * g).collect()));
        seeds.push((vars.log_std, d_log_std.into_iter().map(|x| x * g).collect()));
    }
    terms.total = terms.reward + terms.value + terms.policy + config.entropy_weight * terms.entropy;

    if let Some(grads) = grads {
        let refs: Vec<(Var, &[f64])> = seeds.iter().map(|(v, g)| (*v, g.as_slice())).collect();
        tape.backward(params, &refs, grads)?;
    }
    let predicted_value = decode_scalar(tape.value(unroll.steps[0].value_logits))?;
    Ok(SampleLoss { terms, predicted_value, target_value: sample.targets[0].value })
}

/// Importance-weighted batch mean of [`sample_loss`] plus the L2 term.
/// Gradients are accumulated into `grads` when given.
pub fn batch_loss(
    network: &MuZeroNetwork,
    params: &ParameterStore,
    batch: &[TrainingSample],
    config: &TrainConfig,
    grads: Option<&mut Gradients>,
) -> Result<(LossBreakdown, Vec<SampleLoss>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let with_grads = grads.is_some();
    let results: Vec<Result<(SampleLoss, Option<Gradients>)>> = batch
        .par_iter()
        .map(|s| {
            let mut g = with_grads.then(|| Gradients::zeros_like(params));
            let loss = sample_loss(network, params, s, config, s.weight * inv_b, g.as_mut())?;
            Ok((loss, g))
        })
        .collect();
    let mut total = LossBreakdown::default();
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut acc = grads;
    for (r, s) in results.into_iter().zip(batch) {
        let (loss, g) = r?;
        total.add_scaled(&loss.terms, s.weight * inv_b);
        if let (Some(acc), Some(g)) = (acc.as_deref_mut(), g) {
            acc.add_assign(&g);
        }
        per_sample.push(loss);
    }
    total.l2 = params.l2_sq();
    total.total = total.recompose(config);
    if !total.total.is_finite() {
        return Err(Error::Training(format!("non-finite total loss {total:?}")));
    }
    Ok((total, per_sample))
}

// ---------------------------------------------------------------------------
// Trainer

pub struct Trainer {
    network: Arc<MuZeroNetwork>,
    store: ParameterStore,
    adam: Adam,
    config: TrainConfig,
    steps: u64,
}

impl Trainer {
    pub fn new(network: Arc<MuZeroNetwork>, store: ParameterStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, &store);
        Ok(Self { network, store, adam, config, steps: 0 })
    }

    pub fn network(&self) -> &Arc<MuZeroNetwork> {
        &self.network
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer step. Returns the loss breakdown and refreshed
    /// priorities `|v_pred - z| + eps` for the sampled positions.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<(LossBreakdown, Vec<(SampleId, f64)>)> {
        let mut grads = Gradients::zeros_like(&self.store);
        let (loss, per_sample) = batch_loss(&self.network, &self.store, batch, &self.config, Some(&mut grads))?;
        let recomposed = loss.recompose(&self.config);
        if (recomposed - loss.total).abs() > 1e-9 * loss.total.abs().max(1.0) {
            return Err(Error::Training(format!("loss breakdown does not recompose: {recomposed} vs {}", loss.total)));
        }
        self.store.clear_grads();
        self.store.accumulate(&grads);
        self.store.add_l2_grad(self.config.l2_weight);
        self.adam.step(&mut self.store, self.config.learning_rate)?;
        self.steps += 1;
        let priorities = batch
            .iter()
            .zip(&per_sample)
            .map(|(s, l)| (s.id, compute_priority(l.predicted_value, l.target_value)))
            .collect();
        Ok((loss, priorities))
    }
}

// ---------------------------------------------------------------------------
// Estimator check

/// Draws `n` actions from `policy` (unclamped) and returns the sample mean of
/// `log policy(a) - log reference(a)` together with the estimated variance
/// of that mean (sample variance divided by `n`).
pub fn kl_estimator<R: Rng>(policy: &GaussianPolicy, reference: &GaussianPolicy, n: usize, rng: &mut R) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut a = vec![0.0; policy.dim()];
    for i in 0..n {
        for (d, x) in a.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *x = policy.mean[d] + policy.log_std[d].exp() * z;
        }
        let term = crate::model::gaussian_logpdf(&a, policy) - crate::model::gaussian_logpdf(&a, reference);
        // Welford
        let delta = term - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (term - mean);
    }
    let sample_var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, sample_var / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SUPPORT_SIZE};
    use crate::replay::UnrollTarget;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(mean: f64, log_std: f64) -> GaussianPolicy {
        GaussianPolicy::new(vec![mean], vec![log_std])
    }

    #[test]
    fn policy_loss_unit_counts_is_mean_log_prob() {
        let p = policy(0.1, -0.3);
        let actions = vec![vec![0.2], vec![-0.4], vec![0.9]];
        let expected = actions.iter().map(|a| p.log_prob(a)).sum::<f64>() / 3.0;
        for tau in [0.5, 1.0, 3.0] {
            assert!((policy_loss(&p, &actions, &[1, 1, 1], tau).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_loss_single_action() {
        let p = policy(-0.2, 0.1);
        let l = policy_loss(&p, &[vec![0.3]], &[7], 1.0).unwrap();
        assert!((l - (p.log_prob(&[0.3]) - 7f64.ln())).abs() < 1e-12);
        assert!(matches!(policy_loss(&p, &[vec![0.3]], &[0], 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_loss(&policy(0.0, 0.0)) + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((entropy_loss(&policy(0.0, -0.5 * (2.0 * PI * std::f64::consts::E).ln()))).abs() < 1e-12);
        assert!(entropy_loss(&policy(0.0, -1.0)) > entropy_loss(&policy(0.0, -0.5)));
    }

    #[test]
    fn categorical_loss_examples() {
        let uniform = vec![0.0; SUPPORT_SIZE];
        assert!((value_loss(12.3, &uniform) - 21f64.ln()).abs() < 1e-12);
        let mut sharp = vec![-60.0; SUPPORT_SIZE];
        sharp[13] = 60.0;
        // h(3) = 1.003 is not on a support; use a raw target that maps to 3
        let on_support = crate::model::inverse_transform_scalar(3.0);
        assert!(reward_loss(on_support, &sharp) < 1e-12);

        let logits: Vec<f64> = (0..SUPPORT_SIZE).map(|i| (i as f64 * 0.37).sin()).collect();
        let target = crate::model::inverse_transform_scalar(3.7);
        let log_q = log_softmax(&logits);
        let hand = -(0.3 * log_q[13] + 0.7 * log_q[14]);
        assert!((value_loss(target, &logits) - hand).abs() < 1e-9);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let dim = rng.gen_range(1..=3);
            let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let log_std: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..0.5)).collect();
            let n = rng.gen_range(1..6);
            let actions: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let counts: Vec<u32> = (0..n).map(|_| rng.gen_range(1..30)).collect();
            let tau = rng.gen_range(0.2..2.0);
            for mode in [PolicyGradient::Pathwise, PolicyGradient::ScoreFunction] {
                let p = GaussianPolicy { mean: mean.clone(), log_std: log_std.clone() };
                let (_, _, gm, gs) = policy_objective(&p, &actions, &counts, tau, mode).unwrap();
                let f = |m: &[f64], s: &[f64]| {
                    policy_objective(&GaussianPolicy { mean: m.to_vec(), log_std: s.to_vec() }, &actions, &counts, tau, mode).unwrap().0
                };
                let h = 1e-6;
                for d in 0..dim {
                    let (mut mp, mut mm) = (mean.clone(), mean.clone());
                    mp[d] += h;
                    mm[d] -= h;
                    let fd = (f(&mp, &log_std) - f(&mm, &log_std)) / (2.0 * h);
                    assert!(rel_err(gm[d], fd) < 1e-4, "{mode:?} mean {d}: {} vs {fd}", gm[d]);
                    let (mut sp, mut sm) = (log_std.clone(), log_std.clone());
                    sp[d] += h;
                    sm[d] -= h;
                    let fd = (f(&mean, &sp) - f(&mean, &sm)) / (2.0 * h);
                    assert!(rel_err(gs[d], fd) < 1e-4, "{mode:?} log_std {d}: {} vs {fd}", gs[d]);
                }
            }
        }
    }

    fn small_network(seed: u64) -> (Arc<MuZeroNetwork>, ParameterStore) {
        let mut config = ModelConfig::new(3, 1);
        config.hidden_dim = 6;
        config.representation_layers = vec![8];
        config.dynamics_layers = vec![8];
        config.head_layers = vec![8];
        let mut store = ParameterStore::new();
        let net = MuZeroNetwork::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (Arc::new(net), store)
    }

    fn synthetic_sample(k: usize, seed: u64, absorbing_from: usize) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = (0..=k)
            .map(|i| UnrollTarget {
                value: rng.gen_range(-5.0..20.0),
                reward: if i == 0 { 0.0 } else { rng.gen_range(0.0..1.0) },
                policy: {
                    let target = PolicyTarget {
                        actions: (0..3).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect(),
                        visit_counts: (0..3).map(|_| rng.gen_range(1..20)).collect(),
                    };
                    (i < absorbing_from).then_some(target)
                },
            })
            .collect();
        TrainingSample {
            id: SampleId { episode: 0, index: 0 },
            observation: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            actions: (0..k).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect(),
            targets,
            weight: 1.0,
            probability: 1.0,
        }
    }

    #[test]
    fn unroll_counts_model_calls() {
        let (net, store) = small_network(1);
        let sample = synthetic_sample(1, 2, 9);
        let mut tape = Tape::new();
        let u = unroll_and_predict(&net, &store, &mut tape, &sample, 1, 0.5).unwrap();
        assert_eq!((u.dynamics_calls, u.predict_calls), (1, 2));
        assert!(u.steps[0].reward_logits.is_none() && u.steps[1].reward_logits.is_some());
    }

    #[test]
    fn dynamics_gradient_is_halved() {
        let (net, store) = small_network(3);
        let sample = synthetic_sample(1, 4, 9);
        let grad_at_root = |scale: f64| {
            let mut tape = Tape::new();
            let u = unroll_and_predict(&net, &store, &mut tape, &sample, 1, scale).unwrap();
            let seed = vec![1.0; SUPPORT_SIZE];
            let mut g = Gradients::zeros_like(&store);
            tape.backward(&store, &[(u.steps[1].value_logits, &seed)], &mut g).unwrap();
            tape.gradient(u.steps[0].state).unwrap().to_vec()
        };
        let halved = grad_at_root(0.5);
        let full = grad_at_root(1.0);
        for (h, f) in halved.iter().zip(&full) {
            assert!((h - 0.5 * f).abs() <= 1e-15 * f.abs().max(1.0));
        }
        assert!(full.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn full_unroll_matches_finite_differences() {
        let (net, store) = small_network(5);
        // plain gradient, no dynamics halving
        let config = TrainConfig { unroll_steps: 3, entropy_weight: 0.1, dynamics_grad_scale: 1.0, ..TrainConfig::default() };
        let sample = synthetic_sample(3, 6, 3);
        let mut grads = Gradients::zeros_like(&store);
        sample_loss(&net, &store, &sample, &config, 1.0, Some(&mut grads)).unwrap();
        let f = |s: &ParameterStore| sample_loss(&net, s, &sample, &config, 1.0, None).unwrap().terms.total;
        let h = 1e-6;
        let mut checked = 0;
        for id in 0..store.len() {
            for k in 0..store.value(id).len() {
                let mut plus = store.clone();
                plus.value_mut(id).data[k] += h;
                let mut minus = store.clone();
                minus.value_mut(id).data[k] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = grads.get(id)[k];
                assert!(rel_err(a, fd) < 1e-3, "{}[{k}]: {a} vs {fd}", store.name(id));
                checked += 1;
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn absorbing_steps_skip_policy_loss() {
        let (net, store) = small_network(8);
        let config = TrainConfig { unroll_steps: 3, ..TrainConfig::default() };
        let with = sample_loss(&net, &store, &synthetic_sample(3, 9, 4), &config, 1.0, None).unwrap();
        let without = sample_loss(&net, &store, &synthetic_sample(3, 9, 0), &config, 1.0, None).unwrap();
        assert_eq!(without.terms.policy, 0.0);
        assert!(with.terms.policy != 0.0);
        assert_eq!(with.terms.value, without.terms.value);
    }

    #[test]
    fn loss_weights_isolate_terms() {
        let (net, store) = small_network(10);
        let batch: Vec<TrainingSample> = (0..4).map(|i| synthetic_sample(5, 20 + i, 6)).collect();
        let plain = TrainConfig { entropy_weight: 0.0, l2_weight: 0.0, ..TrainConfig::default() };
        let (l, _) = batch_loss(&net, &store, &batch, &plain, None).unwrap();
        assert_eq!(l.total, l.reward + l.value + l.policy);
        let with_l2 = TrainConfig { l2_weight: 1e-3, ..plain.clone() };
        let (l2, _) = batch_loss(&net, &store, &batch, &with_l2, None).unwrap();
        assert!((l2.total - l.total - 1e-3 * store.l2_sq()).abs() < 1e-12);
    }

    #[test]
    fn importance_weight_is_linear() {
        let (net, store) = small_network(11);
        let config = TrainConfig::default();
        let a = synthetic_sample(5, 30, 6);
        let b = synthetic_sample(5, 31, 6);
        let mut doubled = a.clone();
        doubled.weight = 2.0;
        let (base, per) = batch_loss(&net, &store, &[a, b.clone()], &config, None).unwrap();
        let (more, _) = batch_loss(&net, &store, &[doubled, b], &config, None).unwrap();
        let contribution = per[0].terms.total / 2.0;
        assert!(((more.total - base.total) - contribution).abs() < 1e-9);
    }

    #[test]
    fn frozen_batch_loss_decreases() {
        let (net, store) = small_network(12);
        let config = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
        let batch: Vec<TrainingSample> = (0..8).map(|i| synthetic_sample(5, 40 + i, 6)).collect();
        let mut trainer = Trainer::new(net, store, config).unwrap();
        let mut prev = f64::INFINITY;
        let mut decreases = 0;
        for _ in 0..200 {
            let (l, _) = trainer.train_step(&batch).unwrap();
            assert!((l.recompose(trainer.config()) - l.total).abs() < 1e-9);
            if l.total < prev {
                decreases += 1;
            }
            prev = l.total;
        }
        assert!(decreases >= 180, "only {decreases} of 200 steps decreased the loss");
    }

    #[test]
    fn estimator_is_zero_against_itself() {
        let p = policy(0.3, -0.7);
        let (mean, var) = kl_estimator(&p, &p, 1000, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(mean, 0.0);
        assert_eq!(var, 0.0);
    }
}
