//! The learned model: representation, dynamics and prediction networks.
//!
//! Hidden states are rescaled onto `[-1, 1]` by their own min/max after both
//! the representation and the dynamics network. Value and reward are
//! produced as logits over the 21 integer supports `-10..=10` in the
//! squashed scale `h(x) = sign(x)(sqrt(|x| + 1) - 1) + 0.001 x`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::mcts::SearchModel;
use crate::nn::{min_max_scale, DenseNetwork, DenseNetworkSpec, OutputActivation, ParameterStore, Tape, Var};

pub const SUPPORT_MIN: i32 = -10;
pub const SUPPORT_MAX: i32 = 10;
pub const SUPPORT_SIZE: usize = (SUPPORT_MAX - SUPPORT_MIN + 1) as usize;
pub const TRANSFORM_EPS: f64 = 0.001;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Latent state the search operates on.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Diagonal Gaussian over actions. `log_std` is kept inside
/// `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        debug_assert_eq!(mean.len(), log_std.len());
        let log_std = log_std.into_iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, action: &[f64]) -> f64 {
        gaussian_logpdf(action, self)
    }

    /// Unclamped draw.
    pub fn sample_raw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, l)| {
                let z: f64 = StandardNormal.sample(rng);
                m + l.exp() * z
            })
            .collect()
    }

    /// Draw clamped to the `[-1, 1]` action box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        clamp_action(self.sample_raw(rng))
    }

    /// Closed-form differential entropy, summed over dimensions.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| 0.5 * (2.0 * PI * std::f64::consts::E).ln() + l).sum()
    }
}

pub fn clamp_action(mut action: Vec<f64>) -> Vec<f64> {
    action.iter_mut().for_each(|a| *a = a.clamp(-1.0, 1.0));
    action
}

/// Sum over dimensions of `log N(a_d; mu_d, sigma_d^2)`.
pub fn gaussian_logpdf(action: &[f64], policy: &GaussianPolicy) -> f64 {
    debug_assert_eq!(action.len(), policy.dim());
    action
        .iter()
        .zip(&policy.mean)
        .zip(&policy.log_std)
        .map(|((a, m), l)| {
            let z = (a - m) / l.exp();
            -0.5 * z * z - l - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// `h(x) = sign(x)(sqrt(|x| + 1) - 1) + eps x`
pub fn transform_scalar(x: f64) -> f64 {
    x.signum() * ((x.abs() + 1.0).sqrt() - 1.0) + TRANSFORM_EPS * x
}

pub fn inverse_transform_scalar(y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let eps = TRANSFORM_EPS;
    let root = ((1.0 + 4.0 * eps * (y.abs() + 1.0 + eps)).sqrt() - 1.0) / (2.0 * eps);
    let mut x = y.signum() * (root * root - 1.0);
    // one Newton step cleans up the cancellation in the closed form
    let slope = 0.5 / (x.abs() + 1.0).sqrt() + eps;
    x -= (transform_scalar(x) - y) / slope;
    x
}

/// Probabilities over the supports `-10..=10`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportDistribution(Vec<f64>);

impl SupportDistribution {
    pub fn from_probabilities(p: Vec<f64>) -> Result<Self> {
        if p.len() != SUPPORT_SIZE {
            return Err(Error::Input(format!("support distribution needs {SUPPORT_SIZE} entries, got {}", p.len())));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("not a probability vector (sum {total})")));
        }
        Ok(Self(p))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != SUPPORT_SIZE {
            return Err(Error::Input(format!("expected {SUPPORT_SIZE} logits, got {}", logits.len())));
        }
        Ok(Self(softmax(logits)))
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }
}

pub fn support_value(index: usize) -> f64 {
    f64::from(SUPPORT_MIN) + index as f64
}

/// Two-hot projection of `x` (already in the squashed scale), clamped into
/// `[-10, 10]` first.
pub fn scalar_to_support(x: f64) -> SupportDistribution {
    let x = x.clamp(f64::from(SUPPORT_MIN), f64::from(SUPPORT_MAX));
    let mut p = vec![0.0; SUPPORT_SIZE];
    let low = x.floor();
    let frac = x - low;
    let low_index = (low as i32 - SUPPORT_MIN) as usize;
    p[low_index] += 1.0 - frac;
    if frac > 0.0 {
        p[low_index + 1] += frac;
    }
    SupportDistribution(p)
}

pub fn support_to_scalar(dist: &SupportDistribution) -> f64 {
    dist.0.iter().enumerate().map(|(i, p)| support_value(i) * p).sum()
}

/// Raw-scale scalar from value/reward logits.
pub fn decode_scalar(logits: &[f64]) -> Result<f64> {
    Ok(inverse_transform_scalar(support_to_scalar(&SupportDistribution::from_logits(logits)?)))
}

/// Categorical training target `phi(h(x))` for a raw-scale scalar.
pub fn encode_target(x: f64) -> SupportDistribution {
    scalar_to_support(transform_scalar(x))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Output of one prediction (and optionally dynamics) call.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub policy: GaussianPolicy,
    pub value_logits: Vec<f64>,
    pub reward_logits: Option<Vec<f64>>,
}

/// Network sizes. Hidden layer lists exclude input and output widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub observation_dim: usize,
    pub action_dim: usize,
    pub hidden_dim: usize,
    pub representation_layers: Vec<usize>,
    pub dynamics_layers: Vec<usize>,
    pub head_layers: Vec<usize>,
}

impl ModelConfig {
    pub fn new(observation_dim: usize, action_dim: usize) -> Self {
        Self {
            observation_dim,
            action_dim,
            hidden_dim: 32,
            representation_layers: vec![64, 64],
            dynamics_layers: vec![64, 64],
            head_layers: vec![64, 64],
        }
    }

    fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }

    fn specs(&self) -> [DenseNetworkSpec; 5] {
        let d = self.hidden_dim;
        let a = self.action_dim;
        [
            DenseNetworkSpec::new(Self::widths(self.observation_dim, &self.representation_layers, d), OutputActivation::Identity),
            DenseNetworkSpec::new(Self::widths(d + a, &self.dynamics_layers, d + SUPPORT_SIZE), OutputActivation::Identity),
            DenseNetworkSpec::new(Self::widths(d, &self.head_layers, a), OutputActivation::Tanh),
            DenseNetworkSpec::new(Self::widths(d, &self.head_layers, a), OutputActivation::Identity),
            DenseNetworkSpec::new(Self::widths(d, &self.head_layers, SUPPORT_SIZE), OutputActivation::Identity),
        ]
    }
}

const PREFIXES: [&str; 5] = ["representation", "dynamics", "policy_mean", "policy_log_std", "value"];

/// Structure of the learned model; parameters live in a separate store so
/// immutable snapshots can be evaluated concurrently.
#[derive(Clone, Debug)]
pub struct MuZeroNetwork {
    config: ModelConfig,
    representation: DenseNetwork,
    dynamics: DenseNetwork,
    policy_mean: DenseNetwork,
    policy_log_std: DenseNetwork,
    value: DenseNetwork,
}

/// Tape handles for one prediction call.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub mean: Var,
    pub log_std: Var,
    pub value_logits: Var,
}

impl MuZeroNetwork {
    pub fn new<R: Rng>(config: ModelConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        if config.observation_dim == 0 || config.action_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        for (spec, prefix) in config.specs().into_iter().zip(PREFIXES) {
            DenseNetwork::new(spec, store, prefix, rng)?;
        }
        Self::bind(config, store)
    }

    pub fn bind(config: ModelConfig, store: &ParameterStore) -> Result<Self> {
        let [r, d, pm, ps, v] = config.specs();
        Ok(Self {
            representation: DenseNetwork::bind(r, store, PREFIXES[0])?,
            dynamics: DenseNetwork::bind(d, store, PREFIXES[1])?,
            policy_mean: DenseNetwork::bind(pm, store, PREFIXES[2])?,
            policy_log_std: DenseNetwork::bind(ps, store, PREFIXES[3])?,
            value: DenseNetwork::bind(v, store, PREFIXES[4])?,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn networks(&self) -> [&DenseNetwork; 5] {
        [&self.representation, &self.dynamics, &self.policy_mean, &self.policy_log_std, &self.value]
    }

    fn check_action(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.config.action_dim {
            return Err(Error::Input(format!(
                "action has {} components, model expects {}",
                action.len(),
                self.config.action_dim
            )));
        }
        ensure_finite(action, "action")?;
        if action.iter().any(|a| a.abs() > 1.0 + 1e-9) {
            return Err(Error::Input(format!("action {action:?} outside [-1, 1]")));
        }
        Ok(())
    }

    pub fn represent(&self, params: &ParameterStore, observation: &[f64]) -> Result<HiddenState> {
        ensure_finite(observation, "observation")?;
        if observation.len() != self.config.observation_dim {
            return Err(Error::Input(format!(
                "observation has {} components, model expects {}",
                observation.len(),
                self.config.observation_dim
            )));
        }
        Ok(HiddenState(min_max_scale(&self.representation.eval(params, observation)?)))
    }

    /// Returns `(reward_logits, next_state)`.
    pub fn dynamics(&self, params: &ParameterStore, state: &HiddenState, action: &[f64]) -> Result<(Vec<f64>, HiddenState)> {
        ensure_finite(state.values(), "hidden state")?;
        self.check_action(action)?;
        let mut input = Vec::with_capacity(state.len() + action.len());
        input.extend_from_slice(state.values());
        input.extend_from_slice(action);
        let out = self.dynamics.eval(params, &input)?;
        let d = self.config.hidden_dim;
        Ok((out[d..].to_vec(), HiddenState(min_max_scale(&out[..d]))))
    }

    pub fn predict(&self, params: &ParameterStore, state: &HiddenState) -> Result<ModelOutput> {
        ensure_finite(state.values(), "hidden state")?;
        let mean = self.policy_mean.eval(params, state.values())?;
        let log_std = self.policy_log_std.eval(params, state.values())?;
        let value_logits = self.value.eval(params, state.values())?;
        Ok(ModelOutput { policy: GaussianPolicy::new(mean, log_std), value_logits, reward_logits: None })
    }

    pub fn represent_taped(&self, params: &ParameterStore, tape: &mut Tape, observation: &[f64]) -> Result<Var> {
        ensure_finite(observation, "observation")?;
        let x = tape.leaf(observation);
        let raw = self.representation.forward(params, tape, x)?;
        Ok(tape.min_max_scale(raw))
    }

    /// Returns `(reward_logits, next_state)` handles.
    pub fn dynamics_taped(&self, params: &ParameterStore, tape: &mut Tape, state: Var, action: &[f64]) -> Result<(Var, Var)> {
        self.check_action(action)?;
        let a = tape.leaf(action);
        let input = tape.concat(state, a);
        let out = self.dynamics.forward(params, tape, input)?;
        let d = self.config.hidden_dim;
        let raw_next = tape.slice(out, 0, d)?;
        let reward = tape.slice(out, d, SUPPORT_SIZE)?;
        Ok((reward, tape.min_max_scale(raw_next)))
    }

    pub fn predict_taped(&self, params: &ParameterStore, tape: &mut Tape, state: Var) -> Result<PredictionVars> {
        let mean = self.policy_mean.forward(params, tape, state)?;
        let raw_log_std = self.policy_log_std.forward(params, tape, state)?;
        let log_std = tape.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
        let value_logits = self.value.forward(params, tape, state)?;
        Ok(PredictionVars { mean, log_std, value_logits })
    }
}

/// A network plus one immutable parameter snapshot, usable by the search.
#[derive(Clone, Debug)]
pub struct LearnedModel {
    pub network: Arc<MuZeroNetwork>,
    pub params: Arc<ParameterStore>,
}

impl LearnedModel {
    pub fn new(network: Arc<MuZeroNetwork>, params: Arc<ParameterStore>) -> Self {
        Self { network, params }
    }
}

impl SearchModel for LearnedModel {
    fn represent(&self, observation: &[f64]) -> Result<HiddenState> {
        self.network.represent(&self.params, observation)
    }

    fn dynamics(&self, state: &HiddenState, action: &[f64]) -> Result<(f64, HiddenState)> {
        let (reward_logits, next) = self.network.dynamics(&self.params, state, action)?;
        Ok((decode_scalar(&reward_logits)?, next))
    }

    fn predict(&self, state: &HiddenState) -> Result<(GaussianPolicy, f64)> {
        let out = self.network.predict(&self.params, state)?;
        Ok((out.policy, decode_scalar(&out.value_logits)?))
    }
}
