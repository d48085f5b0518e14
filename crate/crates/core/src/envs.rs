//! Native control environments and an analytic bandit.
//!
//! All environments take actions in the `[-1, 1]` box and are pure state
//! machines: the next state depends only on the current state and action,
//! and `reset` depends only on the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcts::SearchModel;
use crate::model::{GaussianPolicy, HiddenState};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub observation_dim: usize,
    pub action_dim: usize,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> StepResult;
}

pub const ENV_KEYS: [&str; 3] = ["cartpole", "double-pendulum", "bandit"];

pub fn make_env(key: &str) -> Result<Box<dyn Environment>> {
    match key {
        "cartpole" => Ok(Box::new(CartPole::default())),
        "double-pendulum" => Ok(Box::new(DoublePendulum::default())),
        "bandit" => Ok(Box::new(Bandit)),
        other => Err(Error::Config(format!("unknown environment '{other}' (expected one of {ENV_KEYS:?})"))),
    }
}

fn reset_noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, "env-reset", 0);
    (0..n).map(|_| rng.gen_range(-0.01..=0.01)).collect()
}

fn action_scalar(action: &[f64]) -> f64 {
    action.first().copied().unwrap_or(0.0).clamp(-1.0, 1.0)
}

// ---------------------------------------------------------------------------
// Cart-pole

pub const CARTPOLE_DT: f64 = 0.02;
pub const CARTPOLE_MAX_STEPS: usize = 1000;
const GRAVITY: f64 = 9.81;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;
const CART_FORCE: f64 = 10.0;
pub const CARTPOLE_ANGLE_LIMIT: f64 = 0.2;
pub const CARTPOLE_POSITION_LIMIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn observation(&self) -> Vec<f64> {
        vec![self.x, self.theta.sin(), self.theta.cos(), self.x_dot, self.theta_dot]
    }

    pub fn in_bounds(&self) -> bool {
        self.theta.abs() <= CARTPOLE_ANGLE_LIMIT && self.x.abs() <= CARTPOLE_POSITION_LIMIT
    }
}

/// One semi-implicit Euler step; the action is scaled to a force in
/// `[-10, 10]` N. Returns the next state and `(reward, terminated)`.
pub fn step_cartpole(s: CartPoleState, action: f64) -> (CartPoleState, f64, bool) {
    if !s.in_bounds() {
        return (s, 0.0, true);
    }
    let force = CART_FORCE * action.clamp(-1.0, 1.0);
    let total_mass = CART_MASS + POLE_MASS;
    let pole_ml = POLE_MASS * POLE_HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pole_ml * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
    let x_acc = temp - pole_ml * theta_acc * cos / total_mass;
    let x_dot = s.x_dot + CARTPOLE_DT * x_acc;
    let theta_dot = s.theta_dot + CARTPOLE_DT * theta_acc;
    let next = CartPoleState { x: s.x + CARTPOLE_DT * x_dot, x_dot, theta: s.theta + CARTPOLE_DT * theta_dot, theta_dot };
    if next.in_bounds() {
        (next, 1.0, false)
    } else {
        (next, 0.0, true)
    }
}

/// Balance a pole on a cart for up to 1000 steps; +1 per step in bounds.
#[derive(Clone, Debug, Default)]
pub struct CartPole {
    pub state: CartPoleState,
    pub steps: usize,
}

impl Environment for CartPole {
    fn spec(&self) -> EnvSpec {
        EnvSpec { observation_dim: 5, action_dim: 1, max_steps: CARTPOLE_MAX_STEPS }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let n = reset_noise(seed, 4);
        self.state = CartPoleState { x: n[0], x_dot: n[1], theta: n[2], theta_dot: n[3] };
        self.steps = 0;
        self.state.observation()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let (next, reward, terminated) = step_cartpole(self.state, action_scalar(action));
        self.state = next;
        self.steps += 1;
        StepResult { observation: next.observation(), reward, done: terminated || self.steps >= CARTPOLE_MAX_STEPS }
    }
}

// ---------------------------------------------------------------------------
// Double pendulum on a cart
//
// Point masses at the end of each massless link; angles measured from the
// upright vertical. Cart 1 kg, masses 0.2 kg, links 0.6 m, force up to
// 10 N. Each 0.02 s environment step is four RK4 substeps.

pub const DOUBLE_DT: f64 = 0.02;
pub const DOUBLE_SUBSTEPS: usize = 4;
pub const DOUBLE_MAX_STEPS: usize = 1000;
pub const DOUBLE_ALIVE_BONUS: f64 = 10.0;
const DP_CART_MASS: f64 = 1.0;
const DP_MASS1: f64 = 0.2;
const DP_MASS2: f64 = 0.2;
const DP_LINK1: f64 = 0.6;
const DP_LINK2: f64 = 0.6;
const DP_FORCE: f64 = 10.0;
/// Episode ends once the tip drops to this height.
pub const DOUBLE_TIP_MIN_HEIGHT: f64 = 1.0;

/// `[x, theta1, theta2, x_dot, theta1_dot, theta2_dot]`
pub type DoublePendulumState = [f64; 6];

fn double_pendulum_derivative(s: &DoublePendulumState, force: f64) -> DoublePendulumState {
    let [_, t1, t2, xd, t1d, t2d] = *s;
    let (m1, m2, l1, l2) = (DP_MASS1, DP_MASS2, DP_LINK1, DP_LINK2);
    let (s1, c1) = t1.sin_cos();
    let (s2, c2) = t2.sin_cos();
    let (s12, c12) = (t1 - t2).sin_cos();
    let mass = [
        [DP_CART_MASS + m1 + m2, (m1 + m2) * l1 * c1, m2 * l2 * c2],
        [(m1 + m2) * l1 * c1, (m1 + m2) * l1 * l1, m2 * l1 * l2 * c12],
        [m2 * l2 * c2, m2 * l1 * l2 * c12, m2 * l2 * l2],
    ];
    let rhs = [
        force + (m1 + m2) * l1 * s1 * t1d * t1d + m2 * l2 * s2 * t2d * t2d,
        -m2 * l1 * l2 * s12 * t2d * t2d + (m1 + m2) * GRAVITY * l1 * s1,
        m2 * l1 * l2 * s12 * t1d * t1d + m2 * GRAVITY * l2 * s2,
    ];
    let acc = solve3(mass, rhs);
    [xd, t1d, t2d, acc[0], acc[1], acc[2]]
}

/// Cramer's rule for the (symmetric positive definite) 3x3 mass matrix.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *o = det(m) / d;
    }
    out
}

/// One RK4 step of the unconstrained cart/double-pendulum ODE.
pub fn integrate_double_pendulum(s: &DoublePendulumState, force: f64, dt: f64) -> DoublePendulumState {
    let add = |a: &DoublePendulumState, k: &DoublePendulumState, h: f64| {
        let mut o = *a;
        o.iter_mut().zip(k).for_each(|(x, d)| *x += h * d);
        o
    };
    let k1 = double_pendulum_derivative(s, force);
    let k2 = double_pendulum_derivative(&add(s, &k1, dt / 2.0), force);
    let k3 = double_pendulum_derivative(&add(s, &k2, dt / 2.0), force);
    let k4 = double_pendulum_derivative(&add(s, &k3, dt), force);
    let mut out = *s;
    for i in 0..6 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Kinetic plus potential energy.
pub fn double_pendulum_energy(s: &DoublePendulumState) -> f64 {
    let [_, t1, t2, xd, t1d, t2d] = *s;
    let (m1, m2, l1, l2) = (DP_MASS1, DP_MASS2, DP_LINK1, DP_LINK2);
    let v1x = xd + l1 * t1.cos() * t1d;
    let v1y = -l1 * t1.sin() * t1d;
    let v2x = v1x + l2 * t2.cos() * t2d;
    let v2y = v1y - l2 * t2.sin() * t2d;
    let kinetic = 0.5 * DP_CART_MASS * xd * xd + 0.5 * m1 * (v1x * v1x + v1y * v1y) + 0.5 * m2 * (v2x * v2x + v2y * v2y);
    let potential = GRAVITY * (m1 * l1 * t1.cos() + m2 * (l1 * t1.cos() + l2 * t2.cos()));
    kinetic + potential
}

/// Tip position `(x, y)` relative to the cart rail.
pub fn double_pendulum_tip(s: &DoublePendulumState) -> (f64, f64) {
    let [x, t1, t2, ..] = *s;
    (x + DP_LINK1 * t1.sin() + DP_LINK2 * t2.sin(), DP_LINK1 * t1.cos() + DP_LINK2 * t2.cos())
}

/// Advances one environment step of [`DOUBLE_DT`] under a constant force.
pub fn advance_double_pendulum(s: &DoublePendulumState, force: f64) -> DoublePendulumState {
    let h = DOUBLE_DT / DOUBLE_SUBSTEPS as f64;
    (0..DOUBLE_SUBSTEPS).fold(*s, |acc, _| integrate_double_pendulum(&acc, force, h))
}

/// Alive bonus minus a penalty on the tip's distance from upright.
pub fn step_double_pendulum(s: &DoublePendulumState, action: f64) -> (DoublePendulumState, f64, bool) {
    let next = advance_double_pendulum(s, DP_FORCE * action.clamp(-1.0, 1.0));
    let (tip_x, tip_y) = double_pendulum_tip(&next);
    if tip_y <= DOUBLE_TIP_MIN_HEIGHT {
        return (next, 0.0, true);
    }
    let upright_x = next[0];
    let penalty = 0.01 * (tip_x - upright_x).powi(2) + (tip_y - (DP_LINK1 + DP_LINK2)).powi(2);
    (next, DOUBLE_ALIVE_BONUS - penalty, false)
}

pub fn double_pendulum_observation(s: &DoublePendulumState) -> Vec<f64> {
    let [x, t1, t2, xd, t1d, t2d] = *s;
    vec![x, t1.sin(), t2.sin(), t1.cos(), t2.cos(), xd, t1d, t2d]
}

#[derive(Clone, Debug, Default)]
pub struct DoublePendulum {
    pub state: DoublePendulumState,
    pub steps: usize,
}

impl Environment for DoublePendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec { observation_dim: 8, action_dim: 1, max_steps: DOUBLE_MAX_STEPS }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let n = reset_noise(seed, 6);
        self.state.copy_from_slice(&n);
        self.steps = 0;
        double_pendulum_observation(&self.state)
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let (next, reward, terminated) = step_double_pendulum(&self.state, action_scalar(action));
        self.state = next;
        self.steps += 1;
        StepResult {
            observation: double_pendulum_observation(&next),
            reward,
            done: terminated || self.steps >= DOUBLE_MAX_STEPS,
        }
    }
}

// ---------------------------------------------------------------------------
// Bandit

pub const BANDIT_OPTIMUM: f64 = 0.3;

/// `1 - (a - 0.3)^2`
pub fn bandit_reward(action: f64) -> f64 {
    1.0 - (action - BANDIT_OPTIMUM).powi(2)
}

/// Single-step episode with a known quadratic reward.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bandit;

impl Environment for Bandit {
    fn spec(&self) -> EnvSpec {
        EnvSpec { observation_dim: 1, action_dim: 1, max_steps: 1 }
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        StepResult { observation: vec![1.0], reward: bandit_reward(action_scalar(action)), done: true }
    }
}

/// Exact model of [`Bandit`] for search tests. The hidden state is the depth
/// flag; only the first action is rewarded and every value is zero.
#[derive(Clone, Debug)]
pub struct BanditModel {
    pub prior: GaussianPolicy,
}

impl Default for BanditModel {
    fn default() -> Self {
        Self { prior: GaussianPolicy::new(vec![0.0], vec![0.0]) }
    }
}

impl SearchModel for BanditModel {
    fn represent(&self, _observation: &[f64]) -> Result<HiddenState> {
        Ok(HiddenState(vec![0.0]))
    }

    fn dynamics(&self, state: &HiddenState, action: &[f64]) -> Result<(f64, HiddenState)> {
        let reward = if state.0[0] == 0.0 { bandit_reward(action_scalar(action)) } else { 0.0 };
        Ok((reward, HiddenState(vec![1.0])))
    }

    fn predict(&self, _state: &HiddenState) -> Result<(GaussianPolicy, f64)> {
        Ok((self.prior.clone(), 0.0))
    }
}
