//! Self-play actors and the weight snapshot slot shared with the trainer.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{make_env, Environment};
use crate::error::{Error, Result};
use crate::mcts::{choose_action, run_search_with_rng, SearchConfig, SearchModel};
use crate::model::{LearnedModel, MuZeroNetwork};
use crate::nn::ParameterStore;
use crate::replay::{Episode, ReplayBuffer, Transition};
use crate::seed::{derive_seed, rng_for};

/// Immutable published weights.
#[derive(Debug)]
pub struct Snapshot {
    pub params: Arc<ParameterStore>,
    pub version: u64,
    /// Trainer step at publication time.
    pub train_step: u64,
    pub checksum: u64,
}

pub type SnapshotHandle = Arc<Snapshot>;

/// Single-slot exchange: the trainer swaps in a new `Arc`, readers clone
/// whichever one is current.
#[derive(Debug)]
pub struct SnapshotSlot {
    current: RwLock<SnapshotHandle>,
}

impl SnapshotSlot {
    /// Slot holding `initial` as version 0.
    pub fn new(initial: ParameterStore) -> Self {
        let checksum = initial.checksum();
        let snap = Snapshot { params: Arc::new(initial), version: 0, train_step: 0, checksum };
        Self { current: RwLock::new(Arc::new(snap)) }
    }

    pub fn publish(&self, params: ParameterStore, train_step: u64) -> SnapshotHandle {
        let checksum = params.checksum();
        let params = Arc::new(params);
        let mut slot = self.current.write().unwrap_or_else(|e| e.into_inner());
        let snap = Arc::new(Snapshot { params, version: slot.version + 1, train_step, checksum });
        *slot = Arc::clone(&snap);
        snap
    }

    pub fn fetch_latest(&self) -> SnapshotHandle {
        Arc::clone(&self.current.read().unwrap_or_else(|e| e.into_inner()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStep {
    /// First training step at which `temperature` applies.
    pub from_step: u64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActorConfig {
    pub actors: usize,
    /// Empty means the default decay over the run's total steps.
    pub temperature_schedule: Vec<TemperatureStep>,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self { actors: 3, temperature_schedule: Vec::new() }
    }
}

/// T = 1 for the first half of training, 0.5 until three quarters, then 0.25.
pub fn default_temperature_schedule(total_steps: u64) -> Vec<TemperatureStep> {
    vec![
        TemperatureStep { from_step: 0, temperature: 1.0 },
        TemperatureStep { from_step: total_steps / 2, temperature: 0.5 },
        TemperatureStep { from_step: total_steps * 3 / 4, temperature: 0.25 },
    ]
}

impl ActorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actors == 0 {
            return Err(Error::Config("at least one actor is required".into()));
        }
        for w in self.temperature_schedule.windows(2) {
            if w[1].from_step <= w[0].from_step {
                return Err(Error::Config("temperature schedule thresholds must be strictly increasing".into()));
            }
        }
        if self.temperature_schedule.iter().any(|s| !(s.temperature >= 0.0) || !s.temperature.is_finite()) {
            return Err(Error::Config("temperatures must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Temperature in force at `train_step`.
    pub fn temperature_at(&self, train_step: u64) -> f64 {
        self.temperature_schedule
            .iter()
            .take_while(|s| s.from_step <= train_step)
            .last()
            .or(self.temperature_schedule.first())
            .map_or(1.0, |s| s.temperature)
    }
}

/// Plays one episode with search at every step.
pub fn play_episode<M: SearchModel, R: Rng>(
    env: &mut dyn Environment,
    model: &M,
    search: &SearchConfig,
    temperature: f64,
    reset_seed: u64,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let max_steps = env.spec().max_steps;
    let mut observation = env.reset(reset_seed);
    let mut transitions = Vec::new();
    loop {
        let (result, _) = run_search_with_rng(&observation, model, search, rng)?;
        let action = choose_action(&result, temperature, rng)?;
        let step = env.step(&action);
        if !step.reward.is_finite() || step.observation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Search(format!("environment produced a non-finite step at t={}", transitions.len())));
        }
        let done = step.done || transitions.len() + 1 >= max_steps;
        transitions.push(Transition {
            observation: std::mem::replace(&mut observation, step.observation),
            action,
            reward: step.reward,
            search_value: result.root_value,
            root_actions: result.root_actions,
            root_visit_counts: result.root_visit_counts,
            done,
        });
        if done {
            return Ok(transitions);
        }
    }
}

#[derive(Debug, Default)]
pub struct ActorStats {
    pub episodes: AtomicU64,
    pub transitions: AtomicU64,
    pub errors: AtomicU64,
    /// Bits of the most recent episode return.
    last_return: AtomicU64,
}

impl ActorStats {
    pub fn last_return(&self) -> f64 {
        f64::from_bits(self.last_return.load(Ordering::Relaxed))
    }

    pub(crate) fn record(&self, steps: usize, ret: f64) {
        self.episodes.fetch_add(1, Ordering::Relaxed);
        self.transitions.fetch_add(steps as u64, Ordering::Relaxed);
        self.last_return.store(ret.to_bits(), Ordering::Relaxed);
    }
}

/// Pauses actors once collected transitions reach
/// `warmup + per_step * (trainer_steps + 1)`.
#[derive(Clone, Copy, Debug)]
pub struct Throttle<'a> {
    pub trainer_steps: &'a AtomicU64,
    pub warmup: u64,
    pub per_step: f64,
}

impl Throttle<'_> {
    fn allows(&self, collected: u64) -> bool {
        let steps = self.trainer_steps.load(Ordering::Relaxed) as f64;
        (collected as f64) < self.warmup as f64 + self.per_step * (steps + 1.0)
    }
}

/// Everything an actor thread needs.
pub struct ActorContext<'a> {
    pub actor_id: u64,
    pub master_seed: u64,
    pub env_key: &'a str,
    pub network: Arc<MuZeroNetwork>,
    pub slot: &'a SnapshotSlot,
    pub buffer: &'a Mutex<ReplayBuffer>,
    pub search: &'a SearchConfig,
    pub actors: &'a ActorConfig,
    pub stop: &'a AtomicBool,
    pub stats: &'a ActorStats,
    pub throttle: Option<Throttle<'a>>,
}

/// Produces episodes until `stop` is set. Failed episodes are dropped and
/// counted; the loop keeps going.
pub fn actor_loop(ctx: ActorContext<'_>) -> Result<()> {
    let mut env = make_env(ctx.env_key)?;
    let mut rng = rng_for(ctx.master_seed, "actor", ctx.actor_id);
    let mut episode_index = 0u64;
    while !ctx.stop.load(Ordering::Relaxed) {
        if let Some(t) = &ctx.throttle {
            if !t.allows(ctx.stats.transitions.load(Ordering::Relaxed)) {
                std::thread::sleep(std::time::Duration::from_millis(2));
                continue;
            }
        }
        let snapshot = ctx.slot.fetch_latest();
        let model = LearnedModel::new(Arc::clone(&ctx.network), Arc::clone(&snapshot.params));
        let temperature = ctx.actors.temperature_at(snapshot.train_step);
        let reset_seed = derive_seed(ctx.master_seed, "actor-reset", (ctx.actor_id << 40) | episode_index);
        episode_index += 1;
        let played = play_episode(env.as_mut(), &model, ctx.search, temperature, reset_seed, &mut rng).and_then(|trs| {
            let (n, gamma) = {
                let buf = ctx.buffer.lock().unwrap_or_else(|e| e.into_inner());
                (buf.config().n_step, buf.config().discount)
            };
            Episode::with_initial_priorities(trs, n, gamma)
        });
        match played {
            Ok(episode) => {
                ctx.stats.record(episode.len(), episode.total_reward());
                ctx.buffer.lock().unwrap_or_else(|e| e.into_inner()).push_episode(episode);
            }
            Err(e) => {
                ctx.stats.errors.fetch_add(1, Ordering::Relaxed);
                log::warn!("actor {} dropped an episode: {e}", ctx.actor_id);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Bandit, BanditModel, CartPole, BANDIT_OPTIMUM};
    use crate::model::ModelConfig;
    use crate::nn::Tensor;
    use crate::replay::ReplayConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::time::Duration;

    fn store_with(value: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.register("a", Tensor::from_vec(&[64], vec![value; 64]).unwrap()).unwrap();
        s.register("b", Tensor::from_vec(&[8, 8], vec![-value; 64]).unwrap()).unwrap();
        s
    }

    #[test]
    fn fetch_before_publish_is_version_zero() {
        let slot = SnapshotSlot::new(store_with(1.0));
        let s = slot.fetch_latest();
        assert_eq!(s.version, 0);
        assert_eq!(s.checksum, store_with(1.0).checksum());
        let p = slot.publish(store_with(2.0), 10);
        assert_eq!(p.version, 1);
        assert!(slot.fetch_latest().version >= s.version);
    }

    #[test]
    fn concurrent_fetches_see_whole_snapshots() {
        let slot = SnapshotSlot::new(store_with(0.0));
        let published: Mutex<HashSet<u64>> = Mutex::new(HashSet::from([store_with(0.0).checksum()]));
        let stop = AtomicBool::new(false);
        std::thread::scope(|scope| {
            let mut readers = Vec::new();
            for _ in 0..3 {
                readers.push(scope.spawn(|| {
                    let mut seen = Vec::new();
                    let mut last = 0;
                    while !stop.load(Ordering::Relaxed) {
                        let s = slot.fetch_latest();
                        assert!(s.version >= last);
                        last = s.version;
                        seen.push((s.params.checksum(), s.checksum));
                    }
                    seen
                }));
            }
            for i in 1..=1000 {
                let store = store_with(i as f64);
                published.lock().unwrap().insert(store.checksum());
                slot.publish(store, i);
            }
            stop.store(true, Ordering::Relaxed);
            let published = published.lock().unwrap();
            for r in readers {
                for (actual, recorded) in r.join().unwrap() {
                    assert_eq!(actual, recorded);
                    assert!(published.contains(&actual));
                }
            }
        });
        assert_eq!(slot.fetch_latest().version, 1000);
    }

    #[test]
    fn temperature_schedule_lookup() {
        let cfg = ActorConfig { actors: 1, temperature_schedule: default_temperature_schedule(100) };
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.temperature_at(0), 1.0);
        assert_eq!(cfg.temperature_at(49), 1.0);
        assert_eq!(cfg.temperature_at(50), 0.5);
        assert_eq!(cfg.temperature_at(75), 0.25);
        assert_eq!(cfg.temperature_at(10_000), 0.25);
        let bad = ActorConfig { actors: 1, temperature_schedule: default_temperature_schedule(0) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn greedy_episode_records_max_visit_actions() {
        let mut env = CartPole::default();
        let search = SearchConfig { num_simulations: 12, ..SearchConfig::default() };
        let model = BanditModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trs = play_episode(&mut env, &model, &search, 0.0, 3, &mut rng).unwrap();
        assert!(!trs.is_empty() && trs.last().unwrap().done);
        for t in &trs {
            assert!(!t.root_actions.is_empty());
            assert_eq!(t.root_actions.len(), t.root_visit_counts.len());
            let max = *t.root_visit_counts.iter().max().unwrap();
            let first_max = t.root_visit_counts.iter().position(|&c| c == max).unwrap();
            assert_eq!(t.action, t.root_actions[first_max]);
        }
    }

    #[test]
    fn bandit_actions_concentrate_near_optimum() {
        let search = SearchConfig { num_simulations: 512, ..SearchConfig::default() };
        let model = BanditModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mean = 0.0;
        let n = 20;
        for i in 0..n {
            let trs = play_episode(&mut Bandit, &model, &search, 0.0, i, &mut rng).unwrap();
            assert_eq!(trs.len(), 1);
            mean += trs[0].action[0] / n as f64;
        }
        assert!((mean - BANDIT_OPTIMUM).abs() < 0.1, "mean action {mean}");
    }

    #[test]
    fn actor_loop_fills_buffer() {
        let config = ModelConfig { hidden_dim: 4, representation_layers: vec![8], dynamics_layers: vec![8], head_layers: vec![8], ..ModelConfig::new(1, 1) };
        let mut store = ParameterStore::new();
        let network = Arc::new(MuZeroNetwork::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
        let slot = SnapshotSlot::new(store);
        let buffer = Mutex::new(ReplayBuffer::new(ReplayConfig::default()).unwrap());
        let search = SearchConfig { num_simulations: 4, ..SearchConfig::default() };
        let actors = ActorConfig { actors: 2, temperature_schedule: default_temperature_schedule(10) };
        let stop = AtomicBool::new(false);
        let stats = ActorStats::default();
        std::thread::scope(|scope| {
            for id in 0..2 {
                let ctx = ActorContext {
                    actor_id: id,
                    master_seed: 9,
                    env_key: "bandit",
                    network: Arc::clone(&network),
                    slot: &slot,
                    buffer: &buffer,
                    search: &search,
                    actors: &actors,
                    stop: &stop,
                    stats: &stats,
                    throttle: None,
                };
                scope.spawn(move || actor_loop(ctx).unwrap());
            }
            let mut last = 0;
            for _ in 0..200 {
                std::thread::sleep(Duration::from_millis(5));
                let n = buffer.lock().unwrap().episodes_added();
                assert!(n >= last);
                last = n;
                if n >= 20 {
                    break;
                }
            }
            stop.store(true, Ordering::Relaxed);
        });
        assert!(buffer.lock().unwrap().episodes_added() >= 20);
        assert_eq!(stats.errors.load(Ordering::Relaxed), 0);
        assert_eq!(stats.episodes.load(Ordering::Relaxed), buffer.lock().unwrap().episodes_added());
    }
}
