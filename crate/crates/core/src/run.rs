//! Run configuration, training orchestration, evaluation and checkpoints.
//!
//! Output layout of a training run:
//!
//! ```text
//! <out>/config.resolved.json   config with every default filled in
//! <out>/train_metrics.csv      one row per log interval
//! <out>/eval_metrics.csv       one row per evaluation
//! <out>/checkpoint_<step>.json model config + parameters
//! ```
//!
//! With a single actor the run is fully sequential (play an episode, then
//! train) and reproducible from the seed. With several actors, actor threads
//! and the trainer run concurrently.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::make_env;
use crate::error::{Error, Result};
use crate::mcts::SearchConfig;
use crate::model::{LearnedModel, ModelConfig, MuZeroNetwork};
use crate::nn::{Checkpoint, ParameterStore};
use crate::replay::{Episode, ReplayBuffer, ReplayConfig};
use crate::seed::{derive_seed, rng_for};
use crate::selfplay::{
    actor_loop, default_temperature_schedule, play_episode, ActorConfig, ActorContext, ActorStats, SnapshotSlot,
    Throttle,
};
use crate::training::{LossBreakdown, TrainConfig, Trainer};

pub const TRAIN_METRICS_FILE: &str = "train_metrics.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// Hidden sizes of the three learned functions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSizes {
    pub hidden_dim: usize,
    pub representation_layers: Vec<usize>,
    pub dynamics_layers: Vec<usize>,
    pub head_layers: Vec<usize>,
}

impl Default for ModelSizes {
    fn default() -> Self {
        let c = ModelConfig::new(0, 0);
        Self {
            hidden_dim: c.hidden_dim,
            representation_layers: c.representation_layers,
            dynamics_layers: c.dynamics_layers,
            head_layers: c.head_layers,
        }
    }
}

impl ModelSizes {
    pub fn model_config(&self, observation_dim: usize, action_dim: usize) -> ModelConfig {
        ModelConfig {
            observation_dim,
            action_dim,
            hidden_dim: self.hidden_dim,
            representation_layers: self.representation_layers.clone(),
            dynamics_layers: self.dynamics_layers.clone(),
            head_layers: self.head_layers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One of [`crate::envs::ENV_KEYS`].
    pub env: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub total_steps: u64,
    /// Transitions collected before the first training step.
    pub warmup_transitions: usize,
    /// Upper bound on training steps per collected transition (after warmup).
    pub train_ratio: f64,
    /// With several actors, pause acting once collected transitions reach
    /// `warmup_transitions + max_transitions_per_step * (trainer_steps + 1)`.
    pub max_transitions_per_step: Option<f64>,
    /// Trainer steps between weight publications to the actors.
    pub publish_interval: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Defaults to `search.num_simulations`.
    pub eval_simulations: Option<usize>,
    pub checkpoint_interval: u64,
    /// Stop once an evaluation mean reaches this score.
    pub target_score: Option<f64>,
    pub model: ModelSizes,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub actors: ActorConfig,
    pub replay: ReplayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "cartpole".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            total_steps: 15_000,
            warmup_transitions: 1_000,
            train_ratio: 1.0,
            max_transitions_per_step: None,
            publish_interval: 10,
            log_interval: 10,
            eval_interval: 500,
            eval_episodes: 5,
            eval_simulations: None,
            checkpoint_interval: 1_000,
            target_score: None,
            model: ModelSizes::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            actors: ActorConfig::default(),
            replay: ReplayConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills derived defaults and checks every sub-config.
    pub fn resolve(mut self) -> Result<Self> {
        if self.actors.temperature_schedule.is_empty() {
            self.actors.temperature_schedule = default_temperature_schedule(self.total_steps.max(4));
        }
        make_env(&self.env)?;
        self.search.validate()?;
        self.train.validate()?;
        self.actors.validate()?;
        self.replay.validate()?;
        if self.replay.unroll_steps != self.train.unroll_steps {
            return Err(Error::Config(format!(
                "replay.unroll_steps ({}) must equal train.unroll_steps ({})",
                self.replay.unroll_steps, self.train.unroll_steps
            )));
        }
        if self.replay.discount != self.search.discount {
            return Err(Error::Config(format!(
                "replay.discount ({}) must equal search.discount ({})",
                self.replay.discount, self.search.discount
            )));
        }
        if !(self.train_ratio > 0.0) {
            return Err(Error::Config("train_ratio must be > 0".into()));
        }
        if self.max_transitions_per_step.is_some_and(|r| !(r * self.train_ratio >= 1.0)) {
            return Err(Error::Config("max_transitions_per_step * train_ratio must be >= 1".into()));
        }
        if self.publish_interval == 0 || self.log_interval == 0 || self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("publish, log, eval and checkpoint intervals must be >= 1".into()));
        }
        if self.eval_simulations == Some(0) {
            return Err(Error::Config("eval_simulations must be >= 1".into()));
        }
        let sizes = &self.model;
        if sizes.hidden_dim == 0 || [&sizes.representation_layers, &sizes.dynamics_layers, &sizes.head_layers].iter().any(|l| l.contains(&0)) {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        Ok(self)
    }

    pub fn eval_search(&self) -> SearchConfig {
        SearchConfig { num_simulations: self.eval_simulations.unwrap_or(self.search.num_simulations), ..self.search.clone() }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub env: String,
    pub step: u64,
    pub model: ModelConfig,
    pub params: Checkpoint,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step}.json"))
}

pub fn save_checkpoint(dir: &Path, env: &str, step: u64, network: &MuZeroNetwork, params: &ParameterStore) -> Result<PathBuf> {
    let path = checkpoint_path(dir, step);
    let ckpt = RunCheckpoint { env: env.into(), step, model: network.config().clone(), params: params.to_checkpoint() };
    let tmp = path.with_extension("json.tmp");
    serde_json::to_writer(std::io::BufWriter::new(File::create(&tmp)?), &ckpt)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Loads a checkpoint and rebuilds the network, checking tensor shapes.
pub fn load_checkpoint(path: &Path) -> Result<(RunCheckpoint, Arc<MuZeroNetwork>, ParameterStore)> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let ckpt: RunCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Config(format!("malformed checkpoint {}: {e}", path.display())))?;
    let store = ParameterStore::from_checkpoint(&ckpt.params)?;
    let network = MuZeroNetwork::bind(ckpt.model.clone(), &store)
        .map_err(|e| Error::Config(format!("checkpoint {} does not match its model config: {e}", path.display())))?;
    Ok((ckpt, Arc::new(network), store))
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: u64,
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub entropy: f64,
    pub l2: f64,
    pub policy_estimate: f64,
    pub episodes: u64,
    pub transitions: u64,
    pub actor_errors: u64,
    pub last_return: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub simulations: usize,
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Appends rows to a CSV file, writing the header only when the file is new.
pub struct CsvLog {
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    /// Creates (truncating) the file with just the header row of `T`.
    pub fn create<T: Serialize + Default>(path: &Path) -> Result<Self> {
        let mut probe = csv::Writer::from_writer(Vec::new());
        probe.serialize(T::default())?;
        let bytes = probe.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let text = String::from_utf8_lossy(&bytes);
        fs::write(path, format!("{}\n", text.lines().next().unwrap_or_default()))?;
        Self::open(path)
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

impl Default for TrainRow {
    fn default() -> Self {
        Self::from_loss(0, &LossBreakdown::default())
    }
}

impl TrainRow {
    fn from_loss(step: u64, l: &LossBreakdown) -> Self {
        Self {
            step,
            total: l.total,
            policy: l.policy,
            value: l.value,
            reward: l.reward,
            entropy: l.entropy,
            l2: l.l2,
            policy_estimate: l.policy_estimate,
            episodes: 0,
            transitions: 0,
            actor_errors: 0,
            last_return: 0.0,
            elapsed_s: 0.0,
        }
    }
}

impl Default for EvalRow {
    fn default() -> Self {
        Self { step: 0, simulations: 0, episodes: 0, mean: 0.0, std: 0.0, min: 0.0, max: 0.0 }
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl EvalSummary {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
        let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { returns, mean, std, min, max }
    }
}

/// Greedy (T = 0) episodes; episode `i` uses seeds derived from `(seed, i)`.
pub fn evaluate(
    network: &Arc<MuZeroNetwork>,
    params: &Arc<ParameterStore>,
    env_key: &str,
    episodes: usize,
    search: &SearchConfig,
    seed: u64,
) -> Result<EvalSummary> {
    let spec = make_env(env_key)?.spec();
    let cfg = network.config();
    if cfg.observation_dim != spec.observation_dim || cfg.action_dim != spec.action_dim {
        return Err(Error::Config(format!(
            "model expects observation_dim {} / action_dim {}, env '{env_key}' has {} / {}",
            cfg.observation_dim, cfg.action_dim, spec.observation_dim, spec.action_dim
        )));
    }
    let returns: Vec<Result<f64>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut env = make_env(env_key)?;
            let model = LearnedModel::new(Arc::clone(network), Arc::clone(params));
            let mut rng = rng_for(seed, "eval", i as u64);
            let reset_seed = derive_seed(seed, "eval-reset", i as u64);
            let trs = play_episode(env.as_mut(), &model, search, 0.0, reset_seed, &mut rng)?;
            Ok(trs.iter().map(|t| t.reward).sum())
        })
        .collect();
    Ok(EvalSummary::from_returns(returns.into_iter().collect::<Result<_>>()?))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last_eval: Option<EvalSummary>,
    pub early_stopped: bool,
    pub interrupted: bool,
    pub output_dir: PathBuf,
}

struct Learner<'a> {
    config: &'a RunConfig,
    out: PathBuf,
    trainer: Trainer,
    rng: ChaCha8Rng,
    train_log: CsvLog,
    eval_log: CsvLog,
    started: Instant,
    last_eval: Option<EvalSummary>,
    last_eval_step: Option<u64>,
    early_stopped: bool,
}

impl Learner<'_> {
    fn network(&self) -> &Arc<MuZeroNetwork> {
        self.trainer.network()
    }

    fn checkpoint(&self) -> Result<PathBuf> {
        save_checkpoint(&self.out, &self.config.env, self.trainer.steps(), self.network(), self.trainer.params())
    }

    fn done(&self) -> bool {
        self.early_stopped || self.trainer.steps() >= self.config.total_steps
    }

    fn eval(&mut self) -> Result<()> {
        let step = self.trainer.steps();
        let params = Arc::new(self.trainer.params().clone());
        let search = self.config.eval_search();
        let summary = evaluate(self.network(), &params, &self.config.env, self.config.eval_episodes, &search, derive_seed(self.config.seed, "eval", 0))?;
        self.eval_log.write(&EvalRow {
            step,
            simulations: search.num_simulations,
            episodes: self.config.eval_episodes,
            mean: summary.mean,
            std: summary.std,
            min: summary.min,
            max: summary.max,
        })?;
        log::info!("step {step}: eval mean {:.3} (min {:.3}, max {:.3})", summary.mean, summary.min, summary.max);
        if self.config.target_score.is_some_and(|t| summary.mean >= t) {
            self.early_stopped = true;
        }
        self.last_eval = Some(summary);
        self.last_eval_step = Some(step);
        Ok(())
    }

    /// One optimizer step plus the periodic logging, evaluation and checkpoint.
    fn step(&mut self, buffer: &Mutex<ReplayBuffer>, stats: &ActorStats) -> Result<()> {
        let batch = {
            let buf = buffer.lock().unwrap_or_else(|e| e.into_inner());
            buf.sample_batch(self.config.train.batch_size, &mut self.rng)?
        };
        let (loss, priorities) = match self.trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                let path = self.checkpoint()?;
                log::error!("training aborted at step {}: {e}; last good state in {}", self.trainer.steps(), path.display());
                return Err(e);
            }
        };
        buffer.lock().unwrap_or_else(|e| e.into_inner()).update_priorities(&priorities);
        let step = self.trainer.steps();
        if step.is_multiple_of(self.config.log_interval) {
            let mut row = TrainRow::from_loss(step, &loss);
            row.episodes = stats.episodes.load(Ordering::Relaxed);
            row.transitions = stats.transitions.load(Ordering::Relaxed);
            row.actor_errors = stats.errors.load(Ordering::Relaxed);
            row.last_return = stats.last_return();
            row.elapsed_s = self.started.elapsed().as_secs_f64();
            self.train_log.write(&row)?;
        }
        if step.is_multiple_of(self.config.eval_interval) || step == self.config.total_steps {
            self.eval()?;
        }
        if step.is_multiple_of(self.config.checkpoint_interval) {
            self.checkpoint()?;
        }
        Ok(())
    }

    fn finish(mut self, interrupted: bool) -> Result<TrainOutcome> {
        let step = self.trainer.steps();
        if step > 0 && self.last_eval_step != Some(step) {
            self.eval()?;
        }
        self.checkpoint()?;
        Ok(TrainOutcome {
            steps: step,
            last_eval: self.last_eval,
            early_stopped: self.early_stopped,
            interrupted,
            output_dir: self.out,
        })
    }
}

/// Trains per `config`, writing outputs under `config.output_dir`.
pub fn train(config: RunConfig) -> Result<TrainOutcome> {
    train_until(config, &AtomicBool::new(false))
}

/// [`train`] that also stops (with a final checkpoint) once `interrupt` is set.
pub fn train_until(config: RunConfig, interrupt: &AtomicBool) -> Result<TrainOutcome> {
    let config = config.resolve()?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(&config)?)?;

    let spec = make_env(&config.env)?.spec();
    let mut store = ParameterStore::new();
    let model_config = config.model.model_config(spec.observation_dim, spec.action_dim);
    let network = Arc::new(MuZeroNetwork::new(model_config, &mut store, &mut rng_for(config.seed, "init", 0))?);
    let trainer = Trainer::new(Arc::clone(&network), store, config.train.clone())?;
    let mut learner = Learner {
        config: &config,
        out: out.clone(),
        trainer,
        rng: rng_for(config.seed, "replay", 0),
        train_log: CsvLog::create::<TrainRow>(&out.join(TRAIN_METRICS_FILE))?,
        eval_log: CsvLog::create::<EvalRow>(&out.join(EVAL_METRICS_FILE))?,
        started: Instant::now(),
        last_eval: None,
        last_eval_step: None,
        early_stopped: false,
    };
    if config.total_steps == 0 {
        return learner.finish(false);
    }
    let buffer = Mutex::new(ReplayBuffer::new(config.replay.clone())?);
    let stats = ActorStats::default();
    let interrupted = if config.actors.actors == 1 {
        run_sequential(&mut learner, &buffer, &stats, interrupt)?
    } else {
        run_concurrent(&mut learner, &buffer, &stats, interrupt)?
    };
    learner.finish(interrupted)
}

/// Steps allowed once `transitions` have been collected.
fn step_budget(config: &RunConfig, transitions: u64) -> u64 {
    let usable = transitions.saturating_sub(config.warmup_transitions as u64);
    ((usable as f64 * config.train_ratio).floor() as u64).min(config.total_steps)
}

fn run_sequential(learner: &mut Learner<'_>, buffer: &Mutex<ReplayBuffer>, stats: &ActorStats, interrupt: &AtomicBool) -> Result<bool> {
    let config = learner.config;
    let mut env = make_env(&config.env)?;
    let mut rng = rng_for(config.seed, "actor", 0);
    let mut episode_index = 0u64;
    while !learner.done() {
        if interrupt.load(Ordering::Relaxed) {
            return Ok(true);
        }
        let model = LearnedModel::new(Arc::clone(learner.network()), Arc::new(learner.trainer.params().clone()));
        let temperature = config.actors.temperature_at(learner.trainer.steps());
        let reset_seed = derive_seed(config.seed, "actor-reset", episode_index);
        episode_index += 1;
        let played = play_episode(env.as_mut(), &model, &config.search, temperature, reset_seed, &mut rng)
            .and_then(|trs| Episode::with_initial_priorities(trs, config.replay.n_step, config.replay.discount));
        match played {
            Ok(episode) => {
                stats.record(episode.len(), episode.total_reward());
                buffer.lock().unwrap_or_else(|e| e.into_inner()).push_episode(episode);
            }
            Err(e) => {
                stats.errors.fetch_add(1, Ordering::Relaxed);
                log::warn!("dropped an episode: {e}");
                continue;
            }
        }
        let budget = step_budget(config, stats.transitions.load(Ordering::Relaxed));
        while learner.trainer.steps() < budget && !learner.done() {
            if interrupt.load(Ordering::Relaxed) {
                return Ok(true);
            }
            learner.step(buffer, stats)?;
        }
    }
    Ok(false)
}

fn run_concurrent(learner: &mut Learner<'_>, buffer: &Mutex<ReplayBuffer>, stats: &ActorStats, interrupt: &AtomicBool) -> Result<bool> {
    let config = learner.config;
    let slot = SnapshotSlot::new(learner.trainer.params().clone());
    let stop = AtomicBool::new(false);
    let trainer_steps = AtomicU64::new(0);
    let throttle = config.max_transitions_per_step.map(|per_step| Throttle {
        trainer_steps: &trainer_steps,
        warmup: config.warmup_transitions as u64,
        per_step,
    });
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.actors.actors as u64)
            .map(|actor_id| {
                let ctx = ActorContext {
                    actor_id,
                    master_seed: config.seed,
                    env_key: &config.env,
                    network: Arc::clone(learner.network()),
                    slot: &slot,
                    buffer,
                    search: &config.search,
                    actors: &config.actors,
                    stop: &stop,
                    stats,
                    throttle,
                };
                scope.spawn(move || actor_loop(ctx))
            })
            .collect();
        let result = (|| {
            while !learner.done() {
                if interrupt.load(Ordering::Relaxed) {
                    return Ok(true);
                }
                if handles.iter().all(|h| h.is_finished()) {
                    return Err(Error::Training("all actors exited".into()));
                }
                let budget = step_budget(config, stats.transitions.load(Ordering::Relaxed));
                if learner.trainer.steps() >= budget {
                    std::thread::sleep(Duration::from_millis(2));
                    continue;
                }
                learner.step(buffer, stats)?;
                trainer_steps.store(learner.trainer.steps(), Ordering::Relaxed);
                if learner.trainer.steps().is_multiple_of(config.publish_interval) {
                    slot.publish(learner.trainer.params().clone(), learner.trainer.steps());
                }
            }
            Ok(false)
        })();
        stop.store(true, Ordering::Relaxed);
        for h in handles {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => log::warn!("actor failed: {e}"),
                Err(_) => log::warn!("actor thread panicked"),
            }
        }
        result
    })
}

/// Loads `checkpoint`, evaluates it greedily and, if `out` is given, appends
/// the summary to `<out>/eval_metrics.csv`.
pub fn eval_checkpoint(
    checkpoint: &Path,
    env_key: &str,
    episodes: usize,
    simulations: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalSummary> {
    if episodes == 0 || simulations == 0 {
        return Err(Error::Usage("episodes and simulations must be >= 1".into()));
    }
    let (ckpt, network, store) = load_checkpoint(checkpoint)?;
    let search = SearchConfig { num_simulations: simulations, ..SearchConfig::default() };
    let summary = evaluate(&network, &Arc::new(store), env_key, episodes, &search, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        CsvLog::open(&dir.join(EVAL_METRICS_FILE))?.write(&EvalRow {
            step: ckpt.step,
            simulations,
            episodes,
            mean: summary.mean,
            std: summary.std,
            min: summary.min,
            max: summary.max,
        })?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit_config(dir: &Path, total_steps: u64) -> RunConfig {
        RunConfig {
            env: "bandit".into(),
            output_dir: dir.to_path_buf(),
            total_steps,
            warmup_transitions: 64,
            eval_interval: 50,
            eval_episodes: 4,
            checkpoint_interval: 100,
            log_interval: 5,
            model: ModelSizes { hidden_dim: 8, representation_layers: vec![16], dynamics_layers: vec![16], head_layers: vec![16] },
            search: SearchConfig { num_simulations: 16, ..SearchConfig::default() },
            train: TrainConfig { batch_size: 16, ..TrainConfig::default() },
            actors: ActorConfig { actors: 1, ..ActorConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn shipped_configs_keep_values_inside_support() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let c = RunConfig::load(&path).unwrap().resolve().unwrap();
            let max_reward = match c.env.as_str() {
                "cartpole" | "bandit" => 1.0,
                "double-pendulum" => crate::envs::DOUBLE_ALIVE_BONUS,
                other => panic!("no reward bound for {other}"),
            };
            let steps = make_env(&c.env).unwrap().spec().max_steps as i32;
            let gamma = c.search.discount;
            let max_value = max_reward * (1.0 - gamma.powi(steps)) / (1.0 - gamma);
            let squashed = crate::model::transform_scalar(max_value);
            assert!(squashed <= f64::from(crate::model::SUPPORT_MAX), "{}: h({max_value:.1}) = {squashed:.2}", path.display());
        }
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let c = RunConfig::from_json("{}").unwrap().resolve().unwrap();
        assert_eq!(c.env, "cartpole");
        assert_eq!(c.actors.temperature_schedule.len(), 3);
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"env": "pong"}"#).unwrap().resolve(), Err(Error::Config(_))));
        let mismatch = r#"{"replay": {"unroll_steps": 3}}"#;
        assert!(RunConfig::from_json(mismatch).unwrap().resolve().is_err());
    }

    #[test]
    fn zero_steps_writes_headers_and_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(bandit_config(dir.path(), 0)).unwrap();
        assert_eq!(out.steps, 0);
        let eval = fs::read_to_string(dir.path().join(EVAL_METRICS_FILE)).unwrap();
        assert_eq!(eval.lines().count(), 1);
        assert!(eval.starts_with("step,"));
        assert_eq!(fs::read_to_string(dir.path().join(TRAIN_METRICS_FILE)).unwrap().lines().count(), 1);
        assert!(checkpoint_path(dir.path(), 0).exists());
        assert!(dir.path().join(RESOLVED_CONFIG_FILE).exists());
    }

    #[test]
    fn sequential_runs_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train(bandit_config(a.path(), 60)).unwrap();
        train(bandit_config(b.path(), 60)).unwrap();
        let ea = fs::read_to_string(a.path().join(EVAL_METRICS_FILE)).unwrap();
        assert_eq!(ea, fs::read_to_string(b.path().join(EVAL_METRICS_FILE)).unwrap());
        assert_eq!(ea.lines().count(), 3);
        let ca = fs::read(checkpoint_path(a.path(), 60)).unwrap();
        assert_eq!(ca, fs::read(checkpoint_path(b.path(), 60)).unwrap());
    }

    #[test]
    fn resolved_config_reruns_identically() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train(bandit_config(a.path(), 20)).unwrap();
        let mut echoed = RunConfig::load(&a.path().join(RESOLVED_CONFIG_FILE)).unwrap();
        echoed.output_dir = b.path().to_path_buf();
        train(echoed).unwrap();
        assert_eq!(fs::read(checkpoint_path(a.path(), 20)).unwrap(), fs::read(checkpoint_path(b.path(), 20)).unwrap());
    }

    #[test]
    fn concurrent_run_completes() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = bandit_config(dir.path(), 30);
        c.actors.actors = 2;
        let out = train(c).unwrap();
        assert_eq!(out.steps, 30);
        assert!(checkpoint_path(dir.path(), 30).exists());
    }

    #[test]
    fn interrupt_flushes_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = train_until(bandit_config(dir.path(), 1000), &AtomicBool::new(true)).unwrap();
        assert!(out.interrupted);
        assert!(checkpoint_path(dir.path(), out.steps).exists());
    }

    #[test]
    fn eval_rejects_mismatched_env() {
        let dir = tempfile::tempdir().unwrap();
        train(bandit_config(dir.path(), 0)).unwrap();
        let err = eval_checkpoint(&checkpoint_path(dir.path(), 0), "cartpole", 1, 4, 0, None).unwrap_err();
        assert!(err.to_string().contains("observation_dim"), "{err}");
        let s = eval_checkpoint(&checkpoint_path(dir.path(), 0), "bandit", 2, 4, 0, Some(dir.path())).unwrap();
        assert_eq!(s.returns.len(), 2);
        let again = eval_checkpoint(&checkpoint_path(dir.path(), 0), "bandit", 2, 4, 0, None).unwrap();
        assert_eq!(s, again);
    }
}
