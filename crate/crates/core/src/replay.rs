//! Prioritized episode replay.
//!
//! Sampling is two-stage: an episode is drawn with probability
//! `p_ep^alpha / sum p^alpha` (episode priority = mean of its transition
//! priorities), then a start index inside it with probability proportional
//! to the transition priorities raised to `alpha`. Importance weights
//! `(1 / (N P(i)))^beta` are normalised by the batch maximum.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added to every priority so nothing becomes unsampleable.
pub const PRIORITY_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    /// Reward received after taking `action`.
    pub reward: f64,
    pub search_value: f64,
    pub root_actions: Vec<Vec<f64>>,
    pub root_visit_counts: Vec<u32>,
    pub done: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        if self.root_actions.is_empty() || self.root_actions.len() != self.root_visit_counts.len() {
            return Err(Error::Input(format!(
                "transition has {} root actions and {} visit counts",
                self.root_actions.len(),
                self.root_visit_counts.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    transitions: Vec<Transition>,
    priorities: Vec<f64>,
    priority: f64,
}

impl Episode {
    pub fn new(transitions: Vec<Transition>, priorities: Vec<f64>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Input("episode without transitions".into()));
        }
        if transitions.len() != priorities.len() {
            return Err(Error::Input("one priority per transition required".into()));
        }
        if priorities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Input("priorities must be finite and >= 0".into()));
        }
        for t in &transitions {
            t.validate()?;
        }
        let priority = mean(&priorities);
        Ok(Self { transitions, priorities, priority })
    }

    /// Builds an episode with priorities `|search value - n-step return|`.
    pub fn with_initial_priorities(transitions: Vec<Transition>, n: usize, discount: f64) -> Result<Self> {
        let priorities = (0..transitions.len())
            .map(|t| compute_priority(transitions[t].search_value, n_step_return(&transitions, t, n, discount)))
            .collect();
        Self::new(transitions, priorities)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn priorities(&self) -> &[f64] {
        &self.priorities
    }

    pub fn priority(&self) -> f64 {
        self.priority
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    fn set_priority(&mut self, index: usize, p: f64) {
        self.priorities[index] = p;
        self.priority = mean(&self.priorities);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `sum_{i<n} gamma^i r_{t+i} + gamma^n v_{t+n}`, where rewards and values
/// past the end of the episode are zero.
pub fn n_step_return(transitions: &[Transition], t: usize, n: usize, discount: f64) -> f64 {
    let mut z = 0.0;
    let mut scale = 1.0;
    for i in 0..n {
        match transitions.get(t + i) {
            Some(tr) => z += scale * tr.reward,
            None => return z,
        }
        scale *= discount;
    }
    if let Some(tr) = transitions.get(t + n) {
        z += scale * tr.search_value;
    }
    z
}

pub fn compute_priority(search_value: f64, n_step_target: f64) -> f64 {
    (search_value - n_step_target).abs() + PRIORITY_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Maximum number of stored episodes; the oldest is evicted first.
    pub capacity: usize,
    pub n_step: usize,
    pub unroll_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub discount: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { capacity: 500, n_step: 10, unroll_steps: 5, alpha: 1.0, beta: 1.0, discount: 0.997 }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || self.n_step == 0 || self.unroll_steps == 0 {
            return Err(Error::Config("replay capacity, n_step and unroll_steps must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("replay alpha and beta must be >= 0".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config("replay discount must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleId {
    pub episode: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTarget {
    pub actions: Vec<Vec<f64>>,
    pub visit_counts: Vec<u32>,
}

/// Targets for one unroll position `k` (0 is the observed state).
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollTarget {
    pub value: f64,
    /// Reward for the transition into this position; zero at `k = 0`.
    pub reward: f64,
    /// `None` past the end of the episode.
    pub policy: Option<PolicyTarget>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: SampleId,
    pub observation: Vec<f64>,
    /// `K` actions, zeros past the end of the episode.
    pub actions: Vec<Vec<f64>>,
    /// `K + 1` targets.
    pub targets: Vec<UnrollTarget>,
    /// Importance weight, normalised by the batch maximum.
    pub weight: f64,
    pub probability: f64,
}

#[derive(Debug)]
pub struct ReplayBuffer {
    config: ReplayConfig,
    episodes: VecDeque<(u64, Episode)>,
    next_id: u64,
    total_transitions: usize,
    skipped_updates: u64,
    episodes_added: u64,
}

impl ReplayBuffer {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            episodes: VecDeque::new(),
            next_id: 0,
            total_transitions: 0,
            skipped_updates: 0,
            episodes_added: 0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.total_transitions
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    /// Episodes ever added (including evicted ones).
    pub fn episodes_added(&self) -> u64 {
        self.episodes_added
    }

    pub fn episode(&self, id: u64) -> Option<&Episode> {
        let pos = self.position(id)?;
        Some(&self.episodes[pos].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Episode)> {
        self.episodes.iter().map(|(id, e)| (*id, e))
    }

    fn position(&self, id: u64) -> Option<usize> {
        // ids are increasing, so the deque is sorted
        self.episodes.binary_search_by_key(&id, |(i, _)| *i).ok()
    }

    pub fn push_episode(&mut self, episode: Episode) -> u64 {
        while self.episodes.len() >= self.config.capacity {
            if let Some((_, old)) = self.episodes.pop_front() {
                self.total_transitions -= old.len();
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.total_transitions += episode.len();
        self.episodes.push_back((id, episode));
        self.episodes_added += 1;
        id
    }

    /// Stores `transitions` with initial priorities from the n-step return.
    pub fn push_transitions(&mut self, transitions: Vec<Transition>) -> Result<u64> {
        let ep = Episode::with_initial_priorities(transitions, self.config.n_step, self.config.discount)?;
        Ok(self.push_episode(ep))
    }

    /// Draws `count` positions; returns each with its sampling probability
    /// `P(episode) * P(index | episode)`.
    pub fn sample_ids<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Vec<(SampleId, f64)>> {
        if self.episodes.is_empty() {
            return Err(Error::NotReady("no episodes stored".into()));
        }
        let alpha = self.config.alpha;
        let ep_weights: Vec<f64> = self.episodes.iter().map(|(_, e)| e.priority.powf(alpha)).collect();
        let ep_cum = cumulative(&ep_weights);
        let ep_total = *ep_cum.last().expect("non-empty");
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let e = draw(&ep_cum, rng);
            let (id, episode) = &self.episodes[e];
            let tr_weights: Vec<f64> = episode.priorities.iter().map(|p| p.powf(alpha)).collect();
            let tr_cum = cumulative(&tr_weights);
            let t = draw(&tr_cum, rng);
            let p_ep = if ep_total > 0.0 { ep_weights[e] / ep_total } else { 1.0 / self.episodes.len() as f64 };
            let tr_total = *tr_cum.last().expect("non-empty");
            let p_tr = if tr_total > 0.0 { tr_weights[t] / tr_total } else { 1.0 / episode.len() as f64 };
            out.push((SampleId { episode: *id, index: t }, p_ep * p_tr));
        }
        Ok(out)
    }

    /// Raw importance weight `(1 / (N P))^beta` for `N` stored transitions.
    pub fn importance_weight(&self, probability: f64) -> f64 {
        (1.0 / (self.total_transitions as f64 * probability)).powf(self.config.beta)
    }

    pub fn sample_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<TrainingSample>> {
        let ids = self.sample_ids(batch_size, rng)?;
        let raw: Vec<f64> = ids.iter().map(|(_, p)| self.importance_weight(*p)).collect();
        let max = raw.iter().copied().fold(0.0, f64::max);
        ids.iter()
            .zip(raw)
            .map(|((id, p), w)| {
                let mut s = self.make_sample(*id, rng)?;
                s.weight = if max > 0.0 { w / max } else { 1.0 };
                s.probability = *p;
                Ok(s)
            })
            .collect()
    }

    /// Unrolled targets starting at `id`; positions past the end are
    /// absorbing: zero reward and value, no policy target, and a uniform
    /// random action in `[-1, 1]`.
    pub fn make_sample<R: Rng>(&self, id: SampleId, rng: &mut R) -> Result<TrainingSample> {
        let episode = self
            .episode(id.episode)
            .ok_or_else(|| Error::NotReady(format!("episode {} is no longer stored", id.episode)))?;
        let trs = episode.transitions();
        let t = id.index;
        if t >= trs.len() {
            return Err(Error::Input(format!("index {t} beyond episode length {}", trs.len())));
        }
        let k_max = self.config.unroll_steps;
        let action_dim = trs[0].action.len();
        let actions = (0..k_max)
            .map(|k| match trs.get(t + k) {
                Some(tr) => tr.action.clone(),
                None => (0..action_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            })
            .collect();
        let targets = (0..=k_max)
            .map(|k| {
                let pos = t + k;
                let value = if pos < trs.len() {
                    n_step_return(trs, pos, self.config.n_step, self.config.discount)
                } else {
                    0.0
                };
                let reward = if k == 0 { 0.0 } else { trs.get(pos - 1).map_or(0.0, |tr| tr.reward) };
                let policy = trs.get(pos).map(|tr| PolicyTarget {
                    actions: tr.root_actions.clone(),
                    visit_counts: tr.root_visit_counts.clone(),
                });
                UnrollTarget { value, reward, policy }
            })
            .collect();
        Ok(TrainingSample { id, observation: trs[t].observation.clone(), actions, targets, weight: 1.0, probability: 0.0 })
    }

    /// Replaces transition priorities; ids whose episode has been evicted
    /// are skipped and counted. Returns the number skipped.
    pub fn update_priorities(&mut self, updates: &[(SampleId, f64)]) -> usize {
        let mut skipped = 0;
        for &(id, p) in updates {
            match self.position(id.episode) {
                Some(pos) if id.index < self.episodes[pos].1.len() && p.is_finite() && p >= 0.0 => {
                    self.episodes[pos].1.set_priority(id.index, p);
                }
                _ => skipped += 1,
            }
        }
        self.skipped_updates += skipped as u64;
        skipped
    }

    /// Writes every stored episode as a little-endian `u64` length followed
    /// by that many bytes of JSON.
    pub fn save_episodes(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (_, e) in &self.episodes {
            let bytes = serde_json::to_vec(e)?;
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
        let mut r = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        loop {
            let mut len = [0u8; 8];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
            r.read_exact(&mut buf)?;
            let e: Episode = serde_json::from_slice(&buf)?;
            out.push(Episode::new(e.transitions, e.priorities)?);
        }
        Ok(out)
    }
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    w.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

fn draw<R: Rng>(cum: &[f64], rng: &mut R) -> usize {
    let total = *cum.last().expect("non-empty");
    if !(total > 0.0) {
        return rng.gen_range(0..cum.len());
    }
    let u = rng.gen::<f64>() * total;
    cum.partition_point(|c| *c <= u).min(cum.len() - 1)
}
