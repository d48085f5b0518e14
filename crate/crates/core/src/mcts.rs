//! Progressive-widening MCTS over a learned model.
//!
//! Each simulation descends from the root. At every node the number of
//! child actions is compared with `p(s) = C_pw * n(s)^alpha`: if there are
//! fewer children, a new action is sampled from the node's Gaussian policy;
//! otherwise the child with the highest PUCB score is followed. The first
//! unexpanded edge reached is expanded with exactly one dynamics call and one
//! prediction call, and the discounted bootstrap return is backed up along
//! the path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gaussian_logpdf, GaussianPolicy, HiddenState};

/// What the search needs from a model. Rewards and values are decoded,
/// raw-scale scalars.
pub trait SearchModel {
    fn represent(&self, observation: &[f64]) -> Result<HiddenState>;
    /// Returns `(reward, next_state)`.
    fn dynamics(&self, state: &HiddenState, action: &[f64]) -> Result<(f64, HiddenState)>;
    /// Returns `(policy, value)`.
    fn predict(&self, state: &HiddenState) -> Result<(GaussianPolicy, f64)>;
}

impl<M: SearchModel + ?Sized> SearchModel for &M {
    fn represent(&self, observation: &[f64]) -> Result<HiddenState> {
        (**self).represent(observation)
    }
    fn dynamics(&self, state: &HiddenState, action: &[f64]) -> Result<(f64, HiddenState)> {
        (**self).dynamics(state, action)
    }
    fn predict(&self, state: &HiddenState) -> Result<(GaussianPolicy, f64)> {
        (**self).predict(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub num_simulations: usize,
    /// Widening coefficient `C_pw`.
    pub c_pw: f64,
    /// Widening exponent in (0, 1).
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub discount: f64,
    /// Temperature used to pick the executed action from root visit counts.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            num_simulations: 50,
            c_pw: 1.0,
            alpha: 0.5,
            c1: 1.25,
            c2: 19652.0,
            discount: 0.997,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_pw > 0.0) {
            return Err(Error::Config(format!("c_pw must be > 0, got {}", self.c_pw)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount must lie in (0, 1], got {}", self.discount)));
        }
        if !(self.c2 > 0.0) || !self.c1.is_finite() {
            return Err(Error::Config("c1 must be finite and c2 > 0".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `C_pw * n^alpha`
pub fn widening_threshold(n: u32, c_pw: f64, alpha: f64) -> f64 {
    c_pw * f64::from(n).powf(alpha)
}

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchEdge {
    pub action: Vec<f64>,
    pub visits: u32,
    /// Mean backed-up return.
    pub q: f64,
    /// Policy the action was sampled from; its density at `action` is the
    /// edge's unnormalised prior.
    pub prior: GaussianPolicy,
    pub reward: f64,
    pub child: Option<NodeId>,
}

impl SearchEdge {
    fn new(action: Vec<f64>, prior: GaussianPolicy) -> Self {
        Self { action, visits: 0, q: 0.0, prior, reward: 0.0, child: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchNode {
    pub state: HiddenState,
    pub edges: Vec<SearchEdge>,
    /// Sum of edge visits plus one for the node's own expansion.
    pub visit_count: u32,
    /// Predicted value at expansion time.
    pub value: f64,
    pub policy: GaussianPolicy,
}

impl SearchNode {
    pub fn edge_visits(&self) -> u32 {
        self.edges.iter().map(|e| e.visits).sum()
    }
}

/// Running bounds of Q values seen in the tree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
}

impl Default for MinMaxStats {
    fn default() -> Self {
        Self { min: f64::INFINITY, max: f64::NEG_INFINITY }
    }
}

impl MinMaxStats {
    pub fn update(&mut self, q: f64) {
        self.min = self.min.min(q);
        self.max = self.max.max(q);
    }

    pub fn normalize(&self, q: f64) -> f64 {
        if self.max > self.min {
            (q - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub simulations: usize,
    pub dynamics_calls: usize,
    pub predict_calls: usize,
    pub widenings: usize,
}

/// Root statistics handed to action selection and training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub root_actions: Vec<Vec<f64>>,
    pub root_visit_counts: Vec<u32>,
    /// Visit-weighted mean of root edge Q values (the predicted root value
    /// when no simulation ran).
    pub root_value: f64,
    pub root_predicted_value: f64,
    pub root_policy: GaussianPolicy,
    pub chosen_action: Vec<f64>,
}

impl SearchResult {
    /// Visit-weighted mean of the root actions.
    pub fn mean_action(&self) -> Option<Vec<f64>> {
        let total: u32 = self.root_visit_counts.iter().sum();
        if total == 0 {
            return None;
        }
        let dim = self.root_actions[0].len();
        let mut mean = vec![0.0; dim];
        for (a, &n) in self.root_actions.iter().zip(&self.root_visit_counts) {
            for (m, x) in mean.iter_mut().zip(a) {
                *m += f64::from(n) * x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= f64::from(total));
        Some(mean)
    }
}

/// Normalised priors over the node's current children: each edge's Gaussian
/// density at its action divided by the sum over siblings.
pub fn normalize_priors(node: &SearchNode) -> Result<Vec<f64>> {
    if node.edges.is_empty() {
        return Err(Error::Search("cannot normalise priors of a node without children".into()));
    }
    let logs: Vec<f64> = node.edges.iter().map(|e| gaussian_logpdf(&e.action, &e.prior)).collect();
    Ok(normalize_log_densities(&logs))
}

/// Normalises densities given as logs; scale-invariant by construction.
pub fn normalize_log_densities(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        log::warn!("all child densities vanished; falling back to uniform priors");
        return vec![1.0 / logs.len() as f64; logs.len()];
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// PUCB score of every child of `node`.
pub fn pucb_scores(node: &SearchNode, bounds: &MinMaxStats, config: &SearchConfig) -> Result<Vec<f64>> {
    let priors = normalize_priors(node)?;
    let total = f64::from(node.edge_visits());
    let explore_scale = total.sqrt() * (config.c1 + ((total + config.c2 + 1.0) / config.c2).ln());
    Ok(node
        .edges
        .iter()
        .zip(&priors)
        .map(|(e, p)| {
            let q = if e.visits == 0 { 0.0 } else { bounds.normalize(e.q) };
            q + p * explore_scale / (1.0 + f64::from(e.visits))
        })
        .collect())
}

/// Index of the maximal score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if !(*s > scores[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn pucb_select(node: &SearchNode, bounds: &MinMaxStats, config: &SearchConfig) -> Result<usize> {
    let scores = pucb_scores(node, bounds, config)?;
    argmax(&scores).ok_or_else(|| Error::Search("PUCB selection over an empty edge list".into()))
}

/// Search tree in an arena; node 0 is the root.
#[derive(Clone, Debug)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub bounds: MinMaxStats,
    pub stats: SearchStats,
}

impl SearchTree {
    /// Builds the root from `represent` + `predict`, with one pre-sampled edge.
    pub fn new<M: SearchModel, R: Rng>(model: &M, observation: &[f64], rng: &mut R) -> Result<Self> {
        let state = model.represent(observation)?;
        let (policy, value) = model.predict(&state)?;
        let mut tree = Self { nodes: Vec::new(), bounds: MinMaxStats::default(), stats: SearchStats::default() };
        tree.stats.predict_calls += 1;
        tree.push_node(state, policy, value, rng);
        Ok(tree)
    }

    fn push_node<R: Rng>(&mut self, state: HiddenState, policy: GaussianPolicy, value: f64, rng: &mut R) -> NodeId {
        let first = SearchEdge::new(policy.sample(rng), policy.clone());
        self.nodes.push(SearchNode { state, edges: vec![first], visit_count: 1, value, policy });
        self.nodes.len() - 1
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    /// Appends an edge whose action is drawn from the node's policy and
    /// clamped to `[-1, 1]`.
    pub fn widen<R: Rng>(&mut self, node: NodeId, rng: &mut R) -> usize {
        let n = &mut self.nodes[node];
        let action = n.policy.sample(rng);
        n.edges.push(SearchEdge::new(action, n.policy.clone()));
        self.stats.widenings += 1;
        n.edges.len() - 1
    }

    /// Widen if `|A| < p(s)`, otherwise follow PUCB.
    pub fn select_edge<R: Rng>(&mut self, node: NodeId, config: &SearchConfig, rng: &mut R) -> Result<usize> {
        let n = &self.nodes[node];
        let threshold = widening_threshold(n.visit_count, config.c_pw, config.alpha);
        if (n.edges.len() as f64) < threshold {
            Ok(self.widen(node, rng))
        } else {
            pucb_select(n, &self.bounds, config)
        }
    }

    /// Expands `edge` of `parent`: one dynamics call, one prediction call.
    /// Returns the new node and its predicted value.
    pub fn expand<M: SearchModel, R: Rng>(&mut self, model: &M, parent: NodeId, edge: usize, rng: &mut R) -> Result<(NodeId, f64)> {
        if self.nodes[parent].edges[edge].child.is_some() {
            return Err(Error::Search("edge is already expanded".into()));
        }
        let (reward, state) = {
            let p = &self.nodes[parent];
            model.dynamics(&p.state, &p.edges[edge].action)?
        };
        self.stats.dynamics_calls += 1;
        let (policy, value) = model.predict(&state)?;
        self.stats.predict_calls += 1;
        let child = self.push_node(state, policy, value, rng);
        let e = &mut self.nodes[parent].edges[edge];
        e.reward = reward;
        e.child = Some(child);
        Ok((child, value))
    }

    /// Backs the bootstrap return up a root-to-leaf path of `(node, edge)`.
    pub fn backup(&mut self, path: &[(NodeId, usize)], leaf_value: f64, discount: f64) {
        let mut g = leaf_value;
        for &(node, edge) in path.iter().rev() {
            let n = &mut self.nodes[node];
            let e = &mut n.edges[edge];
            g = e.reward + discount * g;
            e.q = (f64::from(e.visits) * e.q + g) / f64::from(e.visits + 1);
            e.visits += 1;
            n.visit_count += 1;
            self.bounds.update(e.q);
        }
    }

    /// One selection / expansion / backup pass.
    pub fn simulate<M: SearchModel, R: Rng>(&mut self, model: &M, config: &SearchConfig, rng: &mut R) -> Result<()> {
        let mut path = Vec::new();
        let mut node = 0;
        loop {
            let edge = self.select_edge(node, config, rng)?;
            path.push((node, edge));
            match self.nodes[node].edges[edge].child {
                Some(child) => node = child,
                None => break,
            }
        }
        let &(parent, edge) = path.last().expect("path is never empty");
        let (_, value) = self.expand(model, parent, edge, rng)?;
        self.backup(&path, value, config.discount);
        self.stats.simulations += 1;
        Ok(())
    }

    /// Checks `|A| <= max(1, ceil(C_pw n^alpha) + 1)` and the visit-count
    /// identity at every node.
    pub fn check_invariants(&self, config: &SearchConfig) -> std::result::Result<(), String> {
        for (id, n) in self.nodes.iter().enumerate() {
            let bound = (widening_threshold(n.visit_count, config.c_pw, config.alpha).ceil() as usize + 1).max(1);
            if n.edges.len() > bound {
                return Err(format!("node {id}: {} children exceeds bound {bound} at n = {}", n.edges.len(), n.visit_count));
            }
            if n.edges.is_empty() {
                return Err(format!("node {id} has no children"));
            }
            if n.visit_count != n.edge_visits() + 1 {
                return Err(format!("node {id}: n(s) = {} but edge visits sum to {}", n.visit_count, n.edge_visits()));
            }
            for e in &n.edges {
                if e.visits == 0 && e.q != 0.0 {
                    return Err(format!("node {id}: unvisited edge with Q = {}", e.q));
                }
            }
        }
        Ok(())
    }

    pub fn result<R: Rng>(&self, temperature: f64, rng: &mut R) -> SearchResult {
        let root = self.root();
        let visited: Vec<&SearchEdge> = root.edges.iter().filter(|e| e.visits > 0).collect();
        let root_actions: Vec<Vec<f64>> = visited.iter().map(|e| e.action.clone()).collect();
        let root_visit_counts: Vec<u32> = visited.iter().map(|e| e.visits).collect();
        let total: u32 = root_visit_counts.iter().sum();
        let root_value = if total == 0 {
            root.value
        } else {
            visited.iter().map(|e| f64::from(e.visits) * e.q).sum::<f64>() / f64::from(total)
        };
        let chosen_action = if root_visit_counts.is_empty() {
            root.edges[0].action.clone()
        } else {
            root_actions[choose_index(&root_visit_counts, temperature, rng)].clone()
        };
        SearchResult {
            root_actions,
            root_visit_counts,
            root_value,
            root_predicted_value: root.value,
            root_policy: root.policy.clone(),
            chosen_action,
        }
    }
}

/// Runs a full search seeded from `config.seed`.
pub fn run_search<M: SearchModel>(observation: &[f64], model: &M, config: &SearchConfig) -> Result<SearchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_search_with_rng(observation, model, config, &mut rng).map(|(r, _)| r)
}

pub fn run_search_with_rng<M: SearchModel, R: Rng>(
    observation: &[f64],
    model: &M,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<(SearchResult, SearchTree)> {
    config.validate()?;
    let mut tree = SearchTree::new(model, observation, rng)?;
    for _ in 0..config.num_simulations {
        tree.simulate(model, config, rng)?;
    }
    let result = tree.result(config.temperature, rng);
    Ok((result, tree))
}

/// Empirical target density `n_i^tau / sum_j n_j^tau` over visited actions.
pub fn visit_density_target(result: &SearchResult, tau: f64) -> Result<Vec<(Vec<f64>, f64)>> {
    let visited: Vec<(&Vec<f64>, u32)> = result
        .root_actions
        .iter()
        .zip(&result.root_visit_counts)
        .filter(|(_, &n)| n > 0)
        .map(|(a, &n)| (a, n))
        .collect();
    if visited.is_empty() {
        return Err(Error::Search("search produced no root visits".into()));
    }
    let logs: Vec<f64> = visited.iter().map(|(_, n)| tau * f64::from(*n).ln()).collect();
    let p = normalize_log_densities(&logs);
    Ok(visited.into_iter().zip(p).map(|((a, _), p)| (a.clone(), p)).collect())
}

/// Selection probabilities `n^(1/T)`; `T = 0` is argmax, `T = inf` uniform
/// over visited actions.
pub fn action_probabilities(counts: &[u32], temperature: f64) -> Vec<f64> {
    let visited = |n: u32| n > 0;
    if temperature == 0.0 {
        let scores: Vec<f64> = counts.iter().map(|&n| f64::from(n)).collect();
        let mut p = vec![0.0; counts.len()];
        if let Some(i) = argmax(&scores) {
            p[i] = 1.0;
        }
        return p;
    }
    if temperature.is_infinite() {
        let k = counts.iter().filter(|&&n| visited(n)).count() as f64;
        return counts.iter().map(|&n| if visited(n) { 1.0 / k } else { 0.0 }).collect();
    }
    let logs: Vec<f64> = counts
        .iter()
        .map(|&n| if visited(n) { f64::from(n).ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    normalize_log_densities(&logs)
}

pub fn choose_index<R: Rng>(counts: &[u32], temperature: f64, rng: &mut R) -> usize {
    let p = action_probabilities(counts, temperature);
    if temperature == 0.0 {
        return p.iter().position(|&x| x == 1.0).unwrap_or(0);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Samples a root action with probability proportional to `n^(1/T)`.
pub fn choose_action<R: Rng>(result: &SearchResult, temperature: f64, rng: &mut R) -> Result<Vec<f64>> {
    if result.root_visit_counts.is_empty() {
        return Err(Error::Search("no root actions to choose from".into()));
    }
    Ok(result.root_actions[choose_index(&result.root_visit_counts, temperature, rng)].clone())
}
