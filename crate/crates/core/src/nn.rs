//! Minimal dense-network engine.
//!
//! Parameters live in a [`ParameterStore`] (named `f64` tensors, each with a
//! gradient slot). A [`Tape`] records vector-valued primitive operations for a
//! forward pass and replays them backwards, accumulating parameter gradients
//! into a [`Gradients`] buffer. Several networks can be chained on one tape,
//! which is how unrolled (backprop-through-time) losses are built.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope of the leaky-ReLU for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.01;

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Gradient buffer aligned slot-for-slot with a [`ParameterStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self { slots: store.values.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.slots[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.slots.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    pub fn norm_sq(&self) -> f64 {
        self.slots.iter().flatten().map(|g| g * g).sum()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }
}

/// Named parameter tensors with gradient slots and an update counter.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Gradients,
    version: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.grads.slots.push(vec![0.0; value.len()]);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn grads(&self) -> &Gradients {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Gradients {
        &mut self.grads
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        self.grads.add_assign(grads);
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    /// Sum of squares of every parameter.
    pub fn l2_sq(&self) -> f64 {
        self.values.iter().flat_map(|t| &t.data).map(|v| v * v).sum()
    }

    /// Adds `2 * coeff * theta` to every gradient slot (the gradient of
    /// `coeff * ||theta||^2`).
    pub fn add_l2_grad(&mut self, coeff: f64) {
        for (g, t) in self.grads.slots.iter_mut().zip(&self.values) {
            for (gi, v) in g.iter_mut().zip(&t.data) {
                *gi += 2.0 * coeff * v;
            }
        }
    }

    /// Order-sensitive FNV-style hash over the exact bit patterns of every
    /// parameter. Used to detect torn snapshots.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.values.iter().flat_map(|t| &t.data) {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            version: self.version,
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, t)| NamedTensor { name: name.clone(), shape: t.shape.clone(), data: t.data.clone() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                ckpt.format
            )));
        }
        let mut store = Self::new();
        for t in &ckpt.tensors {
            store.register(&t.name, Tensor::from_vec(&t.shape, t.data.clone())?)?;
        }
        store.version = ckpt.version;
        Ok(store)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk parameter blob. JSON numbers round-trip exactly for `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub version: u64,
    pub tensors: Vec<NamedTensor>,
}

// ---------------------------------------------------------------------------
// Tape

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, weight: ParamId, bias: ParamId },
    LeakyRelu { x: Var },
    Tanh { x: Var },
    Concat { a: Var, b: Var },
    Slice { x: Var, start: usize },
    /// Affine rescale of a vector onto [-1, 1] by its own min and max.
    /// `extremes` is `None` when the input was constant.
    MinMaxScale { x: Var, extremes: Option<(usize, usize)> },
    Clamp { x: Var, lo: f64, hi: f64 },
    ScaleGrad { x: Var, factor: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Record of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.adjoints.clear();
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: &[f64]) -> Var {
        self.push(value.to_vec(), Op::Leaf)
    }

    pub fn affine(&mut self, params: &ParameterStore, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let w = params.value(weight);
        let b = params.value(bias);
        let input = &self.nodes[x.0].value;
        let out = affine_eval(w, b, input)?;
        Ok(self.push(out, Op::Affine { x, weight, bias }))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| leaky_relu(v)).collect();
        self.push(out, Op::LeakyRelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(out, Op::Tanh { x })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        self.push(out, Op::Concat { a, b })
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if start + len > src.len() {
            return Err(Error::Config(format!(
                "slice {start}..{} out of range for length {}",
                start + len,
                src.len()
            )));
        }
        let out = src[start..start + len].to_vec();
        Ok(self.push(out, Op::Slice { x, start }))
    }

    pub fn min_max_scale(&mut self, x: Var) -> Var {
        let (out, extremes) = min_max_scale_with_extremes(self.value(x));
        self.push(out, Op::MinMaxScale { x, extremes })
    }

    /// Elementwise clamp; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Identity in the forward pass; multiplies the gradient by `factor`.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).to_vec();
        self.push(out, Op::ScaleGrad { x, factor })
    }

    /// Adjoint of `v` from the most recent [`Tape::backward`] call.
    pub fn gradient(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    /// Reverse pass. `seeds` gives d(loss)/d(value) for chosen outputs;
    /// parameter gradients are added into `grads` (never overwritten).
    pub fn backward(&mut self, params: &ParameterStore, seeds: &[(Var, &[f64])], grads: &mut Gradients) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape (no forward pass recorded)".into()));
        }
        if grads.num_slots() != params.len() {
            return Err(Error::Usage(format!(
                "gradient buffer has {} slots but the store has {} parameters",
                grads.num_slots(),
                params.len()
            )));
        }
        self.adjoints.clear();
        self.adjoints.resize(self.nodes.len(), None);
        for (v, g) in seeds {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::Usage(format!("seed variable {} is not on this tape", v.0)))?;
            if node.value.len() != g.len() {
                return Err(Error::Usage(format!(
                    "seed gradient length {} does not match value length {}",
                    g.len(),
                    node.value.len()
                )));
            }
            add_into(&mut self.adjoints[v.0], g);
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(adj) = self.adjoints[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, weight, bias } => {
                    let w = &params.value(*weight).data;
                    let input = &self.nodes[x.0].value;
                    let n_in = input.len();
                    {
                        let gb = grads.get_mut(*bias);
                        for (g, a) in gb.iter_mut().zip(&adj) {
                            *g += a;
                        }
                    }
                    let gw = grads.get_mut(*weight);
                    let mut gx = vec![0.0; n_in];
                    for (o, &go) in adj.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let row = o * n_in;
                        let wrow = &w[row..row + n_in];
                        let gwrow = &mut gw[row..row + n_in];
                        for ((gwi, &xi), (gxi, &wi)) in gwrow.iter_mut().zip(input).zip(gx.iter_mut().zip(wrow)) {
                            *gwi += go * xi;
                            *gxi += go * wi;
                        }
                    }
                    add_into(&mut self.adjoints[x.0], &gx);
                }
                Op::LeakyRelu { x } => {
                    let input = &self.nodes[x.0].value;
                    let g: Vec<f64> = adj
                        .iter()
                        .zip(input)
                        .map(|(a, &v)| if v > 0.0 { *a } else { a * LEAKY_SLOPE })
                        .collect();
                    add_into(&mut self.adjoints[x.0], &g);
                }
                Op::Tanh { x } => {
                    let g: Vec<f64> = adj.iter().zip(&node.value).map(|(a, y)| a * (1.0 - y * y)).collect();
                    add_into(&mut self.adjoints[x.0], &g);
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].value.len();
                    let (ga, gb) = adj.split_at(na);
                    let (a, b) = (*a, *b);
                    add_into(&mut self.adjoints[a.0], ga);
                    add_into(&mut self.adjoints[b.0], gb);
                }
                Op::Slice { x, start } => {
                    let mut g = vec![0.0; self.nodes[x.0].value.len()];
                    g[*start..*start + adj.len()].copy_from_slice(&adj);
                    add_into(&mut self.adjoints[x.0], &g);
                }
                Op::MinMaxScale { x, extremes } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.len();
                    let mut g = vec![0.0; n];
                    if let Some((lo, hi)) = *extremes {
                        let input = &self.nodes[x.0].value;
                        let range = input[hi] - input[lo];
                        // y_i = (2 x_i - x_lo - x_hi) / (x_hi - x_lo)
                        let sum_g: f64 = adj.iter().sum();
                        let sum_gy: f64 = adj.iter().zip(&node.value).map(|(a, y)| a * y).sum();
                        for (gi, a) in g.iter_mut().zip(&adj) {
                            *gi = 2.0 * a / range;
                        }
                        g[lo] += (-sum_g + sum_gy) / range;
                        g[hi] += (-sum_g - sum_gy) / range;
                    }
                    add_into(&mut self.adjoints[x.0], &g);
                }
                Op::Clamp { x, lo, hi } => {
                    let input = &self.nodes[x.0].value;
                    let g: Vec<f64> = adj
                        .iter()
                        .zip(input)
                        .map(|(a, &v)| if v < *lo || v > *hi { 0.0 } else { *a })
                        .collect();
                    add_into(&mut self.adjoints[x.0], &g);
                }
                Op::ScaleGrad { x, factor } => {
                    let g: Vec<f64> = adj.iter().map(|a| a * factor).collect();
                    add_into(&mut self.adjoints[x.0], &g);
                }
            }
            self.adjoints[i] = Some(adj);
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[inline]
pub fn leaky_relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn affine_eval(w: &Tensor, b: &Tensor, input: &[f64]) -> Result<Vec<f64>> {
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    if input.len() != n_in {
        return Err(Error::Config(format!("layer expects input of length {n_in}, got {}", input.len())));
    }
    let mut out = b.data.clone();
    for (o, y) in out.iter_mut().enumerate().take(n_out) {
        let row = &w.data[o * n_in..(o + 1) * n_in];
        *y += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(out)
}

/// `(2x - (min + max)) / (max - min)`; a constant vector maps to zeros.
pub fn min_max_scale(x: &[f64]) -> Vec<f64> {
    min_max_scale_with_extremes(x).0
}

fn min_max_scale_with_extremes(x: &[f64]) -> (Vec<f64>, Option<(usize, usize)>) {
    if x.is_empty() {
        return (Vec::new(), None);
    }
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in x.iter().enumerate() {
        if v < x[lo] {
            lo = i;
        }
        if v > x[hi] {
            hi = i;
        }
    }
    let range = x[hi] - x[lo];
    if !(range > 0.0) {
        return (vec![0.0; x.len()], None);
    }
    let mid = x[lo] + x[hi];
    (x.iter().map(|v| (2.0 * v - mid) / range).collect(), Some((lo, hi)))
}

// ---------------------------------------------------------------------------
// Dense networks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenActivation {
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Layer widths including the input width, so `[4, 64, 64, 2]` has three
/// affine layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNetworkSpec {
    pub widths: Vec<usize>,
    pub hidden: HiddenActivation,
    pub output: OutputActivation,
}

impl DenseNetworkSpec {
    pub fn new(widths: Vec<usize>, output: OutputActivation) -> Self {
        Self { widths, hidden: HiddenActivation::LeakyRelu, output }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("a dense network needs an input width and at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("layer widths must be >= 1, got {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// A fully-connected network bound to parameters in a store.
#[derive(Clone, Debug)]
pub struct DenseNetwork {
    spec: DenseNetworkSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl DenseNetwork {
    /// Registers `<prefix>.l<i>.weight` / `.bias` with uniform
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
    pub fn new<R: Rng>(spec: DenseNetworkSpec, store: &mut ParameterStore, prefix: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        for (i, pair) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            store.register(&format!("{prefix}.l{i}.weight"), Tensor::from_vec(&[fan_out, fan_in], w)?)?;
            store.register(&format!("{prefix}.l{i}.bias"), Tensor::from_vec(&[fan_out], b)?)?;
        }
        Self::bind(spec, store, prefix)
    }

    /// Looks up existing parameters by name and checks their shapes.
    pub fn bind(spec: DenseNetworkSpec, store: &ParameterStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for (i, pair) in spec.widths.windows(2).enumerate() {
            let lookup = |suffix: &str, shape: &[usize]| -> Result<ParamId> {
                let name = format!("{prefix}.l{i}.{suffix}");
                let id = store.id(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
                if store.value(id).shape != shape {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, architecture expects {shape:?}",
                        store.value(id).shape
                    )));
                }
                Ok(id)
            };
            layers.push((lookup("weight", &[pair[1], pair[0]])?, lookup("bias", &[pair[1]])?));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &DenseNetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.spec.input_width() {
            return Err(Error::Config(format!(
                "network expects input of length {}, got {len}",
                self.spec.input_width()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording.
    pub fn eval(&self, params: &ParameterStore, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let last = self.layers.len() - 1;
        let mut h = input.to_vec();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = affine_eval(params.value(w), params.value(b), &h)?;
            if i < last {
                h.iter_mut().for_each(|v| *v = leaky_relu(*v));
            } else if self.spec.output == OutputActivation::Tanh {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`.
    pub fn forward(&self, params: &ParameterStore, tape: &mut Tape, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).len())?;
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(params, h, w, b)?;
            if i < last {
                h = tape.leaky_relu(h);
            } else if self.spec.output == OutputActivation::Tanh {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values.iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one Adam update from the store's gradients, then clears them
    /// and bumps the store version.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Usage("optimizer state does not match parameter store".into()));
        }
        for (id, g) in store.grads.slots.iter().enumerate() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter {} at index {i}",
                    store.names[id]
                )));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, tensor) in store.values.iter_mut().enumerate() {
            let g = &store.grads.slots[id];
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (k, p) in tensor.data.iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.clear_grads();
        store.version += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(weight: &[f64], bias: &[f64], n_in: usize, output: OutputActivation) -> (DenseNetwork, ParameterStore) {
        let n_out = bias.len();
        let mut store = ParameterStore::new();
        store.register("net.l0.weight", Tensor::from_vec(&[n_out, n_in], weight.to_vec()).unwrap()).unwrap();
        store.register("net.l0.bias", Tensor::from_vec(&[n_out], bias.to_vec()).unwrap()).unwrap();
        let net = DenseNetwork::bind(DenseNetworkSpec::new(vec![n_in, n_out], output), &store, "net").unwrap();
        (net, store)
    }

    fn random_net(widths: Vec<usize>, output: OutputActivation, seed: u64) -> (DenseNetwork, ParameterStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let net = DenseNetwork::new(DenseNetworkSpec::new(widths, output), &mut store, "net", &mut rng).unwrap();
        (net, store)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DenseNetwork::new(DenseNetworkSpec::new(vec![3, 5, 2], OutputActivation::Tanh), &mut store, "z", &mut rng)
            .unwrap();
        for id in 0..store.len() {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.eval(&store, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (net, store) = single_layer(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, OutputActivation::Identity);
        assert_eq!(net.eval(&store, &[0.25, -4.0]).unwrap(), vec![0.25, -4.0]);
    }

    #[test]
    fn scalar_affine_hand_value() {
        let (net, store) = single_layer(&[2.0], &[0.5], 1, OutputActivation::Identity);
        assert_eq!(net.eval(&store, &[1.0]).unwrap(), vec![2.5]);
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0]);
        let y = net.forward(&store, &mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[2.5]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let (net, store) = single_layer(&[2.0], &[0.5], 1, OutputActivation::Identity);
        assert!(matches!(net.eval(&store, &[1.0, 2.0]), Err(Error::Config(_))));
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0]);
        assert!(matches!(net.forward(&store, &mut tape, x), Err(Error::Config(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(DenseNetworkSpec::new(vec![3], OutputActivation::Identity).validate().is_err());
        assert!(DenseNetworkSpec::new(vec![3, 0, 1], OutputActivation::Identity).validate().is_err());
        assert!(DenseNetworkSpec::new(vec![3, 1], OutputActivation::Identity).validate().is_ok());
    }

    #[test]
    fn weight_gradient_of_scalar_linear() {
        let (net, store) = single_layer(&[0.7], &[0.0], 1, OutputActivation::Identity);
        let mut tape = Tape::new();
        let x = tape.leaf(&[3.0]);
        let y = net.forward(&store, &mut tape, x).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(&store, &[(y, &[1.0])], &mut grads).unwrap();
        assert_eq!(grads.get(0), &[3.0]);
        assert_eq!(grads.get(1), &[1.0]);
        assert_eq!(tape.gradient(x).unwrap(), &[0.7]);
    }

    #[test]
    fn output_without_parameter_dependence_has_zero_gradients() {
        let (_, store) = single_layer(&[0.7], &[0.1], 1, OutputActivation::Identity);
        let mut tape = Tape::new();
        let x = tape.leaf(&[3.0]);
        let y = tape.tanh(x);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(&store, &[(y, &[1.0])], &mut grads).unwrap();
        assert_eq!(grads.norm_sq(), 0.0);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let (_, store) = single_layer(&[0.7], &[0.1], 1, OutputActivation::Identity);
        let mut grads = Gradients::zeros_like(&store);
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(&store, &[], &mut grads), Err(Error::Usage(_))));
        let mut other = Tape::new();
        let x = other.leaf(&[1.0]);
        let _ = other.leaf(&[2.0]);
        let y = other.tanh(x);
        tape.leaf(&[0.0]);
        assert!(matches!(tape.backward(&store, &[(y, &[1.0])], &mut grads), Err(Error::Usage(_))));
    }

    /// Central-difference gradient of `seed . net(input)` for every parameter.
    fn finite_difference(net: &DenseNetwork, store: &ParameterStore, input: &[f64], seed: &[f64]) -> Vec<Vec<f64>> {
        let h = 1e-5;
        let objective = |s: &ParameterStore| -> f64 {
            net.eval(s, input).unwrap().iter().zip(seed).map(|(a, b)| a * b).sum()
        };
        let mut out = Vec::new();
        for id in 0..store.len() {
            let mut g = Vec::new();
            for k in 0..store.value(id).len() {
                let mut plus = store.clone();
                plus.value_mut(id).data[k] += h;
                let mut minus = store.clone();
                minus.value_mut(id).data[k] -= h;
                g.push((objective(&plus) - objective(&minus)) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences_on_random_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..25 {
            let depth = rng.gen_range(1..=3);
            let mut widths = vec![rng.gen_range(1..=8)];
            for _ in 0..depth {
                widths.push(rng.gen_range(1..=8));
            }
            let output = if trial % 2 == 0 { OutputActivation::Tanh } else { OutputActivation::Identity };
            let (net, store) = random_net(widths.clone(), output, trial);
            let input: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seed: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let x = tape.leaf(&input);
            let y = net.forward(&store, &mut tape, x).unwrap();
            let mut grads = Gradients::zeros_like(&store);
            tape.backward(&store, &[(y, &seed)], &mut grads).unwrap();

            let fd = finite_difference(&net, &store, &input, &seed);
            for (id, g_fd) in fd.iter().enumerate() {
                for (k, (&a, &n)) in grads.get(id).iter().zip(g_fd).enumerate() {
                    assert!(rel_err(a, n) < 1e-4, "trial {trial} {} [{k}]: {a} vs {n}", store.name(id));
                }
            }
        }
    }

    #[test]
    fn backward_accumulates_additively() {
        let (net, store) = random_net(vec![3, 4, 2], OutputActivation::Tanh, 3);
        let run = |seed: &[f64], times: usize| {
            let mut grads = Gradients::zeros_like(&store);
            for _ in 0..times {
                let mut tape = Tape::new();
                let x = tape.leaf(&[0.1, -0.4, 0.9]);
                let y = net.forward(&store, &mut tape, x).unwrap();
                tape.backward(&store, &[(y, seed)], &mut grads).unwrap();
            }
            grads
        };
        let twice = run(&[0.3, -0.2], 2);
        let doubled = run(&[0.6, -0.4], 1);
        for id in 0..store.len() {
            for (a, b) in twice.get(id).iter().zip(doubled.get(id)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_matches_eval() {
        let (net, store) = random_net(vec![4, 8, 8, 3], OutputActivation::Tanh, 5);
        let (net2, store2) = random_net(vec![4, 8, 8, 3], OutputActivation::Tanh, 5);
        let input = [0.3, -0.1, 0.7, 0.0];
        let a = net.eval(&store, &input).unwrap();
        assert_eq!(a, net2.eval(&store2, &input).unwrap());
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let y = net.forward(&store, &mut tape, x).unwrap();
        assert_eq!(tape.value(y), a.as_slice());
    }

    #[test]
    fn min_max_scale_values_and_gradient() {
        assert_eq!(min_max_scale(&[0.0, 2.0]), vec![-1.0, 1.0]);
        assert_eq!(min_max_scale(&[-1.0, 1.0]), vec![-1.0, 1.0]);
        assert_eq!(min_max_scale(&[1.0, 2.0, 3.0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(min_max_scale(&[4.0, 4.0]), vec![0.0, 0.0]);

        let store = ParameterStore::new();
        let input = [0.3, -1.2, 0.8, 2.5, 0.1];
        let seed = [0.4, -0.3, 1.1, 0.2, -0.7];
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let y = tape.min_max_scale(x);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(&store, &[(y, &seed)], &mut grads).unwrap();
        let gx = tape.gradient(x).unwrap().to_vec();
        let f = |v: &[f64]| -> f64 { min_max_scale(v).iter().zip(&seed).map(|(a, b)| a * b).sum() };
        for k in 0..input.len() {
            let mut p = input;
            p[k] += 1e-6;
            let mut m = input;
            m[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!(rel_err(gx[k], fd) < 1e-6, "{k}: {} vs {fd}", gx[k]);
        }
    }

    #[test]
    fn scale_grad_and_clamp_backward() {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(&[-3.0, 0.5, 4.0]);
        let c = tape.clamp(x, -2.0, 2.0);
        let s = tape.scale_grad(c, 0.5);
        assert_eq!(tape.value(s), &[-2.0, 0.5, 2.0]);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(&store, &[(s, &[1.0, 1.0, 1.0])], &mut grads).unwrap();
        assert_eq!(tape.gradient(x).unwrap(), &[0.0, 0.5, 0.0]);
    }

    fn scalar_store(value: f64, grad: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        store.register("p", Tensor::from_vec(&[1], vec![value]).unwrap()).unwrap();
        store.grads_mut().get_mut(0)[0] = grad;
        store
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut store = scalar_store(1.5, 0.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(0).data, vec![1.5]);
        assert_eq!(store.version(), 1);
    }

    #[test]
    fn adam_two_step_hand_trajectory() {
        let mut store = scalar_store(1.0, 0.5);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, 0.1).unwrap();
        // m1 = 0.05, v1 = 0.00025 -> m_hat = 0.5, v_hat = 0.25
        let after_one = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(0).data[0] - after_one).abs() < 1e-15);
        assert_eq!(store.grads().get(0), &[0.0]);
        store.grads_mut().get_mut(0)[0] = 0.5;
        adam.step(&mut store, 0.1).unwrap();
        // m2 = 0.095 / 0.19 = 0.5, v2 = 0.00049975 / 0.001999 = 0.25
        let after_two = after_one - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(0).data[0] - after_two).abs() < 1e-12);
        assert_eq!(store.version(), 2);
    }

    #[test]
    fn adam_zero_learning_rate_only_bumps_version() {
        let mut store = scalar_store(-2.0, 3.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, 0.0).unwrap();
        assert_eq!(store.value(0).data, vec![-2.0]);
        assert_eq!(store.version(), 1);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut store = scalar_store(1.0, f64::NAN);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        match adam.step(&mut store, 0.1) {
            Err(Error::Training(msg)) => assert!(msg.contains('p')),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.version(), 0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (_, mut store) = random_net(vec![3, 7, 2], OutputActivation::Tanh, 9);
        store.value_mut(0).data[0] = std::f64::consts::PI * 1e-300;
        store.value_mut(1).data[0] = -0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        store.save_json(&path).unwrap();
        let loaded = ParameterStore::load_json(&path).unwrap();
        assert_eq!(loaded.checksum(), store.checksum());
        for id in 0..store.len() {
            assert_eq!(loaded.name(id), store.name(id));
            assert_eq!(loaded.value(id), store.value(id));
        }
    }

    #[test]
    fn bind_reports_shape_mismatch() {
        let (_, store) = random_net(vec![3, 4], OutputActivation::Identity, 1);
        let err = DenseNetwork::bind(DenseNetworkSpec::new(vec![2, 4], OutputActivation::Identity), &store, "net");
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
