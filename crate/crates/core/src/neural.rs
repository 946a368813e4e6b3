//! HyperAgent with a last-layer linear hypermodel over a one-hidden-layer
//! feature network, trained by SGD on the sampled perturbed TD loss.
//!
//! `f(s, a, xi) = <A_a xi + b_a, phi_w(s)> + scale * <A0_a xi + b0_a, phi_w0(s)>`,
//! with `phi_w(x) = relu(W1 x + b1)`. The prior half never changes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{one_hot_policy, Agent};
use crate::error::{check_dim, Error, Result};
use crate::hypermodel::dot;
use crate::rng::{sphere_into, RngStream};

/// A network input: a one-hot index (fast path) or a dense vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Obs {
    OneHot(usize),
    Dense(Vec<f64>),
}

/// `phi(x) = relu(W1 x + b1)`, `W1` row-major `hidden x input_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub input_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
}

impl FeatureNet {
    /// Xavier-normal weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, stream: &mut RngStream) -> Self {
        let std = (2.0 / (input_dim + hidden) as f64).sqrt();
        let w1 = (0..hidden * input_dim).map(|_| stream.normal(0.0, std)).collect();
        Self { input_dim, hidden, w1, b1: vec![0.0; hidden] }
    }

    fn check_obs(&self, x: &Obs) -> Result<()> {
        match x {
            Obs::OneHot(i) if *i < self.input_dim => Ok(()),
            Obs::OneHot(i) => Err(Error::DimensionMismatch { expected: self.input_dim, got: *i }),
            Obs::Dense(v) => check_dim(self.input_dim, v.len()),
        }
    }

    /// Pre-activations into `pre`, features into `phi`.
    fn forward_into(&self, x: &Obs, pre: &mut [f64], phi: &mut [f64]) {
        for h in 0..self.hidden {
            let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
            let z = self.b1[h]
                + match x {
                    Obs::OneHot(i) => row[*i],
                    Obs::Dense(v) => dot(row, v),
                };
            pre[h] = z;
            phi[h] = z.max(0.0);
        }
    }

    pub fn features(&self, x: &Obs) -> Result<Vec<f64>> {
        self.check_obs(x)?;
        let mut pre = vec![0.0; self.hidden];
        let mut phi = vec![0.0; self.hidden];
        self.forward_into(x, &mut pre, &mut phi);
        Ok(phi)
    }
}

/// Per-action last layer `A_a xi + b_a`; `A` indexed `[(a * hidden + h) * M + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LastLayerHyper {
    pub num_actions: usize,
    pub hidden: usize,
    pub index_dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LastLayerHyper {
    pub fn zeros(num_actions: usize, hidden: usize, index_dim: usize) -> Self {
        Self { num_actions, hidden, index_dim, a: vec![0.0; num_actions * hidden * index_dim], b: vec![0.0; num_actions * hidden] }
    }

    /// Xavier-normal `A` (fan-in `M`, fan-out `hidden * actions`), zero `b`.
    pub fn init(num_actions: usize, hidden: usize, index_dim: usize, stream: &mut RngStream) -> Self {
        let std = (2.0 / (index_dim + hidden * num_actions) as f64).sqrt();
        let mut head = Self::zeros(num_actions, hidden, index_dim);
        head.a.iter_mut().for_each(|v| *v = stream.normal(0.0, std));
        head
    }

    fn a_row(&self, action: usize, h: usize) -> &[f64] {
        let start = (action * self.hidden + h) * self.index_dim;
        &self.a[start..start + self.index_dim]
    }

    /// `(A_a^T phi, b_a . phi)`: the index-linear and constant parts of the output.
    fn project(&self, action: usize, phi: &[f64]) -> (Vec<f64>, f64) {
        let mut c = vec![0.0; self.index_dim];
        let mut bias = 0.0;
        for (h, &p) in phi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (ck, ak) in c.iter_mut().zip(self.a_row(action, h)) {
                *ck += p * ak;
            }
            bias += p * self.b[action * self.hidden + h];
        }
        (c, bias)
    }
}

/// Trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralParams {
    pub net: FeatureNet,
    pub head: LastLayerHyper,
}

impl NeuralParams {
    pub fn init(input_dim: usize, hidden: usize, num_actions: usize, index_dim: usize, stream: &mut RngStream) -> Self {
        let net = FeatureNet::init(input_dim, hidden, stream);
        let head = LastLayerHyper::init(num_actions, hidden, index_dim, stream);
        Self { net, head }
    }

    pub fn num_actions(&self) -> usize {
        self.head.num_actions
    }

    pub fn index_dim(&self) -> usize {
        self.head.index_dim
    }

    fn blocks(&self) -> [(&'static str, &Vec<f64>); 4] {
        [("w1", &self.net.w1), ("b1", &self.net.b1), ("a", &self.head.a), ("b", &self.head.b)]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.net.w1, &mut self.net.b1, &mut self.head.a, &mut self.head.b]
    }

    pub fn squared_norm(&self) -> f64 {
        self.blocks().iter().map(|(_, v)| dot(v, v)).sum()
    }
}

/// Fixed prior: its own frozen feature net and a head whose rows lie on the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralPrior {
    pub net: FeatureNet,
    pub head: LastLayerHyper,
    pub scale: f64,
}

/// Build the fixed prior: feature net initialised like the trainable one,
/// every row of `A0_a` drawn uniformly from the sphere, `b0 = 0`.
pub fn init_prior(input_dim: usize, hidden: usize, num_actions: usize, index_dim: usize, scale: f64, stream: &mut RngStream) -> NeuralPrior {
    let net = FeatureNet::init(input_dim, hidden, stream);
    let mut head = LastLayerHyper::zeros(num_actions, hidden, index_dim);
    for row in head.a.chunks_mut(index_dim) {
        sphere_into(stream, row);
    }
    NeuralPrior { net, head, scale }
}

/// Learnable and prior contributions to `f(s, a, xi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardParts {
    pub learnable: f64,
    pub prior: f64,
}

impl ForwardParts {
    pub fn total(&self) -> f64 {
        self.learnable + self.prior
    }
}

pub fn forward(params: &NeuralParams, prior: &NeuralPrior, x: &Obs, action: usize, xi: &[f64]) -> Result<ForwardParts> {
    check_dim(params.index_dim(), xi.len())?;
    check_dim(prior.head.index_dim, xi.len())?;
    if action >= params.num_actions() {
        return Err(Error::InvalidAction { action, num_actions: params.num_actions() });
    }
    let phi = params.net.features(x)?;
    let (c, bias) = params.head.project(action, &phi);
    let phi0 = prior.net.features(x)?;
    let (c0, bias0) = prior.head.project(action, &phi0);
    Ok(ForwardParts { learnable: dot(&c, xi) + bias, prior: prior.scale * (dot(&c0, xi) + bias0) })
}

/// Index-linear summary of `f(s, a, .)` for every action: `f = c_a . xi + d_a`.
#[derive(Clone, Debug)]
struct ActionProjections {
    c: Vec<Vec<f64>>,
    d: Vec<f64>,
}

impl ActionProjections {
    fn eval(&self, action: usize, xi: &[f64]) -> f64 {
        dot(&self.c[action], xi) + self.d[action]
    }

    fn max_over_actions(&self, xi: &[f64]) -> f64 {
        (0..self.d.len()).map(|a| self.eval(a, xi)).fold(f64::NEG_INFINITY, f64::max)
    }

    fn argmax(&self, xi: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = self.eval(0, xi);
        for a in 1..self.d.len() {
            let v = self.eval(a, xi);
            if v > best_v {
                best = a;
                best_v = v;
            }
        }
        best
    }
}

fn project_all(params: &NeuralParams, prior: &NeuralPrior, x: &Obs) -> Result<ActionProjections> {
    let phi = params.net.features(x)?;
    let phi0 = prior.net.features(x)?;
    let mut c = Vec::with_capacity(params.num_actions());
    let mut d = Vec::with_capacity(params.num_actions());
    for a in 0..params.num_actions() {
        let (mut ca, da) = params.head.project(a, &phi);
        let (c0, d0) = prior.head.project(a, &phi0);
        ca.iter_mut().zip(&c0).for_each(|(x, y)| *x += prior.scale * y);
        c.push(ca);
        d.push(da + prior.scale * d0);
    }
    Ok(ActionProjections { c, d })
}

/// A stored transition with its perturbation vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralTransition {
    pub obs: Obs,
    pub action: usize,
    pub reward: f64,
    /// `None` for terminal transitions.
    pub next_obs: Option<Obs>,
    pub z: Vec<f64>,
}

/// `[r + sigma xi . z + gamma max_a' f_target(s', a', xi_target) - f(s, a, xi)]^2`.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_td_loss(
    params: &NeuralParams,
    target: &NeuralParams,
    prior: &NeuralPrior,
    xi: &[f64],
    xi_target: &[f64],
    d: &NeuralTransition,
    gamma: f64,
    sigma: f64,
) -> Result<f64> {
    check_dim(xi.len(), d.z.len())?;
    let f = forward(params, prior, &d.obs, d.action, xi)?.total();
    let boot = match &d.next_obs {
        None => 0.0,
        Some(next) => {
            check_dim(target.index_dim(), xi_target.len())?;
            project_all(target, prior, next)?.max_over_actions(xi_target)
        }
    };
    let y = d.reward + sigma * dot(xi, &d.z) + gamma * boot;
    Ok((y - f).powi(2))
}

/// Ring buffer of transitions; the stored `z` is never redrawn.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    min_fill: usize,
    data: Vec<NeuralTransition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, min_fill: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, min_fill, data: Vec::new(), next: 0 })
    }

    pub fn push(&mut self, t: NeuralTransition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ready(&self) -> bool {
        self.data.len() >= self.min_fill.max(1)
    }

    pub fn get(&self, i: usize) -> &NeuralTransition {
        &self.data[i]
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, n: usize, stream: &mut RngStream) -> Vec<usize> {
        (0..n).map(|_| stream.below(self.data.len())).collect()
    }
}

/// How target indices `xi-` are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetIndexScheme {
    /// A fresh index per record, independent of the main indices.
    #[default]
    PerRecord,
    /// Reuse the main index for the target.
    SharedWithMain,
}

/// Update rule applied to the sampled-loss gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    /// Adam with the usual moment decays `0.9`, `0.999` and `eps = 1e-8`.
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralAgentConfig {
    pub hidden: usize,
    pub index_dim: usize,
    pub index_batch: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub target_update_freq: usize,
    pub sample_update_ratio: usize,
    pub training_freq: usize,
    pub min_replay: usize,
    pub memory_size: usize,
    pub prior_scale: f64,
    pub target_scheme: TargetIndexScheme,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Keep `A` fixed; with a zero `A` and no prior this is plain DQN.
    #[serde(default)]
    pub freeze_index_weights: bool,
}

impl NeuralAgentConfig {
    /// DeepSea settings: hidden 64, M = 4, 20 indices, batch 128, sigma 1e-4,
    /// no weight decay, gamma 0.99, Adam at learning rate 1e-3, target sync
    /// every 4 train steps, one update per step, replay from 128 transitions.
    /// Plain SGD at the same rate barely moves a one-hot network in 10^4
    /// episodes; set `optimizer` to [`Optimizer::Sgd`] to get it.
    pub fn deepsea() -> Self {
        Self {
            hidden: 64,
            index_dim: 4,
            index_batch: 20,
            batch_size: 128,
            sigma: 1e-4,
            weight_decay: 0.0,
            gamma: 0.99,
            learning_rate: 1e-3,
            target_update_freq: 4,
            sample_update_ratio: 1,
            training_freq: 1,
            min_replay: 128,
            memory_size: 1_000_000,
            prior_scale: 1.0,
            target_scheme: TargetIndexScheme::PerRecord,
            optimizer: Optimizer::adam(),
            freeze_index_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.index_dim == 0 {
            return Err(Error::InvalidDimension("hidden width and index dimension must be positive".into()));
        }
        if self.index_batch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("index batch and minibatch must be positive".into()));
        }
        if self.target_update_freq == 0 || self.training_freq == 0 {
            return Err(Error::InvalidConfig("update frequencies must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.weight_decay >= 0.0 && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("sigma, weight decay and learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gradients with the same layout as [`NeuralParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Gradients {
    fn zeros_like(p: &NeuralParams) -> Self {
        Self { w1: vec![0.0; p.net.w1.len()], b1: vec![0.0; p.net.b1.len()], a: vec![0.0; p.head.a.len()], b: vec![0.0; p.head.b.len()] }
    }

    pub fn blocks(&self) -> [(&'static str, &Vec<f64>); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("a", &self.a), ("b", &self.b)]
    }
}

/// One minibatch with its indices: `xis[j]` are the main indices and
/// `xi_targets[d][j]` the target index for record `d` under main index `j`.
#[derive(Clone, Debug)]
pub struct SampledBatch<'a> {
    pub records: Vec<&'a NeuralTransition>,
    pub xis: Vec<Vec<f64>>,
    pub xi_targets: Vec<Vec<Vec<f64>>>,
}

impl<'a> SampledBatch<'a> {
    /// Draw main indices from `N(0, I)` and target indices per `scheme`.
    pub fn draw(records: Vec<&'a NeuralTransition>, index_batch: usize, index_dim: usize, scheme: TargetIndexScheme, stream: &mut RngStream) -> Self {
        let xis: Vec<Vec<f64>> = (0..index_batch).map(|_| (0..index_dim).map(|_| stream.standard_normal()).collect()).collect();
        let xi_targets = records
            .iter()
            .map(|_| match scheme {
                TargetIndexScheme::SharedWithMain => xis.clone(),
                TargetIndexScheme::PerRecord => {
                    let xi: Vec<f64> = (0..index_dim).map(|_| stream.standard_normal()).collect();
                    vec![xi; index_batch]
                }
            })
            .collect();
        Self { records, xis, xi_targets }
    }
}

/// Sampled loss `(1/|Xi|)(1/|D~|) sum l + (beta / |D|) |theta|^2` and its
/// gradient with respect to the trainable parameters.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients(
    params: &NeuralParams,
    target: &NeuralParams,
    prior: &NeuralPrior,
    batch: &SampledBatch<'_>,
    gamma: f64,
    sigma: f64,
    weight_decay: f64,
    data_size: usize,
) -> Result<(f64, Gradients)> {
    if batch.records.is_empty() || batch.xis.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hidden = params.net.hidden;
    let m = params.index_dim();
    let scale = 1.0 / (batch.records.len() * batch.xis.len()) as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let mut pre = vec![0.0; hidden];
    let mut phi = vec![0.0; hidden];
    let mut pre0 = vec![0.0; hidden];
    let mut phi0 = vec![0.0; prior.net.hidden];
    for (d, rec) in batch.records.iter().enumerate() {
        params.net.check_obs(&rec.obs)?;
        check_dim(m, rec.z.len())?;
        if rec.action >= params.num_actions() {
            return Err(Error::InvalidAction { action: rec.action, num_actions: params.num_actions() });
        }
        params.net.forward_into(&rec.obs, &mut pre, &mut phi);
        prior.net.forward_into(&rec.obs, &mut pre0, &mut phi0);
        let (c, bias) = params.head.project(rec.action, &phi);
        let (c0, bias0) = prior.head.project(rec.action, &phi0);
        let next = match &rec.next_obs {
            Some(x) => Some(project_all(target, prior, x)?),
            None => None,
        };
        // G = sum_j g_j xi_j and gs = sum_j g_j, where g_j = dLoss / df_j.
        let mut g_xi = vec![0.0; m];
        let mut g_sum = 0.0;
        for (j, xi) in batch.xis.iter().enumerate() {
            let f = dot(&c, xi) + bias + prior.scale * (dot(&c0, xi) + bias0);
            let boot = next.as_ref().map_or(0.0, |p| p.max_over_actions(&batch.xi_targets[d][j]));
            let y = rec.reward + sigma * dot(xi, &rec.z) + gamma * boot;
            let delta = f - y;
            loss += scale * delta * delta;
            let g = 2.0 * scale * delta;
            g_sum += g;
            g_xi.iter_mut().zip(xi).for_each(|(acc, x)| *acc += g * x);
        }
        let a = rec.action;
        for h in 0..hidden {
            let row = (a * hidden + h) * m;
            let p = phi[h];
            if p != 0.0 {
                for k in 0..m {
                    grads.a[row + k] += p * g_xi[k];
                }
                grads.b[a * hidden + h] += p * g_sum;
            }
            if pre[h] > 0.0 {
                let g_phi = dot(&params.head.a[row..row + m], &g_xi) + params.head.b[a * hidden + h] * g_sum;
                grads.b1[h] += g_phi;
                let w_row = &mut grads.w1[h * params.net.input_dim..(h + 1) * params.net.input_dim];
                match &rec.obs {
                    Obs::OneHot(i) => w_row[*i] += g_phi,
                    Obs::Dense(x) => w_row.iter_mut().zip(x).for_each(|(w, xv)| *w += g_phi * xv),
                }
            }
        }
    }
    if weight_decay > 0.0 {
        let coef = weight_decay / data_size.max(1) as f64;
        loss += coef * params.squared_norm();
        for (g, (_, p)) in [&mut grads.w1, &mut grads.b1, &mut grads.a, &mut grads.b].into_iter().zip(params.blocks()) {
            g.iter_mut().zip(p.iter()).for_each(|(g, p)| *g += 2.0 * coef * p);
        }
    }
    Ok((loss, grads))
}

/// First and second moment estimates for Adam, one pair per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: [Vec<f64>; 4],
    v: [Vec<f64>; 4],
    t: i32,
}

impl AdamState {
    pub fn new(params: &NeuralParams) -> Self {
        let zeros = |p: &NeuralParams| p.blocks().map(|(_, b)| vec![0.0; b.len()]);
        Self { m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One gradient step; returns the loss before the step.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step(
    params: &mut NeuralParams,
    target: &NeuralParams,
    prior: &NeuralPrior,
    batch: &SampledBatch<'_>,
    config: &NeuralAgentConfig,
    data_size: usize,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(params, target, prior, batch, config.gamma, config.sigma, config.weight_decay, data_size)?;
    let lr = config.learning_rate;
    for (i, (block, g)) in params.blocks_mut().into_iter().zip(grads.blocks()).enumerate() {
        if i == 2 && config.freeze_index_weights {
            continue;
        }
        block.iter_mut().zip(g.1).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(loss)
}

/// One Adam step on the same gradient; returns the loss before the step.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut NeuralParams,
    target: &NeuralParams,
    prior: &NeuralPrior,
    batch: &SampledBatch<'_>,
    config: &NeuralAgentConfig,
    data_size: usize,
    state: &mut AdamState,
) -> Result<f64> {
    let Optimizer::Adam { beta1, beta2, eps } = config.optimizer else {
        return Err(Error::InvalidConfig("adam_step needs an Adam optimizer config".into()));
    };
    let (loss, grads) = loss_and_gradients(params, target, prior, batch, config.gamma, config.sigma, config.weight_decay, data_size)?;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t);
    let c2 = 1.0 - beta2.powi(state.t);
    let lr = config.learning_rate;
    for (i, (block, g)) in params.blocks_mut().into_iter().zip(grads.blocks()).enumerate() {
        if i == 2 && config.freeze_index_weights {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (p, g)) in block.iter_mut().zip(g.1).enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(loss)
}

/// Copy the trainable parameters into the target exactly when `j % target_update_freq == 0`.
pub fn target_sync(params: &NeuralParams, target: &mut NeuralParams, j: u64, target_update_freq: usize) -> bool {
    if j.is_multiple_of(target_update_freq as u64) {
        target.clone_from(params);
        true
    } else {
        false
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    input_dim: usize,
    hidden: usize,
    num_actions: usize,
    index_dim: usize,
    prior_scale: f64,
    blocks: Vec<(String, usize)>,
}

/// Write every parameter table (trainable then prior) as little-endian `f64`
/// to `<stem>.bin`, with shapes in `<stem>.json`.
pub fn save_checkpoint(params: &NeuralParams, prior: &NeuralPrior, stem: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    let all = checkpoint_blocks(params, prior);
    let manifest = CheckpointManifest {
        input_dim: params.net.input_dim,
        hidden: params.net.hidden,
        num_actions: params.num_actions(),
        index_dim: params.index_dim(),
        prior_scale: prior.scale,
        blocks: all.iter().map(|(n, v)| (n.to_string(), v.len())).collect(),
    };
    let mut bytes = Vec::new();
    for (_, block) in &all {
        for v in block.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(stem.with_extension("bin"), bytes).map_err(io)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(stem.with_extension("json"), json).map_err(io)
}

fn checkpoint_blocks<'a>(params: &'a NeuralParams, prior: &'a NeuralPrior) -> Vec<(&'static str, &'a Vec<f64>)> {
    let mut all: Vec<(&'static str, &Vec<f64>)> = params.blocks().to_vec();
    all.extend([("prior_w1", &prior.net.w1), ("prior_b1", &prior.net.b1), ("prior_a", &prior.head.a), ("prior_b", &prior.head.b)]);
    all
}

pub fn load_checkpoint(stem: &Path) -> Result<(NeuralParams, NeuralPrior)> {
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).map_err(io)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let bytes = fs::read(stem.with_extension("bin")).map_err(io)?;
    let total: usize = manifest.blocks.iter().map(|(_, n)| n).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!("expected {} bytes, found {}", total * 8, bytes.len())));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let (d, h, na, m) = (manifest.input_dim, manifest.hidden, manifest.num_actions, manifest.index_dim);
    let expected = [h * d, h, na * h * m, na * h, h * d, h, na * h * m, na * h];
    for ((name, n), e) in manifest.blocks.iter().zip(expected) {
        if *n != e {
            return Err(Error::Checkpoint(format!("block {name} has {n} values, expected {e}")));
        }
    }
    let sizes: Vec<usize> = manifest.blocks.iter().map(|(_, n)| *n).collect();
    let params = NeuralParams {
        net: FeatureNet { input_dim: d, hidden: h, w1: take(sizes[0]), b1: take(sizes[1]) },
        head: LastLayerHyper { num_actions: na, hidden: h, index_dim: m, a: take(sizes[2]), b: take(sizes[3]) },
    };
    let prior = NeuralPrior {
        net: FeatureNet { input_dim: d, hidden: h, w1: take(sizes[4]), b1: take(sizes[5]) },
        head: LastLayerHyper { num_actions: na, hidden: h, index_dim: m, a: take(sizes[6]), b: take(sizes[7]) },
        scale: manifest.prior_scale,
    };
    Ok((params, prior))
}

/// Neural HyperAgent over one-hot state encodings.
#[derive(Clone, Debug)]
pub struct NeuralHyperAgent {
    config: NeuralAgentConfig,
    num_states: usize,
    params: NeuralParams,
    target: NeuralParams,
    prior: NeuralPrior,
    buffer: ReplayBuffer,
    stream: RngStream,
    z_stream: RngStream,
    episode: u64,
    steps: u64,
    train_steps: u64,
    xi: Vec<f64>,
    last_loss: Option<f64>,
    adam: Option<AdamState>,
}

impl NeuralHyperAgent {
    pub fn new(config: NeuralAgentConfig, num_states: usize, num_actions: usize, stream: RngStream) -> Result<Self> {
        config.validate()?;
        let params = NeuralParams::init(num_states, config.hidden, num_actions, config.index_dim, &mut stream.child(0));
        let prior = init_prior(num_states, config.hidden, num_actions, config.index_dim, config.prior_scale, &mut stream.child(1));
        Self::from_parts(config, num_states, params, prior, stream)
    }

    pub fn from_parts(config: NeuralAgentConfig, num_states: usize, params: NeuralParams, prior: NeuralPrior, stream: RngStream) -> Result<Self> {
        config.validate()?;
        check_dim(num_states, params.net.input_dim)?;
        check_dim(config.index_dim, params.index_dim())?;
        let buffer = ReplayBuffer::new(config.memory_size, config.min_replay)?;
        Ok(Self {
            target: params.clone(),
            xi: vec![0.0; config.index_dim],
            config,
            num_states,
            params,
            prior,
            buffer,
            z_stream: stream.child(2),
            stream,
            episode: 0,
            steps: 0,
            train_steps: 0,
            last_loss: None,
            adam: None,
        })
    }

    pub fn params(&self) -> &NeuralParams {
        &self.params
    }

    pub fn target_params(&self) -> &NeuralParams {
        &self.target
    }

    pub fn prior(&self) -> &NeuralPrior {
        &self.prior
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    fn greedy(&self, state: usize, xi: &[f64]) -> Result<usize> {
        Ok(project_all(&self.params, &self.prior, &Obs::OneHot(state))?.argmax(xi))
    }

    fn train(&mut self) -> Result<()> {
        for _ in 0..self.config.sample_update_ratio {
            let mut s = self.stream.child(3).child(self.train_steps);
            let idx = self.buffer.sample_indices(self.config.batch_size, &mut s);
            let records = idx.iter().map(|&i| self.buffer.get(i)).collect();
            let batch = SampledBatch::draw(records, self.config.index_batch, self.config.index_dim, self.config.target_scheme, &mut s);
            let loss = match self.config.optimizer {
                Optimizer::Sgd => sgd_step(&mut self.params, &self.target, &self.prior, &batch, &self.config, self.buffer.len())?,
                Optimizer::Adam { .. } => {
                    let state = self.adam.get_or_insert_with(|| AdamState::new(&self.params));
                    adam_step(&mut self.params, &self.target, &self.prior, &batch, &self.config, self.buffer.len(), state)?
                }
            };
            self.last_loss = Some(loss);
            self.train_steps += 1;
            target_sync(&self.params, &mut self.target, self.train_steps, self.config.target_update_freq);
        }
        Ok(())
    }
}

impl Agent for NeuralHyperAgent {
    fn begin_episode(&mut self) -> Result<()> {
        let mut s = self.stream.child(1).child(self.episode);
        self.xi = (0..self.config.index_dim).map(|_| s.standard_normal()).collect();
        Ok(())
    }

    fn act(&mut self, state: usize) -> Result<usize> {
        self.greedy(state, &self.xi.clone())
    }

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>) -> Result<()> {
        let mut z = vec![0.0; self.config.index_dim];
        sphere_into(&mut self.z_stream, &mut z);
        self.buffer.push(NeuralTransition { obs: Obs::OneHot(state), action, reward, next_obs: next_state.map(Obs::OneHot), z });
        self.steps += 1;
        if self.steps.is_multiple_of(self.config.training_freq as u64) && self.buffer.ready() {
            self.train()?;
        }
        Ok(())
    }

    fn end_episode(&mut self) -> Result<()> {
        self.episode += 1;
        Ok(())
    }

    fn policy_probs(&mut self) -> Result<Vec<f64>> {
        let xi = self.xi.clone();
        let actions: Result<Vec<usize>> = (0..self.num_states).map(|s| self.greedy(s, &xi)).collect();
        Ok(one_hot_policy(&actions?, self.params.num_actions()))
    }

    fn eval_policy(&mut self) -> Result<Vec<usize>> {
        let zero = vec![0.0; self.config.index_dim];
        (0..self.num_states).map(|s| self.greedy(s, &zero)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (NeuralParams, NeuralPrior) {
        // One hidden unit, two inputs, one action, M = 2.
        let params = NeuralParams {
            net: FeatureNet { input_dim: 2, hidden: 1, w1: vec![0.5, -1.0], b1: vec![0.25] },
            head: LastLayerHyper { num_actions: 1, hidden: 1, index_dim: 2, a: vec![2.0, -1.0], b: vec![0.5] },
        };
        let prior = NeuralPrior {
            net: FeatureNet { input_dim: 2, hidden: 1, w1: vec![1.0, 1.0], b1: vec![0.0] },
            head: LastLayerHyper { num_actions: 1, hidden: 1, index_dim: 2, a: vec![0.6, 0.8], b: vec![0.1] },
            scale: 2.0,
        };
        (params, prior)
    }

    #[test]
    fn hand_computed_forward() {
        let (p, q) = tiny();
        let x = Obs::Dense(vec![2.0, 0.5]);
        let xi = [1.0, 3.0];
        // phi = relu(1 - 0.5 + 0.25) = 0.75; learnable = 0.75 * (2 - 3 + 0.5) = -0.375
        // phi0 = 2.5; prior = 2 * 2.5 * (0.6 + 2.4 + 0.1) = 15.5
        let parts = forward(&p, &q, &x, 0, &xi).unwrap();
        assert!((parts.learnable + 0.375).abs() < 1e-12);
        assert!((parts.prior - 15.5).abs() < 1e-12);
        let zero = forward(&p, &q, &x, 0, &[0.0, 0.0]).unwrap();
        assert!((zero.learnable - 0.75 * 0.5).abs() < 1e-12);
        assert!((zero.prior - 2.0 * 2.5 * 0.1).abs() < 1e-12);
        assert!(forward(&p, &q, &x, 0, &[1.0]).is_err());
        assert!(forward(&p, &q, &x, 1, &xi).is_err());
    }

    #[test]
    fn zeroed_learnable_part_leaves_prior() {
        let mut s = RngStream::new(1);
        let mut p = NeuralParams::init(5, 8, 2, 3, &mut s);
        p.head.a.iter_mut().for_each(|v| *v = 0.0);
        p.head.b.iter_mut().for_each(|v| *v = 0.0);
        let prior = init_prior(5, 8, 2, 3, 1.0, &mut s);
        let parts = forward(&p, &prior, &Obs::OneHot(3), 1, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(parts.learnable, 0.0);
        assert_eq!(parts.total(), parts.prior);
    }

    fn record(r: f64, z: Vec<f64>, next: Option<Obs>) -> NeuralTransition {
        NeuralTransition { obs: Obs::Dense(vec![2.0, 0.5]), action: 0, reward: r, next_obs: next, z }
    }

    #[test]
    fn td_loss_hand_cases() {
        let (p, mut q) = tiny();
        q.scale = 0.0;
        // f(s, 0, xi) at xi = (0, 0) is 0.375.
        let xi = [0.0, 0.0];
        let d = record(0.375, vec![1.0, 0.0], None);
        assert!(perturbed_td_loss(&p, &p, &q, &xi, &xi, &d, 0.0, 1.0).unwrap().abs() < 1e-24);
        let d = record(1.375, vec![1.0, 0.0], None);
        assert!((perturbed_td_loss(&p, &p, &q, &xi, &xi, &d, 0.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        // Perturbation term: sigma xi . z = 0.05 with xi = (0.05, 0), z = e1.
        let params = NeuralParams {
            net: FeatureNet { input_dim: 2, hidden: 1, w1: vec![0.0, 0.0], b1: vec![1.0] },
            head: LastLayerHyper { num_actions: 1, hidden: 1, index_dim: 2, a: vec![0.0, 0.0], b: vec![1.05] },
        };
        let d = record(1.0, vec![1.0, 0.0], None);
        assert!(perturbed_td_loss(&params, &params, &q, &[0.05, 0.0], &xi, &d, 0.0, 1.0).unwrap().abs() < 1e-24);
    }

    #[test]
    fn td_loss_with_bootstrap() {
        // Target max over {0.5, 0.7}; r = 0.1; sigma xi.z = 0.02; f = 0.4.
        let net = FeatureNet { input_dim: 2, hidden: 1, w1: vec![0.0, 0.0], b1: vec![1.0] };
        let main = NeuralParams { net: net.clone(), head: LastLayerHyper { num_actions: 2, hidden: 1, index_dim: 1, a: vec![0.0, 0.0], b: vec![0.4, 0.0] } };
        let target = NeuralParams { net: net.clone(), head: LastLayerHyper { num_actions: 2, hidden: 1, index_dim: 1, a: vec![0.0, 0.0], b: vec![0.5, 0.7] } };
        let prior = NeuralPrior { net, head: LastLayerHyper::zeros(2, 1, 1), scale: 1.0 };
        let d = NeuralTransition { obs: Obs::OneHot(0), action: 0, reward: 0.1, next_obs: Some(Obs::OneHot(1)), z: vec![1.0] };
        let loss = perturbed_td_loss(&main, &target, &prior, &[0.02], &[0.0], &d, 0.99, 1.0).unwrap();
        assert!((loss - 0.170569).abs() < 1e-12, "{loss}");
        let terminal = NeuralTransition { next_obs: None, ..d };
        let loss = perturbed_td_loss(&main, &target, &prior, &[0.02], &[0.0], &terminal, 0.99, 1.0).unwrap();
        assert!((loss - (0.12f64 - 0.4).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut s = RngStream::new(5);
        let mut p = NeuralParams::init(4, 6, 2, 3, &mut s);
        let target = p.clone();
        let prior = init_prior(4, 6, 2, 3, 1.0, &mut s);
        let recs: Vec<NeuralTransition> = (0..5)
            .map(|i| NeuralTransition { obs: Obs::OneHot(i % 4), action: i % 2, reward: 0.3, next_obs: Some(Obs::OneHot((i + 1) % 4)), z: vec![1.0, 0.0, 0.0] })
            .collect();
        let batch = SampledBatch::draw(recs.iter().collect(), 3, 3, TargetIndexScheme::PerRecord, &mut s);
        let mut cfg = NeuralAgentConfig::deepsea();
        cfg.learning_rate = 0.0;
        let before = p.clone();
        sgd_step(&mut p, &target, &prior, &batch, &cfg, 5).unwrap();
        assert_eq!(p, before);
        let empty = SampledBatch { records: Vec::new(), xis: batch.xis.clone(), xi_targets: Vec::new() };
        assert_eq!(sgd_step(&mut p, &target, &prior, &empty, &cfg, 5), Err(Error::EmptyBatch));
    }

    fn block_mut<'a>(p: &'a mut NeuralParams, name: &str) -> &'a mut Vec<f64> {
        match name {
            "w1" => &mut p.net.w1,
            "b1" => &mut p.net.b1,
            "a" => &mut p.head.a,
            _ => &mut p.head.b,
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut s = RngStream::new(100 + seed);
            let (d, h, na, m) = (2 + seed as usize % 3, 3 + seed as usize % 4, 2 + seed as usize % 2, 1 + seed as usize % 4);
            let mut params = NeuralParams::init(d, h, na, m, &mut s);
            params.net.b1.iter_mut().for_each(|b| *b = s.normal(0.0, 0.3));
            params.head.b.iter_mut().for_each(|b| *b = s.normal(0.0, 0.3));
            let target = NeuralParams::init(d, h, na, m, &mut s);
            let prior = init_prior(d, h, na, m, 0.7, &mut s);
            let recs: Vec<NeuralTransition> = (0..5)
                .map(|i| {
                    let dense = |s: &mut RngStream| Obs::Dense((0..d).map(|_| s.normal(0.0, 1.0)).collect());
                    let obs = if i % 2 == 0 { Obs::OneHot(i % d) } else { dense(&mut s) };
                    let next_obs = if i == 3 { None } else { Some(dense(&mut s)) };
                    let mut z = vec![0.0; m];
                    sphere_into(&mut s, &mut z);
                    NeuralTransition { obs, action: i % na, reward: s.uniform(), next_obs, z }
                })
                .collect();
            let scheme = if seed % 2 == 0 { TargetIndexScheme::PerRecord } else { TargetIndexScheme::SharedWithMain };
            let batch = SampledBatch::draw(recs.iter().collect(), 3, m, scheme, &mut s);
            let decay = if seed % 3 == 0 { 0.0 } else { 0.5 };
            let (_, grads) = loss_and_gradients(&params, &target, &prior, &batch, 0.9, 0.3, decay, 10).unwrap();
            for (name, analytic) in grads.blocks() {
                let x0 = block_mut(&mut params.clone(), name).clone();
                let numeric = hyperagent_oracles::central_difference(
                    |x| {
                        let mut p = params.clone();
                        block_mut(&mut p, name).copy_from_slice(x);
                        loss_and_gradients(&p, &target, &prior, &batch, 0.9, 0.3, decay, 10).unwrap().0
                    },
                    &x0,
                    1e-5,
                );
                let err = hyperagent_oracles::relative_error(analytic, &numeric, 1e-8);
                assert!(err < 1e-4, "seed {seed} block {name}: {err}");
            }
        }
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_the_learning_rate() {
        let mut s = RngStream::new(6);
        let mut p = NeuralParams::init(3, 4, 2, 2, &mut s);
        p.head.b.iter_mut().for_each(|b| *b = 0.5);
        let target = p.clone();
        let prior = init_prior(3, 4, 2, 2, 1.0, &mut s);
        let recs: Vec<NeuralTransition> =
            (0..6).map(|i| NeuralTransition { obs: Obs::OneHot(i % 3), action: i % 2, reward: 1.0, next_obs: None, z: vec![0.6, 0.8] }).collect();
        let batch = SampledBatch::draw(recs.iter().collect(), 4, 2, TargetIndexScheme::PerRecord, &mut s);
        let mut cfg = NeuralAgentConfig::deepsea();
        cfg.learning_rate = 0.01;
        let (_, grads) = loss_and_gradients(&p, &target, &prior, &batch, cfg.gamma, cfg.sigma, 0.0, 6).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &target, &prior, &batch, &cfg, 6, &mut state).unwrap();
        assert_eq!(state.steps(), 1);
        for ((new, old), g) in p.head.b.iter().zip(&before.head.b).zip(&grads.b) {
            if g.abs() > 1e-6 {
                assert!(((old - new) - 0.01 * g.signum()).abs() < 1e-6);
            }
        }
        cfg.optimizer = Optimizer::Sgd;
        assert!(adam_step(&mut p, &target, &prior, &batch, &cfg, 6, &mut state).is_err());
    }

    #[test]
    fn target_sync_schedule() {
        let mut s = RngStream::new(0);
        let main = NeuralParams::init(3, 4, 2, 2, &mut s);
        let mut target = NeuralParams::init(3, 4, 2, 2, &mut s);
        assert!(!target_sync(&main, &mut target, 3, 4));
        assert_ne!(target, main);
        assert!(target_sync(&main, &mut target, 4, 4));
        assert_eq!(target, main);
        let prior = init_prior(3, 4, 2, 2, 1.0, &mut s);
        for st in 0..3 {
            let xi = [s.standard_normal(), s.standard_normal()];
            assert_eq!(forward(&main, &prior, &Obs::OneHot(st), 1, &xi), forward(&target, &prior, &Obs::OneHot(st), 1, &xi));
        }
        for j in 1..5 {
            assert!(target_sync(&main, &mut target, j, 1));
        }
    }

    #[test]
    fn prior_rows_are_unit_and_seed_dependent() {
        let p1 = init_prior(6, 8, 3, 4, 1.0, &mut RngStream::new(1));
        let p2 = init_prior(6, 8, 3, 4, 1.0, &mut RngStream::new(2));
        for row in p1.head.a.chunks(4) {
            assert!((dot(row, row).sqrt() - 1.0).abs() < 8.0 * f64::EPSILON);
        }
        assert_ne!(p1, p2);
    }

    #[test]
    fn prior_output_variance_matches_quadratic_form() {
        let prior = init_prior(5, 16, 2, 4, 1.0, &mut RngStream::new(4));
        let x = Obs::Dense(vec![0.5, -1.0, 2.0, 0.1, 1.5]);
        let phi0 = prior.net.features(&x).unwrap();
        let (c0, _) = prior.head.project(1, &phi0);
        let expected = dot(&c0, &c0);
        let zero = NeuralParams { net: FeatureNet { input_dim: 5, hidden: 1, w1: vec![0.0; 5], b1: vec![0.0] }, head: LastLayerHyper::zeros(2, 1, 4) };
        let mut s = RngStream::new(9);
        let n = 50_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let xi: Vec<f64> = (0..4).map(|_| s.standard_normal()).collect();
                forward(&zero, &prior, &x, 1, &xi).unwrap().prior
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn replay_overwrites_oldest_and_keeps_z() {
        let mut buf = ReplayBuffer::new(3, 2).unwrap();
        for i in 0..5 {
            buf.push(NeuralTransition { obs: Obs::OneHot(i), action: 0, reward: i as f64, next_obs: None, z: vec![i as f64] });
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| buf.get(i).reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
        let mut s = RngStream::new(0);
        for i in buf.sample_indices(50, &mut s) {
            let t = buf.get(i);
            assert_eq!(t.z, vec![t.reward]);
        }
        assert!(ReplayBuffer::new(0, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = RngStream::new(3);
        let p = NeuralParams::init(4, 5, 2, 3, &mut s);
        let prior = init_prior(4, 5, 2, 3, 0.5, &mut s);
        let dir = std::env::temp_dir().join(format!("hyperagent-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("model");
        save_checkpoint(&p, &prior, &stem).unwrap();
        let (p2, prior2) = load_checkpoint(&stem).unwrap();
        assert_eq!(p, p2);
        assert_eq!(prior, prior2);
        std::fs::write(stem.with_extension("bin"), [0u8; 7]).unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
