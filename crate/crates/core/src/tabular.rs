//! Tabular HyperAgent.
//!
//! The agent keeps visit statistics and the effective perturbation rows
//! `m~ = m + sigma0 z0`. After each episode the rows are refreshed by the
//! O(M) incremental rule
//!
//! `(N + n + beta) m~_new = (N + beta) m~_old + sigma * sum(z)`,
//!
//! and each new episode solves the randomized Q-function as the fixed point
//! of the stochastic Bellman operator
//!
//! `F Q(s,a) = [beta mu0 + N (r^ + gamma V_Q . P^)] / (N + beta) + m~ . xi(s)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::{one_hot_policy, Agent};
use crate::error::{check_dim, Error, Result};
use crate::hypermodel::{IndexMapping, IndexScheme, TabularHypermodel};
use crate::rng::{sphere_into, DistKind, ReferenceDist, RngStream};

/// How state ids are organised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Layout {
    /// State id `t * states_per_stage + x`; successors of stage `t` live in
    /// stage `t + 1`, and stage `horizon - 1` always terminates.
    Layered { states_per_stage: usize, horizon: usize },
    /// Unstructured states; only discounted solving applies.
    General { num_states: usize },
}

impl Layout {
    pub fn num_states(&self) -> usize {
        match *self {
            Layout::Layered { states_per_stage, horizon } => states_per_stage * horizon,
            Layout::General { num_states } => num_states,
        }
    }
}

/// Per-pair visit counts, reward sums and successor counts.
///
/// Every record carries a weight (1 for ordinary visits); the Bellman
/// operator uses the weighted totals, so ordinary statistics are the special
/// case where weight equals count. Successors are stored sparsely; `None` is
/// the terminal outcome, whose value is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitStats {
    num_states: usize,
    num_actions: usize,
    counts: Vec<u64>,
    weights: Vec<f64>,
    reward_sum: Vec<f64>,
    successors: Vec<Vec<(Option<usize>, f64)>>,
}

impl VisitStats {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        let pairs = num_states * num_actions;
        Self {
            num_states,
            num_actions,
            counts: vec![0; pairs],
            weights: vec![0.0; pairs],
            reward_sum: vec![0.0; pairs],
            successors: vec![Vec::new(); pairs],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>) -> Result<()> {
        self.record_weighted(state, action, reward, next_state, 1.0)
    }

    pub fn record_weighted(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>, weight: f64) -> Result<()> {
        if action >= self.num_actions {
            return Err(Error::InvalidAction { action, num_actions: self.num_actions });
        }
        for s in std::iter::once(state).chain(next_state) {
            if s >= self.num_states {
                return Err(Error::DimensionMismatch { expected: self.num_states, got: s });
            }
        }
        if !(weight > 0.0) {
            return Err(Error::InvalidConfig(format!("record weight must be positive, got {weight}")));
        }
        let sa = state * self.num_actions + action;
        self.counts[sa] += 1;
        self.weights[sa] += weight;
        self.reward_sum[sa] += weight * reward;
        let succ = &mut self.successors[sa];
        match succ.iter_mut().find(|(s, _)| *s == next_state) {
            Some((_, w)) => *w += weight,
            None => succ.push((next_state, weight)),
        }
        Ok(())
    }

    /// Number of recorded visits.
    pub fn count(&self, sa: usize) -> u64 {
        self.counts[sa]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Total weight of the recorded visits; equals the count for unweighted data.
    pub fn weight(&self, sa: usize) -> f64 {
        self.weights[sa]
    }

    /// Empirical mean reward; `None` before the first visit.
    pub fn r_hat(&self, sa: usize) -> Option<f64> {
        (self.counts[sa] > 0).then(|| self.reward_sum[sa] / self.weights[sa])
    }

    /// Empirical successor distribution; `None` before the first visit.
    pub fn p_hat(&self, sa: usize) -> Option<Vec<(Option<usize>, f64)>> {
        let w = self.weights[sa];
        (self.counts[sa] > 0).then(|| self.successors[sa].iter().map(|&(s, c)| (s, c / w)).collect())
    }

    /// Successors with their accumulated weights.
    pub fn successors(&self, sa: usize) -> &[(Option<usize>, f64)] {
        &self.successors[sa]
    }

    /// `sum over successors of weight * V(s')`, terminal contributing zero.
    fn weighted_next_value(&self, sa: usize, v: &[f64]) -> f64 {
        self.successors[sa]
            .iter()
            .map(|&(s, c)| s.map_or(0.0, |s| c * v[s]))
            .sum()
    }

    fn reward_total(&self, sa: usize) -> f64 {
        self.reward_sum[sa]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<usize>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub transitions: Vec<TransitionRecord>,
}

impl EpisodeRecord {
    pub fn termination_time(&self) -> usize {
        self.transitions.len()
    }
}

fn check_scales(sigma: f64, beta: f64) -> Result<()> {
    if !(sigma >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma and beta must be non-negative (sigma {sigma}, beta {beta})")));
    }
    Ok(())
}

/// Fold one episode into the effective rows and the visit statistics.
pub fn incremental_m_update(
    h: &mut TabularHypermodel,
    stats: &mut VisitStats,
    ep: &EpisodeRecord,
    sigma: f64,
    beta: f64,
) -> Result<()> {
    check_scales(sigma, beta)?;
    check_dim(h.num_pairs(), stats.num_pairs())?;
    let dim = h.index_dim();
    let mut grouped: BTreeMap<usize, (u64, Vec<f64>)> = BTreeMap::new();
    for tr in &ep.transitions {
        check_dim(dim, tr.z.len())?;
        if tr.action >= stats.num_actions || tr.state >= stats.num_states {
            return Err(Error::InvalidAction { action: tr.action, num_actions: stats.num_actions });
        }
        let entry = grouped.entry(tr.state * stats.num_actions + tr.action).or_insert_with(|| (0, vec![0.0; dim]));
        entry.0 += 1;
        entry.1.iter_mut().zip(&tr.z).for_each(|(acc, z)| *acc += z);
    }
    for (&sa, (n_new, z_sum)) in &grouped {
        let n_old = stats.count(sa) as f64;
        let old = h.effective_row(sa);
        let denom = n_old + *n_new as f64 + beta;
        let new: Vec<f64> = old
            .iter()
            .zip(z_sum)
            .map(|(m, z)| ((n_old + beta) * m + sigma * z) / denom)
            .collect();
        h.set_effective_row(sa, &new);
    }
    for tr in &ep.transitions {
        stats.record(tr.state, tr.action, tr.reward, tr.next_state)?;
    }
    Ok(())
}

/// `||m~_sa||^2` inside the open band `((1-eps), (1+eps)) * sigma^2 / (N + beta)`.
pub fn approx_event_check(h: &TabularHypermodel, stats: &VisitStats, sigma: f64, beta: f64, eps: f64) -> Vec<bool> {
    (0..h.num_pairs())
        .map(|sa| {
            let target = sigma * sigma / (stats.count(sa) as f64 + beta);
            let norm = h.effective_norm_sq(sa);
            norm > (1.0 - eps) * target && norm < (1.0 + eps) * target
        })
        .collect()
}

/// Index dimension that makes the approximation event hold jointly with
/// probability `1 - delta`: `ceil(16 (1 + eps) / eps^2 * (ln(S H A / delta) + ln(1 + K / beta)))`.
pub fn m_required(eps: f64, delta: f64, s: usize, a: usize, h: usize, k: usize, beta: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!("eps and delta must lie in (0, 1), got {eps}, {delta}")));
    }
    if s == 0 || a == 0 || h == 0 || !(beta > 0.0) {
        return Err(Error::InvalidConfig("S, A, H must be positive and beta > 0".into()));
    }
    let log_term = (s as f64 * h as f64 * a as f64 / delta).ln() + (1.0 + k as f64 / beta).ln();
    Ok((16.0 * (1.0 + eps) / (eps * eps) * log_term).ceil() as usize)
}

/// `m~_sa . xi(s)` for every pair.
pub fn noise_table(h: &TabularHypermodel, mapping: &mut IndexMapping) -> Result<Vec<f64>> {
    check_dim(h.index_dim(), mapping.dim())?;
    let a = h.num_actions();
    let mut noise = vec![0.0; h.num_pairs()];
    for s in 0..h.num_states() {
        let xi = mapping.index(s);
        for act in 0..a {
            noise[s * a + act] = h.effective_dot(s * a + act, xi);
        }
    }
    Ok(noise)
}

/// Deterministic part of the operator: `[beta mu0 + N (r^ + gamma V . P^)] / (N + beta)`,
/// exactly `mu0` when the pair is unvisited.
pub fn mean_target(stats: &VisitStats, sa: usize, mu0: f64, v: &[f64], gamma: f64, beta: f64) -> f64 {
    if stats.count(sa) == 0 {
        return mu0;
    }
    let n = stats.weight(sa);
    (beta * mu0 + stats.reward_total(sa) + gamma * stats.weighted_next_value(sa, v)) / (n + beta)
}

fn state_values(q: &[f64], num_actions: usize) -> Vec<f64> {
    q.chunks(num_actions)
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// `out = F Q` with a precomputed noise table.
pub fn bellman_apply_with_noise(
    q: &[f64],
    stats: &VisitStats,
    mu0: &[f64],
    noise: &[f64],
    gamma: f64,
    beta: f64,
    out: &mut [f64],
) -> Result<()> {
    let pairs = stats.num_pairs();
    for len in [q.len(), mu0.len(), noise.len(), out.len()] {
        check_dim(pairs, len)?;
    }
    let v = state_values(q, stats.num_actions);
    for sa in 0..pairs {
        out[sa] = mean_target(stats, sa, mu0[sa], &v, gamma, beta) + noise[sa];
    }
    Ok(())
}

pub fn stochastic_bellman_apply(
    q: &[f64],
    stats: &VisitStats,
    h: &TabularHypermodel,
    xi: &mut IndexMapping,
    gamma: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let noise = noise_table(h, xi)?;
    let mut out = vec![0.0; q.len()];
    bellman_apply_with_noise(q, stats, h.mu0(), &noise, gamma, beta, &mut out)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolveMode {
    /// One backward sweep over a layered layout.
    FiniteHorizon,
    /// Fixed-point iteration in sup norm.
    Discounted { tol: f64, max_iterations: usize },
}

/// Solve `Q = F Q` for a fixed noise table.
#[allow(clippy::too_many_arguments)]
pub fn solve_with_noise(
    layout: Layout,
    stats: &VisitStats,
    mu0: &[f64],
    noise: &[f64],
    gamma: f64,
    beta: f64,
    mode: SolveMode,
    warm_start: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let pairs = stats.num_pairs();
    check_dim(layout.num_states() * stats.num_actions, pairs)?;
    match mode {
        SolveMode::FiniteHorizon => backward_sweep(layout, stats, mu0, noise, gamma, beta),
        SolveMode::Discounted { tol, max_iterations } => {
            let mut q = match warm_start {
                Some(w) => {
                    check_dim(pairs, w.len())?;
                    w.to_vec()
                }
                None => vec![0.0; pairs],
            };
            let mut next = vec![0.0; pairs];
            let mut residual = f64::INFINITY;
            for _ in 0..max_iterations {
                bellman_apply_with_noise(&q, stats, mu0, noise, gamma, beta, &mut next)?;
                residual = q.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                std::mem::swap(&mut q, &mut next);
                if residual < tol {
                    return Ok(q);
                }
            }
            Err(Error::NotConverged { iterations: max_iterations, residual })
        }
    }
}

fn backward_sweep(layout: Layout, stats: &VisitStats, mu0: &[f64], noise: &[f64], gamma: f64, beta: f64) -> Result<Vec<f64>> {
    let Layout::Layered { states_per_stage, horizon } = layout else {
        return Err(Error::InvalidConfig("finite-horizon solving needs a layered layout".into()));
    };
    check_dim(stats.num_pairs(), mu0.len())?;
    check_dim(stats.num_pairs(), noise.len())?;
    let na = stats.num_actions;
    let mut q = vec![0.0; stats.num_pairs()];
    let mut v = vec![0.0; layout.num_states()];
    for t in (0..horizon).rev() {
        for x in 0..states_per_stage {
            let s = t * states_per_stage + x;
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let sa = s * na + a;
                for &(next, _) in stats.successors(sa) {
                    if let Some(next) = next {
                        if next / states_per_stage != t + 1 {
                            return Err(Error::NonLayeredTransition { from: t, to: next / states_per_stage });
                        }
                    }
                }
                q[sa] = mean_target(stats, sa, mu0[sa], &v, gamma, beta) + noise[sa];
                best = best.max(q[sa]);
            }
            v[s] = best;
        }
    }
    Ok(q)
}

/// `argmax_a Q(s, a)`, ties to the smallest action.
pub fn act_greedy(q: &[f64], state: usize, num_actions: usize) -> usize {
    let row = &q[state * num_actions..(state + 1) * num_actions];
    let mut best = 0;
    for a in 1..num_actions {
        if row[a] > row[best] {
            best = a;
        }
    }
    best
}

/// `argmax_a max_n Q_n(s, a)`, ties to the smallest action.
pub fn act_ois(qs: &[Vec<f64>], state: usize, num_actions: usize) -> Result<usize> {
    if qs.is_empty() {
        return Err(Error::InvalidConfig("optimistic index sampling needs at least one index".into()));
    }
    let optimistic: Vec<f64> = (0..num_actions)
        .map(|a| qs.iter().map(|q| q[state * num_actions + a]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(act_greedy(&optimistic, 0, num_actions))
}

/// Prior mean: one value for every pair or a full table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorMean {
    Scalar(f64),
    Table(Vec<f64>),
}

impl PriorMean {
    pub fn table(&self, pairs: usize) -> Result<Vec<f64>> {
        match self {
            PriorMean::Scalar(v) => Ok(vec![*v; pairs]),
            PriorMean::Table(t) => {
                check_dim(pairs, t.len())?;
                Ok(t.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularAgentConfig {
    pub index_dim: usize,
    pub sigma: f64,
    /// `sigma^2 / sigma0^2`; the prior scale is derived from it.
    pub beta: f64,
    pub mu0: PriorMean,
    pub gamma: f64,
    /// `Some(H)` selects finite-horizon solving, `None` discounted solving.
    pub horizon: Option<usize>,
    pub scheme: IndexScheme,
    #[serde(default = "default_index_dist")]
    pub index_dist: DistKind,
    #[serde(default = "default_tol")]
    pub fixed_point_tol: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_index_dist() -> DistKind {
    DistKind::Gaussian
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iterations() -> usize {
    100_000
}

impl TabularAgentConfig {
    /// Theory preset: `sigma^2 = 6 H^2`, `mu0 = H`, `gamma = 1`, `M` from [`m_required`] at `eps = 1/2`.
    pub fn theory(states_per_stage: usize, actions: usize, horizon: usize, episodes: usize, delta: f64, beta: f64) -> Result<Self> {
        Self::theory_with_scale(states_per_stage, actions, horizon, episodes, delta, beta, horizon as f64)
    }

    /// Theory preset with the return bound `scale` in place of `H`:
    /// `sigma = sqrt(6) scale`, `mu0 = scale`.
    #[allow(clippy::too_many_arguments)]
    pub fn theory_with_scale(
        states_per_stage: usize,
        actions: usize,
        horizon: usize,
        episodes: usize,
        delta: f64,
        beta: f64,
        scale: f64,
    ) -> Result<Self> {
        let index_dim = m_required(0.5, delta, states_per_stage, actions, horizon, episodes, beta)?;
        Ok(Self::with_dim(index_dim, horizon, beta, scale))
    }

    /// Same scales as [`TabularAgentConfig::theory`] with `M = 4`.
    pub fn practical(horizon: usize, beta: f64) -> Self {
        Self::with_dim(4, horizon, beta, horizon as f64)
    }

    fn with_dim(index_dim: usize, horizon: usize, beta: f64, scale: f64) -> Self {
        Self {
            index_dim,
            sigma: (6.0f64).sqrt() * scale,
            beta,
            mu0: PriorMean::Scalar(scale),
            gamma: 1.0,
            horizon: Some(horizon),
            scheme: IndexScheme::StateDependent,
            index_dist: DistKind::Gaussian,
            fixed_point_tol: default_tol(),
            max_iterations: default_max_iterations(),
        }
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma / self.beta.sqrt()
    }

    pub fn mode(&self) -> SolveMode {
        match self.horizon {
            Some(_) => SolveMode::FiniteHorizon,
            None => SolveMode::Discounted { tol: self.fixed_point_tol, max_iterations: self.max_iterations },
        }
    }

    pub fn validate(&self, layout: &Layout) -> Result<()> {
        if self.index_dim == 0 {
            return Err(Error::InvalidDimension("index dimension must be at least 1".into()));
        }
        if !(self.beta > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidConfig("need beta > 0 and sigma >= 0".into()));
        }
        match self.horizon {
            Some(h) => {
                if self.gamma != 1.0 {
                    return Err(Error::InvalidConfig("finite-horizon mode requires gamma = 1".into()));
                }
                match layout {
                    Layout::Layered { horizon, .. } if *horizon == h => {}
                    _ => return Err(Error::InvalidConfig("finite-horizon mode requires a layered layout of matching horizon".into())),
                }
            }
            None => {
                if !(self.gamma >= 0.0 && self.gamma < 1.0) {
                    return Err(Error::InvalidConfig("discounted mode requires gamma in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

/// Closed-form minimizer of the expected regularized loss for one pair with
/// targets `y` and stored perturbations `z`: returns the learnable `(mu, m)`.
pub fn closed_form_pair(
    y: &[f64],
    z: &[Vec<f64>],
    mu0: f64,
    z0: &[f64],
    sigma: f64,
    sigma0: f64,
    beta: f64,
) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let total_mean = (y.iter().sum::<f64>() + beta * mu0) / (n + beta);
    let m = (0..z0.len())
        .map(|k| {
            let z_sum: f64 = z.iter().map(|zd| zd[k]).sum();
            let effective = (sigma * z_sum + beta * sigma0 * z0[k]) / (n + beta);
            effective - sigma0 * z0[k]
        })
        .collect();
    (total_mean - mu0, m)
}

/// HyperAgent with the closed-form tabular update.
#[derive(Clone, Debug)]
pub struct TabularHyperAgent {
    config: TabularAgentConfig,
    layout: Layout,
    num_actions: usize,
    hyper: TabularHypermodel,
    stats: VisitStats,
    stream: RngStream,
    z_dist: ReferenceDist,
    index_dist: ReferenceDist,
    episode: u64,
    q_tables: Vec<Vec<f64>>,
    z_stream: RngStream,
    current: EpisodeRecord,
}

impl TabularHyperAgent {
    pub fn new(config: TabularAgentConfig, layout: Layout, num_actions: usize, stream: RngStream) -> Result<Self> {
        config.validate(&layout)?;
        let num_states = layout.num_states();
        let pairs = num_states * num_actions;
        let mu0 = config.mu0.table(pairs)?;
        let hyper = TabularHypermodel::new(num_states, num_actions, config.index_dim, mu0, config.sigma0(), &mut stream.child(0))?;
        let index_dist = ReferenceDist::new(config.index_dist, config.index_dim)?;
        let z_dist = ReferenceDist::sphere(config.index_dim)?;
        if let IndexScheme::Optimistic { count: 0 } = config.scheme {
            return Err(Error::InvalidConfig("optimistic index sampling needs at least one index".into()));
        }
        Ok(Self {
            stats: VisitStats::new(num_states, num_actions),
            config,
            layout,
            num_actions,
            hyper,
            z_stream: stream.child(2),
            stream,
            z_dist,
            index_dist,
            episode: 0,
            q_tables: Vec::new(),
            current: EpisodeRecord::default(),
        })
    }

    pub fn config(&self) -> &TabularAgentConfig {
        &self.config
    }

    pub fn hypermodel(&self) -> &TabularHypermodel {
        &self.hyper
    }

    pub fn stats(&self) -> &VisitStats {
        &self.stats
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    /// Q tables of the current episode, one per sampled index.
    pub fn q_tables(&self) -> &[Vec<f64>] {
        &self.q_tables
    }

    /// Solve the randomized Q-function for a given index mapping.
    pub fn solve(&self, mapping: &mut IndexMapping, warm_start: Option<&[f64]>) -> Result<Vec<f64>> {
        let noise = noise_table(&self.hyper, mapping)?;
        solve_with_noise(self.layout, &self.stats, self.hyper.mu0(), &noise, self.config.gamma, self.config.beta, self.config.mode(), warm_start)
    }

    /// Q-function of the mean hypermodel (all indices zero).
    pub fn mean_q(&self) -> Result<Vec<f64>> {
        let noise = vec![0.0; self.hyper.num_pairs()];
        solve_with_noise(self.layout, &self.stats, self.hyper.mu0(), &noise, self.config.gamma, self.config.beta, self.config.mode(), self.q_tables.first().map(Vec::as_slice))
    }

    fn greedy_table(&self) -> Result<Vec<usize>> {
        (0..self.layout.num_states()).map(|s| self.act_on(s)).collect()
    }

    fn act_on(&self, state: usize) -> Result<usize> {
        if self.q_tables.len() == 1 {
            Ok(act_greedy(&self.q_tables[0], state, self.num_actions))
        } else {
            act_ois(&self.q_tables, state, self.num_actions)
        }
    }
}

impl Agent for TabularHyperAgent {
    fn begin_episode(&mut self) -> Result<()> {
        let mapping = IndexMapping::new(self.config.scheme, self.index_dist, self.stream.child(1).child(self.episode))?;
        let mut tables = Vec::new();
        let mut noise0 = None;
        for (n, mut part) in mapping.split().into_iter().enumerate() {
            let warm = self.q_tables.get(n).map(Vec::as_slice);
            let noise = noise_table(&self.hyper, &mut part)?;
            let q = solve_with_noise(self.layout, &self.stats, self.hyper.mu0(), &noise, self.config.gamma, self.config.beta, self.config.mode(), warm)?;
            if n == 0 {
                noise0 = Some(noise);
            }
            tables.push(q);
        }
        // Keep the learnable mean consistent with the first solved table, so
        // that evaluating the hypermodel at xi(s) reproduces Q(s, a).
        if let Some(noise) = noise0 {
            let mu: Vec<f64> = (0..self.hyper.num_pairs())
                .map(|sa| tables[0][sa] - self.hyper.mu0()[sa] - noise[sa])
                .collect();
            self.hyper.set_learnable(Some(&mu), None);
        }
        self.q_tables = tables;
        self.z_stream = self.stream.child(2).child(self.episode);
        self.current = EpisodeRecord::default();
        Ok(())
    }

    fn act(&mut self, state: usize) -> Result<usize> {
        if self.q_tables.is_empty() {
            self.begin_episode()?;
        }
        self.act_on(state)
    }

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>) -> Result<()> {
        let mut z = vec![0.0; self.config.index_dim];
        sphere_into(&mut self.z_stream, &mut z);
        debug_assert_eq!(self.z_dist.dim, z.len());
        self.current.transitions.push(TransitionRecord { state, action, reward, next_state, z });
        Ok(())
    }

    fn end_episode(&mut self) -> Result<()> {
        let ep = std::mem::take(&mut self.current);
        incremental_m_update(&mut self.hyper, &mut self.stats, &ep, self.config.sigma, self.config.beta)?;
        self.episode += 1;
        Ok(())
    }

    fn policy_probs(&mut self) -> Result<Vec<f64>> {
        Ok(one_hot_policy(&self.greedy_table()?, self.num_actions))
    }

    fn eval_policy(&mut self) -> Result<Vec<usize>> {
        let q = self.mean_q()?;
        Ok((0..self.layout.num_states()).map(|s| act_greedy(&q, s, self.num_actions)).collect())
    }
}
