//! Experiment runners. Every task derives its streams from `(master seed, seed)`
//! only, so results do not depend on the worker count or the task order.

use std::time::Instant;

use hyperagent_core::agent::{rollout_policy, run_episode};
use hyperagent_core::envs::{sample_mdp_from_prior, DeepSea, DirichletPriorSpec, Environment, MdpEnv, TabularMdp};
use hyperagent_core::hypermodel::{IndexMapping, IndexScheme, TabularHypermodel};
use hyperagent_core::rng::sample_sphere;
use hyperagent_core::tabular::{
    approx_event_check, bellman_apply_with_noise, incremental_m_update, m_required, noise_table, EpisodeRecord, Layout, TabularAgentConfig,
    TabularHyperAgent, TransitionRecord, VisitStats,
};
use hyperagent_core::{Agent, ReferenceDist, RngStream};
use rayon::prelude::*;

use crate::agents::{build_agent, EnvShape};
use crate::config::{AgentSpec, ApproxSpec, EnvSpec, ExperimentConfig, ExperimentKind};
use crate::error::{LabError, LabResult};
use crate::metrics::{self, episodes_to_learn, Checkpoint, RETURN_TOLERANCE};
use crate::output::{Row, TaskTiming};

/// Root stream of one seeded task.
pub fn seed_root(master_seed: u64, seed: u64) -> RngStream {
    RngStream::with_path(master_seed, vec![seed])
}

/// Run `f` over `tasks` on a pool of `workers` threads; results keep task order.
pub fn run_tasks<T, R, F>(workers: usize, tasks: &[T], f: F) -> LabResult<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> LabResult<R> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LabError::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| tasks.par_iter().map(&f).collect::<Vec<_>>()).into_iter().collect()
}

fn concentration(env: &EnvSpec) -> f64 {
    match env {
        EnvSpec::Dirichlet { beta, .. } => *beta,
        _ => 3.0,
    }
}

// ---------------------------------------------------------------- DeepSea

#[derive(Clone, Debug)]
pub struct DeepSeaRun {
    pub agent: String,
    pub size: usize,
    pub seed: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub solved: Option<Checkpoint>,
    pub episode_returns: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DeepSeaSettings {
    pub episodes: usize,
    pub eval_every: usize,
    pub threshold: f64,
    /// Stop at the first checkpoint at or above the threshold.
    pub stop_on_solve: bool,
}

fn deepsea_shape(size: usize) -> EnvShape<'static> {
    EnvShape {
        states_per_stage: size,
        horizon: size,
        actions: 2,
        beta: 3.0,
        prior: None,
        mdp: None,
        default_scheme: IndexScheme::StateIndependent,
    }
}

/// Train one agent on DeepSea, evaluating the greedy policy every `eval_every` interactions.
/// DeepSea is deterministic, so one evaluation rollout equals the average over any number.
pub fn deepsea_run(spec: &AgentSpec, size: usize, seed: u64, master_seed: u64, settings: DeepSeaSettings) -> LabResult<DeepSeaRun> {
    let start = Instant::now();
    let root = seed_root(master_seed, seed);
    let mut env = DeepSea::new(size, &mut root.child(0))?;
    let mut agent = build_agent(spec, &deepsea_shape(size), settings.episodes, root.child(1))?;
    let mut checkpoints = Vec::new();
    let mut episode_returns = Vec::new();
    let mut interactions = 0;
    let mut next_eval = settings.eval_every;
    for episode in 1..=settings.episodes {
        let summary = run_episode(agent.as_mut(), &mut env)?;
        episode_returns.push(summary.total_reward);
        interactions += summary.steps;
        if interactions < next_eval {
            continue;
        }
        while next_eval <= interactions {
            next_eval += settings.eval_every;
        }
        let policy = agent.eval_policy()?;
        let mean_return = rollout_policy(&policy, &mut env)?.total_reward;
        let cp = Checkpoint { episode, interactions, mean_return };
        checkpoints.push(cp);
        if settings.stop_on_solve && mean_return >= settings.threshold - RETURN_TOLERANCE {
            break;
        }
    }
    let solved = if checkpoints.is_empty() { None } else { episodes_to_learn(&checkpoints, settings.threshold)? };
    Ok(DeepSeaRun { agent: spec.label(), size, seed, checkpoints, solved, episode_returns, seconds: start.elapsed().as_secs_f64() })
}

/// Per agent and size: the median over seeds of episodes-to-learn, with
/// failures ranked above every success. `None` when more than half failed.
pub fn median_episodes(runs: &[DeepSeaRun], agent: &str, size: usize) -> Option<f64> {
    let values: Vec<f64> = runs
        .iter()
        .filter(|r| r.agent == agent && r.size == size)
        .map(|r| r.solved.map_or(f64::INFINITY, |c| c.episode as f64))
        .collect();
    metrics::median(&values).filter(|m| m.is_finite())
}

pub fn solved_fraction(runs: &[DeepSeaRun], agent: &str, size: usize) -> f64 {
    let sel: Vec<&DeepSeaRun> = runs.iter().filter(|r| r.agent == agent && r.size == size).collect();
    sel.iter().filter(|r| r.solved.is_some()).count() as f64 / sel.len().max(1) as f64
}

/// Fit of the defined medians against `N`.
pub fn scaling_fit(runs: &[DeepSeaRun], agent: &str, sizes: &[usize]) -> (Vec<(usize, f64)>, Option<metrics::LinearFit>) {
    let points: Vec<(usize, f64)> = sizes.iter().filter_map(|&n| median_episodes(runs, agent, n).map(|m| (n, m))).collect();
    let x: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = metrics::linear_fit(&x, &y);
    (points, fit)
}

fn deepsea_rows(exp: &str, runs: &[DeepSeaRun], agents: &[String], sizes: &[usize], per_episode: bool) -> Vec<Row> {
    let mut rows = Vec::new();
    for r in runs {
        let base = |metric: &str, v: Option<f64>| Row::new(exp, &r.agent, "deepsea", metric, v).param("N", r.size).seed(r.seed);
        rows.push(base("episodes_to_learn", r.solved.map(|c| c.episode as f64)));
        rows.push(base("interactions_to_learn", r.solved.map(|c| c.interactions as f64)));
        for c in &r.checkpoints {
            rows.push(base("eval_return", Some(c.mean_return)).episode(c.episode));
            rows.push(base("eval_interactions", Some(c.interactions as f64)).episode(c.episode));
        }
        if per_episode {
            for (e, ret) in r.episode_returns.iter().enumerate() {
                rows.push(base("episode_return", Some(*ret)).episode(e + 1));
            }
        }
    }
    for agent in agents {
        for &n in sizes {
            rows.push(Row::new(exp, agent, "deepsea", "median_episodes_to_learn", median_episodes(runs, agent, n)).param("N", n));
            rows.push(Row::new(exp, agent, "deepsea", "solved_fraction", Some(solved_fraction(runs, agent, n))).param("N", n));
        }
        if sizes.len() > 1 {
            let (points, fit) = scaling_fit(runs, agent, sizes);
            rows.push(Row::new(exp, agent, "deepsea", "fit_points", Some(points.len() as f64)));
            rows.push(Row::new(exp, agent, "deepsea", "fit_slope", fit.map(|f| f.slope)));
            rows.push(Row::new(exp, agent, "deepsea", "fit_intercept", fit.map(|f| f.intercept)));
            rows.push(Row::new(exp, agent, "deepsea", "fit_r_squared", fit.map(|f| f.r_squared)));
        }
    }
    rows
}

// ---------------------------------------------------------------- Dirichlet MDPs

/// A layered MDP drawn from the symmetric Dirichlet prior, with known rewards from Uniform(0, 1).
#[derive(Clone, Debug)]
pub struct PriorInstance {
    pub prior: DirichletPriorSpec,
    pub rewards: Vec<f64>,
    pub mdp: TabularMdp,
}

pub fn prior_instance(env: &EnvSpec, root: &RngStream) -> LabResult<PriorInstance> {
    let EnvSpec::Dirichlet { states, actions, horizon, beta } = *env else {
        return Err(LabError::Config("expected a dirichlet env".into()));
    };
    let prior = DirichletPriorSpec::symmetric(states, horizon, actions, beta)?;
    let mut reward_stream = root.child(0).child(0);
    let rewards: Vec<f64> = (0..states * horizon * actions).map(|_| reward_stream.uniform()).collect();
    let mdp = sample_mdp_from_prior(&prior, rewards.clone(), &mut root.child(0).child(1))?;
    Ok(PriorInstance { prior, rewards, mdp })
}

#[derive(Clone, Debug)]
pub struct RegretRun {
    pub agent: String,
    pub seed: u64,
    /// Exact per-episode regret `V* - V^{pi_k}` under the initial distribution.
    pub regret: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub seconds: f64,
}

impl RegretRun {
    pub fn total(&self) -> f64 {
        self.regret.iter().sum()
    }
}

pub fn regret_run(spec: &AgentSpec, env: &EnvSpec, seed: u64, master_seed: u64, episodes: usize) -> LabResult<RegretRun> {
    let start = Instant::now();
    let root = seed_root(master_seed, seed);
    let inst = prior_instance(env, &root)?;
    let shape = EnvShape {
        states_per_stage: inst.mdp.states(),
        horizon: inst.mdp.horizon(),
        actions: inst.mdp.actions(),
        beta: inst.prior.beta(),
        prior: Some((&inst.prior, &inst.rewards)),
        mdp: Some(&inst.mdp),
        default_scheme: IndexScheme::StateDependent,
    };
    let mut agent = build_agent(spec, &shape, episodes, root.child(1))?;
    let mut environment = MdpEnv::new(inst.mdp.clone(), root.child(0).child(2));
    let v_star = inst.mdp.optimal_value();
    let mut regret = Vec::with_capacity(episodes);
    let mut episode_returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        agent.begin_episode()?;
        let probs = agent.policy_probs()?;
        regret.push(v_star - inst.mdp.policy_value(&probs)?);
        episode_returns.push(finish_episode(agent.as_mut(), &mut environment)?);
    }
    Ok(RegretRun { agent: spec.label(), seed, regret, episode_returns, seconds: start.elapsed().as_secs_f64() })
}

/// Interact until termination after `begin_episode` has been called.
fn finish_episode(agent: &mut dyn Agent, env: &mut dyn Environment) -> LabResult<f64> {
    let mut state = env.reset();
    let mut total = 0.0;
    loop {
        let action = agent.act(state)?;
        let out = env.step(action)?;
        agent.observe(state, action, out.reward, out.next_state)?;
        total += out.reward;
        match out.next_state {
            Some(next) => state = next,
            None => break,
        }
    }
    agent.end_episode()?;
    Ok(total)
}

fn regret_rows(exp: &str, env: &str, runs: &[RegretRun], agents: &[String], per_episode_return: bool) -> Vec<Row> {
    let mut rows = Vec::new();
    for r in runs {
        for (e, (d, c)) in r.regret.iter().zip(metrics::cumulative(&r.regret)).enumerate() {
            rows.push(Row::new(exp, &r.agent, env, "regret", Some(*d)).seed(r.seed).episode(e + 1));
            rows.push(Row::new(exp, &r.agent, env, "cumulative_regret", Some(c)).seed(r.seed).episode(e + 1));
        }
        if per_episode_return {
            for (e, ret) in r.episode_returns.iter().enumerate() {
                rows.push(Row::new(exp, &r.agent, env, "episode_return", Some(*ret)).seed(r.seed).episode(e + 1));
            }
        }
        rows.push(Row::new(exp, &r.agent, env, "total_regret", Some(r.total())).seed(r.seed));
    }
    for agent in agents {
        let totals: Vec<f64> = runs.iter().filter(|r| &r.agent == agent).map(RegretRun::total).collect();
        rows.push(Row::new(exp, agent, env, "median_total_regret", metrics::median(&totals)));
    }
    rows
}

// ---------------------------------------------------------------- approximation check

#[derive(Clone, Debug)]
pub struct ApproxRun {
    pub seed: u64,
    pub index_dim: usize,
    /// Episode boundary (0 = before any data) at which the band first failed.
    pub first_violation: Option<usize>,
    /// `(count, ||m~||^2)` for every pair at the end of the run.
    pub final_norms: Vec<(u64, f64)>,
    pub seconds: f64,
}

impl ApproxRun {
    pub fn joint(&self) -> bool {
        self.first_violation.is_none()
    }
}

pub fn approx_index_dim(approx: &ApproxSpec, env: &EnvSpec, episodes: usize) -> LabResult<usize> {
    let EnvSpec::Dirichlet { states, actions, horizon, beta } = *env else {
        return Err(LabError::Config("expected a dirichlet env".into()));
    };
    Ok(match approx.index_dim {
        Some(m) => m,
        None => m_required(approx.eps, approx.delta, states, actions, horizon, episodes, beta)?,
    })
}

/// Run the theory-preset HyperAgent for `episodes` and check the norm band
/// (1 +- eps) sigma^2 / (N + beta) for every pair at every episode boundary.
pub fn approx_run(env: &EnvSpec, approx: &ApproxSpec, seed: u64, master_seed: u64, episodes: usize) -> LabResult<ApproxRun> {
    let start = Instant::now();
    let root = seed_root(master_seed, seed);
    let inst = prior_instance(env, &root)?;
    let (s, h, a) = (inst.mdp.states(), inst.mdp.horizon(), inst.mdp.actions());
    let mut cfg = TabularAgentConfig::theory(s, a, h, episodes, approx.delta, inst.prior.beta())?;
    cfg.index_dim = approx_index_dim(approx, env, episodes)?;
    let (sigma, beta, index_dim) = (cfg.sigma, cfg.beta, cfg.index_dim);
    let mut agent = TabularHyperAgent::new(cfg, Layout::Layered { states_per_stage: s, horizon: h }, a, root.child(1))?;
    let mut environment = MdpEnv::new(inst.mdp.clone(), root.child(0).child(2));
    let holds = |agent: &TabularHyperAgent| approx_event_check(agent.hypermodel(), agent.stats(), sigma, beta, approx.eps).iter().all(|&b| b);
    let mut first_violation = (!holds(&agent)).then_some(0);
    for k in 1..=episodes {
        run_episode(&mut agent, &mut environment)?;
        if first_violation.is_none() && !holds(&agent) {
            first_violation = Some(k);
        }
    }
    let hm = agent.hypermodel();
    let final_norms = (0..hm.num_pairs()).map(|sa| (agent.stats().count(sa), hm.effective_norm_sq(sa))).collect();
    Ok(ApproxRun { seed, index_dim, first_violation, final_norms, seconds: start.elapsed().as_secs_f64() })
}

pub fn joint_frequency(runs: &[ApproxRun]) -> f64 {
    runs.iter().filter(|r| r.joint()).count() as f64 / runs.len().max(1) as f64
}

fn approx_rows(exp: &str, env: &EnvSpec, runs: &[ApproxRun]) -> Vec<Row> {
    let envname = env.name();
    let sigma_sq = match env {
        EnvSpec::Dirichlet { horizon, .. } => 6.0 * (*horizon as f64).powi(2),
        _ => f64::NAN,
    };
    let beta = concentration(env);
    let agent = "hyperagent";
    let mut rows = Vec::new();
    for r in runs {
        rows.push(Row::new(exp, agent, envname, "joint_event", Some(if r.joint() { 1.0 } else { 0.0 })).param("M", r.index_dim).seed(r.seed));
        rows.push(Row::new(exp, agent, envname, "first_violation_episode", r.first_violation.map(|v| v as f64)).param("M", r.index_dim).seed(r.seed));
    }
    rows.push(Row::new(exp, agent, envname, "joint_event_frequency", Some(joint_frequency(runs))));
    let mut buckets: std::collections::BTreeMap<u64, Vec<f64>> = std::collections::BTreeMap::new();
    for r in runs {
        for &(n, norm) in &r.final_norms {
            buckets.entry(n).or_default().push(norm);
        }
    }
    for (n, norms) in buckets {
        rows.push(Row::new(exp, agent, envname, "mean_norm_sq", Some(metrics::mean(&norms))).param("N", n));
        rows.push(Row::new(exp, agent, envname, "target_norm_sq", Some(sigma_sq / (n as f64 + beta))).param("N", n));
        rows.push(Row::new(exp, agent, envname, "pairs", Some(norms.len() as f64)).param("N", n));
    }
    rows
}

/// Monte Carlo of `||m~||^2` after `n` incremental updates of one pair, for each `n` in `counts`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceCheck {
    pub count: usize,
    pub mean: f64,
    pub stderr: f64,
    pub target: f64,
}

pub fn posterior_variance_identity(index_dim: usize, beta: f64, sigma: f64, counts: &[usize], reps: usize, stream: &RngStream) -> LabResult<Vec<VarianceCheck>> {
    let sigma0 = sigma / beta.sqrt();
    counts
        .iter()
        .enumerate()
        .map(|(ci, &n)| {
            let mut norms = Vec::with_capacity(reps);
            for r in 0..reps {
                let mut s = stream.child(ci as u64).child(r as u64);
                let mut h = TabularHypermodel::new(1, 1, index_dim, vec![0.0], sigma0, &mut s)?;
                let mut stats = VisitStats::new(1, 1);
                let transitions = (0..n)
                    .map(|_| Ok(TransitionRecord { state: 0, action: 0, reward: 0.0, next_state: None, z: sample_sphere(&mut s, index_dim)? }))
                    .collect::<LabResult<Vec<_>>>()?;
                incremental_m_update(&mut h, &mut stats, &EpisodeRecord { transitions }, sigma, beta)?;
                norms.push(h.effective_norm_sq(0));
            }
            let mean = metrics::mean(&norms);
            let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64;
            Ok(VarianceCheck { count: n, mean, stderr: (var / reps as f64).sqrt(), target: sigma * sigma / (n as f64 + beta) })
        })
        .collect()
}

// ---------------------------------------------------------------- propagation demo

pub const DEMO_STATES: usize = 4;
pub const DEMO_HORIZON: usize = 6;
pub const DEMO_ACTIONS: usize = 2;
const DEMO_SIGMA: f64 = 1.0;
const DEMO_BETA: f64 = 3.0;
const DEMO_MU0: f64 = 1.0;

/// Stage `t` and state `x` are 1-based; action 0 moves up, action 1 moves down.
pub fn demo_pair(t: usize, x: usize, a: usize) -> usize {
    ((t - 1) * DEMO_STATES + (x - 1)) * DEMO_ACTIONS + a
}

fn demo_label(sa: usize) -> String {
    let a = sa % DEMO_ACTIONS;
    let state = sa / DEMO_ACTIONS;
    format!("{},{},{}", state / DEMO_STATES + 1, state % DEMO_STATES + 1, if a == 0 { "up" } else { "down" })
}

fn demo_next(t: usize, x: usize, a: usize) -> Option<usize> {
    if t == DEMO_HORIZON {
        return None;
    }
    let next_x = if a == 0 { x.saturating_sub(1).max(1) } else { (x + 1).min(DEMO_STATES) };
    Some(t * DEMO_STATES + next_x - 1)
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    /// `variance[i - 1][sa]`: variance over indices of `(F^i 0)(sa)`.
    pub variance: Vec<Vec<f64>>,
    pub scarce: usize,
    /// `sigma^2 / (1 + beta)`, the variance the scarce pair should carry after one step.
    pub scarce_target: f64,
}

impl DemoReport {
    /// Largest variance among the other pairs after one application, relative to the scarce pair.
    pub fn leak_ratio(&self) -> f64 {
        let first = &self.variance[0];
        let other = first.iter().enumerate().filter(|(sa, _)| *sa != self.scarce).map(|(_, v)| *v).fold(0.0, f64::max);
        other / first[self.scarce]
    }

    pub fn scarce_ratio(&self) -> f64 {
        self.variance[0][self.scarce] / self.scarce_target
    }

    /// Largest growth factor over pairs in stages before the scarce one, relative to iteration 1.
    pub fn growth(&self, iteration: usize) -> f64 {
        let scarce_stage = self.scarce / DEMO_ACTIONS / DEMO_STATES;
        (0..self.variance[0].len())
            .filter(|sa| sa / DEMO_ACTIONS / DEMO_STATES < scarce_stage)
            .map(|sa| self.variance[iteration - 1][sa] / self.variance[0][sa])
            .fold(0.0, f64::max)
    }
}

/// Visit statistics where every pair has `visits` records except the scarce
/// pair `(5, 4, down)`, which has one. Rewards are 1/2 everywhere.
pub fn demo_hypermodel(index_dim: usize, visits: usize, stream: &RngStream) -> LabResult<(TabularHypermodel, VisitStats)> {
    let sigma0 = DEMO_SIGMA / DEMO_BETA.sqrt();
    let num_states = DEMO_STATES * DEMO_HORIZON;
    let pairs = num_states * DEMO_ACTIONS;
    let mut h = TabularHypermodel::new(num_states, DEMO_ACTIONS, index_dim, vec![DEMO_MU0; pairs], sigma0, &mut stream.child(0))?;
    let mut stats = VisitStats::new(num_states, DEMO_ACTIONS);
    let mut z_stream = stream.child(1);
    let scarce = demo_pair(5, 4, 1);
    const CHUNK: usize = 1000;
    for sa in 0..pairs {
        let a = sa % DEMO_ACTIONS;
        let state = sa / DEMO_ACTIONS;
        let (t, x) = (state / DEMO_STATES + 1, state % DEMO_STATES + 1);
        let mut left = if sa == scarce { 1 } else { visits };
        while left > 0 {
            let n = left.min(CHUNK);
            let transitions = (0..n)
                .map(|_| Ok(TransitionRecord { state, action: a, reward: 0.5, next_state: demo_next(t, x, a), z: sample_sphere(&mut z_stream, index_dim)? }))
                .collect::<LabResult<Vec<_>>>()?;
            incremental_m_update(&mut h, &mut stats, &EpisodeRecord { transitions }, DEMO_SIGMA, DEMO_BETA)?;
            left -= n;
        }
    }
    Ok((h, stats))
}

/// Apply the randomized Bellman operator `i = 1..H` times from `Q = 0`, with
/// one state-dependent index draw per sample, and record per-pair variances.
pub fn propagation_demo(index_dim: usize, samples: usize, visits: usize, stream: &RngStream) -> LabResult<DemoReport> {
    let (h, stats) = demo_hypermodel(index_dim, visits, stream)?;
    let pairs = h.num_pairs();
    let dist = ReferenceDist::gaussian(index_dim)?;
    let mut sum = vec![vec![0.0; pairs]; DEMO_HORIZON];
    let mut sum_sq = vec![vec![0.0; pairs]; DEMO_HORIZON];
    let mut q = vec![0.0; pairs];
    let mut next = vec![0.0; pairs];
    for j in 0..samples {
        let mut mapping = IndexMapping::new(IndexScheme::StateDependent, dist, stream.child(2).child(j as u64))?;
        let noise = noise_table(&h, &mut mapping)?;
        q.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..DEMO_HORIZON {
            bellman_apply_with_noise(&q, &stats, h.mu0(), &noise, 1.0, DEMO_BETA, &mut next)?;
            std::mem::swap(&mut q, &mut next);
            for sa in 0..pairs {
                sum[i][sa] += q[sa];
                sum_sq[i][sa] += q[sa] * q[sa];
            }
        }
    }
    let n = samples as f64;
    let variance = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, s2)| s.iter().zip(s2).map(|(a, b)| (b - a * a / n) / (n - 1.0)).collect())
        .collect();
    Ok(DemoReport { variance, scarce: demo_pair(5, 4, 1), scarce_target: DEMO_SIGMA * DEMO_SIGMA / (1.0 + DEMO_BETA) })
}

fn demo_rows(exp: &str, report: &DemoReport, seed: u64) -> Vec<Row> {
    let mut rows = Vec::new();
    for (i, vars) in report.variance.iter().enumerate() {
        for (sa, v) in vars.iter().enumerate() {
            rows.push(Row::new(exp, "hyperagent", "propagation", "variance", Some(*v)).param("pair", demo_label(sa)).seed(seed).episode(i + 1));
        }
    }
    rows.push(Row::new(exp, "hyperagent", "propagation", "leak_ratio", Some(report.leak_ratio())).seed(seed).episode(1));
    rows.push(Row::new(exp, "hyperagent", "propagation", "scarce_ratio", Some(report.scarce_ratio())).seed(seed).episode(1));
    for i in 2..=DEMO_HORIZON {
        rows.push(Row::new(exp, "hyperagent", "propagation", "max_growth", Some(report.growth(i))).seed(seed).episode(i));
    }
    rows
}

// ---------------------------------------------------------------- dispatch

#[derive(Clone, Debug)]
pub enum Outcome {
    DeepSea(Vec<DeepSeaRun>),
    Regret(Vec<RegretRun>),
    Approx(Vec<ApproxRun>),
    Demo(Vec<DemoReport>),
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<Row>,
    pub timings: Vec<TaskTiming>,
    pub outcome: Outcome,
}

pub fn run_experiment(cfg: &ExperimentConfig, master_seed: u64, workers: usize) -> LabResult<RunOutput> {
    cfg.validate()?;
    let exp = cfg.experiment.name();
    let labels: Vec<String> = cfg.agents.iter().map(AgentSpec::label).collect();
    match (&cfg.experiment, &cfg.env) {
        (ExperimentKind::DeepseaScaling | ExperimentKind::SingleRun, EnvSpec::Deepsea { sizes }) => {
            let single = cfg.experiment == ExperimentKind::SingleRun;
            let settings = DeepSeaSettings { episodes: cfg.episodes, eval_every: cfg.eval_every, threshold: cfg.solve_threshold, stop_on_solve: !single };
            let tasks: Vec<(&AgentSpec, usize, u64)> = cfg
                .agents
                .iter()
                .flat_map(|a| sizes.iter().flat_map(move |&n| cfg.seeds.iter().map(move |&s| (a, n, s))))
                .collect();
            let runs = run_tasks(workers, &tasks, |&(a, n, s)| deepsea_run(a, n, s, master_seed, settings))?;
            let timings = runs
                .iter()
                .enumerate()
                .map(|(i, r)| TaskTiming { task: i, agent: r.agent.clone(), param: format!("N={}", r.size), seed: r.seed, seconds: r.seconds })
                .collect();
            let rows = deepsea_rows(exp, &runs, &labels, sizes, single);
            Ok(RunOutput { rows, timings, outcome: Outcome::DeepSea(runs) })
        }
        (ExperimentKind::BayesRegret | ExperimentKind::SingleRun, env @ EnvSpec::Dirichlet { .. }) => {
            let tasks: Vec<(&AgentSpec, u64)> = cfg.agents.iter().flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s))).collect();
            let runs = run_tasks(workers, &tasks, |&(a, s)| regret_run(a, env, s, master_seed, cfg.episodes))?;
            let timings = runs
                .iter()
                .enumerate()
                .map(|(i, r)| TaskTiming { task: i, agent: r.agent.clone(), param: "NA".into(), seed: r.seed, seconds: r.seconds })
                .collect();
            let rows = regret_rows(exp, env.name(), &runs, &labels, cfg.experiment == ExperimentKind::SingleRun);
            Ok(RunOutput { rows, timings, outcome: Outcome::Regret(runs) })
        }
        (ExperimentKind::VerifyApprox, env) => {
            let approx = cfg.approx.as_ref().ok_or_else(|| LabError::Config("missing approx section".into()))?;
            let runs = run_tasks(workers, &cfg.seeds, |&s| approx_run(env, approx, s, master_seed, cfg.episodes))?;
            let timings = runs
                .iter()
                .enumerate()
                .map(|(i, r)| TaskTiming { task: i, agent: "hyperagent".into(), param: format!("M={}", r.index_dim), seed: r.seed, seconds: r.seconds })
                .collect();
            let rows = approx_rows(exp, env, &runs);
            Ok(RunOutput { rows, timings, outcome: Outcome::Approx(runs) })
        }
        (ExperimentKind::PropagationDemo, EnvSpec::Propagation { index_dim, samples, visits }) => {
            let reports = run_tasks(workers, &cfg.seeds, |&s| {
                let start = Instant::now();
                let report = propagation_demo(*index_dim, *samples, *visits, &seed_root(master_seed, s))?;
                Ok((report, start.elapsed().as_secs_f64()))
            })?;
            let mut rows = Vec::new();
            let mut timings = Vec::new();
            for (i, ((report, secs), seed)) in reports.iter().zip(&cfg.seeds).enumerate() {
                rows.extend(demo_rows(exp, report, *seed));
                timings.push(TaskTiming { task: i, agent: "hyperagent".into(), param: format!("M={index_dim}"), seed: *seed, seconds: *secs });
            }
            Ok(RunOutput { rows, timings, outcome: Outcome::Demo(reports.into_iter().map(|(r, _)| r).collect()) })
        }
        _ => Err(LabError::Config(format!("experiment {exp} does not accept env {}", cfg.env.name()))),
    }
}
