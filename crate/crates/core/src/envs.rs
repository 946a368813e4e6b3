//! Desk-scale environments: DeepSea, layered finite-horizon tabular MDPs and
//! a Dirichlet-prior sampler over their transition rows.
//!
//! Every environment numbers its states `t * states_per_stage + x`, where `t`
//! is the stage (the DeepSea row) and `x` the position inside the stage.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;

/// Result of one environment step. `next_state` is `None` once the episode ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Option<usize>,
    pub reward: f64,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.next_state.is_none()
    }
}

/// Episodic environment over a finite, layered state space.
pub trait Environment {
    fn states_per_stage(&self) -> usize;
    fn horizon(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn reset(&mut self) -> usize;
    fn step(&mut self, action: usize) -> Result<StepOutcome>;

    fn num_states(&self) -> usize {
        self.states_per_stage() * self.horizon()
    }
}

/// DeepSea of size `N`: start in the top-left cell, descend one row per step.
#[derive(Clone, Debug)]
pub struct DeepSea {
    size: usize,
    action_map: Vec<bool>,
    move_cost: f64,
    row: usize,
    col: usize,
    done: bool,
}

impl DeepSea {
    /// `action_map[row]` is true when raw action 1 means "right" on that row.
    /// The map is drawn once here and shared by every episode of the run.
    pub fn new(size: usize, stream: &mut RngStream) -> Result<Self> {
        let action_map = (0..size).map(|_| stream.bernoulli(0.5)).collect();
        Self::with_action_map(size, action_map)
    }

    pub fn with_action_map(size: usize, action_map: Vec<bool>) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidConfig("DeepSea size must be at least 1".into()));
        }
        check_dim(size, action_map.len())?;
        Ok(Self { size, action_map, move_cost: 0.01 / size as f64, row: 0, col: 0, done: false })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn action_map(&self) -> &[bool] {
        &self.action_map
    }

    /// Raw action that moves right on `row`.
    pub fn right_action(&self, row: usize) -> usize {
        usize::from(self.action_map[row])
    }

    pub fn state_id(&self, row: usize, col: usize) -> usize {
        row * self.size + col
    }

    pub fn position(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    /// One-hot encoding of length `N^2`.
    pub fn one_hot(&self, state: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.size * self.size];
        x[state] = 1.0;
        x
    }

    pub fn optimal_return(&self) -> f64 {
        1.0 - self.size as f64 * self.move_cost
    }
}

impl Environment for DeepSea {
    fn states_per_stage(&self) -> usize {
        self.size
    }

    fn horizon(&self) -> usize {
        self.size
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn reset(&mut self) -> usize {
        self.row = 0;
        self.col = 0;
        self.done = false;
        self.state_id(0, 0)
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action >= 2 {
            return Err(Error::InvalidAction { action, num_actions: 2 });
        }
        let right = action == self.right_action(self.row);
        let mut reward = 0.0;
        if right {
            if self.row == self.size - 1 && self.col == self.size - 1 {
                reward += 1.0;
            }
            reward -= self.move_cost;
            self.col = (self.col + 1).min(self.size - 1);
        } else {
            self.col = self.col.saturating_sub(1);
        }
        self.row += 1;
        let next_state = if self.row == self.size {
            self.done = true;
            None
        } else {
            Some(self.state_id(self.row, self.col))
        };
        Ok(StepOutcome { next_state, reward })
    }
}

/// Layered finite-horizon MDP with `S` states per stage and horizon `H`.
///
/// Transition rows exist for stages `0..H-1`; the last stage always ends the
/// episode. Rewards depend on `(stage, state, action)` and are known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    states: usize,
    horizon: usize,
    actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    rho: Vec<f64>,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{what} is not a probability distribution (sum {sum})")));
    }
    Ok(())
}

impl TabularMdp {
    /// `transitions` is indexed `[(t * S + x) * A + a] * S + x'` for `t < H - 1`;
    /// `rewards` is indexed `(t * S + x) * A + a`.
    pub fn new(
        states: usize,
        horizon: usize,
        actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        if states == 0 || horizon == 0 || actions == 0 {
            return Err(Error::InvalidConfig("MDP needs at least one state, stage and action".into()));
        }
        check_dim((horizon - 1) * states * actions * states, transitions.len())?;
        check_dim(horizon * states * actions, rewards.len())?;
        check_dim(states, rho.len())?;
        for row in transitions.chunks(states) {
            check_distribution(row, "transition row")?;
        }
        check_distribution(&rho, "initial distribution")?;
        Ok(Self { states, horizon, actions, transitions, rewards, rho })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.states * self.horizon
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[state * self.actions + action]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Next-stage distribution, or `None` at the last stage.
    pub fn transition_row(&self, state: usize, action: usize) -> Option<&[f64]> {
        if state / self.states + 1 >= self.horizon {
            return None;
        }
        let start = (state * self.actions + action) * self.states;
        Some(&self.transitions[start..start + self.states])
    }

    /// Optimal action values by backward induction, indexed `state * A + a`.
    pub fn optimal_q(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.num_states() * self.actions];
        let mut v_next = vec![0.0; self.states];
        for t in (0..self.horizon).rev() {
            let mut v = vec![0.0; self.states];
            for x in 0..self.states {
                let s = t * self.states + x;
                let mut best = f64::NEG_INFINITY;
                for a in 0..self.actions {
                    let cont = self.transition_row(s, a).map_or(0.0, |p| crate::hypermodel::dot(p, &v_next));
                    let value = self.reward(s, a) + cont;
                    q[s * self.actions + a] = value;
                    best = best.max(value);
                }
                v[x] = best;
            }
            v_next = v;
        }
        q
    }

    /// `rho^T V*_0`.
    pub fn optimal_value(&self) -> f64 {
        let q = self.optimal_q();
        (0..self.states)
            .map(|x| {
                let best = q[x * self.actions..(x + 1) * self.actions].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                self.rho[x] * best
            })
            .sum()
    }

    /// Exact value `rho^T V^pi_0` of a stochastic policy given as action
    /// probabilities indexed `state * A + a`.
    pub fn policy_value(&self, probs: &[f64]) -> Result<f64> {
        check_dim(self.num_states() * self.actions, probs.len())?;
        let mut v_next = vec![0.0; self.states];
        for t in (0..self.horizon).rev() {
            let mut v = vec![0.0; self.states];
            for x in 0..self.states {
                let s = t * self.states + x;
                v[x] = (0..self.actions)
                    .map(|a| {
                        let p = probs[s * self.actions + a];
                        if p == 0.0 {
                            return 0.0;
                        }
                        let cont = self.transition_row(s, a).map_or(0.0, |row| crate::hypermodel::dot(row, &v_next));
                        p * (self.reward(s, a) + cont)
                    })
                    .sum();
            }
            v_next = v;
        }
        Ok(crate::hypermodel::dot(&self.rho, &v_next))
    }
}

/// A `TabularMdp` together with its own sampling stream and current state.
#[derive(Clone, Debug)]
pub struct MdpEnv {
    mdp: TabularMdp,
    stream: RngStream,
    state: Option<usize>,
}

impl MdpEnv {
    pub fn new(mdp: TabularMdp, stream: RngStream) -> Self {
        Self { mdp, stream, state: None }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

impl Environment for MdpEnv {
    fn states_per_stage(&self) -> usize {
        self.mdp.states
    }

    fn horizon(&self) -> usize {
        self.mdp.horizon
    }

    fn num_actions(&self) -> usize {
        self.mdp.actions
    }

    fn reset(&mut self) -> usize {
        let x = self.stream.categorical(&self.mdp.rho);
        self.state = Some(x);
        x
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let s = self.state.ok_or(Error::EpisodeDone)?;
        if action >= self.mdp.actions {
            return Err(Error::InvalidAction { action, num_actions: self.mdp.actions });
        }
        let reward = self.mdp.reward(s, action);
        let next_state = match self.mdp.transition_row(s, action) {
            None => None,
            Some(row) => {
                let t = s / self.mdp.states;
                Some((t + 1) * self.mdp.states + self.stream.categorical(row))
            }
        };
        self.state = next_state;
        Ok(StepOutcome { next_state, reward })
    }
}

/// Dirichlet prior over every transition row of a layered MDP, each row with
/// total concentration `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPriorSpec {
    states: usize,
    horizon: usize,
    actions: usize,
    beta: f64,
    alpha0: Vec<f64>,
}

impl DirichletPriorSpec {
    pub fn new(states: usize, horizon: usize, actions: usize, alpha0: Vec<f64>) -> Result<Self> {
        if states == 0 || horizon == 0 || actions == 0 {
            return Err(Error::InvalidConfig("prior needs at least one state, stage and action".into()));
        }
        check_dim((horizon - 1) * states * actions * states, alpha0.len())?;
        if alpha0.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidConfig("Dirichlet concentrations must be positive".into()));
        }
        let beta = alpha0.chunks(states).next().map_or(3.0, |row| row.iter().sum());
        for row in alpha0.chunks(states) {
            let sum: f64 = row.iter().sum();
            if (sum - beta).abs() > 1e-9 * beta {
                return Err(Error::InvalidConfig(format!("row concentration {sum} differs from {beta}")));
            }
        }
        if beta < 3.0 - 1e-12 {
            return Err(Error::InvalidConfig(format!("total concentration must be at least 3, got {beta}")));
        }
        Ok(Self { states, horizon, actions, beta, alpha0 })
    }

    /// `alpha0 = (beta / S, ..., beta / S)` for every row.
    pub fn symmetric(states: usize, horizon: usize, actions: usize, beta: f64) -> Result<Self> {
        let rows = horizon.saturating_sub(1) * states * actions;
        Self::new(states, horizon, actions, vec![beta / states as f64; rows * states])
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn alpha0(&self) -> &[f64] {
        &self.alpha0
    }

    /// Concentration row for `(state, action)`, or `None` at the last stage.
    pub fn alpha_row(&self, state: usize, action: usize) -> Option<&[f64]> {
        if state / self.states + 1 >= self.horizon {
            return None;
        }
        let start = (state * self.actions + action) * self.states;
        Some(&self.alpha0[start..start + self.states])
    }
}

/// Draw every transition row independently from its Dirichlet prior. The
/// initial distribution is uniform over the first stage.
pub fn sample_mdp_from_prior(spec: &DirichletPriorSpec, rewards: Vec<f64>, stream: &mut RngStream) -> Result<TabularMdp> {
    let mut transitions = Vec::with_capacity(spec.alpha0.len());
    for row in spec.alpha0.chunks(spec.states) {
        transitions.extend(stream.dirichlet(row)?);
    }
    let rho = vec![1.0 / spec.states as f64; spec.states];
    TabularMdp::new(spec.states, spec.horizon, spec.actions, transitions, rewards, rho)
}
