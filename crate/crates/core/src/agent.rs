//! The episodic agent interface shared by HyperAgent and the baselines.

use crate::envs::Environment;
use crate::error::Result;

pub trait Agent {
    /// Prepare the policy for a new episode (draw indices, sample models, plan).
    fn begin_episode(&mut self) -> Result<()>;

    fn act(&mut self, state: usize) -> Result<usize>;

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>) -> Result<()>;

    /// Incorporate the finished episode.
    fn end_episode(&mut self) -> Result<()>;

    /// Action probabilities of the current episode's policy, indexed `state * A + a`.
    /// Valid between `begin_episode` and `end_episode`.
    fn policy_probs(&mut self) -> Result<Vec<f64>>;

    /// Deterministic evaluation policy: one action per state.
    fn eval_policy(&mut self) -> Result<Vec<usize>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub total_reward: f64,
    pub steps: usize,
}

/// One full interaction episode.
pub fn run_episode<A: Agent + ?Sized, E: Environment + ?Sized>(agent: &mut A, env: &mut E) -> Result<EpisodeSummary> {
    agent.begin_episode()?;
    let mut state = env.reset();
    let mut total_reward = 0.0;
    let mut steps = 0;
    loop {
        let action = agent.act(state)?;
        let out = env.step(action)?;
        agent.observe(state, action, out.reward, out.next_state)?;
        total_reward += out.reward;
        steps += 1;
        match out.next_state {
            Some(next) => state = next,
            None => break,
        }
    }
    agent.end_episode()?;
    Ok(EpisodeSummary { total_reward, steps })
}

/// Roll out a fixed per-state policy without learning.
pub fn rollout_policy<E: Environment + ?Sized>(policy: &[usize], env: &mut E) -> Result<EpisodeSummary> {
    let mut state = env.reset();
    let mut total_reward = 0.0;
    let mut steps = 0;
    loop {
        let out = env.step(policy[state])?;
        total_reward += out.reward;
        steps += 1;
        match out.next_state {
            Some(next) => state = next,
            None => return Ok(EpisodeSummary { total_reward, steps }),
        }
    }
}

pub(crate) fn one_hot_policy(actions: &[usize], num_actions: usize) -> Vec<f64> {
    let mut probs = vec![0.0; actions.len() * num_actions];
    for (s, &a) in actions.iter().enumerate() {
        probs[s * num_actions + a] = 1.0;
    }
    probs
}
