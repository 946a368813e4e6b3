//! Agent construction from specs, plus two reference policies used only by the harness.

use hyperagent_core::agent::Agent;
use hyperagent_core::baselines::{EnsembleAgent, EpsGreedy, Psrl, Rlsvi, RlsviConfig};
use hyperagent_core::envs::{DirichletPriorSpec, TabularMdp};
use hyperagent_core::hypermodel::IndexScheme;
use hyperagent_core::neural::{NeuralAgentConfig, NeuralHyperAgent};
use hyperagent_core::tabular::{act_greedy, Layout, PriorMean, TabularAgentConfig, TabularHyperAgent};
use hyperagent_core::{Result as CoreResult, RngStream};

use crate::config::{AgentSpec, HyperAgentSpec};
use crate::error::{LabError, LabResult};

/// What an agent may know about its environment.
#[derive(Clone, Copy, Debug)]
pub struct EnvShape<'a> {
    pub states_per_stage: usize,
    pub horizon: usize,
    pub actions: usize,
    pub beta: f64,
    /// Prior and known rewards, when the environment came from a Dirichlet prior.
    pub prior: Option<(&'a DirichletPriorSpec, &'a [f64])>,
    /// The true model, for the oracle only.
    pub mdp: Option<&'a TabularMdp>,
    /// Scheme used when a HyperAgent spec does not name one.
    pub default_scheme: IndexScheme,
}

impl EnvShape<'_> {
    pub fn layout(&self) -> Layout {
        Layout::Layered { states_per_stage: self.states_per_stage, horizon: self.horizon }
    }

    pub fn num_states(&self) -> usize {
        self.states_per_stage * self.horizon
    }
}

/// The tabular HyperAgent config a spec resolves to.
pub fn hyperagent_config(spec: &HyperAgentSpec, shape: &EnvShape<'_>, episodes: usize) -> LabResult<TabularAgentConfig> {
    let scale = spec.scale.unwrap_or(shape.horizon as f64);
    let delta = spec.delta.unwrap_or(0.1);
    let mut cfg = TabularAgentConfig::theory_with_scale(shape.states_per_stage, shape.actions, shape.horizon, episodes, delta, shape.beta, scale)?;
    if let Some(m) = spec.index_dim {
        cfg.index_dim = m;
    }
    cfg.scheme = spec.scheme.unwrap_or(shape.default_scheme);
    Ok(cfg)
}

pub fn build_agent(spec: &AgentSpec, shape: &EnvShape<'_>, episodes: usize, stream: RngStream) -> LabResult<Box<dyn Agent>> {
    let layout = shape.layout();
    let scale_of = |s: Option<f64>| s.unwrap_or(shape.horizon as f64);
    Ok(match spec {
        AgentSpec::HyperAgent { spec, .. } => {
            let cfg = hyperagent_config(spec, shape, episodes)?;
            Box::new(TabularHyperAgent::new(cfg, layout, shape.actions, stream)?)
        }
        AgentSpec::Neural { config, .. } => {
            let cfg = config.clone().unwrap_or_else(NeuralAgentConfig::deepsea);
            Box::new(NeuralHyperAgent::new(cfg, shape.num_states(), shape.actions, stream)?)
        }
        AgentSpec::Psrl { .. } => {
            let (prior, rewards) = shape.prior.ok_or_else(|| LabError::Config("psrl needs a dirichlet env with known rewards".into()))?;
            Box::new(Psrl::new(prior.clone(), rewards.to_vec(), stream)?)
        }
        AgentSpec::Rlsvi { scale, .. } => {
            let scale = scale_of(*scale);
            let cfg = RlsviConfig { sigma: 6f64.sqrt() * scale, beta: shape.beta, mu0: PriorMean::Scalar(scale), gamma: 1.0, horizon: Some(shape.horizon) };
            Box::new(Rlsvi::new(cfg, layout, shape.actions, stream)?)
        }
        AgentSpec::EpsGreedy { config, .. } => Box::new(EpsGreedy::new(config.clone(), shape.num_states(), shape.actions, stream)?),
        AgentSpec::Ensemble { config, .. } => Box::new(EnsembleAgent::new(config.clone(), layout, shape.actions, stream)?),
        AgentSpec::Uniform { .. } => Box::new(UniformAgent { num_states: shape.num_states(), num_actions: shape.actions, stream }),
        AgentSpec::Oracle { .. } => {
            let mdp = shape.mdp.ok_or_else(|| LabError::Config("the oracle agent needs a known MDP".into()))?;
            Box::new(OracleAgent::new(mdp))
        }
    })
}

/// Picks every action uniformly at random.
#[derive(Clone, Debug)]
pub struct UniformAgent {
    num_states: usize,
    num_actions: usize,
    stream: RngStream,
}

impl Agent for UniformAgent {
    fn begin_episode(&mut self) -> CoreResult<()> {
        Ok(())
    }

    fn act(&mut self, _state: usize) -> CoreResult<usize> {
        Ok(self.stream.below(self.num_actions))
    }

    fn observe(&mut self, _: usize, _: usize, _: f64, _: Option<usize>) -> CoreResult<()> {
        Ok(())
    }

    fn end_episode(&mut self) -> CoreResult<()> {
        Ok(())
    }

    fn policy_probs(&mut self) -> CoreResult<Vec<f64>> {
        Ok(vec![1.0 / self.num_actions as f64; self.num_states * self.num_actions])
    }

    fn eval_policy(&mut self) -> CoreResult<Vec<usize>> {
        Ok(vec![0; self.num_states])
    }
}

/// Acts optimally in a known MDP.
#[derive(Clone, Debug)]
pub struct OracleAgent {
    policy: Vec<usize>,
    num_actions: usize,
}

impl OracleAgent {
    pub fn new(mdp: &TabularMdp) -> Self {
        let q = mdp.optimal_q();
        let policy = (0..mdp.num_states()).map(|s| act_greedy(&q, s, mdp.actions())).collect();
        Self { policy, num_actions: mdp.actions() }
    }
}

impl Agent for OracleAgent {
    fn begin_episode(&mut self) -> CoreResult<()> {
        Ok(())
    }

    fn act(&mut self, state: usize) -> CoreResult<usize> {
        Ok(self.policy[state])
    }

    fn observe(&mut self, _: usize, _: usize, _: f64, _: Option<usize>) -> CoreResult<()> {
        Ok(())
    }

    fn end_episode(&mut self) -> CoreResult<()> {
        Ok(())
    }

    fn policy_probs(&mut self) -> CoreResult<Vec<f64>> {
        let mut p = vec![0.0; self.policy.len() * self.num_actions];
        for (s, &a) in self.policy.iter().enumerate() {
            p[s * self.num_actions + a] = 1.0;
        }
        Ok(p)
    }

    fn eval_policy(&mut self) -> CoreResult<Vec<usize>> {
        Ok(self.policy.clone())
    }
}
