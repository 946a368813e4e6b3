//! Experiment configuration. A run is a pure function of the config and a seed.

use std::path::PathBuf;

use hyperagent_core::baselines::{EnsembleConfig, EpsGreedyConfig};
use hyperagent_core::hypermodel::IndexScheme;
use hyperagent_core::neural::NeuralAgentConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    DeepseaScaling,
    BayesRegret,
    VerifyApprox,
    PropagationDemo,
    SingleRun,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DeepseaScaling => "deepsea-scaling",
            ExperimentKind::BayesRegret => "bayes-regret",
            ExperimentKind::VerifyApprox => "verify-approx",
            ExperimentKind::PropagationDemo => "propagation-demo",
            ExperimentKind::SingleRun => "single-run",
        }
    }
}

fn default_beta() -> f64 {
    3.0
}

fn default_delta() -> f64 {
    0.1
}

/// Tabular HyperAgent built from the theory preset, with optional overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperAgentSpec {
    /// Replaces the theory value of `M` (4 gives the practical variant).
    #[serde(default)]
    pub index_dim: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub scheme: Option<IndexScheme>,
    /// Return bound used for `sigma = sqrt(6) scale` and `mu0 = scale`; defaults to `H`.
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AgentSpec {
    HyperAgent {
        #[serde(default)]
        label: Option<String>,
        #[serde(default, flatten)]
        spec: HyperAgentSpec,
    },
    Neural {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        config: Option<NeuralAgentConfig>,
    },
    Psrl {
        #[serde(default)]
        label: Option<String>,
    },
    Rlsvi {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        scale: Option<f64>,
    },
    EpsGreedy {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        config: EpsGreedyConfig,
    },
    Ensemble {
        #[serde(default)]
        label: Option<String>,
        config: EnsembleConfig,
    },
    /// Uniformly random actions.
    Uniform {
        #[serde(default)]
        label: Option<String>,
    },
    /// Plans on the true MDP; only valid when the MDP is known.
    Oracle {
        #[serde(default)]
        label: Option<String>,
    },
}

impl AgentSpec {
    pub fn label(&self) -> String {
        let (label, default) = match self {
            AgentSpec::HyperAgent { label, spec } => {
                let d = match spec.index_dim {
                    Some(m) => format!("hyperagent-m{m}"),
                    None => "hyperagent".to_string(),
                };
                (label, d)
            }
            AgentSpec::Neural { label, .. } => (label, "neural-hyperagent".into()),
            AgentSpec::Psrl { label } => (label, "psrl".into()),
            AgentSpec::Rlsvi { label, .. } => (label, "rlsvi".into()),
            AgentSpec::EpsGreedy { label, .. } => (label, "eps-greedy".into()),
            AgentSpec::Ensemble { label, .. } => (label, "ensemble".into()),
            AgentSpec::Uniform { label } => (label, "uniform".into()),
            AgentSpec::Oracle { label } => (label, "oracle".into()),
        };
        label.clone().unwrap_or(default)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EnvSpec {
    /// One task per size.
    Deepsea { sizes: Vec<usize> },
    /// Layered MDP drawn per seed from a symmetric Dirichlet prior of total
    /// mass `beta`, with known rewards drawn from Uniform(0, 1).
    Dirichlet {
        states: usize,
        actions: usize,
        horizon: usize,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    /// The fixed four-state, two-action, six-stage instance.
    Propagation {
        #[serde(default = "default_demo_index_dim")]
        index_dim: usize,
        #[serde(default = "default_demo_samples")]
        samples: usize,
        #[serde(default = "default_demo_visits")]
        visits: usize,
    },
}

fn default_demo_index_dim() -> usize {
    64
}

fn default_demo_samples() -> usize {
    10_000
}

fn default_demo_visits() -> usize {
    10_000
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Deepsea { .. } => "deepsea",
            EnvSpec::Dirichlet { .. } => "dirichlet-mdp",
            EnvSpec::Propagation { .. } => "propagation",
        }
    }
}

/// Settings for the posterior-approximation check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSpec {
    pub eps: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Replaces the value of `M` implied by `eps` and `delta`.
    #[serde(default)]
    pub index_dim: Option<usize>,
}

fn default_eval_every() -> usize {
    1000
}

fn default_threshold() -> f64 {
    0.99
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    pub env: EnvSpec,
    /// Episode budget `K`.
    pub episodes: usize,
    /// Evaluation cadence in interactions.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Return at or above which an evaluation counts as solved.
    #[serde(default = "default_threshold")]
    pub solve_threshold: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub approx: Option<ApproxSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> LabResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        if self.episodes == 0 && self.experiment != ExperimentKind::PropagationDemo {
            return bad("episode budget must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        let needs_agents = matches!(self.experiment, ExperimentKind::DeepseaScaling | ExperimentKind::BayesRegret | ExperimentKind::SingleRun);
        if needs_agents && self.agents.is_empty() {
            return bad("at least one agent is required");
        }
        match (&self.experiment, &self.env) {
            (ExperimentKind::DeepseaScaling, EnvSpec::Deepsea { sizes }) if !sizes.is_empty() => {}
            (ExperimentKind::DeepseaScaling, _) => return bad("deepsea-scaling needs a deepsea env with at least one size"),
            (ExperimentKind::BayesRegret | ExperimentKind::VerifyApprox, EnvSpec::Dirichlet { .. }) => {}
            (ExperimentKind::BayesRegret | ExperimentKind::VerifyApprox, _) => return bad("this experiment needs a dirichlet env"),
            (ExperimentKind::PropagationDemo, EnvSpec::Propagation { .. }) => {}
            (ExperimentKind::PropagationDemo, _) => return bad("propagation-demo needs the propagation env"),
            (ExperimentKind::SingleRun, EnvSpec::Deepsea { sizes }) if sizes.len() == 1 => {}
            (ExperimentKind::SingleRun, EnvSpec::Dirichlet { .. }) => {}
            (ExperimentKind::SingleRun, _) => return bad("single-run needs one deepsea size or a dirichlet env"),
        }
        if self.experiment == ExperimentKind::VerifyApprox && self.approx.is_none() {
            return bad("verify-approx needs an approx section");
        }
        let mut labels: Vec<String> = self.agents.iter().map(AgentSpec::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.agents.len() {
            return bad("agent labels must be unique");
        }
        Ok(())
    }
}
