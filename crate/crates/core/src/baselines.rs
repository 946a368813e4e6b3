//! Reference agents: PSRL, RLSVI, epsilon-greedy Q-learning and a tabular
//! ensemble with bootstrap masks and random prior offsets.

use serde::{Deserialize, Serialize};

use crate::agent::{one_hot_policy, Agent};
use crate::envs::{DirichletPriorSpec, TabularMdp};
use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;
use crate::tabular::{act_greedy, solve_with_noise, Layout, PriorMean, SolveMode, VisitStats};

/// Posterior sampling with a Dirichlet posterior per transition row and known rewards.
#[derive(Clone, Debug)]
pub struct Psrl {
    prior: DirichletPriorSpec,
    rewards: Vec<f64>,
    alpha: Vec<f64>,
    stream: RngStream,
    episode: u64,
    policy: Vec<usize>,
}

fn greedy_from_q(q: &[f64], num_states: usize, num_actions: usize) -> Vec<usize> {
    (0..num_states).map(|s| act_greedy(q, s, num_actions)).collect()
}

impl Psrl {
    pub fn new(prior: DirichletPriorSpec, rewards: Vec<f64>, stream: RngStream) -> Result<Self> {
        check_dim(prior.states() * prior.horizon() * prior.actions(), rewards.len())?;
        Ok(Self { alpha: prior.alpha0().to_vec(), prior, rewards, stream, episode: 0, policy: Vec::new() })
    }

    /// Current concentration row of `(state, action)`; `None` at the last stage.
    pub fn alpha_row(&self, state: usize, action: usize) -> Option<&[f64]> {
        let s = self.prior.states();
        if state / s + 1 >= self.prior.horizon() {
            return None;
        }
        let start = (state * self.prior.actions() + action) * s;
        Some(&self.alpha[start..start + s])
    }

    /// `(alpha0 + N P^) / (beta + N)`.
    pub fn posterior_mean(&self, state: usize, action: usize) -> Option<Vec<f64>> {
        self.alpha_row(state, action).map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(|a| a / total).collect()
        })
    }

    fn plan(&self, transitions: Vec<f64>) -> Result<Vec<usize>> {
        let s = self.prior.states();
        let mdp = TabularMdp::new(s, self.prior.horizon(), self.prior.actions(), transitions, self.rewards.clone(), vec![1.0 / s as f64; s])?;
        Ok(greedy_from_q(&mdp.optimal_q(), mdp.num_states(), mdp.actions()))
    }

    /// Draw a full transition model from the posterior.
    pub fn sample_transitions(&self, stream: &mut RngStream) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.alpha.len());
        for row in self.alpha.chunks(self.prior.states()) {
            out.extend(stream.dirichlet(row)?);
        }
        Ok(out)
    }
}

impl Agent for Psrl {
    fn begin_episode(&mut self) -> Result<()> {
        let sampled = self.sample_transitions(&mut self.stream.child(self.episode))?;
        self.policy = self.plan(sampled)?;
        Ok(())
    }

    fn act(&mut self, state: usize) -> Result<usize> {
        if self.policy.is_empty() {
            self.begin_episode()?;
        }
        Ok(self.policy[state])
    }

    fn observe(&mut self, state: usize, action: usize, _reward: f64, next_state: Option<usize>) -> Result<()> {
        let s = self.prior.states();
        if let Some(next) = next_state {
            if next / s != state / s + 1 {
                return Err(Error::NonLayeredTransition { from: state / s, to: next / s });
            }
            let idx = (state * self.prior.actions() + action) * s + next % s;
            self.alpha[idx] += 1.0;
        }
        Ok(())
    }

    fn end_episode(&mut self) -> Result<()> {
        self.episode += 1;
        Ok(())
    }

    fn policy_probs(&mut self) -> Result<Vec<f64>> {
        Ok(one_hot_policy(&self.policy, self.prior.actions()))
    }

    fn eval_policy(&mut self) -> Result<Vec<usize>> {
        let total = self.alpha.chunks(self.prior.states()).flat_map(|row| {
            let sum: f64 = row.iter().sum();
            row.iter().map(move |a| a / sum)
        });
        self.plan(total.collect())
    }
}

/// Configuration shared by the value-based tabular baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlsviConfig {
    pub sigma: f64,
    pub beta: f64,
    pub mu0: PriorMean,
    pub gamma: f64,
    pub horizon: Option<usize>,
}

impl RlsviConfig {
    fn mode(&self) -> SolveMode {
        match self.horizon {
            Some(_) => SolveMode::FiniteHorizon,
            None => SolveMode::Discounted { tol: 1e-8, max_iterations: 100_000 },
        }
    }
}

/// RLSVI: keeps the whole history and redraws value noise
/// `w_sa ~ N(0, sigma^2 / (N_sa + beta))` every episode.
#[derive(Clone, Debug)]
pub struct Rlsvi {
    config: RlsviConfig,
    layout: Layout,
    num_actions: usize,
    mu0: Vec<f64>,
    history: Vec<(usize, usize, f64, Option<usize>)>,
    stream: RngStream,
    episode: u64,
    q: Vec<f64>,
}

impl Rlsvi {
    pub fn new(config: RlsviConfig, layout: Layout, num_actions: usize, stream: RngStream) -> Result<Self> {
        if !(config.beta > 0.0) || !(config.sigma >= 0.0) {
            return Err(Error::InvalidConfig("need beta > 0 and sigma >= 0".into()));
        }
        let mu0 = config.mu0.table(layout.num_states() * num_actions)?;
        Ok(Self { config, layout, num_actions, mu0, history: Vec::new(), stream, episode: 0, q: Vec::new() })
    }

    /// Statistics recomputed from the full history.
    pub fn stats(&self) -> Result<VisitStats> {
        let mut stats = VisitStats::new(self.layout.num_states(), self.num_actions);
        for &(s, a, r, next) in &self.history {
            stats.record(s, a, r, next)?;
        }
        Ok(stats)
    }

    /// Noise scale `sigma^2 / (N + beta)` for each pair.
    pub fn noise_variance(&self, stats: &VisitStats) -> Vec<f64> {
        (0..stats.num_pairs())
            .map(|sa| self.config.sigma.powi(2) / (stats.count(sa) as f64 + self.config.beta))
            .collect()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn solve_noise_free(&self) -> Result<Vec<f64>> {
        let stats = self.stats()?;
        let zero = vec![0.0; stats.num_pairs()];
        solve_with_noise(self.layout, &stats, &self.mu0, &zero, self.config.gamma, self.config.beta, self.config.mode(), None)
    }
}

impl Agent for Rlsvi {
    fn begin_episode(&mut self) -> Result<()> {
        let stats = self.stats()?;
        let mut noise_stream = self.stream.child(self.episode);
        let noise: Vec<f64> = self
            .noise_variance(&stats)
            .into_iter()
            .map(|v| noise_stream.normal(0.0, v.sqrt()))
            .collect();
        let warm = (!self.q.is_empty()).then(|| self.q.clone());
        self.q = solve_with_noise(self.layout, &stats, &self.mu0, &noise, self.config.gamma, self.config.beta, self.config.mode(), warm.as_deref())?;
        Ok(())
    }

    fn act(&mut self, state: usize) -> Result<usize> {
        if self.q.is_empty() {
            self.begin_episode()?;
        }
        Ok(act_greedy(&self.q, state, self.num_actions))
    }

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>) -> Result<()> {
        self.history.push((state, action, reward, next_state));
        Ok(())
    }

    fn end_episode(&mut self) -> Result<()> {
        self.episode += 1;
        Ok(())
    }

    fn policy_probs(&mut self) -> Result<Vec<f64>> {
        Ok(one_hot_policy(&greedy_from_q(&self.q, self.layout.num_states(), self.num_actions), self.num_actions))
    }

    fn eval_policy(&mut self) -> Result<Vec<usize>> {
        Ok(greedy_from_q(&self.solve_noise_free()?, self.layout.num_states(), self.num_actions))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsGreedyConfig {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub gamma: f64,
    pub init_value: f64,
}

impl Default for EpsGreedyConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, learning_rate: 0.1, gamma: 1.0, init_value: 0.0 }
    }
}

/// Tabular Q-learning with epsilon-greedy exploration.
///
/// TD updates are applied in order at the end of each episode, so the
/// behaviour policy is fixed within an episode.
#[derive(Clone, Debug)]
pub struct EpsGreedy {
    config: EpsGreedyConfig,
    num_states: usize,
    num_actions: usize,
    q: Vec<f64>,
    stream: RngStream,
    pending: Vec<(usize, usize, f64, Option<usize>)>,
}

impl EpsGreedy {
    pub fn new(config: EpsGreedyConfig, num_states: usize, num_actions: usize, stream: RngStream) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in [0, 1], got {}", config.epsilon)));
        }
        if !(config.learning_rate > 0.0 && config.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("learning rate must lie in (0, 1], got {}", config.learning_rate)));
        }
        let q = vec![config.init_value; num_states * num_actions];
        Ok(Self { config, num_states, num_actions, q, stream, pending: Vec::new() })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }
}

impl Agent for EpsGreedy {
    fn begin_episode(&mut self) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, state: usize) -> Result<usize> {
        if self.stream.bernoulli(self.config.epsilon) {
            Ok(self.stream.below(self.num_actions))
        } else {
            Ok(act_greedy(&self.q, state, self.num_actions))
        }
    }

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>) -> Result<()> {
        self.pending.push((state, action, reward, next_state));
        Ok(())
    }

    fn end_episode(&mut self) -> Result<()> {
        let na = self.num_actions;
        for (s, a, r, next) in std::mem::take(&mut self.pending) {
            let boot = next.map_or(0.0, |n| {
                self.q[n * na..(n + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            });
            let sa = s * na + a;
            self.q[sa] += self.config.learning_rate * (r + self.config.gamma * boot - self.q[sa]);
        }
        Ok(())
    }

    fn policy_probs(&mut self) -> Result<Vec<f64>> {
        let na = self.num_actions;
        let eps = self.config.epsilon;
        let mut probs = vec![eps / na as f64; self.num_states * na];
        for s in 0..self.num_states {
            probs[s * na + act_greedy(&self.q, s, na)] += 1.0 - eps;
        }
        Ok(probs)
    }

    fn eval_policy(&mut self) -> Result<Vec<usize>> {
        Ok(greedy_from_q(&self.q, self.num_states, self.num_actions))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub beta: f64,
    pub mu0: f64,
    /// Standard deviation of each member's random prior offsets.
    pub prior_scale: f64,
    pub gamma: f64,
    pub horizon: Option<usize>,
}

/// Tabular ensemble: member `j` solves the Bellman equation on its
/// mask-weighted data, regularized toward its own random prior table.
/// One member, chosen uniformly, acts for a whole episode.
#[derive(Clone, Debug)]
pub struct EnsembleAgent {
    config: EnsembleConfig,
    layout: Layout,
    num_actions: usize,
    priors: Vec<Vec<f64>>,
    stats: Vec<VisitStats>,
    stream: RngStream,
    episode: u64,
    active: usize,
    q: Vec<f64>,
}

impl EnsembleAgent {
    pub fn new(config: EnsembleConfig, layout: Layout, num_actions: usize, stream: RngStream) -> Result<Self> {
        if config.members == 0 {
            return Err(Error::InvalidConfig("ensemble needs at least one member".into()));
        }
        if !(config.beta > 0.0) {
            return Err(Error::InvalidConfig("ensemble needs beta > 0".into()));
        }
        let pairs = layout.num_states() * num_actions;
        let mut prior_stream = stream.child(0);
        let priors = (0..config.members)
            .map(|_| (0..pairs).map(|_| config.mu0 + config.prior_scale * prior_stream.standard_normal()).collect())
            .collect();
        let stats = vec![VisitStats::new(layout.num_states(), num_actions); config.members];
        Ok(Self { config, layout, num_actions, priors, stats, stream, episode: 0, active: 0, q: Vec::new() })
    }

    pub fn active_member(&self) -> usize {
        self.active
    }

    pub fn member_stats(&self, j: usize) -> &VisitStats {
        &self.stats[j]
    }

    fn mode(&self) -> SolveMode {
        match self.config.horizon {
            Some(_) => SolveMode::FiniteHorizon,
            None => SolveMode::Discounted { tol: 1e-8, max_iterations: 100_000 },
        }
    }

    fn solve_member(&self, j: usize) -> Result<Vec<f64>> {
        let zero = vec![0.0; self.priors[j].len()];
        solve_with_noise(self.layout, &self.stats[j], &self.priors[j], &zero, self.config.gamma, self.config.beta, self.mode(), None)
    }
}

impl Agent for EnsembleAgent {
    fn begin_episode(&mut self) -> Result<()> {
        self.active = self.stream.child(1).child(self.episode).below(self.config.members);
        self.q = self.solve_member(self.active)?;
        Ok(())
    }

    fn act(&mut self, state: usize) -> Result<usize> {
        if self.q.is_empty() {
            self.begin_episode()?;
        }
        Ok(act_greedy(&self.q, state, self.num_actions))
    }

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: Option<usize>) -> Result<()> {
        let mut masks = self.stream.child(2).child(self.episode).child((state * self.num_actions + action) as u64);
        for j in 0..self.config.members {
            let w = if masks.bernoulli(0.5) { 2.0 } else { 0.0 };
            if w > 0.0 {
                self.stats[j].record_weighted(state, action, reward, next_state, w)?;
            }
        }
        Ok(())
    }

    fn end_episode(&mut self) -> Result<()> {
        self.episode += 1;
        Ok(())
    }

    fn policy_probs(&mut self) -> Result<Vec<f64>> {
        Ok(one_hot_policy(&greedy_from_q(&self.q, self.layout.num_states(), self.num_actions), self.num_actions))
    }

    fn eval_policy(&mut self) -> Result<Vec<usize>> {
        let mut mean = vec![0.0; self.priors[0].len()];
        for j in 0..self.config.members {
            for (m, q) in mean.iter_mut().zip(self.solve_member(j)?) {
                *m += q / self.config.members as f64;
            }
        }
        Ok(greedy_from_q(&mean, self.layout.num_states(), self.num_actions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::run_episode;
    use crate::envs::{sample_mdp_from_prior, DeepSea, Environment, MdpEnv};
    use crate::hypermodel::IndexScheme;
    use crate::tabular::{TabularAgentConfig, TabularHyperAgent};

    #[test]
    fn psrl_conjugate_update() {
        let prior = DirichletPriorSpec::symmetric(3, 2, 2, 3.0).unwrap();
        let mut psrl = Psrl::new(prior, vec![0.0; 12], RngStream::new(0)).unwrap();
        let before = psrl.alpha_row(1, 1).unwrap().to_vec();
        psrl.observe(1, 1, 0.0, Some(5)).unwrap();
        let after = psrl.alpha_row(1, 1).unwrap();
        assert_eq!(after[2], before[2] + 1.0);
        assert_eq!(after[0], before[0]);
        assert_eq!(after[1], before[1]);
        let mean = psrl.posterior_mean(1, 1).unwrap();
        assert!((mean[2] - (1.0 + 1.0) / 4.0).abs() < 1e-15);
        assert!(psrl.observe(0, 0, 0.0, Some(1)).is_err(), "same-stage successor");
    }

    #[test]
    fn psrl_samples_are_distributions() {
        let prior = DirichletPriorSpec::symmetric(4, 3, 2, 3.0).unwrap();
        let psrl = Psrl::new(prior, vec![0.0; 24], RngStream::new(0)).unwrap();
        let t = psrl.sample_transitions(&mut RngStream::new(3)).unwrap();
        for row in t.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 8.0 * f64::EPSILON);
        }
    }

    #[test]
    fn rlsvi_noise_free_matches_hyperagent_without_perturbation() {
        let prior = DirichletPriorSpec::symmetric(3, 3, 2, 3.0).unwrap();
        let rewards: Vec<f64> = (0..18).map(|i| (i % 5) as f64 / 4.0).collect();
        let mdp = sample_mdp_from_prior(&prior, rewards, &mut RngStream::new(1)).unwrap();
        let layout = Layout::Layered { states_per_stage: 3, horizon: 3 };
        let mut cfg = TabularAgentConfig::practical(3, 3.0);
        cfg.sigma = 0.0;
        cfg.scheme = IndexScheme::StateIndependent;
        let mut hyper = TabularHyperAgent::new(cfg, layout, 2, RngStream::new(5)).unwrap();
        let rcfg = RlsviConfig { sigma: 0.0, beta: 3.0, mu0: PriorMean::Scalar(3.0), gamma: 1.0, horizon: Some(3) };
        let mut rlsvi = Rlsvi::new(rcfg, layout, 2, RngStream::new(6)).unwrap();
        let mut env = MdpEnv::new(mdp, RngStream::new(2));
        for _ in 0..30 {
            // HyperAgent acts; RLSVI sees the identical history.
            hyper.begin_episode().unwrap();
            let mut s = env.reset();
            loop {
                let a = hyper.act(s).unwrap();
                let out = env.step(a).unwrap();
                hyper.observe(s, a, out.reward, out.next_state).unwrap();
                rlsvi.observe(s, a, out.reward, out.next_state).unwrap();
                match out.next_state {
                    Some(n) => s = n,
                    None => break,
                }
            }
            hyper.end_episode().unwrap();
            rlsvi.end_episode().unwrap();
        }
        hyper.begin_episode().unwrap();
        rlsvi.begin_episode().unwrap();
        let hq = &hyper.q_tables()[0];
        for (a, b) in hq.iter().zip(rlsvi.q()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(hyper.policy_probs().unwrap(), rlsvi.policy_probs().unwrap());
    }

    #[test]
    fn rlsvi_prior_variance() {
        let rcfg = RlsviConfig { sigma: 2.0, beta: 3.0, mu0: PriorMean::Scalar(0.0), gamma: 1.0, horizon: Some(2) };
        let r = Rlsvi::new(rcfg, Layout::Layered { states_per_stage: 2, horizon: 2 }, 2, RngStream::new(0)).unwrap();
        let stats = r.stats().unwrap();
        assert!(r.noise_variance(&stats).iter().all(|&v| v == 4.0 / 3.0));
    }

    #[test]
    fn eps_greedy_uniform_when_fully_random() {
        let cfg = EpsGreedyConfig { epsilon: 1.0, ..EpsGreedyConfig::default() };
        let mut agent = EpsGreedy::new(cfg, 1, 4, RngStream::new(3)).unwrap();
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[agent.act(0).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.03);
        }
    }

    #[test]
    fn eps_greedy_pure_exploitation_with_optimistic_init() {
        let cfg = EpsGreedyConfig { epsilon: 0.0, init_value: 5.0, gamma: 0.5, ..EpsGreedyConfig::default() };
        let mut env = DeepSea::with_action_map(4, vec![true; 4]).unwrap();
        let mut agent = EpsGreedy::new(cfg, 16, 2, RngStream::new(0)).unwrap();
        // All ties: action 0, which is "left" on every row of this map.
        let out = run_episode(&mut agent, &mut env).unwrap();
        assert_eq!(out.total_reward, 0.0);
        // The tried action drops below the untouched optimistic value, so action 1 follows.
        assert_eq!(agent.act(0).unwrap(), 1);
        assert!(EpsGreedy::new(EpsGreedyConfig { epsilon: 1.5, ..EpsGreedyConfig::default() }, 1, 1, RngStream::new(0)).is_err());
    }

    #[test]
    fn ensemble_member_and_mask_frequencies() {
        let cfg = EnsembleConfig { members: 4, beta: 3.0, mu0: 0.0, prior_scale: 1.0, gamma: 1.0, horizon: Some(1) };
        let layout = Layout::Layered { states_per_stage: 1, horizon: 1 };
        let mut agent = EnsembleAgent::new(cfg, layout, 1, RngStream::new(8)).unwrap();
        let mut freq = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            agent.begin_episode().unwrap();
            freq[agent.active_member()] += 1;
            agent.observe(0, 0, 1.0, None).unwrap();
            agent.end_episode().unwrap();
        }
        for f in freq {
            assert!((f as f64 / n as f64 - 0.25).abs() < 0.02);
        }
        for j in 0..4 {
            let st = agent.member_stats(j);
            // Each member keeps about half the data, every kept record weighted 2.
            assert!((st.count(0) as f64 / n as f64 - 0.5).abs() < 0.02);
            assert_eq!(st.weight(0), 2.0 * st.count(0) as f64);
        }
        let bad = EnsembleConfig { members: 0, beta: 3.0, mu0: 0.0, prior_scale: 1.0, gamma: 1.0, horizon: Some(1) };
        assert!(EnsembleAgent::new(bad, layout, 1, RngStream::new(0)).is_err());
    }

    #[test]
    fn all_baselines_complete_episodes() {
        let prior = DirichletPriorSpec::symmetric(2, 3, 2, 3.0).unwrap();
        let rewards = vec![0.5; 12];
        let mdp = sample_mdp_from_prior(&prior, rewards.clone(), &mut RngStream::new(0)).unwrap();
        let layout = Layout::Layered { states_per_stage: 2, horizon: 3 };
        let mut env = MdpEnv::new(mdp, RngStream::new(1));
        let mut agents: Vec<Box<dyn Agent>> = vec![
            Box::new(Psrl::new(prior, rewards, RngStream::new(2)).unwrap()),
            Box::new(Rlsvi::new(RlsviConfig { sigma: 1.0, beta: 3.0, mu0: PriorMean::Scalar(3.0), gamma: 1.0, horizon: Some(3) }, layout, 2, RngStream::new(3)).unwrap()),
            Box::new(EpsGreedy::new(EpsGreedyConfig::default(), env.num_states(), 2, RngStream::new(4)).unwrap()),
            Box::new(EnsembleAgent::new(EnsembleConfig { members: 3, beta: 3.0, mu0: 3.0, prior_scale: 1.0, gamma: 1.0, horizon: Some(3) }, layout, 2, RngStream::new(5)).unwrap()),
        ];
        for agent in agents.iter_mut() {
            for _ in 0..5 {
                let out = run_episode(agent.as_mut(), &mut env).unwrap();
                assert_eq!(out.steps, 3);
            }
            let probs = agent.policy_probs().unwrap();
            for row in probs.chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(agent.eval_policy().unwrap().len(), 6);
        }
    }
}
