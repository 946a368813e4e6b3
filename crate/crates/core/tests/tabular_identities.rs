use hyperagent_core::envs::TabularMdp;
use hyperagent_core::hypermodel::{IndexMapping, IndexScheme, TabularHypermodel};
use hyperagent_core::rng::sample_sphere;
use hyperagent_core::tabular::{
    bellman_apply_with_noise, closed_form_pair, incremental_m_update, mean_target, noise_table, EpisodeRecord, TransitionRecord, VisitStats,
};
use hyperagent_core::{ReferenceDist, RngStream};
use hyperagent_oracles::{tabular_pair_descent, DenseMdp};
use proptest::prelude::*;

/// Random layered episode on `S` states per stage, `H` stages, `A` actions.
fn random_episode(stream: &mut RngStream, s: usize, h: usize, a: usize, m: usize) -> EpisodeRecord {
    let mut x = stream.below(s);
    let transitions = (0..h)
        .map(|t| {
            let state = t * s + x;
            let action = stream.below(a);
            let next = if t + 1 < h {
                x = stream.below(s);
                Some((t + 1) * s + x)
            } else {
                None
            };
            TransitionRecord { state, action, reward: stream.uniform(), next_state: next, z: sample_sphere(stream, m).unwrap() }
        })
        .collect();
    EpisodeRecord { transitions }
}

#[test]
fn incremental_rows_match_batch_recomputation() {
    let (s, h, a, m) = (3, 4, 2, 6);
    let (sigma, beta) = (1.3, 3.0);
    let sigma0 = sigma / f64::sqrt(beta);
    let mut stream = RngStream::new(11);
    let pairs = s * h * a;
    let mut hyper = TabularHypermodel::new(s * h, a, m, vec![0.0; pairs], sigma0, &mut stream).unwrap();
    let mut stats = VisitStats::new(s * h, a);
    let mut history = Vec::new();
    for _ in 0..500 {
        let ep = random_episode(&mut stream, s, h, a, m);
        incremental_m_update(&mut hyper, &mut stats, &ep, sigma, beta).unwrap();
        history.push(ep);
    }
    let mut worst: f64 = 0.0;
    for sa in 0..pairs {
        let mut z_sum = vec![0.0; m];
        let mut n = 0.0;
        for tr in history.iter().flat_map(|e| &e.transitions).filter(|t| t.state * a + t.action == sa) {
            n += 1.0;
            z_sum.iter_mut().zip(&tr.z).for_each(|(acc, z)| *acc += z);
        }
        for k in 0..m {
            let batch = (sigma * z_sum[k] + beta * sigma0 * hyper.z0_row(sa)[k]) / (n + beta);
            worst = worst.max((batch - hyper.effective_row(sa)[k]).abs());
        }
    }
    assert!(worst < 1e-10, "sup-norm gap {worst}");
}

#[test]
fn closed_form_matches_gradient_descent() {
    let mut stream = RngStream::new(3);
    for _ in 0..20 {
        let n = stream.below(8);
        let m = 1 + stream.below(5);
        let sigma = 0.5 + stream.uniform();
        let beta = 0.5 + 3.0 * stream.uniform();
        let sigma0 = sigma / beta.sqrt();
        let mu0 = 2.0 * stream.uniform();
        let y: Vec<f64> = (0..n).map(|_| stream.normal(0.0, 2.0)).collect();
        let z: Vec<Vec<f64>> = (0..n).map(|_| sample_sphere(&mut stream, m).unwrap()).collect();
        let z0 = sample_sphere(&mut stream, m).unwrap();
        let (mu, mrow) = closed_form_pair(&y, &z, mu0, &z0, sigma, sigma0, beta);
        let (mu_gd, m_gd) = tabular_pair_descent(&y, &z, mu0, &z0, sigma, sigma0, beta, 1e-11);
        assert!((mu - mu_gd).abs() < 1e-6);
        for (a, b) in mrow.iter().zip(&m_gd) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

/// One regression step with targets from a fixed `Q-` equals one application
/// of the stochastic Bellman operator.
#[test]
fn regression_step_is_bellman_step() {
    let (s, h, a, m) = (2, 3, 2, 3);
    let (sigma, beta, gamma) = (1.0, 2.0, 1.0);
    let sigma0 = sigma / f64::sqrt(beta);
    let mut stream = RngStream::new(8);
    let pairs = s * h * a;
    let mu0: Vec<f64> = (0..pairs).map(|_| stream.uniform()).collect();
    let mut hyper = TabularHypermodel::new(s * h, a, m, mu0.clone(), sigma0, &mut stream).unwrap();
    let mut stats = VisitStats::new(s * h, a);
    let history: Vec<EpisodeRecord> = (0..30).map(|_| random_episode(&mut stream, s, h, a, m)).collect();
    for ep in &history {
        incremental_m_update(&mut hyper, &mut stats, ep, sigma, beta).unwrap();
    }
    let q_prev: Vec<f64> = (0..pairs).map(|_| stream.normal(0.0, 1.0)).collect();
    let v = |state: usize| q_prev[state * a..(state + 1) * a].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut mapping = IndexMapping::new(IndexScheme::StateDependent, ReferenceDist::gaussian(m).unwrap(), stream.child(9)).unwrap();
    let noise = noise_table(&hyper, &mut mapping).unwrap();
    let mut fq = vec![0.0; pairs];
    bellman_apply_with_noise(&q_prev, &stats, hyper.mu0(), &noise, gamma, beta, &mut fq).unwrap();
    for sa in 0..pairs {
        let data: Vec<&TransitionRecord> = history.iter().flat_map(|e| &e.transitions).filter(|t| t.state * a + t.action == sa).collect();
        let y: Vec<f64> = data.iter().map(|t| t.reward + gamma * t.next_state.map_or(0.0, v)).collect();
        let z: Vec<Vec<f64>> = data.iter().map(|t| t.z.clone()).collect();
        let (mu_gd, m_gd) = tabular_pair_descent(&y, &z, mu0[sa], hyper.z0_row(sa), sigma, sigma0, beta, 1e-11);
        let xi = mapping.index(sa / a).to_vec();
        let f: f64 = mu_gd + mu0[sa] + m_gd.iter().zip(hyper.z0_row(sa)).zip(&xi).map(|((mk, z0), x)| (mk + sigma0 * z0) * x).sum::<f64>();
        assert!((f - fq[sa]).abs() < 1e-6, "pair {sa}: {f} vs {}", fq[sa]);
    }
}

fn random_dense_mdp(stream: &mut RngStream, s: usize, h: usize, a: usize) -> (TabularMdp, DenseMdp) {
    let mut p = vec![vec![vec![vec![0.0; s]; a]; s]; h - 1];
    let mut flat_p = Vec::new();
    for stage in p.iter_mut() {
        for row_s in stage.iter_mut() {
            for row in row_s.iter_mut() {
                let w: Vec<f64> = (0..s).map(|_| stream.uniform() + 1e-3).collect();
                let total: f64 = w.iter().sum();
                row.iter_mut().zip(&w).for_each(|(r, x)| *r = x / total);
                flat_p.extend_from_slice(row);
            }
        }
    }
    let r: Vec<Vec<Vec<f64>>> = (0..h).map(|_| (0..s).map(|_| (0..a).map(|_| stream.uniform()).collect()).collect()).collect();
    let flat_r: Vec<f64> = r.iter().flatten().flatten().cloned().collect();
    let rho = vec![1.0 / s as f64; s];
    let mdp = TabularMdp::new(s, h, a, flat_p, flat_r, rho.clone()).unwrap();
    (mdp, DenseMdp { p, r, rho })
}

#[test]
fn backward_induction_matches_policy_enumeration() {
    let mut stream = RngStream::new(21);
    for _ in 0..10 {
        let (mdp, dense) = random_dense_mdp(&mut stream, 2, 3, 2);
        assert!((mdp.optimal_value() - dense.brute_force_optimal_value()).abs() < 1e-12);
        let probs: Vec<f64> = (0..mdp.num_states()).flat_map(|_| [0.3, 0.7]).collect();
        let pi: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.3, 0.7]; 2]; 3];
        assert!((mdp.policy_value(&probs).unwrap() - dense.policy_value(&pi)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Pairs absent from an episode keep their rows.
    #[test]
    fn unvisited_rows_are_untouched(seed in 0u64..1000, m in 1usize..6) {
        let mut stream = RngStream::new(seed);
        let mut hyper = TabularHypermodel::new(6, 2, m, vec![0.0; 12], 0.7, &mut stream).unwrap();
        let before = hyper.clone();
        let mut stats = VisitStats::new(6, 2);
        let ep = random_episode(&mut stream, 2, 3, 2, m);
        incremental_m_update(&mut hyper, &mut stats, &ep, 1.0, 2.0).unwrap();
        for sa in 0..12 {
            if stats.count(sa) == 0 {
                prop_assert_eq!(hyper.effective_row(sa), before.effective_row(sa));
            }
        }
    }

    /// The updated row norm equals the norm of the batch formula.
    #[test]
    fn single_pair_update_matches_batch_norm(seed in 0u64..1000) {
        let mut stream = RngStream::new(seed);
        let beta = 3.0;
        let mut hyper = TabularHypermodel::new(1, 1, 16, vec![0.0], 1.0 / f64::sqrt(beta), &mut stream).unwrap();
        let mut stats = VisitStats::new(1, 1);
        let ep = EpisodeRecord {
            transitions: (0..4).map(|_| TransitionRecord { state: 0, action: 0, reward: 0.0, next_state: None, z: sample_sphere(&mut stream, 16).unwrap() }).collect(),
        };
        incremental_m_update(&mut hyper, &mut stats, &ep, 1.0, beta).unwrap();
        let mut manual = hyper.z0_row(0).iter().map(|z| beta * z / f64::sqrt(beta)).collect::<Vec<_>>();
        for tr in &ep.transitions {
            manual.iter_mut().zip(&tr.z).for_each(|(acc, z)| *acc += z);
        }
        let manual_norm: f64 = manual.iter().map(|x| (x / (4.0 + beta)).powi(2)).sum();
        prop_assert!((hyper.effective_norm_sq(0) - manual_norm).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// `|F Q - F Q'|_inf <= gamma |Q - Q'|_inf` for any data and noise.
    #[test]
    fn bellman_operator_contracts(seed in 0u64..10_000, gamma in 0.0f64..1.0, beta in 0.1f64..5.0) {
        let mut stream = RngStream::new(seed);
        let (states, actions) = (2 + stream.below(5), 1 + stream.below(3));
        let pairs = states * actions;
        let mut stats = VisitStats::new(states, actions);
        for _ in 0..stream.below(3 * pairs) {
            let next = if stream.bernoulli(0.3) { None } else { Some(stream.below(states)) };
            stats.record(stream.below(states), stream.below(actions), stream.uniform(), next).unwrap();
        }
        let mu0: Vec<f64> = (0..pairs).map(|_| stream.uniform()).collect();
        let noise: Vec<f64> = (0..pairs).map(|_| stream.normal(0.0, 1.0)).collect();
        let q: Vec<f64> = (0..pairs).map(|_| stream.normal(0.0, 3.0)).collect();
        let q2: Vec<f64> = (0..pairs).map(|_| stream.normal(0.0, 3.0)).collect();
        let (mut f, mut f2) = (vec![0.0; pairs], vec![0.0; pairs]);
        bellman_apply_with_noise(&q, &stats, &mu0, &noise, gamma, beta, &mut f).unwrap();
        bellman_apply_with_noise(&q2, &stats, &mu0, &noise, gamma, beta, &mut f2).unwrap();
        let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(sup(&f, &f2) <= gamma * sup(&q, &q2) * (1.0 + 1e-12));
    }
}

/// With `mu0 = H` and values bounded by `H - 1` the operator mean dominates the
/// posterior-mean backup.
#[test]
fn mean_target_is_optimistic_under_the_theory_prior() {
    let mut stream = RngStream::new(12);
    let (s, h, a, beta) = (3, 4, 2, 3.0);
    let mut stats = VisitStats::new(s * h, a);
    let history: Vec<EpisodeRecord> = (0..25).map(|_| random_episode(&mut stream, s, h, a, 2)).collect();
    for ep in &history {
        for tr in &ep.transitions {
            stats.record(tr.state, tr.action, tr.reward, tr.next_state).unwrap();
        }
    }
    let v: Vec<f64> = (0..s * h).map(|_| stream.uniform() * (h - 1) as f64).collect();
    for sa in 0..s * (h - 1) * a {
        let Some(r_hat) = stats.r_hat(sa) else { continue };
        let n = stats.count(sa) as f64;
        let t = sa / a / s;
        let mut p_bar = vec![beta / s as f64; s];
        for (next, p) in stats.p_hat(sa).unwrap() {
            p_bar[next.unwrap() % s] += n * p;
        }
        let backup = r_hat + p_bar.iter().zip(&v[(t + 1) * s..(t + 2) * s]).map(|(p, x)| p * x).sum::<f64>() / (n + beta);
        assert!(mean_target(&stats, sa, h as f64, &v, 1.0, beta) >= backup - 1e-12);
    }
}
