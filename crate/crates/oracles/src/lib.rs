//! Brute-force reference computations used by tests.
//!
//! Nothing here shares code with the main crates; every routine is the
//! slowest obvious way to get the answer.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a - b| / max(|a| + |b|, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(floor)
}

/// Plain fixed-step gradient descent until the gradient sup-norm drops below `tol`.
/// Returns the iterate and the number of steps taken.
pub fn gradient_descent(grad: impl Fn(&[f64]) -> Vec<f64>, x0: &[f64], lr: f64, tol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let mut x = x0.to_vec();
    for it in 0..max_iter {
        let g = grad(&x);
        if g.iter().all(|v| v.abs() < tol) {
            return (x, it);
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= lr * gi;
        }
    }
    (x, max_iter)
}

/// A dense layered finite-horizon MDP: `p[t][s][a][s']`, `r[t][s][a]`, `rho[s]`.
#[derive(Clone, Debug)]
pub struct DenseMdp {
    pub p: Vec<Vec<Vec<Vec<f64>>>>,
    pub r: Vec<Vec<Vec<f64>>>,
    pub rho: Vec<f64>,
}

impl DenseMdp {
    pub fn horizon(&self) -> usize {
        self.r.len()
    }

    pub fn states(&self) -> usize {
        self.rho.len()
    }

    pub fn actions(&self) -> usize {
        self.r[0][0].len()
    }

    /// Expected return of a stochastic Markov policy `pi[t][s][a]` by forward
    /// propagation of the state distribution.
    pub fn policy_value(&self, pi: &[Vec<Vec<f64>>]) -> f64 {
        let (s_n, a_n) = (self.states(), self.actions());
        let mut dist = self.rho.clone();
        let mut total = 0.0;
        for t in 0..self.horizon() {
            let mut next = vec![0.0; s_n];
            for s in 0..s_n {
                for a in 0..a_n {
                    let w = dist[s] * pi[t][s][a];
                    if w == 0.0 {
                        continue;
                    }
                    total += w * self.r[t][s][a];
                    if t + 1 < self.horizon() {
                        for (sp, np) in next.iter_mut().enumerate() {
                            *np += w * self.p[t][s][a][sp];
                        }
                    }
                }
            }
            dist = next;
        }
        total
    }

    /// Optimal value by enumerating every deterministic Markov policy.
    pub fn brute_force_optimal_value(&self) -> f64 {
        let (h, s_n, a_n) = (self.horizon(), self.states(), self.actions());
        let slots = h * s_n;
        let count = (a_n as u64).pow(slots as u32);
        let mut best = f64::NEG_INFINITY;
        for code in 0..count {
            let mut c = code;
            let mut pi = vec![vec![vec![0.0; a_n]; s_n]; h];
            for slot in pi.iter_mut().flatten() {
                slot[(c % a_n as u64) as usize] = 1.0;
                c /= a_n as u64;
            }
            best = best.max(self.policy_value(&pi));
        }
        best
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ordinary least squares `y = slope * x + intercept` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (slope, intercept, 1.0 - ss_res / ss_tot)
}

/// Minimise the expected per-pair loss
/// `E_xi sum_d [(mu + mu0) + (m + sigma0 z0) . xi - (sigma z_d . xi + y_d)]^2 + beta (mu^2 + |m|^2)`
/// for `xi ~ N(0, I)` by gradient descent. Returns `(mu, m)`.
#[allow(clippy::too_many_arguments)]
pub fn tabular_pair_descent(y: &[f64], z: &[Vec<f64>], mu0: f64, z0: &[f64], sigma: f64, sigma0: f64, beta: f64, tol: f64) -> (f64, Vec<f64>) {
    let dim = z0.len();
    // With E[xi] = 0 and E[xi xi^T] = I the expectation separates into
    // sum_d (mu + mu0 - y_d)^2 + sum_d |m + sigma0 z0 - sigma z_d|^2.
    let grad = |x: &[f64]| {
        let mu = x[0];
        let mut g = vec![0.0; dim + 1];
        g[0] = y.iter().map(|yd| 2.0 * (mu + mu0 - yd)).sum::<f64>() + 2.0 * beta * mu;
        for k in 0..dim {
            let mk = x[k + 1];
            g[k + 1] = z.iter().map(|zd| 2.0 * (mk + sigma0 * z0[k] - sigma * zd[k])).sum::<f64>() + 2.0 * beta * mk;
        }
        g
    };
    let curvature = 2.0 * (y.len() as f64 + beta);
    let (x, _) = gradient_descent(grad, &vec![0.0; dim + 1], 0.5 / curvature, tol, 1_000_000);
    (x[0], x[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn descent_finds_quadratic_minimum() {
        let (x, _) = gradient_descent(|x| vec![2.0 * (x[0] - 3.0)], &[0.0], 0.1, 1e-12, 10_000);
        assert!((x[0] - 3.0).abs() < 1e-11);
    }

    #[test]
    fn two_stage_mdp_by_enumeration() {
        // Action 1 at stage 0 moves to state 1, which pays 1 under action 0.
        let p = vec![vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2]];
        let r = vec![vec![vec![0.0, 0.0]; 2], vec![vec![0.0, 0.2], vec![1.0, 0.0]]];
        let mdp = DenseMdp { p, r, rho: vec![1.0, 0.0] };
        assert!((mdp.brute_force_optimal_value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_line_has_unit_r2() {
        let (s, i, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
