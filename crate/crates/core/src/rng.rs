//! Seeded, path-keyed random streams and the index/perturbation distributions.
//!
//! A stream is identified by a 64-bit seed plus a path of integer tags
//! (run, episode, step, ...). Child streams are derived from the identity
//! alone, never from the parent's position, so the same `(seed, path)` always
//! yields the same sequence no matter how much the parent has been consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn path_key(seed: u64, path: &[u64]) -> u64 {
    let mut key = mix64(seed ^ 0x5851_F42D_4C95_7F2D);
    for (depth, &tag) in path.iter().enumerate() {
        key = mix64(key ^ mix64(tag.wrapping_add(GOLDEN.wrapping_mul(depth as u64 + 1))));
    }
    key
}

/// Independent random stream keyed by `(seed, path)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, Vec::new())
    }

    pub fn with_path(seed: u64, path: Vec<u64>) -> Self {
        let mut key = path_key(seed, &path);
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_mut(8) {
            key = key.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix64(key).to_le_bytes());
        }
        Self {
            seed,
            path,
            inner: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Sub-stream at `path ++ [tag]`.
    pub fn child(&self, tag: u64) -> Self {
        let mut path = self.path.clone();
        path.push(tag);
        Self::with_path(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = StandardNormal.sample(&mut self.inner);
        }
    }

    /// Gamma(shape, 1) draw.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let dist = Gamma::new(shape, 1.0)
            .map_err(|e| Error::InvalidConfig(format!("gamma shape {shape}: {e}")))?;
        Ok(dist.sample(&mut self.inner))
    }

    /// Dirichlet draw via normalized Gamma variates. A draw whose Gammas all
    /// underflow to zero is discarded and redrawn.
    pub fn dirichlet(&mut self, alpha: &[f64]) -> Result<Vec<f64>> {
        if alpha.is_empty() {
            return Err(Error::InvalidDimension("empty Dirichlet parameter".into()));
        }
        if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "Dirichlet concentration must be positive, got {bad}"
            )));
        }
        let gammas: Vec<Gamma<f64>> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("validated shape"))
            .collect();
        loop {
            let mut draw: Vec<f64> = gammas.iter().map(|g| g.sample(&mut self.inner)).collect();
            let total: f64 = draw.iter().sum();
            if total > 0.0 && total.is_finite() {
                draw.iter_mut().for_each(|p| *p /= total);
                return Ok(draw);
            }
        }
    }

    /// Sample an index from a discrete distribution given by `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding: fall back to the last index with positive mass
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn check_positive(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(Error::InvalidDimension("index dimension must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// `M` independent standard normals.
pub fn sample_gaussian(stream: &mut RngStream, dim: usize) -> Result<Vec<f64>> {
    check_positive(dim)?;
    let mut out = vec![0.0; dim];
    stream.fill_normal(&mut out);
    Ok(out)
}

/// Uniform draw on the unit sphere of `R^dim`.
pub fn sample_sphere(stream: &mut RngStream, dim: usize) -> Result<Vec<f64>> {
    check_positive(dim)?;
    let mut out = vec![0.0; dim];
    sphere_into(stream, &mut out);
    Ok(out)
}

pub(crate) fn sphere_into(stream: &mut RngStream, out: &mut [f64]) {
    loop {
        stream.fill_normal(out);
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            out.iter_mut().for_each(|x| *x /= norm);
            return;
        }
    }
}

/// One-hot `e_i` with `i` uniform on `0..dim`.
pub fn sample_ensemble_index(stream: &mut RngStream, dim: usize) -> Result<Vec<f64>> {
    check_positive(dim)?;
    let mut out = vec![0.0; dim];
    out[stream.below(dim)] = 1.0;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistKind {
    Gaussian,
    UnitSphere,
    EnsembleUniform,
}

/// Reference distribution of the index `xi` (or of the perturbation `z`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDist {
    pub kind: DistKind,
    pub dim: usize,
}

impl ReferenceDist {
    pub fn new(kind: DistKind, dim: usize) -> Result<Self> {
        check_positive(dim)?;
        Ok(Self { kind, dim })
    }

    pub fn gaussian(dim: usize) -> Result<Self> {
        Self::new(DistKind::Gaussian, dim)
    }

    pub fn sphere(dim: usize) -> Result<Self> {
        Self::new(DistKind::UnitSphere, dim)
    }

    pub fn sample(&self, stream: &mut RngStream) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(stream, &mut out);
        out
    }

    pub fn sample_into(&self, stream: &mut RngStream, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        match self.kind {
            DistKind::Gaussian => stream.fill_normal(out),
            DistKind::UnitSphere => sphere_into(stream, out),
            DistKind::EnsembleUniform => {
                out.iter_mut().for_each(|x| *x = 0.0);
                out[stream.below(self.dim)] = 1.0;
            }
        }
    }

    /// `E[xi xi^T] = second_moment * I`.
    pub fn second_moment(&self) -> f64 {
        match self.kind {
            DistKind::Gaussian => 1.0,
            DistKind::UnitSphere | DistKind::EnsembleUniform => 1.0 / self.dim as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn same_path_same_sequence() {
        let a = RngStream::with_path(7, vec![1, 2, 3]);
        let b = RngStream::new(7).child(1).child(2).child(3);
        assert_eq!(
            sample_gaussian(&mut a.clone(), 5).unwrap(),
            sample_gaussian(&mut b.clone(), 5).unwrap()
        );
    }

    #[test]
    fn child_ignores_parent_position() {
        let mut parent = RngStream::new(11);
        let before = parent.child(4);
        parent.uniform();
        parent.uniform();
        let after = parent.child(4);
        assert_eq!(
            sample_sphere(&mut before.clone(), 3).unwrap(),
            sample_sphere(&mut after.clone(), 3).unwrap()
        );
    }

    #[test]
    fn gaussian_determinism_and_domain() {
        let s = RngStream::new(3).child(9);
        let x = sample_gaussian(&mut s.clone(), 3).unwrap();
        let y = sample_gaussian(&mut s.clone(), 3).unwrap();
        assert_eq!(x, y);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RngStream::new(2024);
        let xs: Vec<f64> = (0..10_000).map(|_| sample_gaussian(&mut s, 1).unwrap()[0]).collect();
        let (mean, var) = mean_var(&xs);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(var > 0.94 && var < 1.06, "var {var}");
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut s = RngStream::new(0);
        assert!(matches!(sample_gaussian(&mut s, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(sample_sphere(&mut s, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(sample_ensemble_index(&mut s, 0), Err(Error::InvalidDimension(_))));
        assert!(ReferenceDist::gaussian(0).is_err());
    }

    #[test]
    fn sphere_in_one_dimension_is_a_sign() {
        let mut s = RngStream::new(5);
        for _ in 0..100 {
            let z = sample_sphere(&mut s, 1).unwrap();
            assert!(z[0] == 1.0 || z[0] == -1.0);
        }
    }

    #[test]
    fn sphere_norms_are_unit() {
        let mut s = RngStream::new(6);
        for &m in &[1usize, 2, 4, 8, 64] {
            for _ in 0..500 {
                let z = sample_sphere(&mut s, m).unwrap();
                let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() <= 8.0 * f64::EPSILON, "m={m} norm={norm}");
            }
        }
    }

    #[test]
    fn sphere_covariance_is_isotropic() {
        let mut s = RngStream::new(77);
        let m = 4;
        let n = 100_000;
        let mut cov = [[0.0f64; 4]; 4];
        for _ in 0..n {
            let z = sample_sphere(&mut s, m).unwrap();
            for i in 0..m {
                for j in 0..m {
                    cov[i][j] += z[i] * z[j];
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                let c = cov[i][j] / n as f64;
                let target = if i == j { 0.25 } else { 0.0 };
                assert!((c - target).abs() < 0.01, "cov[{i}][{j}] = {c}");
            }
        }
    }

    #[test]
    fn ensemble_index_is_one_hot_and_uniform() {
        let mut s = RngStream::new(8);
        assert_eq!(sample_ensemble_index(&mut s, 1).unwrap(), vec![1.0]);
        let mut freq = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let e = sample_ensemble_index(&mut s, 4).unwrap();
            assert_eq!(e.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(e.iter().filter(|&&x| x == 0.0).count(), 3);
            freq[e.iter().position(|&x| x == 1.0).unwrap()] += 1;
        }
        for f in freq {
            let p = f as f64 / n as f64;
            assert!(p > 0.24 && p < 0.26, "frequency {p}");
        }
    }

    #[test]
    fn distinct_paths_are_uncorrelated() {
        let root = RngStream::new(99);
        let n = 10_000u64;
        let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let x = root.child(i).child(0).standard_normal();
            let y = root.child(i).child(1).standard_normal();
            sx += x;
            sy += y;
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        let nf = n as f64;
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let corr = cov / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
        assert!(corr.abs() < 0.02, "corr {corr}");
    }

    #[test]
    fn dirichlet_rows_are_distributions() {
        let mut s = RngStream::new(1);
        for _ in 0..200 {
            let p = s.dirichlet(&[0.6, 0.6, 0.6, 0.6, 0.6]).unwrap();
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() <= 8.0 * f64::EPSILON);
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        assert!(s.dirichlet(&[1.0, 0.0]).is_err());
    }
}
