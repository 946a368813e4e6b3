//! Hypermodels: a parameterized value `f(x, xi)` whose variation over the
//! random index `xi` carries epistemic uncertainty.
//!
//! Two concrete forms live here: the linear hypermodel `<x, mu + A xi>` and
//! the tabular hypermodel with an additive fixed prior,
//! `f(s, a, xi) = mu_sa + m_sa . xi + mu0_sa + sigma0 z0_sa . xi`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{sphere_into, ReferenceDist, RngStream};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent lanes let the compiler vectorize the reduction.
    let n = a.len().min(b.len());
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f64>() + tail
}

/// `f(x, xi) = <x, mu + A xi>` with `A` stored row-major as `d x M`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHypermodel {
    a: Vec<f64>,
    mu: Vec<f64>,
    index_dim: usize,
}

impl LinearHypermodel {
    pub fn new(a: Vec<f64>, mu: Vec<f64>, index_dim: usize) -> Result<Self> {
        if index_dim == 0 {
            return Err(Error::InvalidDimension("index dimension must be at least 1".into()));
        }
        check_dim(mu.len() * index_dim, a.len())?;
        Ok(Self { a, mu, index_dim })
    }

    /// Ensemble special case: column `i` of `A` is the `i`-th point estimate and `mu = 0`.
    pub fn ensemble(members: &[Vec<f64>]) -> Result<Self> {
        let m = members.len();
        let d = members.first().map(Vec::len).unwrap_or(0);
        let mut a = vec![0.0; d * m];
        for (j, member) in members.iter().enumerate() {
            check_dim(d, member.len())?;
            for (i, &v) in member.iter().enumerate() {
                a[i * m + j] = v;
            }
        }
        Self::new(a, vec![0.0; d], m)
    }

    pub fn input_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn index_dim(&self) -> usize {
        self.index_dim
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> Result<f64> {
        check_dim(self.mu.len(), x.len())?;
        check_dim(self.index_dim, xi.len())?;
        Ok(x.iter()
            .enumerate()
            .map(|(i, &xi_coord)| {
                let row = &self.a[i * self.index_dim..(i + 1) * self.index_dim];
                xi_coord * (self.mu[i] + dot(row, xi))
            })
            .sum())
    }
}

pub fn eval_linear(h: &LinearHypermodel, x: &[f64], xi: &[f64]) -> Result<f64> {
    h.eval(x, xi)
}

/// Tabular hypermodel over `num_states x num_actions` pairs.
///
/// `mu` and `m` are learnable; `mu0`, `z0` and `sigma0` form the fixed prior.
/// Rows are addressed by pair id `s * num_actions + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularHypermodel {
    num_states: usize,
    num_actions: usize,
    index_dim: usize,
    mu: Vec<f64>,
    m: Vec<f64>,
    /// Cached `m + sigma0 z0`, kept in sync with `m`.
    effective: Vec<f64>,
    mu0: Vec<f64>,
    z0: Vec<f64>,
    sigma0: f64,
}

impl TabularHypermodel {
    /// Fresh hypermodel: learnable part zero, one `z0` row per pair drawn
    /// uniformly from the unit sphere.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        index_dim: usize,
        mu0: Vec<f64>,
        sigma0: f64,
        stream: &mut RngStream,
    ) -> Result<Self> {
        if index_dim == 0 {
            return Err(Error::InvalidDimension("index dimension must be at least 1".into()));
        }
        let pairs = num_states * num_actions;
        let mut z0 = vec![0.0; pairs * index_dim];
        for row in z0.chunks_mut(index_dim) {
            sphere_into(stream, row);
        }
        Self::from_parts(num_states, num_actions, index_dim, vec![0.0; pairs], vec![0.0; pairs * index_dim], mu0, z0, sigma0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        num_states: usize,
        num_actions: usize,
        index_dim: usize,
        mu: Vec<f64>,
        m: Vec<f64>,
        mu0: Vec<f64>,
        z0: Vec<f64>,
        sigma0: f64,
    ) -> Result<Self> {
        if index_dim == 0 {
            return Err(Error::InvalidDimension("index dimension must be at least 1".into()));
        }
        if !(sigma0 >= 0.0) {
            return Err(Error::InvalidConfig(format!("prior scale must be non-negative, got {sigma0}")));
        }
        let pairs = num_states * num_actions;
        check_dim(pairs, mu.len())?;
        check_dim(pairs, mu0.len())?;
        check_dim(pairs * index_dim, m.len())?;
        check_dim(pairs * index_dim, z0.len())?;
        let effective = m.iter().zip(&z0).map(|(m, z)| m + sigma0 * z).collect();
        Ok(Self { num_states, num_actions, index_dim, mu, m, effective, mu0, z0, sigma0 })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn index_dim(&self) -> usize {
        self.index_dim
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    fn check_pair(&self, s: usize, a: usize) -> Result<usize> {
        if s >= self.num_states {
            return Err(Error::DimensionMismatch { expected: self.num_states, got: s });
        }
        if a >= self.num_actions {
            return Err(Error::InvalidAction { action: a, num_actions: self.num_actions });
        }
        Ok(self.pair(s, a))
    }

    fn row(table: &[f64], sa: usize, dim: usize) -> &[f64] {
        &table[sa * dim..(sa + 1) * dim]
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn m_row(&self, sa: usize) -> &[f64] {
        Self::row(&self.m, sa, self.index_dim)
    }

    pub fn z0_row(&self, sa: usize) -> &[f64] {
        Self::row(&self.z0, sa, self.index_dim)
    }

    /// `m~_sa = m_sa + sigma0 z0_sa`.
    pub fn effective_row(&self, sa: usize) -> Vec<f64> {
        self.effective_slice(sa).to_vec()
    }

    pub fn effective_slice(&self, sa: usize) -> &[f64] {
        Self::row(&self.effective, sa, self.index_dim)
    }

    pub fn effective_norm_sq(&self, sa: usize) -> f64 {
        let row = self.effective_slice(sa);
        dot(row, row)
    }

    /// `m~_sa . xi`.
    pub fn effective_dot(&self, sa: usize, xi: &[f64]) -> f64 {
        dot(self.effective_slice(sa), xi)
    }

    /// Overwrite row `sa` so that `m~_sa` equals `effective`.
    pub(crate) fn set_effective_row(&mut self, sa: usize, effective: &[f64]) {
        let dim = self.index_dim;
        let range = sa * dim..(sa + 1) * dim;
        self.effective[range.clone()].copy_from_slice(effective);
        for ((m, e), z) in self.m[range.clone()].iter_mut().zip(effective).zip(&self.z0[range]) {
            *m = e - self.sigma0 * z;
        }
    }

    pub(crate) fn set_learnable(&mut self, mu: Option<&[f64]>, m: Option<&[f64]>) {
        if let Some(mu) = mu {
            self.mu.copy_from_slice(mu);
        }
        if let Some(m) = m {
            self.m.copy_from_slice(m);
            for ((e, m), z) in self.effective.iter_mut().zip(&self.m).zip(&self.z0) {
                *e = m + self.sigma0 * z;
            }
        }
    }

    pub fn learnable_part(&self, s: usize, a: usize, xi: &[f64]) -> Result<f64> {
        check_dim(self.index_dim, xi.len())?;
        let sa = self.check_pair(s, a)?;
        Ok(self.mu[sa] + dot(self.m_row(sa), xi))
    }

    pub fn prior_part(&self, s: usize, a: usize, xi: &[f64]) -> Result<f64> {
        check_dim(self.index_dim, xi.len())?;
        let sa = self.check_pair(s, a)?;
        Ok(self.mu0[sa] + self.sigma0 * dot(self.z0_row(sa), xi))
    }

    pub fn eval(&self, s: usize, a: usize, xi: &[f64]) -> Result<f64> {
        check_dim(self.index_dim, xi.len())?;
        let sa = self.check_pair(s, a)?;
        Ok(self.mu[sa] + self.mu0[sa] + self.effective_dot(sa, xi))
    }
}

pub fn eval_tabular(h: &TabularHypermodel, s: usize, a: usize, xi: &[f64]) -> Result<f64> {
    h.eval(s, a, xi)
}

/// How the per-episode index mapping `xi_k(.)` assigns indices to states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum IndexScheme {
    /// One index per episode shared by every state.
    StateIndependent,
    /// An independent index per state, drawn lazily and cached for the episode.
    StateDependent,
    /// `count` state-independent indices; act on the maximum over them.
    Optimistic { count: usize },
}

/// Per-episode map from states to index vectors.
#[derive(Clone, Debug)]
pub struct IndexMapping {
    scheme: IndexScheme,
    dist: ReferenceDist,
    stream: RngStream,
    shared: Vec<Vec<f64>>,
    cache: HashMap<usize, Vec<f64>>,
}

pub fn make_index_mapping(scheme: IndexScheme, dist: ReferenceDist, stream: RngStream) -> Result<IndexMapping> {
    IndexMapping::new(scheme, dist, stream)
}

impl IndexMapping {
    pub fn new(scheme: IndexScheme, dist: ReferenceDist, stream: RngStream) -> Result<Self> {
        let shared = match scheme {
            IndexScheme::StateIndependent => vec![dist.sample(&mut stream.child(0))],
            IndexScheme::StateDependent => Vec::new(),
            IndexScheme::Optimistic { count: 0 } => {
                return Err(Error::InvalidConfig("optimistic index sampling needs at least one index".into()))
            }
            IndexScheme::Optimistic { count } => {
                (0..count as u64).map(|n| dist.sample(&mut stream.child(n))).collect()
            }
        };
        Ok(Self { scheme, dist, stream, shared, cache: HashMap::new() })
    }

    /// The all-zero mapping; evaluates the mean of the hypermodel.
    pub fn zero(dist: ReferenceDist) -> Self {
        Self {
            scheme: IndexScheme::StateIndependent,
            dist,
            stream: RngStream::new(0),
            shared: vec![vec![0.0; dist.dim]],
            cache: HashMap::new(),
        }
    }

    pub fn scheme(&self) -> IndexScheme {
        self.scheme
    }

    pub fn dist(&self) -> ReferenceDist {
        self.dist
    }

    pub fn dim(&self) -> usize {
        self.dist.dim
    }

    /// Index for state `s`. Optimistic mappings return their first index;
    /// use [`IndexMapping::split`] to get all of them.
    pub fn index(&mut self, s: usize) -> &[f64] {
        match self.scheme {
            IndexScheme::StateDependent => {
                let dist = self.dist;
                let stream = &self.stream;
                self.cache
                    .entry(s)
                    .or_insert_with(|| dist.sample(&mut stream.child(s as u64)))
            }
            _ => &self.shared[0],
        }
    }

    /// One single-index mapping per optimistic index; other schemes return themselves.
    pub fn split(&self) -> Vec<IndexMapping> {
        match self.scheme {
            IndexScheme::Optimistic { .. } => self
                .shared
                .iter()
                .map(|xi| IndexMapping {
                    scheme: IndexScheme::StateIndependent,
                    dist: self.dist,
                    stream: self.stream.clone(),
                    shared: vec![xi.clone()],
                    cache: HashMap::new(),
                })
                .collect(),
            _ => vec![self.clone()],
        }
    }
}
