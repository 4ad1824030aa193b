//! Random observation subsets, inverse-probability weighted stochastic
//! gradients and the stacked residual system used by the Kalman-type update.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{usage, Result};
use crate::integrate::{visit_sensitivity, TimeGrid};
use crate::observe::{data_grid, DerivativeMode, GradientEvaluation, Problem, Term};
use crate::rng::StreamRng;
use crate::scalar::{c, Real};

/// Sorted, distinct observation indices (zero-based) with their inclusion
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub indices: Vec<usize>,
    pub pi: Vec<f64>,
}

impl SampleSet {
    pub fn new(indices: Vec<usize>, pi: Vec<f64>) -> Result<Self> {
        if indices.len() != pi.len() {
            return Err(usage("sample indices and probabilities differ in length"));
        }
        if indices.is_empty() {
            return Err(usage("sample set is empty"));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(usage("sample indices must be strictly increasing"));
        }
        if pi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(usage("inclusion probabilities must lie in (0, 1]"));
        }
        Ok(SampleSet { indices, pi })
    }

    /// Every index with probability one.
    pub fn full(n: usize) -> Self {
        SampleSet { indices: (0..n).collect(), pi: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_kappa(n: usize, kappa: usize) -> Result<()> {
    if kappa == 0 || kappa > n {
        return Err(usage(format!("sampling interval {kappa} must lie in 1..={n}")));
    }
    Ok(())
}

/// Indices `o, o + kappa, ...` from the given zero-based offset `o < kappa`.
pub fn systematic_with_offset(n: usize, kappa: usize, offset: usize) -> Result<SampleSet> {
    check_kappa(n, kappa)?;
    if offset >= kappa {
        return Err(usage("systematic offset must be below the interval"));
    }
    let indices: Vec<usize> = (offset..n).step_by(kappa).collect();
    let pi = vec![1.0 / kappa as f64; indices.len()];
    Ok(SampleSet { indices, pi })
}

/// Every `kappa`-th index from a uniform random offset; `pi = 1/kappa`.
pub fn draw_systematic(n: usize, kappa: usize, rng: &mut StreamRng) -> Result<SampleSet> {
    check_kappa(n, kappa)?;
    systematic_with_offset(n, kappa, rng.random_range(0..kappa))
}

/// `m` indices uniformly without replacement; `pi = m/N`.
pub fn draw_simple(n: usize, m: usize, rng: &mut StreamRng) -> Result<SampleSet> {
    if m == 0 || m > n {
        return Err(usage(format!("sample size {m} must lie in 1..={n}")));
    }
    let mut indices = rand::seq::index::sample(rng, n, m).into_vec();
    indices.sort_unstable();
    Ok(SampleSet { indices, pi: vec![m as f64 / n as f64; m] })
}

/// One uniform pick from each window of `kappa` consecutive indices; the
/// short final window has `pi = 1/len`.
pub fn draw_stratified(n: usize, kappa: usize, rng: &mut StreamRng) -> Result<SampleSet> {
    check_kappa(n, kappa)?;
    let (mut indices, mut pi) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(kappa) {
        let len = kappa.min(n - start);
        indices.push(start + rng.random_range(0..len));
        pi.push(1.0 / len as f64);
    }
    Ok(SampleSet { indices, pi })
}

/// How each iteration of a stochastic solver chooses its observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Full,
    Systematic {
        kappa: usize,
    },
    Simple {
        m: usize,
    },
    Stratified {
        kappa: usize,
    },
    /// Deterministic pass through the systematic batches in offset order,
    /// `pi = 1`. One sweep of `kappa` iterations touches every index once.
    Sweep {
        kappa: usize,
    },
}

impl Sampler {
    pub fn draw(&self, n: usize, iteration: usize, rng: &mut StreamRng) -> Result<SampleSet> {
        match *self {
            Sampler::Full => Ok(SampleSet::full(n)),
            Sampler::Systematic { kappa } => draw_systematic(n, kappa, rng),
            Sampler::Simple { m } => draw_simple(n, m, rng),
            Sampler::Stratified { kappa } => draw_stratified(n, kappa, rng),
            Sampler::Sweep { kappa } => {
                let mut s = systematic_with_offset(n, kappa, iteration % kappa)?;
                s.pi.fill(1.0);
                Ok(s)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Full => "full",
            Sampler::Systematic { .. } => "systematic",
            Sampler::Simple { .. } => "simple",
            Sampler::Stratified { .. } => "stratified",
            Sampler::Sweep { .. } => "sweep",
        }
    }

    /// Sampler of the given name keeping a fraction `potp` of `n` indices.
    pub fn from_name(name: &str, potp: f64, n: usize) -> Result<Self> {
        let kappa = crate::modify::kappa_from_potp(potp)?;
        Ok(match name {
            "full" => Sampler::Full,
            "systematic" => Sampler::Systematic { kappa },
            "simple" => Sampler::Simple { m: ((potp * n as f64).round() as usize).max(1) },
            "stratified" => Sampler::Stratified { kappa },
            "sweep" => Sampler::Sweep { kappa },
            other => return Err(usage(format!("unknown sampler '{other}'"))),
        })
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which grid a sampled evaluation integrates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GridPolicy {
    /// Grid through the sampled times only, with step at most `h`. This is
    /// the cheap path: a systematic sample with spacing `h` costs one step per
    /// sampled observation.
    #[default]
    Sampled,
    /// The problem's full-data grid.
    Shared,
}

fn sample_terms<T: Real>(
    problem: &Problem<T>,
    sample: &SampleSet,
    policy: GridPolicy,
) -> Result<(Arc<TimeGrid<T>>, Vec<Term<T>>)> {
    let n = problem.data.len();
    if sample.is_empty() {
        return Err(usage("sample set is empty"));
    }
    if let Some(&last) = sample.indices.last() {
        if last >= n {
            return Err(usage(format!("sample index {last} out of range for {n} observations")));
        }
    }
    let weight = |k: usize| problem.data.loss_weight(sample.indices[k]) / c::<T>(sample.pi[k]);
    match policy {
        GridPolicy::Shared => {
            let grid = problem.grid.clone();
            let terms = (0..sample.len())
                .map(|k| Term { obs: sample.indices[k], node: grid.obs_index[sample.indices[k]], weight: weight(k) })
                .collect();
            Ok((grid, terms))
        }
        GridPolicy::Sampled => {
            let times: Vec<T> = sample.indices.iter().map(|&i| problem.data.times[i]).collect();
            let grid = Arc::new(data_grid(&problem.model, problem.h, &times)?);
            let terms = (0..sample.len())
                .map(|k| Term { obs: sample.indices[k], node: grid.obs_index[k], weight: weight(k) })
                .collect();
            Ok((grid, terms))
        }
    }
}

/// `sum_{s in S} (1/pi_s) x_theta(t_s)' l_x(y_s, x(t_s))`.
pub fn stochastic_gradient<T: Real>(
    problem: &Problem<T>,
    theta: &DVector<T>,
    sample: &SampleSet,
    policy: GridPolicy,
    mode: DerivativeMode,
) -> Result<GradientEvaluation<T>> {
    let (grid, terms) = sample_terms(problem, sample, policy)?;
    problem.evaluate_terms(&grid, theta, &terms, mode)
}

/// Stacked residuals `r`, Jacobian `D` and block-diagonal weight
/// `W^{-1} = diag((w_s/pi_s) V^{-1})` over a sample, in increasing index
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSystem<T: Real> {
    pub r: DVector<T>,
    pub d: DMatrix<T>,
    /// Diagonal blocks of `W^{-1}`, one per sampled observation.
    pub w_inv: Vec<DMatrix<T>>,
    /// Weighted loss over the sample.
    pub value: T,
    pub rk_steps: usize,
}

impl<T: Real> ResidualSystem<T> {
    /// `W^{-1} m`, applied blockwise to the rows of `m`.
    pub fn weigh(&self, m: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        let mut row = 0;
        for b in &self.w_inv {
            let n = b.nrows();
            out.rows_mut(row, n).copy_from(&(b * m.rows(row, n)));
            row += n;
        }
        out
    }

    /// `D' W^{-1} r`, the negative of the sample's stochastic gradient.
    pub fn score(&self) -> DVector<T> {
        let r = DMatrix::from_column_slice(self.r.len(), 1, self.r.as_slice());
        DVector::from_column_slice((self.d.tr_mul(&self.weigh(&r))).as_slice())
    }

    /// `D' W^{-1} D`.
    pub fn information(&self) -> DMatrix<T> {
        self.d.tr_mul(&self.weigh(&self.d))
    }

    /// `W^{-1}` as a dense matrix.
    pub fn w_inv_dense(&self) -> DMatrix<T> {
        let rows = self.rows();
        let mut out = DMatrix::zeros(rows, rows);
        let mut at = 0;
        for b in &self.w_inv {
            let n = b.nrows();
            out.view_mut((at, at), (n, n)).copy_from(b);
            at += n;
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.r.len()
    }
}

pub fn residual_system<T: Real>(
    problem: &Problem<T>,
    theta: &DVector<T>,
    sample: &SampleSet,
    policy: GridPolicy,
) -> Result<ResidualSystem<T>> {
    let (grid, terms) = sample_terms(problem, sample, policy)?;
    let z0 = problem.embed(theta)?;
    let obs = &problem.data;
    let h = obs.model.h();
    let n = obs.obs_dim();
    let d = problem.model.state_dim();
    let off = problem.offset();
    let cols = problem.dim();
    let rows = n * terms.len();

    let mut by_node: Vec<Vec<usize>> = vec![Vec::new(); grid.nodes.len()];
    for (k, term) in terms.iter().enumerate() {
        by_node[term.node].push(k);
    }
    let mut r = DVector::zeros(rows);
    let mut dm = DMatrix::zeros(rows, cols);
    let traj = visit_sensitivity(&problem.system, z0.as_slice(), &grid, |node, z, s| {
        for &k in &by_node[node] {
            let y = &obs.values[terms[k].obs];
            let hx = h * DVector::from_column_slice(&z[..d]);
            r.rows_mut(k * n, n).copy_from(&(y - hx));
            dm.view_mut((k * n, 0), (n, cols)).copy_from(&(h * s.view((0, off), (d, cols))));
        }
    })?;
    let mut w_inv = Vec::with_capacity(terms.len());
    let mut value = T::zero();
    for (k, term) in terms.iter().enumerate() {
        let block = obs.model.v_inv() * term.weight;
        let rk = r.rows(k * n, n);
        value += rk.dot(&(&block * rk)) * c(0.5);
        w_inv.push(block);
    }
    Ok(ResidualSystem { r, d: dm, w_inv, value, rk_steps: traj.steps() })
}
