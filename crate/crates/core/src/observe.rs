//! Observation model, quasi-likelihood loss, synthetic data and the full-data
//! objective with its gradient.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{augment, AugmentedSystem, ModelSpec};
use crate::error::{check_dim, usage, Result};
use crate::integrate::{
    build_grid, integrate, integrate_adjoint, integrate_visit, visit_sensitivity, OdeSystem, TimeGrid,
};
use crate::rng::{standard_normal, stream, Stream};
use crate::scalar::{c, Real};

/// Observation mean `mu(x)`, its Jacobian and the inverse noise covariance.
///
/// The loss built from these pieces is the Gaussian negative log-likelihood
/// (up to a constant) whose score is `-mu_x' V^{-1} (y - mu(x))`.
pub trait QuasiLikelihood<T: Real> {
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn mean(&self, x: &[T]) -> DVector<T>;
    /// `n x d` Jacobian of the mean.
    fn mean_jacobian(&self, x: &[T]) -> DMatrix<T>;
    /// `V(x)^{-1}`.
    fn precision(&self, x: &[T]) -> DMatrix<T>;

    /// `1/2 (y - mu(x))' V^{-1} (y - mu(x))`.
    fn loss(&self, y: &DVector<T>, x: &[T]) -> T {
        let r = y - self.mean(x);
        let pr = self.precision(x) * &r;
        r.dot(&pr) * c(0.5)
    }
}

/// `y = H x + e`, `e ~ N(0, V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussian<T: Real> {
    h: DMatrix<T>,
    v: DMatrix<T>,
    v_inv: DMatrix<T>,
    v_chol: DMatrix<T>,
}

impl<T: Real> LinearGaussian<T> {
    pub fn new(h: DMatrix<T>, v: DMatrix<T>) -> Result<Self> {
        let n = h.nrows();
        if n == 0 || h.ncols() == 0 {
            return Err(usage("observation operator must be non-empty"));
        }
        check_dim("noise covariance rows", n, v.nrows())?;
        check_dim("noise covariance columns", n, v.ncols())?;
        if (0..n).any(|i| h.row(i).iter().all(|&e| e == T::zero())) {
            return Err(usage("observation operator has an all-zero row"));
        }
        let asym = (&v - v.transpose()).abs().max();
        if asym > c::<T>(1e-12) * v.abs().max() {
            return Err(usage("noise covariance is not symmetric"));
        }
        let chol = v.clone().cholesky().ok_or_else(|| usage("noise covariance is not positive definite"))?;
        let v_inv = chol.inverse();
        let v_chol = chol.l();
        Ok(LinearGaussian { h, v, v_inv, v_chol })
    }

    /// `H = I_d`, `V = sigma^2 I_d`.
    pub fn identity(d: usize, sigma: T) -> Result<Self> {
        Self::new(DMatrix::identity(d, d), DMatrix::from_diagonal_element(d, d, sigma * sigma))
    }

    pub fn h(&self) -> &DMatrix<T> {
        &self.h
    }

    pub fn v(&self) -> &DMatrix<T> {
        &self.v
    }

    pub fn v_inv(&self) -> &DMatrix<T> {
        &self.v_inv
    }

    /// Draws `L xi` with `V = L L'`.
    pub fn sample_noise<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        let xi = DVector::from_fn(self.h.nrows(), |_, _| c::<T>(standard_normal(rng)));
        &self.v_chol * xi
    }
}

impl<T: Real> QuasiLikelihood<T> for LinearGaussian<T> {
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
    fn state_dim(&self) -> usize {
        self.h.ncols()
    }
    fn mean(&self, x: &[T]) -> DVector<T> {
        &self.h * DVector::from_column_slice(x)
    }
    fn mean_jacobian(&self, _x: &[T]) -> DMatrix<T> {
        self.h.clone()
    }
    fn precision(&self, _x: &[T]) -> DMatrix<T> {
        self.v_inv.clone()
    }

    // hot path of every objective evaluation, so no allocation for small n
    fn loss(&self, y: &DVector<T>, x: &[T]) -> T {
        const MAX: usize = 8;
        let n = self.h.nrows();
        if n > MAX {
            let r = y - self.mean(x);
            return r.dot(&(&self.v_inv * &r)) * c(0.5);
        }
        let mut r = [T::zero(); MAX];
        for (i, ri) in r.iter_mut().enumerate().take(n) {
            let mut hx = T::zero();
            for (j, &xj) in x.iter().enumerate() {
                hx += self.h[(i, j)] * xj;
            }
            *ri = y[i] - hx;
        }
        let mut total = T::zero();
        for i in 0..n {
            let mut row = T::zero();
            for k in 0..n {
                row += self.v_inv[(i, k)] * r[k];
            }
            total += r[i] * row;
        }
        total * c(0.5)
    }
}

/// `1/2 (y - mu(x))' V^{-1} (y - mu(x))`.
pub fn loss<T: Real, M: QuasiLikelihood<T> + ?Sized>(model: &M, y: &DVector<T>, x: &[T]) -> T {
    model.loss(y, x)
}

/// `-mu_x' V^{-1} (y - mu(x))`, the derivative of [`loss`] in `x`.
pub fn loss_grad<T: Real, M: QuasiLikelihood<T> + ?Sized>(model: &M, y: &DVector<T>, x: &[T]) -> DVector<T> {
    let r = y - model.mean(x);
    -(model.mean_jacobian(x).transpose() * (model.precision(x) * r))
}

// ---------------------------------------------------------------------------
// Observation sets

/// Timestamped observations sharing one observation model.
///
/// Times are non-decreasing; accumulation schemes can place several
/// observations at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet<T: Real> {
    pub times: Vec<T>,
    pub values: Vec<DVector<T>>,
    pub weights: Vec<T>,
    pub model: LinearGaussian<T>,
    /// Multiply each loss term by its weight.
    pub apply_weights: bool,
}

impl<T: Real> ObservationSet<T> {
    pub fn new(times: Vec<T>, values: Vec<DVector<T>>, model: LinearGaussian<T>) -> Result<Self> {
        let weights = vec![T::one(); times.len()];
        Self::with_weights(times, values, weights, model)
    }

    pub fn with_weights(
        times: Vec<T>,
        values: Vec<DVector<T>>,
        weights: Vec<T>,
        model: LinearGaussian<T>,
    ) -> Result<Self> {
        check_dim("observation values", times.len(), values.len())?;
        check_dim("observation weights", times.len(), weights.len())?;
        if times.is_empty() {
            return Err(usage("observation set is empty"));
        }
        if times.windows(2).any(|w| !(w[1] >= w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(usage("observation times must be finite and non-decreasing"));
        }
        for v in &values {
            check_dim("observation vector", model.obs_dim(), v.len())?;
            if v.iter().any(|e| !e.is_finite()) {
                return Err(usage("observation values must be finite"));
            }
        }
        if weights.iter().any(|w| !(*w > T::zero())) {
            return Err(usage("observation weights must be positive"));
        }
        Ok(ObservationSet { times, values, weights, model, apply_weights: false })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.model.obs_dim()
    }

    /// Weight applied to the loss of observation `i`.
    pub fn loss_weight(&self, i: usize) -> T {
        if self.apply_weights {
            self.weights[i]
        } else {
            T::one()
        }
    }

    /// Observations at the given (sorted) indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self::with_weights(
            indices.iter().map(|&i| self.times[i]).collect(),
            indices.iter().map(|&i| self.values[i].clone()).collect(),
            indices.iter().map(|&i| self.weights[i]).collect(),
            self.model.clone(),
        )?;
        out.apply_weights = self.apply_weights;
        Ok(out)
    }

    pub fn distinct_times(&self) -> usize {
        1 + self.times.windows(2).filter(|w| w[1] != w[0]).count()
    }
}

/// Observation times `k * period`, `k = 1, 2, ...` inside `t_span`.
pub fn observation_times<T: Real>(t_span: (T, T), period: T) -> Result<Vec<T>> {
    if !(period > T::zero()) {
        return Err(usage("observation period must be positive"));
    }
    let (t0, t_end) = t_span;
    let count = ((t_end - t0) / period + c(1e-9)).floor();
    let count = count.to_usize().unwrap_or(0);
    Ok((1..=count).map(|k| t0 + period * c::<T>(k as f64)).collect())
}

fn simulate_with<T: Real>(
    model: &ModelSpec<T>,
    z_true: &DVector<T>,
    obs_model: LinearGaussian<T>,
    obs_period: T,
    noise_seed: Option<u64>,
) -> Result<ObservationSet<T>> {
    let sys = augment(model);
    check_dim("true augmented state", sys.dim(), z_true.len())?;
    check_dim("observation operator columns", model.state_dim(), obs_model.state_dim())?;
    let times = observation_times(model.t_span, obs_period)?;
    if times.is_empty() {
        return Err(usage("observation period longer than the time interval"));
    }
    let grid = Arc::new(build_grid(model.t_span, obs_period, &times)?);
    let traj = integrate(&sys, z_true.as_slice(), &grid)?;
    let mut rng = noise_seed.map(|s| stream(s, Stream::ObservationNoise));
    let d = model.state_dim();
    let values = grid
        .obs_index
        .iter()
        .map(|&node| {
            let mean = obs_model.mean(&traj.state(node)[..d]);
            match rng.as_mut() {
                Some(r) => mean + obs_model.sample_noise(r),
                None => mean,
            }
        })
        .collect();
    ObservationSet::new(times, values, obs_model)
}

/// Observations `y_i = H x(t_i) + e_i` at every multiple of `obs_period`,
/// with noise from the seeded observation-noise stream.
pub fn simulate_observations<T: Real>(
    model: &ModelSpec<T>,
    z_true: &DVector<T>,
    obs_model: LinearGaussian<T>,
    obs_period: T,
    seed: u64,
) -> Result<ObservationSet<T>> {
    simulate_with(model, z_true, obs_model, obs_period, Some(seed))
}

/// [`simulate_observations`] without noise.
pub fn simulate_noiseless<T: Real>(
    model: &ModelSpec<T>,
    z_true: &DVector<T>,
    obs_model: LinearGaussian<T>,
    obs_period: T,
) -> Result<ObservationSet<T>> {
    simulate_with(model, z_true, obs_model, obs_period, None)
}

// ---------------------------------------------------------------------------
// Objective and gradient

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DerivativeMode {
    #[default]
    Forward,
    Adjoint,
}

impl std::str::FromStr for DerivativeMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(DerivativeMode::Forward),
            "adjoint" | "backward" => Ok(DerivativeMode::Adjoint),
            other => Err(usage(format!("unknown derivative mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEvaluation<T: Real> {
    pub value: T,
    pub grad: DVector<T>,
    pub n_terms: usize,
    /// Runge-Kutta steps of the forward pass.
    pub rk_steps: usize,
}

/// One loss term: observation `obs` evaluated at grid node `node`, scaled by
/// `weight`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Term<T> {
    pub obs: usize,
    pub node: usize,
    pub weight: T,
}

/// `x' = f(t, x, theta)` at a fixed `theta`.
struct FixedParameters<'a, T: Real> {
    model: &'a ModelSpec<T>,
    theta: &'a [T],
}

impl<T: Real> OdeSystem<T> for FixedParameters<'_, T> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }
    fn rhs(&self, t: T, x: &[T], dx: &mut [T]) {
        self.model.model.rhs(t, x, self.theta, dx)
    }
    fn jacobian(&self, t: T, x: &[T], jac: &mut DMatrix<T>) {
        let d = self.model.state_dim();
        self.model.model.jac_x(t, x, self.theta, &mut jac.view_mut((0, 0), (d, d)))
    }
}

/// An estimation problem: a model, data and the grid aligned to the data.
///
/// The unknown is the augmented initial condition `(x0, theta)`, or only
/// `theta` when the initial state is held at the model's baseline.
#[derive(Clone, Debug)]
pub struct Problem<T: Real> {
    pub model: ModelSpec<T>,
    pub system: AugmentedSystem<T>,
    pub data: ObservationSet<T>,
    pub grid: Arc<TimeGrid<T>>,
    /// Largest integration step.
    pub h: T,
    pub estimate_initial_state: bool,
}

impl<T: Real> Problem<T> {
    pub fn new(model: ModelSpec<T>, data: ObservationSet<T>, h: T, estimate_initial_state: bool) -> Result<Self> {
        check_dim("observation operator columns", model.state_dim(), data.model.state_dim())?;
        let grid = Arc::new(data_grid(&model, h, &data.times)?);
        Ok(Problem { system: augment(&model), model, data, grid, h, estimate_initial_state })
    }

    /// Same model and settings with different data.
    pub fn with_data(&self, data: ObservationSet<T>) -> Result<Self> {
        Problem::new(self.model.clone(), data, self.h, self.estimate_initial_state)
    }

    /// Number of unknowns.
    pub fn dim(&self) -> usize {
        if self.estimate_initial_state {
            self.model.augmented_dim()
        } else {
            self.model.param_dim()
        }
    }

    /// First augmented coordinate that is an unknown.
    pub(crate) fn offset(&self) -> usize {
        if self.estimate_initial_state {
            0
        } else {
            self.model.state_dim()
        }
    }

    /// Augmented initial condition for an unknown vector.
    pub fn embed(&self, theta: &DVector<T>) -> Result<DVector<T>> {
        check_dim("parameter", self.dim(), theta.len())?;
        if self.estimate_initial_state {
            Ok(theta.clone())
        } else {
            Ok(crate::dynamics::augmented_initial(&self.model.x0, theta))
        }
    }

    /// The reference parameter in unknown coordinates.
    pub fn reference(&self) -> DVector<T> {
        if self.estimate_initial_state {
            self.model.reference_initial()
        } else {
            self.model.theta_star.clone()
        }
    }

    pub(crate) fn all_terms(&self) -> Vec<Term<T>> {
        self.grid
            .obs_index
            .iter()
            .enumerate()
            .map(|(i, &node)| Term { obs: i, node, weight: self.data.loss_weight(i) })
            .collect()
    }

    /// `G(theta) = sum_i w_i l(y_i, x(t_i))`.
    pub fn objective(&self, theta: &DVector<T>) -> Result<T> {
        let z0 = self.embed(theta)?;
        let d = self.model.state_dim();
        // parameters are constant along the flow, so the state block alone
        // reproduces the augmented trajectory exactly
        let (x0, params) = z0.as_slice().split_at(d);
        let sys = FixedParameters { model: &self.model, theta: params };
        let obs_index = &self.grid.obs_index;
        let mut i = 0;
        let mut total = T::zero();
        integrate_visit(&sys, x0, &self.grid, |node, x| {
            while i < obs_index.len() && obs_index[i] == node {
                total += self.data.loss_weight(i) * loss(&self.data.model, &self.data.values[i], x);
                i += 1;
            }
        })?;
        Ok(total)
    }

    pub fn gradient(&self, theta: &DVector<T>, mode: DerivativeMode) -> Result<GradientEvaluation<T>> {
        let terms = self.all_terms();
        self.evaluate_terms(&self.grid, theta, &terms, mode)
    }

    /// Weighted value and gradient over `terms` integrated on `grid`.
    pub(crate) fn evaluate_terms(
        &self,
        grid: &Arc<TimeGrid<T>>,
        theta: &DVector<T>,
        terms: &[Term<T>],
        mode: DerivativeMode,
    ) -> Result<GradientEvaluation<T>> {
        if terms.is_empty() {
            return Err(usage("no loss terms to evaluate"));
        }
        let z0 = self.embed(theta)?;
        let q = self.system.dim();
        let d = self.model.state_dim();
        let obs = &self.data;

        let mut by_node: Vec<Vec<usize>> = vec![Vec::new(); grid.nodes.len()];
        for (k, term) in terms.iter().enumerate() {
            by_node[term.node].push(k);
        }

        let (value, full, steps) = match mode {
            DerivativeMode::Forward => {
                let mut value = T::zero();
                let mut full = DVector::<T>::zeros(q);
                let traj = visit_sensitivity(&self.system, z0.as_slice(), grid, |node, z, s| {
                    for &k in &by_node[node] {
                        let term = &terms[k];
                        let x = &z[..d];
                        let y = &obs.values[term.obs];
                        value += term.weight * loss(&obs.model, y, x);
                        let g = loss_grad(&obs.model, y, x) * term.weight;
                        full += s.rows(0, d).tr_mul(&g);
                    }
                })?;
                (value, full, traj.steps())
            }
            DerivativeMode::Adjoint => {
                let traj = integrate(&self.system, z0.as_slice(), grid)?;
                let mut value = T::zero();
                let mut impulses: BTreeMap<usize, DVector<T>> = BTreeMap::new();
                for term in terms {
                    let x = &traj.state(term.node)[..d];
                    let y = &obs.values[term.obs];
                    value += term.weight * loss(&obs.model, y, x);
                    let g = loss_grad(&obs.model, y, x) * term.weight;
                    let slot = impulses.entry(term.node).or_insert_with(|| DVector::zeros(q));
                    let mut head = slot.rows_mut(0, d);
                    head += g;
                }
                let chi = integrate_adjoint(&self.system, &traj, &impulses)?;
                (value, chi, traj.steps())
            }
        };
        let off = self.offset();
        Ok(GradientEvaluation {
            value,
            grad: full.rows(off, q - off).into_owned(),
            n_terms: terms.len(),
            rk_steps: steps,
        })
    }
}

/// Grid from `t0` through the last observation time with step at most `h`.
pub(crate) fn data_grid<T: Real>(model: &ModelSpec<T>, h: T, times: &[T]) -> Result<TimeGrid<T>> {
    let t0 = model.t_span.0;
    let last = times.last().copied().unwrap_or(model.t_span.1);
    let end = if last > t0 { last } else { model.t_span.1 };
    build_grid((t0, end), h, times)
}

/// Objective of `problem` at `theta`.
pub fn objective<T: Real>(problem: &Problem<T>, theta: &DVector<T>) -> Result<T> {
    problem.objective(theta)
}

/// Gradient of the objective of `problem` at `theta`.
pub fn gradient<T: Real>(
    problem: &Problem<T>,
    theta: &DVector<T>,
    mode: DerivativeMode,
) -> Result<GradientEvaluation<T>> {
    problem.gradient(theta, mode)
}
