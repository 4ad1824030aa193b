//! Self-checks behind the `check` subcommand: derivative cross-checks, the
//! finite offset enumeration of systematic sampling, and kSGD identities.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixViewMut, DVector};

use crate::config::ExperimentConfig;
use crate::dynamics::{eval_jacobians, eval_rhs, LinearModel, ModelSpec, OdeModel};
use crate::error::Result;
use crate::harness::observation_model;
use crate::observe::{simulate_observations, DerivativeMode, LinearGaussian, Problem};
use crate::optimize::{ksgd_step, run_ksgd, KsgdForm, KsgdState, RunOptions};
use crate::rng::{standard_normal, stream, Stream, StreamRng};
use crate::stochastic::{
    residual_system, stochastic_gradient, systematic_with_offset, GridPolicy, ResidualSystem, SampleSet, Sampler,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub discrepancy: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.discrepancy <= self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} discrepancy={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.discrepancy,
            self.tol
        )
    }
}

/// `|a - b| / max(|b|, tiny)` in the Euclidean norm.
pub fn relative_difference(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let diff = (a - b).norm();
    if diff == 0.0 {
        return 0.0;
    }
    diff / b.norm().max(f64::MIN_POSITIVE)
}

/// Central differences of `f` with step `step * max(|x_i|, 1)`.
pub fn central_difference<F>(x: &DVector<f64>, step: f64, mut f: F) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp)? - f(&xm)?) / (2.0 * h);
    }
    Ok(g)
}

/// `reference * (1 + spread * N(0, 1))` componentwise.
pub fn random_near(reference: &DVector<f64>, spread: f64, rng: &mut StreamRng) -> DVector<f64> {
    reference.map(|v| v * (1.0 + spread * standard_normal(rng)))
}

/// Largest relative error of the analytic Jacobians against central
/// differences of the right-hand side, at `points` states along the
/// reference trajectory's neighbourhood.
pub fn jacobian_fd_discrepancy(model: &ModelSpec<f64>, points: usize, rng: &mut StreamRng) -> Result<f64> {
    let mut worst = 0.0f64;
    let d = model.state_dim();
    for _ in 0..points {
        let x = random_near(&model.x0, 0.5, rng);
        let theta = random_near(&model.theta_star, 0.2, rng);
        let t = 0.0;
        let (fx, ft) = eval_jacobians(model, t, x.as_slice(), theta.as_slice())?;
        let analytic = DMatrix::from_fn(d, d + theta.len(), |i, j| if j < d { fx[(i, j)] } else { ft[(i, j - d)] });
        let z = DVector::from_iterator(d + theta.len(), x.iter().chain(theta.iter()).copied());
        let mut numeric = DMatrix::zeros(d, z.len());
        for i in 0..d {
            let col =
                central_difference(
                    &z,
                    1e-6,
                    |zz| Ok(eval_rhs(model, t, &zz.as_slice()[..d], &zz.as_slice()[d..])?[i]),
                )?;
            numeric.row_mut(i).copy_from(&col.transpose());
        }
        let scale = analytic.norm().max(1.0);
        worst = worst.max((analytic - numeric).norm() / scale);
    }
    Ok(worst)
}

/// Worst forward-versus-adjoint and gradient-versus-finite-difference
/// relative discrepancies over `points` random parameters.
pub fn gradient_discrepancies(problem: &Problem<f64>, points: usize, rng: &mut StreamRng) -> Result<(f64, f64)> {
    let (mut modes, mut fd) = (0.0f64, 0.0f64);
    for _ in 0..points {
        let theta = random_near(&problem.reference(), 0.1, rng);
        let fwd = problem.gradient(&theta, DerivativeMode::Forward)?.grad;
        let adj = problem.gradient(&theta, DerivativeMode::Adjoint)?.grad;
        modes = modes.max(relative_difference(&adj, &fwd));
        let num = central_difference(&theta, 1e-6, |t| problem.objective(t))?;
        fd = fd.max(relative_difference(&num, &fwd));
    }
    Ok((modes, fd))
}

/// Relative gap between the mean of systematic stochastic gradients over
/// all `kappa` offsets and the full gradient at `theta`.
pub fn offset_average_discrepancy(
    problem: &Problem<f64>,
    theta: &DVector<f64>,
    kappa: usize,
    mode: DerivativeMode,
) -> Result<f64> {
    let n = problem.data.len();
    let full = stochastic_gradient(problem, theta, &SampleSet::full(n), GridPolicy::Shared, mode)?.grad;
    let mut mean = DVector::zeros(theta.len());
    for offset in 0..kappa {
        let s = systematic_with_offset(n, kappa, offset)?;
        mean += stochastic_gradient(problem, theta, &s, GridPolicy::Shared, mode)?.grad;
    }
    mean /= kappa as f64;
    Ok(relative_difference(&mean, &full))
}

/// An affine model with `q` unknowns and observations of the full state.
pub fn affine_problem(q: usize, rng: &mut StreamRng) -> Result<Problem<f64>> {
    // q = 1 has d = 1, p = 0, so the single unknown is the parameter and x0
    // stays fixed
    let (d, p) = if q == 1 { (1, 1) } else { (q.div_ceil(2), q - q.div_ceil(2)) };
    let a = DMatrix::from_fn(d, d, |i, j| if i == j { -0.5 } else { 0.2 * standard_normal(rng) });
    let b = DMatrix::from_fn(d, p, |_, _| standard_normal(rng));
    let x0 = DVector::from_fn(d, |_, _| standard_normal(rng));
    let theta_star = DVector::from_fn(p, |_, _| standard_normal(rng));
    let model = ModelSpec::new(Arc::new(LinearModel::new(a, b)?), x0, theta_star, (0.0, 2.0))?;
    let obs = LinearGaussian::identity(d, 0.3)?;
    let data = simulate_observations(&model, &model.reference_initial(), obs, 0.1, 7)?;
    Problem::new(model, data, 0.1, q != 1)
}

/// Largest gap between a disjoint-batch kSGD sweep from `theta0` with
/// `C0 = I` and the regularized least-squares solution
/// `theta0 + (D'W^-1 D + I)^-1 D'W^-1 r`, for `q = 1..=6`.
pub fn ksgd_rls_discrepancy(rng: &mut StreamRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for q in 1..=6 {
        let problem = affine_problem(q, rng)?;
        let theta0 = DVector::from_fn(q, |_, _| standard_normal(rng));
        let full = residual_system(&problem, &theta0, &SampleSet::full(problem.data.len()), GridPolicy::Shared)?;
        let a = full.information() + DMatrix::identity(q, q);
        let oracle = a.cholesky().expect("identity prior keeps the system SPD").solve(&full.score()) + &theta0;
        for kappa in [1, 4, 10] {
            let opts = RunOptions { grid: GridPolicy::Shared, ..RunOptions::iterations(kappa) };
            let trace = run_ksgd(&problem, &theta0, &Sampler::Sweep { kappa }, KsgdForm::Auto, &opts)?;
            worst = worst.max((trace.final_theta() - &oracle).norm() / oracle.norm().max(1.0));
        }
    }
    Ok(worst)
}

fn spd(n: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| standard_normal(rng));
    &g * g.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Largest relative gap between the information and covariance forms of
/// one kSGD step over `instances` random SPD problems.
pub fn ksgd_form_discrepancy(instances: usize, rng: &mut StreamRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let q = 1 + i % 6;
        let obs_dim = 1 + i % 2;
        let rows = obs_dim * (1 + (i * 7) % 5);
        let cov = spd(q, rng);
        let state = KsgdState {
            theta: DVector::from_fn(q, |_, _| standard_normal(rng)),
            c_inv: cov.clone().try_inverse().expect("SPD matrix is invertible"),
            c: cov,
            k: 0,
        };
        let rs = ResidualSystem {
            r: DVector::from_fn(rows, |_, _| standard_normal(rng)),
            d: DMatrix::from_fn(rows, q, |_, _| standard_normal(rng)),
            w_inv: (0..rows / obs_dim).map(|_| spd(obs_dim, rng)).collect(),
            value: 0.0,
            rk_steps: 0,
        };
        let a = ksgd_step(&state, &rs, KsgdForm::Information)?;
        let b = ksgd_step(&state, &rs, KsgdForm::Covariance)?;
        worst = worst.max(relative_difference(&b.theta, &a.theta));
    }
    Ok(worst)
}

/// Number of random points used per derivative check.
pub const CHECK_POINTS: usize = 3;

/// Runs every check against `model` with the observation settings of
/// `cfg`. Passing a model other than `cfg.model` lets callers substitute a
/// deliberately broken model.
pub fn run_checks(cfg: &ExperimentConfig, model: ModelSpec<f64>) -> Result<Vec<CheckResult>> {
    let mut rng = stream(cfg.seed, Stream::Check);
    let mut out = Vec::new();
    let mut push =
        |name: &str, discrepancy: f64, tol: f64| out.push(CheckResult { name: name.to_string(), discrepancy, tol });

    push("jacobian_vs_fd", jacobian_fd_discrepancy(&model, 5, &mut rng)?, 1e-5);

    let obs = observation_model(cfg, model.state_dim())?;
    let data = simulate_observations(&model, &model.reference_initial(), obs, cfg.period()?, cfg.seed)?;
    let problem = Problem::new(model, data, cfg.h()?, cfg.estimate_initial_state)?;
    let (modes, fd) = gradient_discrepancies(&problem, CHECK_POINTS, &mut rng)?;
    push("gradient_forward_vs_adjoint", modes, 1e-8);
    push("gradient_vs_fd", fd, 1e-4);

    let theta = random_near(&problem.reference(), 0.1, &mut rng);
    for kappa in [2, 5, 10] {
        let gap = offset_average_discrepancy(&problem, &theta, kappa, cfg.solver.mode)?;
        push(&format!("offset_unbiasedness_kappa{kappa}"), gap, 1e-12);
    }

    push("ksgd_sweep_vs_rls", ksgd_rls_discrepancy(&mut rng)?, 1e-8);
    push("ksgd_information_vs_covariance", ksgd_form_discrepancy(100, &mut rng)?, 1e-10);
    Ok(out)
}

/// Wraps a model and adds `delta` to every entry of its state Jacobian.
/// Used as a negative control for the derivative checks.
pub struct CorruptedJacobian<T> {
    pub inner: Arc<dyn OdeModel<T>>,
    pub delta: T,
}

impl<T: crate::Real> OdeModel<T> for CorruptedJacobian<T> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn rhs(&self, t: T, x: &[T], theta: &[T], dx: &mut [T]) {
        self.inner.rhs(t, x, theta, dx)
    }
    fn jac_x(&self, t: T, x: &[T], theta: &[T], out: &mut DMatrixViewMut<'_, T>) {
        self.inner.jac_x(t, x, theta, out);
        out.add_scalar_mut(self.delta);
    }
    fn jac_theta(&self, t: T, x: &[T], theta: &[T], out: &mut DMatrixViewMut<'_, T>) {
        self.inner.jac_theta(t, x, theta, out)
    }
}

/// `model` with its state Jacobian shifted by `delta`.
pub fn corrupt_jacobian(model: &ModelSpec<f64>, delta: f64) -> ModelSpec<f64> {
    ModelSpec { model: Arc::new(CorruptedJacobian { inner: model.model.clone(), delta }), ..model.clone() }
}
