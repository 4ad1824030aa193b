//! Gradient descent, Gauss-Newton, SGD and Kalman-based SGD.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{usage, Error, Result};
use crate::observe::{DerivativeMode, GradientEvaluation, Problem};
use crate::rng::{stream, Stream, StreamRng};
use crate::scalar::{c, to_f64, Real};
use crate::stochastic::{residual_system, stochastic_gradient, GridPolicy, ResidualSystem, SampleSet, Sampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Constant,
    Polynomial,
}

/// `eta_k = eta0` or `eta_k = eta0 / (1 + k/k0)^alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub eta0: f64,
    pub k0: f64,
    pub alpha: f64,
}

impl StepSchedule {
    pub fn constant(eta0: f64) -> Self {
        StepSchedule { kind: ScheduleKind::Constant, eta0, k0: 1.0, alpha: 1.0 }
    }

    pub fn polynomial(eta0: f64, k0: f64, alpha: f64) -> Result<Self> {
        if !(alpha > 0.5 && alpha <= 1.0) {
            return Err(usage(format!("schedule exponent must lie in (0.5, 1], got {alpha}")));
        }
        if !(k0 > 0.0) {
            return Err(usage("schedule k0 must be positive"));
        }
        Ok(StepSchedule { kind: ScheduleKind::Polynomial, eta0, k0, alpha })
    }

    pub fn eta(&self, k: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.eta0,
            ScheduleKind::Polynomial => self.eta0 / (1.0 + k as f64 / self.k0).powf(self.alpha),
        }
    }

    /// Same schedule with `eta0` divided by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        StepSchedule { eta0: self.eta0 / factor, ..*self }
    }
}

/// Stopping rule: a solver-time budget and/or an iteration cap. Zero
/// disables either.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub budget: f64,
    pub max_iter: usize,
    /// Record every n-th iterate (the final iterate is always recorded).
    pub record_every: usize,
    pub mode: DerivativeMode,
    pub grid: GridPolicy,
    /// Seed for the sampling stream.
    pub seed: u64,
    /// Deterministic solvers stop once `|step| <= tol * (1 + |theta|)`.
    pub tol: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            budget: 1.0,
            max_iter: 0,
            record_every: 1,
            mode: DerivativeMode::Forward,
            grid: GridPolicy::Sampled,
            seed: 0,
            tol: 0.0,
        }
    }
}

impl RunOptions {
    pub fn iterations(max_iter: usize) -> Self {
        RunOptions { budget: 0.0, max_iter, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0) || (self.budget == 0.0 && self.max_iter == 0) {
            return Err(usage("a run needs a positive budget or a positive iteration cap"));
        }
        if self.record_every == 0 {
            return Err(usage("record_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Budget,
    MaxIter,
    Converged,
    Divergence,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Budget => "budget",
            Termination::MaxIter => "max_iter",
            Termination::Converged => "converged",
            Termination::Divergence => "divergence",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord<T: Real> {
    /// Solver seconds since the start of the run.
    pub wall_clock: f64,
    pub k: usize,
    pub theta: DVector<T>,
    /// Objective (or sample objective) at `theta` when the solver had it.
    pub objective: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace<T: Real> {
    pub records: Vec<TraceRecord<T>>,
    pub budget: f64,
    pub terminated_by: Termination,
    pub iterations: usize,
    /// Total Runge-Kutta steps taken by the solver.
    pub rk_steps: usize,
}

impl<T: Real> RunTrace<T> {
    pub fn final_theta(&self) -> &DVector<T> {
        &self.records[self.records.len() - 1].theta
    }
}

/// Monotonic clock that only runs while the solver works.
struct SolverClock {
    spent: Duration,
    since: Option<Instant>,
}

impl SolverClock {
    fn start() -> Self {
        SolverClock { spent: Duration::ZERO, since: Some(Instant::now()) }
    }

    fn pause(&mut self) {
        if let Some(t) = self.since.take() {
            self.spent += t.elapsed();
        }
    }

    fn resume(&mut self) {
        self.since.get_or_insert_with(Instant::now);
    }

    fn seconds(&self) -> f64 {
        (self.spent + self.since.map_or(Duration::ZERO, |t| t.elapsed())).as_secs_f64()
    }
}

/// Shared iteration driver. `step` maps `(theta_k, k)` to the next iterate
/// and the objective observed at `theta_k`, and reports convergence.
fn drive<T: Real, F>(theta0: &DVector<T>, opts: &RunOptions, mut step: F) -> Result<RunTrace<T>>
where
    F: FnMut(&DVector<T>, usize) -> Result<StepOutcome<T>>,
{
    opts.validate()?;
    if theta0.iter().any(|v| !v.is_finite()) {
        return Err(usage("initial iterate is not finite"));
    }
    let mut clock = SolverClock::start();
    clock.pause();
    let mut trace = RunTrace {
        records: vec![TraceRecord { wall_clock: 0.0, k: 0, theta: theta0.clone(), objective: None }],
        budget: opts.budget,
        terminated_by: Termination::MaxIter,
        iterations: 0,
        rk_steps: 0,
    };
    let mut theta = theta0.clone();
    let mut k = 0;
    let mut last_recorded = 0;
    loop {
        clock.resume();
        let outcome = step(&theta, k);
        clock.pause();
        let (next, objective, converged) = match outcome {
            Ok(o) => o.unpack(&mut trace.rk_steps),
            Err(Error::Divergence { .. }) => {
                trace.terminated_by = Termination::Divergence;
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(rec) = trace.records.last_mut().filter(|r| r.k == k) {
            rec.objective = objective;
        }
        if next.iter().any(|v| !v.is_finite()) {
            trace.terminated_by = Termination::Divergence;
            break;
        }
        theta = next;
        k += 1;
        trace.iterations = k;
        let now = clock.seconds();
        let out_of_time = opts.budget > 0.0 && now >= opts.budget;
        let out_of_iters = opts.max_iter > 0 && k >= opts.max_iter;
        let done = out_of_time || out_of_iters || converged;
        if done || k % opts.record_every == 0 {
            trace.records.push(TraceRecord { wall_clock: now, k, theta: theta.clone(), objective: None });
            last_recorded = k;
        }
        if done {
            trace.terminated_by = if converged {
                Termination::Converged
            } else if out_of_iters {
                Termination::MaxIter
            } else {
                Termination::Budget
            };
            break;
        }
    }
    if last_recorded != k {
        trace.records.push(TraceRecord { wall_clock: clock.seconds(), k, theta, objective: None });
    }
    Ok(trace)
}

struct StepOutcome<T: Real> {
    next: DVector<T>,
    objective: Option<T>,
    rk_steps: usize,
    converged: bool,
}

impl<T: Real> StepOutcome<T> {
    fn unpack(self, steps: &mut usize) -> (DVector<T>, Option<T>, bool) {
        *steps += self.rk_steps;
        (self.next, self.objective, self.converged)
    }
}

fn descend<T: Real>(theta: &DVector<T>, eval: GradientEvaluation<T>, eta: f64) -> StepOutcome<T> {
    StepOutcome {
        next: theta - eval.grad * c::<T>(eta),
        objective: Some(eval.value),
        rk_steps: eval.rk_steps,
        converged: false,
    }
}

/// Steepest descent on an arbitrary differentiable objective.
pub fn run_gd_with<T: Real, F>(
    theta0: &DVector<T>,
    schedule: &StepSchedule,
    opts: &RunOptions,
    mut eval: F,
) -> Result<RunTrace<T>>
where
    F: FnMut(&DVector<T>) -> Result<GradientEvaluation<T>>,
{
    drive(theta0, opts, |theta, k| Ok(descend(theta, eval(theta)?, schedule.eta(k))))
}

/// `theta <- theta - eta_k grad G(theta)` on the problem's full data.
pub fn run_gd<T: Real>(
    problem: &Problem<T>,
    theta0: &DVector<T>,
    schedule: &StepSchedule,
    opts: &RunOptions,
) -> Result<RunTrace<T>> {
    run_gd_with(theta0, schedule, opts, |theta| problem.gradient(theta, opts.mode))
}

/// `theta <- theta - eta_k grad g_S(theta)` with an independent sample each
/// iteration.
pub fn run_sgd<T: Real>(
    problem: &Problem<T>,
    theta0: &DVector<T>,
    schedule: &StepSchedule,
    sampler: &Sampler,
    opts: &RunOptions,
) -> Result<RunTrace<T>> {
    let mut rng = stream(opts.seed, Stream::Sampling);
    let n = problem.data.len();
    drive(theta0, opts, |theta, k| {
        let sample = sampler.draw(n, k, &mut rng)?;
        let eval = stochastic_gradient(problem, theta, &sample, opts.grid, opts.mode)?;
        Ok(descend(theta, eval, schedule.eta(k)))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Damping {
    /// `1e-8 * trace(D' W^{-1} D) / q`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Damping {
    fn value<T: Real>(&self, info: &DMatrix<T>) -> T {
        match *self {
            Damping::Auto => info.trace() * c(1e-8) / c((info.nrows()) as f64),
            Damping::Fixed(l) => c(l),
        }
    }
}

/// Crude condition estimate from a Cholesky factor.
fn cholesky_condition<T: Real>(chol: &Cholesky<T, Dyn>) -> f64 {
    let diag = chol.l_dirty().diagonal();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for v in diag.iter() {
        let v = to_f64(*v).abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (hi / lo).powi(2)
}

fn spd_factor<T: Real>(m: DMatrix<T>, context: &str, hint: &'static str) -> Result<Cholesky<T, Dyn>> {
    let estimate = {
        let d = m.diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
            let v = to_f64(*v).abs();
            (lo.min(v), hi.max(v))
        });
        hi / lo
    };
    match m.cholesky() {
        Some(ch) => {
            let cond = cholesky_condition(&ch);
            if cond.is_finite() && cond < 1.0 / f64::EPSILON {
                Ok(ch)
            } else {
                Err(Error::Solve { context: context.to_string(), condition: cond, hint })
            }
        }
        None => Err(Error::Solve { context: context.to_string(), condition: estimate, hint }),
    }
}

/// One Gauss-Newton direction: solves `(D'W^{-1}D + lambda I) delta = D'W^{-1} r`.
pub fn gauss_newton_direction<T: Real>(rs: &ResidualSystem<T>, damping: Damping) -> Result<DVector<T>> {
    let mut a = rs.information();
    let lambda = damping.value(&a);
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = spd_factor(a, "Gauss-Newton normal equations", "use a positive damping value")?;
    Ok(chol.solve(&rs.score()))
}

/// Gauss-Newton on the problem's full (possibly modified) data.
pub fn run_gauss_newton<T: Real>(
    problem: &Problem<T>,
    theta0: &DVector<T>,
    damping: Damping,
    opts: &RunOptions,
) -> Result<RunTrace<T>> {
    let full = SampleSet::full(problem.data.len());
    drive(theta0, opts, |theta, _| {
        let rs = residual_system(problem, theta, &full, GridPolicy::Shared)?;
        let delta = gauss_newton_direction(&rs, damping)?;
        let converged = to_f64(delta.norm()) <= opts.tol * (1.0 + to_f64(theta.norm()));
        Ok(StepOutcome { next: theta + delta, objective: Some(rs.value), rk_steps: rs.rk_steps, converged })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KsgdForm {
    /// Information form when `q <= rows of the sample`, covariance otherwise.
    #[default]
    Auto,
    Information,
    Covariance,
}

impl FromStr for KsgdForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(KsgdForm::Auto),
            "information" => Ok(KsgdForm::Information),
            "covariance" => Ok(KsgdForm::Covariance),
            other => Err(usage(format!("unknown kSGD form '{other}'"))),
        }
    }
}

/// Iterate and its precision `C^{-1}` and covariance `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct KsgdState<T: Real> {
    pub theta: DVector<T>,
    pub c_inv: DMatrix<T>,
    pub c: DMatrix<T>,
    pub k: usize,
}

impl<T: Real> KsgdState<T> {
    /// `C_0 = I`.
    pub fn new(theta: DVector<T>) -> Self {
        let q = theta.len();
        KsgdState { theta, c_inv: DMatrix::identity(q, q), c: DMatrix::identity(q, q), k: 0 }
    }
}

fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let t = m.transpose();
    *m += t;
    *m *= c::<T>(0.5);
}

/// One Kalman-type update from a residual system built at `state.theta`.
///
/// Information form: `A = D'W^{-1}D + C^{-1}`, `theta += A^{-1} D'W^{-1} r`,
/// `C^{-1} <- A`. Covariance form: `M = W + D C D'`,
/// `theta += C D' M^{-1} r`, `C <- C - C D' M^{-1} D C`.
pub fn ksgd_step<T: Real>(state: &KsgdState<T>, rs: &ResidualSystem<T>, form: KsgdForm) -> Result<KsgdState<T>> {
    let q = state.theta.len();
    if rs.d.ncols() != q {
        return Err(Error::Dimension { what: "residual Jacobian columns", expected: q, got: rs.d.ncols() });
    }
    let form = match form {
        KsgdForm::Auto if q <= rs.rows() => KsgdForm::Information,
        KsgdForm::Auto => KsgdForm::Covariance,
        f => f,
    };
    let info = rs.information();
    let mut c_inv = &state.c_inv + &info;
    symmetrize(&mut c_inv);
    let (delta, mut cov) = match form {
        KsgdForm::Information | KsgdForm::Auto => {
            let chol =
                spd_factor(c_inv.clone(), "kSGD information update", "check the precision matrix for roundoff drift")?;
            (chol.solve(&rs.score()), chol.inverse())
        }
        KsgdForm::Covariance => {
            let w = spd_factor(
                rs.w_inv_dense(),
                "kSGD observation weights",
                "inclusion probabilities and noise covariance must be positive",
            )?
            .inverse();
            let cd = &state.c * rs.d.transpose();
            let m = w + &rs.d * &cd;
            let m_chol = spd_factor(m, "kSGD covariance update", "check the covariance matrix for roundoff drift")?;
            let delta = &cd * m_chol.solve(&rs.r);
            let cov = &state.c - &cd * m_chol.solve(&cd.transpose());
            (delta, cov)
        }
    };
    symmetrize(&mut cov);
    Ok(KsgdState { theta: &state.theta + delta, c_inv, c: cov, k: state.k + 1 })
}

/// Kalman-based SGD from `C_0 = I`, one fresh sample per iteration.
pub fn run_ksgd<T: Real>(
    problem: &Problem<T>,
    theta0: &DVector<T>,
    sampler: &Sampler,
    form: KsgdForm,
    opts: &RunOptions,
) -> Result<RunTrace<T>> {
    let mut rng: StreamRng = stream(opts.seed, Stream::Sampling);
    let n = problem.data.len();
    let mut state = KsgdState::new(theta0.clone());
    drive(theta0, opts, |theta, k| {
        state.theta.copy_from(theta);
        let sample = sampler.draw(n, k, &mut rng)?;
        let rs = residual_system(problem, theta, &sample, opts.grid)?;
        state = ksgd_step(&state, &rs, form)?;
        Ok(StepOutcome {
            next: state.theta.clone(),
            objective: Some(rs.value),
            rk_steps: rs.rk_steps,
            converged: false,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{lotka_volterra, LinearModel, ModelSpec};
    use crate::observe::{simulate_noiseless, simulate_observations, LinearGaussian, ObservationSet};
    use crate::rng::standard_normal;
    use std::sync::Arc;

    fn quad_eval(a: &DMatrix<f64>) -> impl FnMut(&DVector<f64>) -> Result<GradientEvaluation<f64>> + '_ {
        move |theta| {
            let g = a * theta;
            Ok(GradientEvaluation { value: 0.5 * theta.dot(&g), grad: g, n_terms: 1, rk_steps: 0 })
        }
    }

    #[test]
    fn gd_contracts_on_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let lmax = a.clone().symmetric_eigen().eigenvalues.max();
        let theta0 = DVector::from_vec(vec![1.0, -2.0]);
        let trace =
            run_gd_with(&theta0, &StepSchedule::constant(1.9 / lmax), &RunOptions::iterations(50), quad_eval(&a))
                .unwrap();
        let norms: Vec<f64> = trace.records.iter().map(|r| r.theta.norm()).collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(trace.records.len(), 51);
        assert_eq!(trace.terminated_by, Termination::MaxIter);
    }

    #[test]
    fn gd_frozen_at_stationary_point_and_cap_semantics() {
        let a = DMatrix::identity(3, 3);
        let zero = DVector::zeros(3);
        let trace =
            run_gd_with(&zero, &StepSchedule::constant(0.5), &RunOptions::iterations(5), quad_eval(&a)).unwrap();
        assert_eq!(trace.iterations, 5);
        assert!(trace.records.iter().all(|r| r.theta == zero));
        assert!(RunOptions { budget: 0.0, max_iter: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn gd_divergence_is_recorded() {
        let a = DMatrix::identity(1, 1);
        let theta0 = DVector::from_element(1, 1.0);
        let trace =
            run_gd_with(&theta0, &StepSchedule::constant(1e200), &RunOptions::iterations(10), quad_eval(&a)).unwrap();
        assert_eq!(trace.terminated_by, Termination::Divergence);
        assert!(trace.records.iter().all(|r| r.theta.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn record_cadence_keeps_final_iterate() {
        let a = DMatrix::identity(1, 1);
        let theta0 = DVector::from_element(1, 1.0);
        let opts = RunOptions { record_every: 10, ..RunOptions::iterations(25) };
        let trace = run_gd_with(&theta0, &StepSchedule::constant(0.1), &opts, quad_eval(&a)).unwrap();
        let ks: Vec<usize> = trace.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 10, 20, 25]);
    }

    #[test]
    fn budget_stops_run() {
        let a = DMatrix::identity(1, 1);
        let theta0 = DVector::from_element(1, 1.0);
        let opts = RunOptions { budget: 0.02, ..Default::default() };
        let trace = run_gd_with(&theta0, &StepSchedule::constant(1e-9), &opts, quad_eval(&a)).unwrap();
        assert_eq!(trace.terminated_by, Termination::Budget);
        assert!(trace.records.windows(2).all(|w| w[1].wall_clock >= w[0].wall_clock));
        assert!(trace.records.last().unwrap().wall_clock >= 0.02);
    }

    #[test]
    fn polynomial_schedule_legality() {
        assert!(StepSchedule::polynomial(1.0, 10.0, 0.5).is_err());
        let s = StepSchedule::polynomial(1.0, 10.0, 0.75).unwrap();
        assert_eq!(s.eta(0), 1.0);
        // sum of eta_k^2 is bounded by eta0^2 (1 + k0 / (2 alpha - 1))
        let sum: f64 = (0..2_000_000).map(|k| s.eta(k).powi(2)).sum();
        assert!(sum <= 1.0 + 10.0 / 0.5);
        // partial sums of eta_k grow without bound, like k^(1 - alpha)
        let partial = |n: usize| (0..n).map(|k| s.eta(k)).sum::<f64>();
        assert!(partial(1_000_000) > 2.0 * partial(50_000));
    }

    fn scalar_affine(n: usize, seed: u64) -> (Problem<f64>, f64) {
        // x' = -x + theta, x(0) = 0 fixed; x(t) is affine in theta
        let model = ModelSpec::new(
            Arc::new(LinearModel::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0)).unwrap()),
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 2.0),
            (0.0, 5.0),
        )
        .unwrap();
        let obs = LinearGaussian::identity(1, 0.5).unwrap();
        let data = simulate_observations(&model, &model.reference_initial(), obs, 5.0 / n as f64, seed).unwrap();
        let p = Problem::new(model, data, 0.05, false).unwrap();
        // batch minimizer: one exact Gauss-Newton solve from zero
        let rs = residual_system(&p, &DVector::zeros(1), &SampleSet::full(p.data.len()), GridPolicy::Shared).unwrap();
        let theta_hat = rs.score()[0] / rs.information()[(0, 0)];
        (p, theta_hat)
    }

    #[test]
    fn sgd_polynomial_schedule_approaches_batch_minimizer() {
        let (p, theta_hat) = scalar_affine(100, 3);
        let theta0 = DVector::from_element(1, -3.0);
        let n = p.data.len() as f64;
        let schedule = StepSchedule::polynomial(0.5 / n, 10.0, 1.0).unwrap();
        let opts = RunOptions { seed: 9, ..RunOptions::iterations(500) };
        let trace = run_sgd(&p, &theta0, &schedule, &Sampler::Systematic { kappa: 10 }, &opts).unwrap();
        let fin = trace.final_theta()[0];
        assert!((fin - theta_hat).abs() < 0.1 * (theta0[0] - theta_hat).abs(), "{fin} vs {theta_hat}");
    }

    #[test]
    fn sgd_with_full_sampler_is_gd() {
        let m = lotka_volterra::<f64>();
        let obs = LinearGaussian::identity(2, 0.1).unwrap();
        let data = simulate_observations(&m, &m.reference_initial(), obs, 0.05, 2).unwrap();
        let p = Problem::new(m, data, 0.5, true).unwrap();
        let theta0 = p.reference() * 1.05;
        let schedule = StepSchedule::constant(1e-5);
        let opts = RunOptions::iterations(6);
        let gd = run_gd(&p, &theta0, &schedule, &opts).unwrap();
        let sgd = run_sgd(&p, &theta0, &schedule, &Sampler::Full, &opts).unwrap();
        for (a, b) in gd.records.iter().zip(&sgd.records) {
            assert_eq!(a.theta, b.theta);
        }
        let again = run_sgd(&p, &theta0, &schedule, &Sampler::Systematic { kappa: 5 }, &RunOptions { seed: 4, ..opts })
            .unwrap();
        let twice = run_sgd(&p, &theta0, &schedule, &Sampler::Systematic { kappa: 5 }, &RunOptions { seed: 4, ..opts })
            .unwrap();
        let thetas = |t: &RunTrace<f64>| t.records.iter().map(|r| r.theta.clone()).collect::<Vec<_>>();
        assert_eq!(thetas(&again), thetas(&twice));
    }

    /// Linear model `x' = A x + B theta` with `q` unknowns split between the
    /// initial state and the parameters.
    fn affine_problem(q: usize, rng: &mut StreamRng) -> Problem<f64> {
        let d = q.div_ceil(2);
        let p = q - d;
        let a = DMatrix::from_fn(d, d, |i, j| if i == j { -0.5 } else { 0.2 * standard_normal(rng) });
        let (b, theta_star) = if p == 0 {
            (DMatrix::from_element(d, 1, 1.0), DVector::from_element(1, 0.3))
        } else {
            (DMatrix::from_fn(d, p, |_, _| standard_normal(rng)), DVector::from_fn(p, |_, _| standard_normal(rng)))
        };
        let x0 = DVector::from_fn(d, |_, _| standard_normal(rng));
        let model = ModelSpec::new(Arc::new(LinearModel::new(a, b).unwrap()), x0, theta_star, (0.0, 2.0)).unwrap();
        let obs = LinearGaussian::identity(d, 0.3).unwrap();
        let data = simulate_observations(&model, &model.reference_initial(), obs, 0.1, 5).unwrap();
        // q = 1 has d = 1, p = 0: keep x0 fixed and estimate the single parameter.
        Problem::new(model, data, 0.1, p != 0).unwrap()
    }

    #[test]
    fn ksgd_sweep_equals_regularized_least_squares() {
        let mut rng = stream(17, Stream::Check);
        for q in 1..=6 {
            let p = affine_problem(q, &mut rng);
            assert_eq!(p.dim(), q);
            let theta0 = DVector::from_fn(q, |_, _| standard_normal(&mut rng));
            let full = residual_system(&p, &theta0, &SampleSet::full(p.data.len()), GridPolicy::Shared).unwrap();
            let mut a = full.information();
            for i in 0..q {
                a[(i, i)] += 1.0;
            }
            let oracle = a.lu().solve(&full.score()).unwrap() + &theta0;
            for kappa in [1, 3, 10] {
                let opts = RunOptions { grid: GridPolicy::Shared, ..RunOptions::iterations(kappa) };
                let trace = run_ksgd(&p, &theta0, &Sampler::Sweep { kappa }, KsgdForm::Auto, &opts).unwrap();
                let got = trace.final_theta();
                assert!((got - &oracle).norm() <= 1e-8 * (1.0 + oracle.norm()), "q={q} kappa={kappa}");
            }
        }
    }

    fn random_instance(q: usize, rows: usize, rng: &mut StreamRng) -> (KsgdState<f64>, ResidualSystem<f64>) {
        let spd = |n: usize, rng: &mut StreamRng| {
            let g = DMatrix::from_fn(n, n, |_, _| standard_normal(rng));
            &g * g.transpose() + DMatrix::identity(n, n) * 0.5
        };
        let cov = spd(q, rng);
        let state = KsgdState {
            theta: DVector::from_fn(q, |_, _| standard_normal(rng)),
            c_inv: cov.clone().try_inverse().unwrap(),
            c: cov,
            k: 0,
        };
        let rs = ResidualSystem {
            r: DVector::from_fn(rows, |_, _| standard_normal(rng)),
            d: DMatrix::from_fn(rows, q, |_, _| standard_normal(rng)),
            w_inv: (0..rows).map(|_| spd(1, rng)).collect(),
            value: 0.0,
            rk_steps: 0,
        };
        (state, rs)
    }

    #[test]
    fn information_and_covariance_forms_agree() {
        let mut rng = stream(23, Stream::Check);
        for i in 0..100 {
            let q = 1 + i % 6;
            let rows = 1 + (i * 7) % 10;
            let (state, rs) = random_instance(q, rows, &mut rng);
            let a = ksgd_step(&state, &rs, KsgdForm::Information).unwrap();
            let b = ksgd_step(&state, &rs, KsgdForm::Covariance).unwrap();
            assert!((&a.theta - &b.theta).norm() <= 1e-10 * a.theta.norm().max(1.0));
            let ident = &b.c_inv * &b.c;
            assert!((ident - DMatrix::identity(q, q)).norm() <= 1e-8);
            let ident = &a.c_inv * &a.c;
            assert!((ident - DMatrix::identity(q, q)).norm() <= 1e-8);
        }
    }

    #[test]
    fn scalar_ksgd_hand_values() {
        let state = KsgdState::new(DVector::from_element(1, 0.0));
        let y = 3.0f64;
        let rs = ResidualSystem {
            r: DVector::from_element(1, y),
            d: DMatrix::from_element(1, 1, 1.0),
            w_inv: vec![DMatrix::from_element(1, 1, 1.0)],
            value: 0.0,
            rk_steps: 0,
        };
        for form in [KsgdForm::Information, KsgdForm::Covariance] {
            let next = ksgd_step(&state, &rs, form).unwrap();
            assert!((next.theta[0] - y / 2.0).abs() < 1e-15);
            assert_eq!(next.c_inv[(0, 0)], 2.0);
            assert!((next.c[(0, 0)] - 0.5f64).abs() < 1e-15);
        }
        let zero = ResidualSystem { r: DVector::zeros(1), ..rs };
        let next = ksgd_step(&state, &zero, KsgdForm::Auto).unwrap();
        assert_eq!(next.theta[0], 0.0);
        assert_eq!(next.c_inv[(0, 0)], 2.0);
    }

    #[test]
    fn precision_eigenvalues_nondecreasing() {
        let mut rng = stream(31, Stream::Check);
        let (mut state, _) = random_instance(4, 3, &mut rng);
        for _ in 0..20 {
            let (_, rs) = random_instance(4, 3, &mut rng);
            let next = ksgd_step(&state, &rs, KsgdForm::Auto).unwrap();
            let before = state.c_inv.clone().symmetric_eigen().eigenvalues;
            let after = next.c_inv.clone().symmetric_eigen().eigenvalues;
            let mut b: Vec<f64> = before.iter().copied().collect();
            let mut a: Vec<f64> = after.iter().copied().collect();
            b.sort_by(f64::total_cmp);
            a.sort_by(f64::total_cmp);
            assert!(a.iter().zip(&b).all(|(x, y)| *x >= *y - 1e-9 * y.abs()));
            state = next;
        }
    }

    #[test]
    fn ksgd_stays_at_truth_on_noiseless_data() {
        let m = lotka_volterra::<f64>();
        let obs = LinearGaussian::identity(2, 0.1).unwrap();
        let data = simulate_noiseless(&m, &m.reference_initial(), obs, 0.05).unwrap();
        let p = Problem::new(m, data, 0.5, true).unwrap();
        let theta = p.reference();
        let opts = RunOptions { grid: GridPolicy::Shared, ..RunOptions::iterations(20) };
        let trace = run_ksgd(&p, &theta, &Sampler::Systematic { kappa: 10 }, KsgdForm::Auto, &opts).unwrap();
        assert_eq!(trace.final_theta(), &theta);
    }

    #[test]
    fn gauss_newton_affine_one_step() {
        let mut rng = stream(41, Stream::Check);
        let p = affine_problem(4, &mut rng);
        let theta0 = DVector::zeros(4);
        let full = residual_system(&p, &theta0, &SampleSet::full(p.data.len()), GridPolicy::Shared).unwrap();
        let oracle = full.information().lu().solve(&full.score()).unwrap();
        let trace = run_gauss_newton(&p, &theta0, Damping::Fixed(0.0), &RunOptions::iterations(1)).unwrap();
        assert!((trace.final_theta() - &oracle).norm() <= 1e-9 * oracle.norm());
        let zero = ResidualSystem { r: DVector::zeros(full.rows()), ..full.clone() };
        assert_eq!(gauss_newton_direction(&zero, Damping::Auto).unwrap().norm(), 0.0);
        let big = gauss_newton_direction(&full, Damping::Fixed(1e12)).unwrap();
        assert!(big.norm() < 1e-6 * oracle.norm());
    }

    #[test]
    fn gauss_newton_singular_without_damping() {
        let model = ModelSpec::new(
            Arc::new(
                LinearModel::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
                    .unwrap(),
            ),
            DVector::from_element(1, 0.0),
            DVector::from_vec(vec![1.0, 1.0]),
            (0.0, 1.0),
        )
        .unwrap();
        let obs = LinearGaussian::identity(1, 0.1).unwrap();
        let data = ObservationSet::new(vec![1.0], vec![DVector::from_element(1, 0.5)], obs).unwrap();
        let p = Problem::new(model, data, 0.1, false).unwrap();
        let err =
            run_gauss_newton(&p, &DVector::zeros(2), Damping::Fixed(0.0), &RunOptions::iterations(1)).unwrap_err();
        assert!(matches!(err, Error::Solve { .. }), "{err}");
        assert!(run_gauss_newton(&p, &DVector::zeros(2), Damping::Fixed(1e-6), &RunOptions::iterations(1)).is_ok());
    }
}
