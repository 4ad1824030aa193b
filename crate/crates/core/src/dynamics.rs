//! ODE models and the augmented-state construction.
//!
//! A model is `x' = f(t, x, theta)` with a physical state of dimension `d` and a
//! parameter vector of dimension `p`. Estimation treats the parameters as extra
//! state components with zero dynamics, so the unknown becomes the initial value
//! `z(0) = (x0, theta)` of a `q = d + p` dimensional system.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixViewMut, DVector};

use crate::error::{check_dim, usage, Result};
use crate::scalar::{c, Real};

/// Right-hand side and analytic Jacobians of an ODE model.
pub trait OdeModel<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Writes `f(t, x, theta)` into `dx`.
    fn rhs(&self, t: T, x: &[T], theta: &[T], dx: &mut [T]);

    /// Writes the `d x d` Jacobian with respect to the state into `out`.
    fn jac_x(&self, t: T, x: &[T], theta: &[T], out: &mut DMatrixViewMut<'_, T>);

    /// Writes the `d x p` Jacobian with respect to the parameters into `out`.
    fn jac_theta(&self, t: T, x: &[T], theta: &[T], out: &mut DMatrixViewMut<'_, T>);
}

/// A named model together with its baseline initial state, reference
/// parameter and time interval.
#[derive(Clone)]
pub struct ModelSpec<T: Real> {
    pub model: Arc<dyn OdeModel<T>>,
    pub x0: DVector<T>,
    pub theta_star: DVector<T>,
    pub t_span: (T, T),
}

impl<T: Real> fmt::Debug for ModelSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name())
            .field("d", &self.state_dim())
            .field("p", &self.param_dim())
            .field("x0", &self.x0.as_slice())
            .field("theta_star", &self.theta_star.as_slice())
            .field("t_span", &self.t_span)
            .finish()
    }
}

/// Names accepted by [`ModelSpec::by_name`].
pub const MODEL_NAMES: [&str; 3] = ["fitzhugh_nagumo", "lotka_volterra", "van_der_pol"];

impl<T: Real> ModelSpec<T> {
    pub fn new(model: Arc<dyn OdeModel<T>>, x0: DVector<T>, theta_star: DVector<T>, t_span: (T, T)) -> Result<Self> {
        let d = model.state_dim();
        let p = model.param_dim();
        if d == 0 || p == 0 {
            return Err(usage("models need at least one state and one parameter"));
        }
        check_dim("initial state", d, x0.len())?;
        check_dim("reference parameter", p, theta_star.len())?;
        if !(t_span.1 > t_span.0) {
            return Err(usage("time interval must have positive length"));
        }
        Ok(ModelSpec { model, x0, theta_star, t_span })
    }

    /// Looks up one of the built-in models with its reference configuration.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "fitzhugh_nagumo" => Ok(fitzhugh_nagumo()),
            "lotka_volterra" => Ok(lotka_volterra()),
            "van_der_pol" => Ok(van_der_pol()),
            other => Err(usage(format!("unknown model '{other}' (expected one of {})", MODEL_NAMES.join(", ")))),
        }
    }

    pub fn name(&self) -> &str {
        self.model.name()
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn param_dim(&self) -> usize {
        self.model.param_dim()
    }

    /// Augmented dimension `q = d + p`.
    pub fn augmented_dim(&self) -> usize {
        self.state_dim() + self.param_dim()
    }

    /// Reference augmented initial condition `(x0, theta_star)`.
    pub fn reference_initial(&self) -> DVector<T> {
        augmented_initial(&self.x0, &self.theta_star)
    }

    fn check_args(&self, x: &[T], theta: &[T]) -> Result<()> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("parameter", self.param_dim(), theta.len())
    }
}

/// Evaluates `f(t, x, theta)`.
pub fn eval_rhs<T: Real>(model: &ModelSpec<T>, t: T, x: &[T], theta: &[T]) -> Result<DVector<T>> {
    model.check_args(x, theta)?;
    let mut dx = DVector::zeros(model.state_dim());
    model.model.rhs(t, x, theta, dx.as_mut_slice());
    Ok(dx)
}

/// Evaluates the analytic Jacobians `(f_x, f_theta)`.
pub fn eval_jacobians<T: Real>(model: &ModelSpec<T>, t: T, x: &[T], theta: &[T]) -> Result<(DMatrix<T>, DMatrix<T>)> {
    model.check_args(x, theta)?;
    let (d, p) = (model.state_dim(), model.param_dim());
    let mut fx = DMatrix::zeros(d, d);
    let mut ft = DMatrix::zeros(d, p);
    model.model.jac_x(t, x, theta, &mut fx.view_mut((0, 0), (d, d)));
    model.model.jac_theta(t, x, theta, &mut ft.view_mut((0, 0), (d, p)));
    Ok((fx, ft))
}

/// Concatenates a physical state and a parameter into an augmented state.
pub fn augmented_initial<T: Real>(x0: &DVector<T>, theta: &DVector<T>) -> DVector<T> {
    DVector::from_iterator(x0.len() + theta.len(), x0.iter().chain(theta.iter()).copied())
}

/// The model with its parameters folded into the state: `z = (x, theta)`,
/// `z' = (f(t, x, theta), 0)`.
#[derive(Clone, Debug)]
pub struct AugmentedSystem<T: Real> {
    pub spec: ModelSpec<T>,
}

/// Builds the augmented system of a model.
pub fn augment<T: Real>(model: &ModelSpec<T>) -> AugmentedSystem<T> {
    AugmentedSystem { spec: model.clone() }
}

impl<T: Real> AugmentedSystem<T> {
    pub fn dim(&self) -> usize {
        self.spec.augmented_dim()
    }

    pub fn state_range(&self) -> Range<usize> {
        0..self.spec.state_dim()
    }

    pub fn param_range(&self) -> Range<usize> {
        self.spec.state_dim()..self.dim()
    }

    /// `z(0)` built from an initial state and a parameter.
    pub fn initial(&self, x0: &DVector<T>, theta: &DVector<T>) -> Result<DVector<T>> {
        self.spec.check_args(x0.as_slice(), theta.as_slice())?;
        Ok(augmented_initial(x0, theta))
    }

    pub fn rhs_aug(&self, t: T, z: &[T], dz: &mut [T]) {
        let d = self.spec.state_dim();
        let (x, theta) = z.split_at(d);
        let (dx, dtheta) = dz.split_at_mut(d);
        self.spec.model.rhs(t, x, theta, dx);
        dtheta.fill(T::zero());
    }

    /// Block Jacobian `[[f_x, f_theta], [0, 0]]`.
    pub fn jac_aug(&self, t: T, z: &[T], jac: &mut DMatrix<T>) {
        let d = self.spec.state_dim();
        let p = self.spec.param_dim();
        let (x, theta) = z.split_at(d);
        jac.fill(T::zero());
        self.spec.model.jac_x(t, x, theta, &mut jac.view_mut((0, 0), (d, d)));
        self.spec.model.jac_theta(t, x, theta, &mut jac.view_mut((0, d), (d, p)));
    }
}

// ---------------------------------------------------------------------------
// FitzHugh-Nagumo

/// `v' = v - v^3/3 - w + ii`, `w' = (v - a - b w) / tau` with
/// `theta = (ii, a, b, tau)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitzHughNagumo;

impl<T: Real> OdeModel<T> for FitzHughNagumo {
    fn name(&self) -> &str {
        "fitzhugh_nagumo"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        4
    }

    fn rhs(&self, _t: T, x: &[T], th: &[T], dx: &mut [T]) {
        let (v, w) = (x[0], x[1]);
        let (ii, a, b, tau) = (th[0], th[1], th[2], th[3]);
        dx[0] = v - v * v * v / c(3.0) - w + ii;
        dx[1] = (v - a - b * w) / tau;
    }

    fn jac_x(&self, _t: T, x: &[T], th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        let v = x[0];
        let (b, tau) = (th[2], th[3]);
        out[(0, 0)] = T::one() - v * v;
        out[(0, 1)] = -T::one();
        out[(1, 0)] = T::one() / tau;
        out[(1, 1)] = -b / tau;
    }

    fn jac_theta(&self, _t: T, x: &[T], th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        let (v, w) = (x[0], x[1]);
        let (a, b, tau) = (th[1], th[2], th[3]);
        out.fill(T::zero());
        out[(0, 0)] = T::one();
        out[(1, 1)] = -T::one() / tau;
        out[(1, 2)] = -w / tau;
        out[(1, 3)] = -(v - a - b * w) / (tau * tau);
    }
}

pub fn fitzhugh_nagumo<T: Real>() -> ModelSpec<T> {
    ModelSpec {
        model: Arc::new(FitzHughNagumo),
        x0: DVector::from_vec(vec![c(-1.0), c(1.0)]),
        theta_star: DVector::from_vec(vec![c(0.5), c(0.7), c(0.8), c(12.5)]),
        t_span: (T::zero(), c(50.0)),
    }
}

// ---------------------------------------------------------------------------
// Lotka-Volterra

/// `u' = alpha u - beta u v`, `v' = delta u v - gamma v` with
/// `theta = (alpha, beta, delta, gamma)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LotkaVolterra;

impl<T: Real> OdeModel<T> for LotkaVolterra {
    fn name(&self) -> &str {
        "lotka_volterra"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        4
    }

    fn rhs(&self, _t: T, x: &[T], th: &[T], dx: &mut [T]) {
        let (u, v) = (x[0], x[1]);
        dx[0] = th[0] * u - th[1] * u * v;
        dx[1] = th[2] * u * v - th[3] * v;
    }

    fn jac_x(&self, _t: T, x: &[T], th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        let (u, v) = (x[0], x[1]);
        out[(0, 0)] = th[0] - th[1] * v;
        out[(0, 1)] = -th[1] * u;
        out[(1, 0)] = th[2] * v;
        out[(1, 1)] = th[2] * u - th[3];
    }

    fn jac_theta(&self, _t: T, x: &[T], _th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        let (u, v) = (x[0], x[1]);
        out.fill(T::zero());
        out[(0, 0)] = u;
        out[(0, 1)] = -u * v;
        out[(1, 2)] = u * v;
        out[(1, 3)] = -v;
    }
}

pub fn lotka_volterra<T: Real>() -> ModelSpec<T> {
    ModelSpec {
        model: Arc::new(LotkaVolterra),
        x0: DVector::from_vec(vec![c(1.8), c(1.8)]),
        theta_star: DVector::from_vec(vec![c(0.67), c(1.33), c(1.0), c(1.0)]),
        t_span: (T::zero(), c(10.0)),
    }
}

// ---------------------------------------------------------------------------
// Van der Pol

/// `x1' = x2`, `x2' = mu (1 - x1^2) x2 - x1` with `theta = (mu)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct VanDerPol;

impl<T: Real> OdeModel<T> for VanDerPol {
    fn name(&self) -> &str {
        "van_der_pol"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        1
    }

    fn rhs(&self, _t: T, x: &[T], th: &[T], dx: &mut [T]) {
        let (x1, x2) = (x[0], x[1]);
        dx[0] = x2;
        dx[1] = th[0] * (T::one() - x1 * x1) * x2 - x1;
    }

    fn jac_x(&self, _t: T, x: &[T], th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        let (x1, x2) = (x[0], x[1]);
        let mu = th[0];
        out[(0, 0)] = T::zero();
        out[(0, 1)] = T::one();
        out[(1, 0)] = -(c::<T>(2.0) * mu * x1 * x2) - T::one();
        out[(1, 1)] = mu * (T::one() - x1 * x1);
    }

    fn jac_theta(&self, _t: T, x: &[T], _th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        let (x1, x2) = (x[0], x[1]);
        out[(0, 0)] = T::zero();
        out[(1, 0)] = (T::one() - x1 * x1) * x2;
    }
}

pub fn van_der_pol<T: Real>() -> ModelSpec<T> {
    ModelSpec {
        model: Arc::new(VanDerPol),
        x0: DVector::from_vec(vec![c(2.0), c(0.0)]),
        theta_star: DVector::from_vec(vec![c(1.0)]),
        t_span: (T::zero(), c(10.0)),
    }
}

// ---------------------------------------------------------------------------
// Linear model

/// `x' = A x + B theta`. Observations of this model are affine in the
/// augmented initial condition, which makes Gauss-Newton type updates exact.
#[derive(Clone, Debug)]
pub struct LinearModel<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

impl<T: Real> LinearModel<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.nrows() || a.nrows() == 0 || b.ncols() == 0 {
            return Err(usage("linear model needs square A (d x d) and B (d x p), d, p >= 1"));
        }
        Ok(LinearModel { a, b })
    }
}

impl<T: Real> OdeModel<T> for LinearModel<T> {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn param_dim(&self) -> usize {
        self.b.ncols()
    }

    fn rhs(&self, _t: T, x: &[T], th: &[T], dx: &mut [T]) {
        for (i, out) in dx.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, &tj) in th.iter().enumerate() {
                acc += self.b[(i, j)] * tj;
            }
            *out = acc;
        }
    }

    fn jac_x(&self, _t: T, _x: &[T], _th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        out.copy_from(&self.a);
    }

    fn jac_theta(&self, _t: T, _x: &[T], _th: &[T], out: &mut DMatrixViewMut<'_, T>) {
        out.copy_from(&self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> Vec<ModelSpec<f64>> {
        MODEL_NAMES.iter().map(|n| ModelSpec::by_name(n).unwrap()).collect()
    }

    #[test]
    fn fitzhugh_nagumo_rhs_at_origin() {
        let m = fitzhugh_nagumo::<f64>();
        let dx = eval_rhs(&m, 0.0, &[0.0, 0.0], &[0.5, 0.7, 0.8, 12.5]).unwrap();
        assert_relative_eq!(dx[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(dx[1], -0.056, epsilon = 1e-15);
    }

    #[test]
    fn fitzhugh_nagumo_state_jacobian_at_origin() {
        let m = fitzhugh_nagumo::<f64>();
        let (fx, _) = eval_jacobians(&m, 0.0, &[0.0, 0.0], &[0.5, 0.7, 0.8, 12.5]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0 / 12.5, -0.8 / 12.5]);
        assert_relative_eq!(fx, expected, epsilon = 1e-15);
    }

    #[test]
    fn lotka_volterra_equilibrium() {
        let m = lotka_volterra::<f64>();
        let th = [1.0, 1.0, 1.0, 1.0];
        let dx = eval_rhs(&m, 0.0, &[1.0, 1.0], &th).unwrap();
        assert_eq!(dx.as_slice(), &[0.0, 0.0]);
        let (fx, _) = eval_jacobians(&m, 0.0, &[1.0, 1.0], &th).unwrap();
        assert_eq!(fx, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
    }

    #[test]
    fn van_der_pol_fixed_point() {
        let m = van_der_pol::<f64>();
        let dx = eval_rhs(&m, 0.0, &[0.0, 0.0], &[1.0]).unwrap();
        assert_eq!(dx.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = fitzhugh_nagumo::<f64>();
        assert!(eval_rhs(&m, 0.0, &[0.0], &[0.5, 0.7, 0.8, 12.5]).is_err());
        assert!(eval_jacobians(&m, 0.0, &[0.0, 0.0], &[0.5]).is_err());
        assert!(ModelSpec::<f64>::by_name("lorenz").is_err());
    }

    /// Central differences of the right-hand side, step 1e-6.
    fn fd_jacobians(m: &ModelSpec<f64>, t: f64, x: &[f64], th: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (d, p) = (m.state_dim(), m.param_dim());
        let mut fx = DMatrix::zeros(d, d);
        let mut ft = DMatrix::zeros(d, p);
        for j in 0..d {
            let h = 1e-6 * x[j].abs().max(1.0);
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[j] += h;
            xm[j] -= h;
            let col = (eval_rhs(m, t, &xp, th).unwrap() - eval_rhs(m, t, &xm, th).unwrap()) / (2.0 * h);
            fx.set_column(j, &col);
        }
        for j in 0..p {
            let h = 1e-6 * th[j].abs().max(1.0);
            let (mut tp, mut tm) = (th.to_vec(), th.to_vec());
            tp[j] += h;
            tm[j] -= h;
            let col = (eval_rhs(m, t, x, &tp).unwrap() - eval_rhs(m, t, x, &tm).unwrap()) / (2.0 * h);
            ft.set_column(j, &col);
        }
        (fx, ft)
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in models() {
            for _ in 0..100 {
                let x: Vec<f64> = (0..m.state_dim()).map(|_| rng.random_range(-2.5..2.5)).collect();
                let th: Vec<f64> = m.theta_star.iter().map(|&v| v * rng.random_range(0.5..1.5)).collect();
                let (fx, ft) = eval_jacobians(&m, 0.0, &x, &th).unwrap();
                let (gx, gt) = fd_jacobians(&m, 0.0, &x, &th);
                let scale = 1.0 + fx.norm().max(ft.norm());
                assert!((&fx - &gx).norm() <= 1e-5 * scale, "{}: f_x {fx} vs {gx}", m.name());
                assert!((&ft - &gt).norm() <= 1e-5 * scale, "{}: f_theta {ft} vs {gt}", m.name());
            }
        }
    }

    #[test]
    fn augmented_block_structure() {
        for m in models() {
            let sys = augment(&m);
            assert_eq!(sys.dim(), m.state_dim() + m.param_dim());
            let z = sys.initial(&m.x0, &m.theta_star).unwrap();
            let mut dz = vec![1.0; sys.dim()];
            sys.rhs_aug(0.3, z.as_slice(), &mut dz);
            assert!(dz[sys.param_range()].iter().all(|&v| v == 0.0));
            let mut jac = DMatrix::from_element(sys.dim(), sys.dim(), 7.0);
            sys.jac_aug(0.3, z.as_slice(), &mut jac);
            for i in sys.param_range() {
                assert!(jac.row(i).iter().all(|&v| v == 0.0));
            }
            let (fx, ft) = eval_jacobians(&m, 0.3, &m.x0.as_slice(), m.theta_star.as_slice()).unwrap();
            let d = m.state_dim();
            assert_eq!(jac.view((0, 0), (d, d)), fx);
            assert_eq!(jac.view((0, d), (d, m.param_dim())), ft);
        }
        assert_eq!(augment(&fitzhugh_nagumo::<f64>()).dim(), 6);
    }

    #[test]
    fn rhs_is_deterministic() {
        for m in models() {
            let a = eval_rhs(&m, 1.0, m.x0.as_slice(), m.theta_star.as_slice()).unwrap();
            let b = eval_rhs(&m, 1.0, m.x0.as_slice(), m.theta_star.as_slice()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_precision_models_evaluate() {
        let m = fitzhugh_nagumo::<f32>();
        let dx = eval_rhs(&m, 0.0, &[0.0, 0.0], &[0.5, 0.7, 0.8, 12.5]).unwrap();
        assert!((dx[1] + 0.056).abs() < 1e-6);
    }
}
