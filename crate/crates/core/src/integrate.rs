//! Fixed-step Ralston fourth-order Runge-Kutta integration of the state, the
//! forward sensitivity matrix and the discrete adjoint.
//!
//! The adjoint is the exact transpose of the forward sensitivity recursion,
//! so gradients from the two routes agree to rounding error on any grid.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::AugmentedSystem;
use crate::error::{check_dim, usage, Error, Result};
use crate::scalar::{all_finite, c, to_f64, Real};

/// A first-order system `z' = F(t, z)` with an analytic Jacobian.
pub trait OdeSystem<T: Real> {
    fn dim(&self) -> usize;
    fn rhs(&self, t: T, z: &[T], dz: &mut [T]);
    /// Writes `dF/dz` into the `dim x dim` matrix `jac`.
    fn jacobian(&self, t: T, z: &[T], jac: &mut DMatrix<T>);
}

impl<T: Real> OdeSystem<T> for AugmentedSystem<T> {
    fn dim(&self) -> usize {
        AugmentedSystem::dim(self)
    }
    fn rhs(&self, t: T, z: &[T], dz: &mut [T]) {
        self.rhs_aug(t, z, dz)
    }
    fn jacobian(&self, t: T, z: &[T], jac: &mut DMatrix<T>) {
        self.jac_aug(t, z, jac)
    }
}

// ---------------------------------------------------------------------------
// Tableau

/// Ralston's minimum truncation error fourth-order method (1962).
pub mod ralston {
    pub const C: [f64; 4] = [0.0, 0.4, 0.455_737_254_218_789_43, 1.0];
    pub const A: [[f64; 3]; 4] = [
        [0.0, 0.0, 0.0],
        [0.4, 0.0, 0.0],
        [0.296_977_609_247_753_6, 0.158_759_644_971_035_83, 0.0],
        [0.218_100_388_225_920_47, -3.050_965_148_692_930_8, 3.832_864_760_467_010_3],
    ];
    pub const B: [f64; 4] =
        [0.174_760_282_262_690_37, -0.551_480_662_878_732_94, 1.205_535_599_396_523_5, 0.171_184_781_219_519_03];
}

#[derive(Clone, Copy, Debug)]
struct Tableau<T> {
    c: [T; 4],
    a: [[T; 3]; 4],
    b: [T; 4],
}

impl<T: Real> Tableau<T> {
    fn ralston() -> Self {
        Tableau { c: ralston::C.map(c), a: ralston::A.map(|row| row.map(c)), b: ralston::B.map(c) }
    }
}

// ---------------------------------------------------------------------------
// Grid

/// Integration nodes together with the node index of every observation.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T: Real> {
    pub t0: T,
    pub t_end: T,
    /// Largest step the grid takes between observations.
    pub h: T,
    pub nodes: Vec<T>,
    pub obs_index: Vec<usize>,
}

impl<T: Real> TimeGrid<T> {
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Builds a grid over `t_span` marching with step at most `h` and stopping at
/// every observation time.
///
/// Starting from the latest node, the next node is the next observation time
/// when it lies within `h` (plus a snapping tolerance of `1e-9 * T`),
/// otherwise a regular step of length `h`. Equally spaced observations with
/// spacing `h` therefore produce exactly one step per observation, and an
/// empty observation list produces the uniform grid. Observation times may
/// repeat; repeated times share a node.
pub fn build_grid<T: Real>(t_span: (T, T), h: T, obs_times: &[T]) -> Result<TimeGrid<T>> {
    let (t0, t_end) = t_span;
    if !(h > T::zero()) || !h.is_finite() {
        return Err(usage("integration step must be positive"));
    }
    if !(t_end > t0) {
        return Err(usage("time interval must have positive length"));
    }
    let tol = c::<T>(1e-9) * t_end.abs().max(t0.abs()).max(T::one());

    let mut nodes = vec![t0];
    let mut obs_index = Vec::with_capacity(obs_times.len());
    let mut anchor = t0;
    let mut k = 0usize;
    let mut cur = t0;

    for &tau in obs_times {
        if !tau.is_finite() || tau < t0 - tol || tau > t_end + tol {
            return Err(usage(format!("observation time {} outside [{}, {}]", to_f64(tau), to_f64(t0), to_f64(t_end))));
        }
        if tau < cur - tol {
            return Err(usage("observation times must be sorted"));
        }
        if tau <= cur + tol {
            obs_index.push(nodes.len() - 1);
            continue;
        }
        loop {
            let next = anchor + h * c::<T>((k + 1) as f64);
            if tau <= next + tol {
                break;
            }
            k += 1;
            nodes.push(next);
        }
        let tau = if tau > t_end { t_end } else { tau };
        nodes.push(tau);
        obs_index.push(nodes.len() - 1);
        cur = tau;
        anchor = tau;
        k = 0;
    }

    loop {
        let next = anchor + h * c::<T>((k + 1) as f64);
        if next >= t_end - tol {
            break;
        }
        k += 1;
        nodes.push(next);
        cur = next;
    }
    if t_end > cur + tol {
        nodes.push(t_end);
    } else if nodes.len() > 1 {
        let last = nodes.len() - 1;
        nodes[last] = t_end;
    }
    if nodes.len() < 2 {
        nodes.push(t_end);
    }

    Ok(TimeGrid { t0, t_end, h, nodes, obs_index })
}

// ---------------------------------------------------------------------------
// Trajectories

/// States at every grid node, stored contiguously.
#[derive(Clone, Debug)]
pub struct Trajectory<T: Real> {
    pub grid: Arc<TimeGrid<T>>,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, node: usize) -> &[T] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    /// Number of Runge-Kutta steps taken.
    pub fn steps(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

/// A trajectory plus the sensitivity matrix `dz(t)/dz(0)` at requested nodes.
#[derive(Clone, Debug)]
pub struct SensitivityTrajectory<T: Real> {
    pub base: Trajectory<T>,
    pub sens: BTreeMap<usize, DMatrix<T>>,
}

#[inline]
fn axpy_mat<T: Real>(y: &mut DMatrix<T>, a: T, x: &DMatrix<T>) {
    for (yi, xi) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yi += a * *xi;
    }
}

struct Workspace<T: Real> {
    k: [Vec<T>; 4],
    stage: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(q: usize) -> Self {
        Workspace { k: std::array::from_fn(|_| vec![T::zero(); q]), stage: vec![T::zero(); q] }
    }
}

/// Stage `i` state `z + h * sum_j a_ij k_j` written into `out`.
#[inline]
fn stage_state<T: Real>(tab: &Tableau<T>, i: usize, h: T, z: &[T], k: &[Vec<T>; 4], out: &mut [T]) {
    out.copy_from_slice(z);
    for j in 0..i {
        let a = tab.a[i][j];
        if a != T::zero() {
            let f = h * a;
            for (o, kj) in out.iter_mut().zip(&k[j]) {
                *o += f * *kj;
            }
        }
    }
}

fn rk_step<S: OdeSystem<T> + ?Sized, T: Real>(
    sys: &S,
    tab: &Tableau<T>,
    t: T,
    h: T,
    z: &[T],
    out: &mut [T],
    ws: &mut Workspace<T>,
) {
    for i in 0..4 {
        stage_state(tab, i, h, z, &ws.k, &mut ws.stage);
        let (k, stage) = (&mut ws.k, &ws.stage);
        sys.rhs(t + tab.c[i] * h, stage, &mut k[i]);
    }
    out.copy_from_slice(z);
    for i in 0..4 {
        let f = h * tab.b[i];
        for (o, ki) in out.iter_mut().zip(&ws.k[i]) {
            *o += f * *ki;
        }
    }
}

/// Integrates `sys` from `z0` across every node of `grid`.
pub fn integrate<S: OdeSystem<T> + ?Sized, T: Real>(
    sys: &S,
    z0: &[T],
    grid: &Arc<TimeGrid<T>>,
) -> Result<Trajectory<T>> {
    let q = sys.dim();
    check_dim("initial state", q, z0.len())?;
    if !all_finite(z0) {
        return Err(Error::Divergence { node: 0, time: to_f64(grid.t0) });
    }
    let tab = Tableau::ralston();
    let n = grid.nodes.len();
    let mut data = vec![T::zero(); n * q];
    data[..q].copy_from_slice(z0);
    let mut ws = Workspace::new(q);
    for s in 0..n - 1 {
        let (t, h) = (grid.nodes[s], grid.nodes[s + 1] - grid.nodes[s]);
        let (done, rest) = data.split_at_mut((s + 1) * q);
        let z = &done[s * q..];
        let out = &mut rest[..q];
        rk_step(sys, &tab, t, h, z, out, &mut ws);
        if !all_finite(out) {
            return Err(Error::Divergence { node: s + 1, time: to_f64(grid.nodes[s + 1]) });
        }
    }
    Ok(Trajectory { grid: grid.clone(), dim: q, data })
}

/// Integrates `sys` from `z0` without storing the trajectory, handing the
/// state at every node to `visit`. Returns the number of steps taken.
pub fn integrate_visit<S, T, F>(sys: &S, z0: &[T], grid: &TimeGrid<T>, mut visit: F) -> Result<usize>
where
    S: OdeSystem<T> + ?Sized,
    T: Real,
    F: FnMut(usize, &[T]),
{
    let q = sys.dim();
    check_dim("initial state", q, z0.len())?;
    if !all_finite(z0) {
        return Err(Error::Divergence { node: 0, time: to_f64(grid.t0) });
    }
    let tab = Tableau::ralston();
    let mut z = z0.to_vec();
    let mut next = vec![T::zero(); q];
    let mut ws = Workspace::new(q);
    visit(0, &z);
    let n = grid.nodes.len();
    for s in 0..n - 1 {
        let (t, h) = (grid.nodes[s], grid.nodes[s + 1] - grid.nodes[s]);
        rk_step(sys, &tab, t, h, &z, &mut next, &mut ws);
        if !all_finite(&next) {
            return Err(Error::Divergence { node: s + 1, time: to_f64(grid.nodes[s + 1]) });
        }
        std::mem::swap(&mut z, &mut next);
        visit(s + 1, &z);
    }
    Ok(n - 1)
}

/// Integrates the state jointly with `S' = F_z S`, `S(t0) = I`, recording `S`
/// at the requested nodes.
pub fn integrate_with_sensitivity<S: OdeSystem<T> + ?Sized, T: Real>(
    sys: &S,
    z0: &[T],
    grid: &Arc<TimeGrid<T>>,
    request_nodes: &[usize],
) -> Result<SensitivityTrajectory<T>> {
    let n = grid.nodes.len();
    if let Some(&bad) = request_nodes.iter().find(|&&i| i >= n) {
        return Err(usage(format!("requested node {bad} outside grid of {n} nodes")));
    }
    let mut wanted = vec![false; n];
    for &i in request_nodes {
        wanted[i] = true;
    }
    let mut sens = BTreeMap::new();
    let base = visit_sensitivity(sys, z0, grid, |node, _z, s| {
        if wanted[node] {
            sens.insert(node, s.clone());
        }
    })?;
    Ok(SensitivityTrajectory { base, sens })
}

/// Forward sensitivity integration calling `visit(node, z, S)` at every node
/// instead of storing the matrices.
pub fn visit_sensitivity<S, T, F>(sys: &S, z0: &[T], grid: &Arc<TimeGrid<T>>, mut visit: F) -> Result<Trajectory<T>>
where
    S: OdeSystem<T> + ?Sized,
    T: Real,
    F: FnMut(usize, &[T], &DMatrix<T>),
{
    let q = sys.dim();
    check_dim("initial state", q, z0.len())?;
    let n = grid.nodes.len();
    if !all_finite(z0) {
        return Err(Error::Divergence { node: 0, time: to_f64(grid.t0) });
    }

    let tab = Tableau::ralston();
    let mut data = vec![T::zero(); n * q];
    data[..q].copy_from_slice(z0);
    let mut ws = Workspace::new(q);
    let mut s_mat = DMatrix::<T>::identity(q, q);
    let mut ks: [DMatrix<T>; 4] = std::array::from_fn(|_| DMatrix::zeros(q, q));
    let mut s_stage = DMatrix::<T>::zeros(q, q);
    let mut jac = DMatrix::<T>::zeros(q, q);
    visit(0, z0, &s_mat);

    for s in 0..n - 1 {
        let (t, h) = (grid.nodes[s], grid.nodes[s + 1] - grid.nodes[s]);
        let (done, rest) = data.split_at_mut((s + 1) * q);
        let z = &done[s * q..];
        for i in 0..4 {
            let ti = t + tab.c[i] * h;
            stage_state(&tab, i, h, z, &ws.k, &mut ws.stage);
            sys.rhs(ti, &ws.stage, &mut ws.k[i]);
            sys.jacobian(ti, &ws.stage, &mut jac);
            s_stage.copy_from(&s_mat);
            for j in 0..i {
                let a = tab.a[i][j];
                if a != T::zero() {
                    axpy_mat(&mut s_stage, h * a, &ks[j]);
                }
            }
            jac.mul_to(&s_stage, &mut ks[i]);
        }
        let out = &mut rest[..q];
        out.copy_from_slice(z);
        for i in 0..4 {
            let f = h * tab.b[i];
            for (o, ki) in out.iter_mut().zip(&ws.k[i]) {
                *o += f * *ki;
            }
            axpy_mat(&mut s_mat, f, &ks[i]);
        }
        if !all_finite(out) || !all_finite(s_mat.as_slice()) {
            return Err(Error::Divergence { node: s + 1, time: to_f64(grid.nodes[s + 1]) });
        }
        visit(s + 1, out, &s_mat);
    }
    Ok(Trajectory { grid: grid.clone(), dim: q, data })
}

/// Integrates the adjoint `chi' = -F_z' chi` backwards from `chi(T) = 0`,
/// adding `impulses[node]` on arrival at each keyed node, and returns
/// `chi(t0)`.
///
/// Each backward step re-runs the forward stages of that step from the stored
/// node state and applies the transposed stage recursion, which makes the
/// result the exact transpose of the forward sensitivity map.
pub fn integrate_adjoint<S: OdeSystem<T> + ?Sized, T: Real>(
    sys: &S,
    traj: &Trajectory<T>,
    impulses: &BTreeMap<usize, DVector<T>>,
) -> Result<DVector<T>> {
    let q = sys.dim();
    check_dim("trajectory state", q, traj.dim())?;
    let grid = &traj.grid;
    let n = grid.nodes.len();
    for (&node, v) in impulses {
        if node >= n {
            return Err(usage(format!("impulse at node {node} outside grid of {n} nodes")));
        }
        check_dim("impulse", q, v.len())?;
    }

    let tab = Tableau::ralston();
    let mut ws = Workspace::new(q);
    let mut stages: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); q]);
    let mut jacs: [DMatrix<T>; 4] = std::array::from_fn(|_| DMatrix::zeros(q, q));
    let mut kbar: [DVector<T>; 4] = std::array::from_fn(|_| DVector::zeros(q));
    let mut zbar_stage = DVector::<T>::zeros(q);

    let mut chi = DVector::<T>::zeros(q);
    if let Some(v) = impulses.get(&(n - 1)) {
        chi += v;
    }
    for s in (0..n - 1).rev() {
        let (t, h) = (grid.nodes[s], grid.nodes[s + 1] - grid.nodes[s]);
        let z = traj.state(s);
        for i in 0..4 {
            let ti = t + tab.c[i] * h;
            stage_state(&tab, i, h, z, &ws.k, &mut stages[i]);
            sys.rhs(ti, &stages[i], &mut ws.k[i]);
            sys.jacobian(ti, &stages[i], &mut jacs[i]);
        }
        for i in 0..4 {
            kbar[i].copy_from(&chi);
            kbar[i] *= h * tab.b[i];
        }
        let mut next = chi.clone();
        for i in (0..4).rev() {
            jacs[i].tr_mul_to(&kbar[i], &mut zbar_stage);
            next += &zbar_stage;
            for j in 0..i {
                let a = tab.a[i][j];
                if a != T::zero() {
                    kbar[j].axpy(h * a, &zbar_stage, T::one());
                }
            }
        }
        chi = next;
        if let Some(v) = impulses.get(&s) {
            chi += v;
        }
        if !all_finite(chi.as_slice()) {
            return Err(Error::Divergence { node: s, time: to_f64(grid.nodes[s]) });
        }
    }
    Ok(chi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{augment, fitzhugh_nagumo};
    use approx::assert_relative_eq;

    /// `z' = A z`.
    struct Linear(DMatrix<f64>);

    impl OdeSystem<f64> for Linear {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn rhs(&self, _t: f64, z: &[f64], dz: &mut [f64]) {
            let v = &self.0 * DVector::from_column_slice(z);
            dz.copy_from_slice(v.as_slice());
        }
        fn jacobian(&self, _t: f64, _z: &[f64], jac: &mut DMatrix<f64>) {
            jac.copy_from(&self.0);
        }
    }

    struct LinearF32(f32);

    impl OdeSystem<f32> for LinearF32 {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f32, z: &[f32], dz: &mut [f32]) {
            dz[0] = self.0 * z[0];
        }
        fn jacobian(&self, _t: f32, _z: &[f32], jac: &mut DMatrix<f32>) {
            jac[(0, 0)] = self.0;
        }
    }

    fn grid(t_end: f64, h: f64) -> Arc<TimeGrid<f64>> {
        Arc::new(build_grid((0.0, t_end), h, &[]).unwrap())
    }

    /// Scaling-and-squaring with a truncated Taylor series.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = a.abs().row_sum().max();
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scaled = a / 2f64.powi(s);
        let n = a.nrows();
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn tableau_consistency() {
        for i in 0..4 {
            let row: f64 = ralston::A[i].iter().sum();
            assert_relative_eq!(row, ralston::C[i], epsilon = 1e-15);
        }
        assert_relative_eq!(ralston::B.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // published eight-digit values
        let published = [0.17476028, -0.55148066, 1.20553560, 0.17118478];
        for (b, p) in ralston::B.iter().zip(published) {
            assert!((b - p).abs() < 1e-8);
        }
        assert!((ralston::C[2] - 0.45573725).abs() < 1e-8);
        assert!((ralston::A[3][1] + 3.05096516).abs() < 1e-7);
        assert!((ralston::A[3][2] - 3.83286476).abs() < 1e-8);
    }

    #[test]
    fn grid_with_observations_on_nodes() {
        let g = build_grid((0.0, 1.0), 0.5, &[0.5, 1.0]).unwrap();
        assert_eq!(g.nodes, vec![0.0, 0.5, 1.0]);
        assert_eq!(g.obs_index, vec![1, 2]);
    }

    #[test]
    fn grid_follows_dense_observations() {
        let obs: Vec<f64> = (1..=5000).map(|i| i as f64 * 0.01).collect();
        let g = build_grid((0.0, 50.0), 1.0, &obs).unwrap();
        assert_eq!(g.nodes.len(), 5001);
        for w in g.nodes.windows(2) {
            assert!((w[1] - w[0] - 0.01).abs() < 1e-9);
        }
        assert_eq!(g.obs_index, (1..=5000).collect::<Vec<_>>());
    }

    #[test]
    fn empty_observations_give_uniform_grid() {
        let g = build_grid((0.0, 2.0), 0.25, &[]).unwrap();
        assert_eq!(g.nodes.len(), 9);
        for w in g.nodes.windows(2) {
            assert!((w[1] - w[0] - 0.25f64).abs() <= 1e-12 * 2.0);
        }
        assert_eq!(*g.nodes.last().unwrap(), 2.0);
        let g = build_grid((0.0, 1.0), 0.3, &[]).unwrap();
        assert_eq!(g.nodes.len(), 5);
        assert_eq!(*g.nodes.last().unwrap(), 1.0);
    }

    #[test]
    fn off_grid_observation_inserts_node_and_snaps_near_ones() {
        let g = build_grid((0.0, 2.0), 1.0, &[0.5, 1.5 + 1e-12]).unwrap();
        assert_eq!(g.nodes, vec![0.0, 0.5, 1.5 + 1e-12, 2.0]);
        let g = build_grid((0.0, 2.0), 1.0, &[1.0 + 1e-12]).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.obs_index, vec![1]);
        let g = build_grid((0.0, 2.0), 0.5, &[0.7, 0.7, 2.0]).unwrap();
        assert_eq!(g.obs_index[0], g.obs_index[1]);
        assert_eq!(g.nodes[g.obs_index[2]], 2.0);
    }

    #[test]
    fn grid_errors() {
        assert!(build_grid((0.0, 1.0), 0.0, &[]).is_err());
        assert!(build_grid((0.0, 1.0), -1.0, &[]).is_err());
        assert!(build_grid((0.0, 1.0), 0.1, &[1.5]).is_err());
        assert!(build_grid((0.0, 1.0), 0.1, &[0.5, 0.2]).is_err());
    }

    #[test]
    fn constant_dynamics_stay_constant() {
        let sys = Linear(DMatrix::zeros(2, 2));
        let tr = integrate(&sys, &[1.5, -2.0], &grid(3.0, 0.1)).unwrap();
        assert!(tr.states().all(|s| s == [1.5, -2.0]));
    }

    #[test]
    fn one_step_reproduces_quartic_taylor_polynomial() {
        let sys = Linear(DMatrix::from_element(1, 1, 1.0));
        for h in [0.1, 0.5, 1.0] {
            let tr = integrate(&sys, &[1.0], &grid(h, h)).unwrap();
            let expect = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
            assert_relative_eq!(tr.state(1)[0], expect, epsilon = 1e-15);
        }
        let tr =
            integrate(&LinearF32(1.0), &[1.0f32], &Arc::new(build_grid((0.0f32, 0.5), 0.5, &[]).unwrap())).unwrap();
        let h = 0.5f32;
        assert!((tr.state(1)[0] - (1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0)).abs() < 1e-6);
    }

    #[test]
    fn fourth_order_convergence_on_fitzhugh_nagumo() {
        let m = fitzhugh_nagumo::<f64>();
        let sys = augment(&m);
        let z0 = m.reference_initial();
        let end = |h: f64| {
            let tr = integrate(&sys, z0.as_slice(), &grid(50.0, h)).unwrap();
            DVector::from_column_slice(tr.state(tr.len() - 1))
        };
        let reference = end(0.001);
        let errs: Vec<f64> = [0.2, 0.1, 0.05, 0.025].iter().map(|&h| (end(h) - &reference).norm()).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((3.5..=4.5).contains(&order), "order {order} from {errs:?}");
        }
    }

    #[test]
    fn sensitivity_matches_matrix_exponential() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.5, 1.0, 0.0, -1.0, -0.2, 0.3, 0.1, 0.0, -0.8]);
        let sys = Linear(a.clone());
        let g = grid(2.0, 0.01);
        let last = g.nodes.len() - 1;
        let st = integrate_with_sensitivity(&sys, &[1.0, 0.0, 0.0], &g, &[0, last]).unwrap();
        assert_eq!(st.sens[&0], DMatrix::identity(3, 3));
        let expected = expm(&(a * 2.0));
        let err = (&st.sens[&last] - &expected).norm() / expected.norm();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sensitivity_matches_finite_differences_on_fitzhugh_nagumo() {
        let m = fitzhugh_nagumo::<f64>();
        let sys = augment(&m);
        let z0 = m.reference_initial();
        let g = grid(50.0, 0.05);
        let last = g.nodes.len() - 1;
        let st = integrate_with_sensitivity(&sys, z0.as_slice(), &g, &[last]).unwrap();
        for j in 0..sys.dim() {
            let step = 1e-6 * z0[j].abs().max(1.0);
            let (mut zp, mut zm) = (z0.clone(), z0.clone());
            zp[j] += step;
            zm[j] -= step;
            let ep = integrate(&sys, zp.as_slice(), &g).unwrap();
            let em = integrate(&sys, zm.as_slice(), &g).unwrap();
            let fd = (DVector::from_column_slice(ep.state(last)) - DVector::from_column_slice(em.state(last)))
                / (2.0 * step);
            let col = st.sens[&last].column(j).into_owned();
            let err = (&col - &fd).norm() / col.norm().max(1e-12);
            assert!(err < 1e-5, "column {j}: {err}");
        }
    }

    #[test]
    fn adjoint_without_impulses_is_zero() {
        let sys = Linear(DMatrix::from_element(2, 2, 0.3));
        let g = grid(1.0, 0.1);
        let tr = integrate(&sys, &[1.0, 1.0], &g).unwrap();
        let chi = integrate_adjoint(&sys, &tr, &BTreeMap::new()).unwrap();
        assert_eq!(chi, DVector::zeros(2));
    }

    #[test]
    fn scalar_adjoint_matches_closed_form() {
        let a = -0.7;
        let sys = Linear(DMatrix::from_element(1, 1, a));
        let g = grid(2.0, 0.001);
        let tr = integrate(&sys, &[1.0], &g).unwrap();
        let mut imp = BTreeMap::new();
        imp.insert(g.nodes.len() - 1, DVector::from_element(1, 3.0));
        let chi = integrate_adjoint(&sys, &tr, &imp).unwrap();
        assert_relative_eq!(chi[0], (a * 2.0f64).exp() * 3.0, max_relative = 1e-8);
    }

    #[test]
    fn adjoint_is_transpose_of_forward_sensitivity() {
        let m = fitzhugh_nagumo::<f64>();
        let sys = augment(&m);
        let z0 = m.reference_initial();
        let obs: Vec<f64> = (1..=20).map(|i| i as f64 * 2.5).collect();
        let g = Arc::new(build_grid((0.0, 50.0), 1.0, &obs).unwrap());
        let st = integrate_with_sensitivity(&sys, z0.as_slice(), &g, &g.obs_index).unwrap();
        let mut imp = BTreeMap::new();
        let mut fwd = DVector::zeros(6);
        for (k, &node) in g.obs_index.iter().enumerate() {
            let v = DVector::from_fn(6, |i, _| ((k * 7 + i * 3) % 5) as f64 - 2.0);
            fwd += st.sens[&node].transpose() * &v;
            imp.insert(node, v);
        }
        let adj = integrate_adjoint(&sys, &st.base, &imp).unwrap();
        assert!((&fwd - &adj).norm() <= 1e-10 * (1.0 + fwd.norm()));
    }

    #[test]
    fn impulse_outside_grid_is_rejected() {
        let sys = Linear(DMatrix::from_element(1, 1, 1.0));
        let g = grid(1.0, 0.5);
        let tr = integrate(&sys, &[1.0], &g).unwrap();
        let mut imp = BTreeMap::new();
        imp.insert(10, DVector::from_element(1, 1.0));
        assert!(integrate_adjoint(&sys, &tr, &imp).is_err());
    }

    #[test]
    fn divergence_reports_node() {
        let sys = Linear(DMatrix::from_element(1, 1, 800.0));
        let err = integrate(&sys, &[1.0], &grid(100.0, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn integration_is_bitwise_deterministic() {
        let m = fitzhugh_nagumo::<f64>();
        let sys = augment(&m);
        let g = grid(50.0, 0.1);
        let a = integrate(&sys, m.reference_initial().as_slice(), &g).unwrap();
        let b = integrate(&sys, m.reference_initial().as_slice(), &g).unwrap();
        assert!(a.states().zip(b.states()).all(|(x, y)| x == y));
    }
}
