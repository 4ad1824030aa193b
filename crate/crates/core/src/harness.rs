//! Experiment orchestration: data generation, the scheme study, the budget
//! race and trace replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};

use crate::config::{ExperimentConfig, SolverKind, Theta0Policy};
use crate::dynamics::ModelSpec;
use crate::error::{check_dim, usage, Error, Result};
use crate::io::{meta_path, read_meta, write_meta, write_trace_csv};
use crate::modify::{kappa_from_potp, ModificationKind, ModificationScheme};
use crate::observe::{simulate_observations, LinearGaussian, Problem};
use crate::optimize::{run_gauss_newton, run_gd, run_ksgd, run_sgd, RunOptions, RunTrace, StepSchedule, Termination};
use crate::rng::{standard_normal, stream, Stream};
use crate::scalar::{c, to_f64, Real};
use crate::stochastic::{GridPolicy, Sampler};

/// `H` selecting the configured state components and `V = sigma^2 I`.
pub fn observation_model<T: Real>(cfg: &ExperimentConfig, d: usize) -> Result<LinearGaussian<T>> {
    let rows: Vec<usize> = if cfg.observed.is_empty() { (0..d).collect() } else { cfg.observed.clone() };
    if let Some(&bad) = rows.iter().find(|&&r| r >= d) {
        return Err(usage(format!("observed component {bad} out of range for a {d}-dimensional state")));
    }
    let n = rows.len();
    let h = DMatrix::from_fn(n, d, |i, j| if rows[i] == j { T::one() } else { T::zero() });
    let s = c::<T>(cfg.sigma);
    LinearGaussian::new(h, DMatrix::from_diagonal_element(n, n, s * s))
}

/// Model, simulated data and the full-data problem described by `cfg`.
pub fn build_problem<T: Real>(cfg: &ExperimentConfig) -> Result<Problem<T>> {
    let model = ModelSpec::<T>::by_name(&cfg.model)?;
    let obs = observation_model(cfg, model.state_dim())?;
    let data = simulate_observations(&model, &model.reference_initial(), obs, c(cfg.period()?), cfg.seed)?;
    let mut problem = Problem::new(model, data, c(cfg.h()?), cfg.estimate_initial_state)?;
    problem.data.apply_weights = cfg.reweight;
    Ok(problem)
}

/// Starting point per the configured policy.
pub fn initial_iterate<T: Real>(cfg: &ExperimentConfig, problem: &Problem<T>) -> Result<DVector<T>> {
    let reference = problem.reference();
    match &cfg.solver.theta0 {
        Theta0Policy::Reference => Ok(reference),
        Theta0Policy::Perturbed => {
            let mut rng = stream(cfg.solver.theta0_seed, Stream::Initialization);
            let scale = cfg.solver.theta0_scale;
            Ok(reference.map(|v| v * c::<T>(1.0 + scale * standard_normal(&mut rng))))
        }
        Theta0Policy::Explicit(values) => {
            check_dim("explicit theta0", problem.dim(), values.len())?;
            Ok(DVector::from_iterator(values.len(), values.iter().map(|&v| c::<T>(v))))
        }
    }
}

/// `(G(theta_mod) - G(theta_hat)) / G(theta_hat)` from objective values.
pub fn relative_error_from_values(g_mod: f64, g_hat: f64) -> Result<f64> {
    if !(g_hat > 0.0) || !g_hat.is_finite() {
        return Err(usage(format!("reference objective must be positive, got {g_hat}")));
    }
    Ok((g_mod - g_hat) / g_hat)
}

/// Relative error of `theta_mod` against `theta_nomod` under the
/// unmodified-data objective.
pub fn relative_error<T: Real>(problem: &Problem<T>, theta_mod: &DVector<T>, theta_nomod: &DVector<T>) -> Result<f64> {
    let g_hat = to_f64(problem.objective(theta_nomod)?);
    let g_mod = to_f64(problem.objective(theta_mod)?);
    relative_error_from_values(g_mod, g_hat)
}

/// Minimizer of the unmodified problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference<T: Real> {
    pub theta: DVector<T>,
    pub objective: T,
    pub iterations: usize,
    pub hash: String,
}

impl<T: Real> Reference<T> {
    pub fn relative_error(&self, problem: &Problem<T>, theta: &DVector<T>) -> Result<f64> {
        relative_error_from_values(to_f64(problem.objective(theta)?), to_f64(self.objective))
    }
}

fn reference_options(cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        budget: 0.0,
        max_iter: cfg.reference_max_iter,
        tol: cfg.reference_tol,
        mode: cfg.solver.mode,
        grid: GridPolicy::Shared,
        ..Default::default()
    }
}

/// Gauss-Newton from the reference parameter on the unmodified data.
pub fn compute_reference<T: Real>(cfg: &ExperimentConfig, problem: &Problem<T>) -> Result<Reference<T>> {
    let trace = run_gauss_newton(problem, &problem.reference(), cfg.solver.lambda, &reference_options(cfg))?;
    if trace.terminated_by == Termination::Divergence {
        return Err(usage("reference fit diverged"));
    }
    let theta = trace.final_theta().clone();
    Ok(Reference {
        objective: problem.objective(&theta)?,
        theta,
        iterations: trace.iterations,
        hash: cfg.reference_hash()?,
    })
}

/// Reads the cached reference in `dir` when its hash matches, otherwise
/// computes and stores it. Values are stored as exact bit patterns.
pub fn load_or_compute_reference<T: Real>(
    cfg: &ExperimentConfig,
    problem: &Problem<T>,
    dir: &Path,
) -> Result<Reference<T>> {
    let path = dir.join(format!("reference_{}.txt", cfg.model));
    let hash = cfg.reference_hash()?;
    if path.exists() {
        let meta = read_meta(&path)?;
        if meta.get("hash") == Some(&hash) {
            let bits = |s: &str| -> Option<f64> { u64::from_str_radix(s, 16).ok().map(f64::from_bits) };
            let theta: Option<Vec<f64>> =
                meta.get("theta_bits").map(|s| s.split_whitespace().map(bits).collect()).unwrap_or(None);
            let obj = meta.get("objective_bits").and_then(|s| bits(s));
            let iters = meta.get("iterations").and_then(|s| s.parse().ok());
            if let (Some(theta), Some(obj), Some(iterations)) = (theta, obj, iters) {
                if theta.len() == problem.dim() {
                    return Ok(Reference {
                        theta: DVector::from_iterator(theta.len(), theta.into_iter().map(c::<T>)),
                        objective: c(obj),
                        iterations,
                        hash,
                    });
                }
            }
        }
    }
    let reference = compute_reference(cfg, problem)?;
    fs::create_dir_all(dir)?;
    let hex = |v: T| format!("{:016x}", to_f64(v).to_bits());
    write_meta(
        &path,
        &[
            ("hash".into(), hash),
            ("model".into(), cfg.model.clone()),
            ("iterations".into(), reference.iterations.to_string()),
            ("theta".into(), reference.theta.iter().map(|v| to_f64(*v).to_string()).collect::<Vec<_>>().join(" ")),
            ("objective".into(), to_f64(reference.objective).to_string()),
            ("theta_bits".into(), reference.theta.iter().map(|v| hex(*v)).collect::<Vec<_>>().join(" ")),
            ("objective_bits".into(), hex(reference.objective)),
        ],
    )?;
    Ok(reference)
}

/// The problem on data modified by `kind` at fraction `potp`.
pub fn modified_problem<T: Real>(
    problem: &Problem<T>,
    kind: ModificationKind,
    potp: f64,
    seed: u64,
) -> Result<Problem<T>> {
    let scheme = ModificationScheme::for_data(kind, &problem.data, potp, seed)?;
    problem.with_data(scheme.apply(&problem.data)?)
}

// ---------------------------------------------------------------------------
// Scheme study

#[derive(Clone, Debug, PartialEq)]
pub struct StudyEntry {
    /// `None` is the unmodified problem.
    pub scheme: Option<ModificationKind>,
    pub potp: f64,
    /// `None` when the fit failed.
    pub relative_error: Option<f64>,
    pub observations: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativeErrorReport {
    pub reference_objective: f64,
    pub entries: Vec<StudyEntry>,
}

impl RelativeErrorReport {
    pub fn get(&self, scheme: Option<ModificationKind>, potp: f64) -> Option<&StudyEntry> {
        self.entries.iter().find(|e| e.scheme == scheme && (scheme.is_none() || e.potp == potp))
    }

    /// Writes `scheme,potp,relative_error`; failed fits read `failed`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scheme", "potp", "relative_error"])?;
        for e in &self.entries {
            w.write_record([
                e.scheme.map_or("none", |k| k.name()).to_string(),
                e.potp.to_string(),
                e.relative_error.map_or("failed".to_string(), |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits every configured scheme at every configured fraction with
/// Gauss-Newton started at the reference parameter.
pub fn scheme_study<T: Real>(
    cfg: &ExperimentConfig,
    problem: &Problem<T>,
    reference: &Reference<T>,
) -> Result<RelativeErrorReport> {
    let g_hat = to_f64(reference.objective);
    let mut entries = vec![StudyEntry {
        scheme: None,
        potp: 1.0,
        relative_error: Some(reference.relative_error(problem, &reference.theta)?),
        observations: problem.data.len(),
        iterations: reference.iterations,
    }];
    for &potp in &cfg.table1_potps {
        for &kind in &cfg.schemes {
            let modified = modified_problem(problem, kind, potp, cfg.modify_seed)?;
            let fit = run_gauss_newton(&modified, &problem.reference(), cfg.solver.lambda, &reference_options(cfg));
            let (relative_error, iterations) = match fit {
                Ok(trace) if trace.terminated_by != Termination::Divergence => {
                    let err = problem
                        .objective(trace.final_theta())
                        .ok()
                        .map(|g| relative_error_from_values(to_f64(g), g_hat))
                        .transpose()?;
                    (err.filter(|e| e.is_finite()), trace.iterations)
                }
                Ok(trace) => (None, trace.iterations),
                Err(Error::Solve { .. }) | Err(Error::Divergence { .. }) => (None, 0),
                Err(e) => return Err(e),
            };
            entries.push(StudyEntry {
                scheme: Some(kind),
                potp,
                relative_error,
                observations: modified.data.len(),
                iterations,
            });
        }
    }
    Ok(RelativeErrorReport { reference_objective: g_hat, entries })
}

/// The scheme study on data generated from `cfg`.
pub fn run_table1_study<T: Real>(cfg: &ExperimentConfig) -> Result<RelativeErrorReport> {
    let problem = build_problem::<T>(cfg)?;
    let reference = compute_reference(cfg, &problem)?;
    scheme_study(cfg, &problem, &reference)
}

// ---------------------------------------------------------------------------
// Solver runs

/// Options and step schedule for one solver run on a dataset whose loss
/// weights total `n_terms`.
fn solver_setup(cfg: &ExperimentConfig, kind: SolverKind, n_terms: f64) -> Result<(StepSchedule, RunOptions)> {
    let s = &cfg.solver;
    let eta0 = match kind {
        SolverKind::Sgd => cfg.sgd_eta0()?,
        _ => cfg.gd_eta0()?,
    };
    let schedule = match s.schedule {
        crate::optimize::ScheduleKind::Constant => StepSchedule::constant(eta0),
        crate::optimize::ScheduleKind::Polynomial => StepSchedule::polynomial(eta0, s.k0, s.alpha)?,
    }
    .scaled(n_terms);
    let stochastic = matches!(kind, SolverKind::Sgd | SolverKind::Ksgd);
    let opts = RunOptions {
        budget: s.budget,
        max_iter: s.max_iter,
        record_every: if stochastic { cfg.stochastic_record_every.max(1) } else { 1 },
        mode: s.mode,
        grid: GridPolicy::Sampled,
        seed: s.sampling_seed,
        tol: if kind == SolverKind::Gn { s.tol } else { 0.0 },
    };
    Ok((schedule, opts))
}

fn total_weight<T: Real>(problem: &Problem<T>) -> f64 {
    (0..problem.data.len()).map(|i| to_f64(problem.data.loss_weight(i))).sum()
}

fn sampler_for(cfg: &ExperimentConfig, name: &str, n: usize) -> Result<Sampler> {
    if cfg.solver.batch_kappa > 0 && name != "full" && name != "simple" {
        let kappa = cfg.solver.batch_kappa;
        return Ok(match name {
            "systematic" => Sampler::Systematic { kappa },
            "stratified" => Sampler::Stratified { kappa },
            other => return Err(usage(format!("unknown sampler '{other}'"))),
        });
    }
    if cfg.solver.batch_kappa > 0 && name == "simple" {
        return Ok(Sampler::Simple { m: n.div_ceil(cfg.solver.batch_kappa) });
    }
    Sampler::from_name(name, cfg.potp, n)
}

/// Runs one solver on `problem` with the configured settings.
pub fn run_solver<T: Real>(
    cfg: &ExperimentConfig,
    problem: &Problem<T>,
    theta0: &DVector<T>,
    kind: SolverKind,
    sampler: &str,
) -> Result<(RunTrace<T>, Vec<(String, String)>)> {
    let (schedule, opts) = solver_setup(cfg, kind, total_weight(problem))?;
    let mut meta = vec![("solver".to_string(), kind.name().to_string())];
    let trace = match kind {
        SolverKind::Gd => {
            meta.push(("eta0".into(), schedule.eta0.to_string()));
            run_gd(problem, theta0, &schedule, &opts)?
        }
        SolverKind::Sgd => {
            let s = sampler_for(cfg, sampler, problem.data.len())?;
            meta.push(("sampler".into(), format!("{s:?}")));
            meta.push(("eta0".into(), schedule.eta0.to_string()));
            run_sgd(problem, theta0, &schedule, &s, &opts)?
        }
        SolverKind::Gn => {
            meta.push(("lambda".into(), format!("{:?}", cfg.solver.lambda)));
            meta.push(("tol".into(), opts.tol.to_string()));
            run_gauss_newton(problem, theta0, cfg.solver.lambda, &opts)?
        }
        SolverKind::Ksgd => {
            let s = sampler_for(cfg, sampler, problem.data.len())?;
            meta.push(("sampler".into(), format!("{s:?}")));
            meta.push(("form".into(), format!("{:?}", cfg.solver.form)));
            run_ksgd(problem, theta0, &s, cfg.solver.form, &opts)?
        }
    };
    meta.extend([
        ("schedule".into(), format!("{:?}", schedule.kind)),
        ("mode".into(), format!("{:?}", opts.mode)),
        ("budget".into(), opts.budget.to_string()),
        ("max_iter".into(), opts.max_iter.to_string()),
        ("sampling_seed".into(), opts.seed.to_string()),
        ("record_every".into(), opts.record_every.to_string()),
        ("terminated_by".into(), trace.terminated_by.to_string()),
        ("iterations".into(), trace.iterations.to_string()),
        ("rk_steps".into(), trace.rk_steps.to_string()),
        ("records".into(), trace.records.len().to_string()),
    ]);
    Ok((trace, meta))
}

/// `(time, relative error)` at every recorded iterate, measured with the
/// unmodified-data objective. Stops at the first iterate whose error is not
/// finite and reports whether it did.
pub fn replay_trace<T: Real>(
    trace: &RunTrace<T>,
    problem: &Problem<T>,
    reference: &Reference<T>,
) -> (Vec<(f64, f64)>, bool) {
    let mut rows = Vec::with_capacity(trace.records.len());
    for rec in &trace.records {
        match reference.relative_error(problem, &rec.theta) {
            Ok(e) if e.is_finite() => rows.push((rec.wall_clock, e)),
            _ => return (rows, true),
        }
    }
    (rows, false)
}

// ---------------------------------------------------------------------------
// Budget race

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RaceGroup {
    FirstOrder,
    SecondOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaceEntry {
    pub label: String,
    pub group: RaceGroup,
    pub solver: SolverKind,
    pub scheme: Option<ModificationKind>,
    pub sampler: Option<String>,
}

/// Gradient descent and Gauss-Newton on each scheme and on the unmodified
/// data, plus SGD with systematic sampling and kSGD with each configured
/// sampler.
pub fn race_entries(cfg: &ExperimentConfig) -> Vec<RaceEntry> {
    let mut out = Vec::new();
    for (group, det, sto) in [
        (RaceGroup::FirstOrder, SolverKind::Gd, SolverKind::Sgd),
        (RaceGroup::SecondOrder, SolverKind::Gn, SolverKind::Ksgd),
    ] {
        for &kind in &cfg.schemes {
            out.push(RaceEntry {
                label: format!("{}_{}", det.name(), kind.name()),
                group,
                solver: det,
                scheme: Some(kind),
                sampler: None,
            });
        }
        out.push(RaceEntry { label: format!("{}_none", det.name()), group, solver: det, scheme: None, sampler: None });
        let samplers: Vec<String> =
            if sto == SolverKind::Sgd { vec!["systematic".into()] } else { cfg.ksgd_samplers.clone() };
        for s in samplers {
            out.push(RaceEntry {
                label: format!("{}_{}", sto.name(), s),
                group,
                solver: sto,
                scheme: None,
                sampler: Some(s),
            });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct RaceRun<T: Real> {
    pub entry: RaceEntry,
    pub trace: RunTrace<T>,
    pub errors: Vec<(f64, f64)>,
    pub replay_truncated: bool,
    pub meta: Vec<(String, String)>,
}

impl<T: Real> RaceRun<T> {
    /// Error at the last replayable iterate.
    pub fn final_error(&self) -> f64 {
        match self.errors.last() {
            Some(&(_, e)) if !self.replay_truncated => e,
            _ => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RaceReport<T: Real> {
    pub model: String,
    pub reference: Reference<T>,
    pub runs: Vec<RaceRun<T>>,
}

impl<T: Real> RaceReport<T> {
    pub fn run(&self, label: &str) -> Option<&RaceRun<T>> {
        self.runs.iter().find(|r| r.entry.label == label)
    }
}

/// Runs one race entry.
pub fn run_race_entry<T: Real>(
    cfg: &ExperimentConfig,
    entry: &RaceEntry,
    problem: &Problem<T>,
    reference: &Reference<T>,
    theta0: &DVector<T>,
) -> Result<RaceRun<T>> {
    let modified;
    let target = match entry.scheme {
        Some(kind) => {
            modified = modified_problem(problem, kind, cfg.potp, cfg.modify_seed)?;
            &modified
        }
        None => problem,
    };
    let sampler = entry.sampler.as_deref().unwrap_or("systematic");
    let (trace, solver_meta) = match run_solver(cfg, target, theta0, entry.solver, sampler) {
        Ok(r) => r,
        Err(Error::Solve { context, condition, .. }) => {
            // a singular first system leaves only the starting point
            let trace = RunTrace {
                records: vec![crate::optimize::TraceRecord {
                    wall_clock: 0.0,
                    k: 0,
                    theta: theta0.clone(),
                    objective: None,
                }],
                budget: cfg.solver.budget,
                terminated_by: Termination::Divergence,
                iterations: 0,
                rk_steps: 0,
            };
            let meta = vec![("solve_failure".into(), format!("{context} (condition {condition:.3e})"))];
            (trace, meta)
        }
        Err(e) => return Err(e),
    };
    let (errors, replay_truncated) = replay_trace(&trace, problem, reference);
    let mut meta = vec![
        ("model".to_string(), cfg.model.clone()),
        ("label".into(), entry.label.clone()),
        ("scheme".into(), entry.scheme.map_or("none", |k| k.name()).to_string()),
        (
            "potp".into(),
            if entry.scheme.is_some() || entry.sampler.is_some() { cfg.potp.to_string() } else { "1".into() },
        ),
        ("observations".into(), target.data.len().to_string()),
        ("data_seed".into(), cfg.seed.to_string()),
        ("modify_seed".into(), cfg.modify_seed.to_string()),
        ("theta0_seed".into(), cfg.solver.theta0_seed.to_string()),
        ("theta0_scale".into(), cfg.solver.theta0_scale.to_string()),
        ("reference_hash".into(), reference.hash.clone()),
    ];
    meta.extend(solver_meta);
    meta.push(("replay_rows".into(), errors.len().to_string()));
    meta.push(("replay_truncated".into(), replay_truncated.to_string()));
    meta.push(("final_error".into(), errors.last().map_or("nan".to_string(), |(_, e)| e.to_string())));
    Ok(RaceRun { entry: entry.clone(), trace, errors, replay_truncated, meta })
}

/// Runs every race entry under the configured budget, replays the traces
/// and, when `out` is given, writes `<out>/<model>/<label>.csv` with a
/// `.meta` sidecar.
pub fn run_budget_race<T: Real>(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RaceReport<T>> {
    let problem = build_problem::<T>(cfg)?;
    let reference = match out {
        Some(dir) => load_or_compute_reference(cfg, &problem, dir)?,
        None => compute_reference(cfg, &problem)?,
    };
    let theta0 = initial_iterate(cfg, &problem)?;
    let entries = race_entries(cfg);
    let runs = run_parallel(cfg.jobs, &entries, |e| run_race_entry(cfg, e, &problem, &reference, &theta0))?;
    if let Some(dir) = out {
        let dir = dir.join(&cfg.model);
        fs::create_dir_all(&dir)?;
        for run in &runs {
            let path = dir.join(format!("{}.csv", run.entry.label));
            write_trace_csv(&path, &run.errors)?;
            write_meta(&meta_path(&path), &run.meta)?;
        }
    }
    Ok(RaceReport { model: cfg.model.clone(), reference, runs })
}

/// Output path of a race trace.
pub fn trace_path(out: &Path, model: &str, label: &str) -> PathBuf {
    out.join(model).join(format!("{label}.csv"))
}

/// Maps `f` over `items` on `jobs` worker threads, keeping input order.
pub fn run_parallel<I: Sync, O: Send, F>(jobs: usize, items: &[I], f: F) -> Result<Vec<O>>
where
    F: Fn(&I) -> Result<O> + Sync,
{
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<O>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots poisoned").into_iter().map(|r| r.expect("every item processed")).collect()
}

/// The systematic-sampling fraction as an interval, for reporting.
pub fn race_kappa(cfg: &ExperimentConfig) -> Result<usize> {
    kappa_from_potp(cfg.potp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(model: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_model(model).unwrap();
        cfg.period = Some(match model {
            "fitzhugh_nagumo" => 0.1,
            "lotka_volterra" => 0.05,
            _ => 0.02,
        });
        cfg
    }

    #[test]
    fn relative_error_arithmetic() {
        assert_eq!(relative_error_from_values(2.0, 1.0).unwrap(), 1.0);
        assert_eq!(relative_error_from_values(3.5, 3.5).unwrap(), 0.0);
        assert!(relative_error_from_values(1.0, 0.0).is_err());
        let cfg = small_cfg("lotka_volterra");
        let p = build_problem::<f64>(&cfg).unwrap();
        let r = compute_reference(&cfg, &p).unwrap();
        assert_eq!(relative_error(&p, &r.theta, &r.theta).unwrap(), 0.0);
        assert!(relative_error(&p, &p.reference().map(|v| v * 1.1), &r.theta).unwrap() > 0.0);
    }

    #[test]
    fn replay_of_reference_is_zero() {
        let cfg = small_cfg("van_der_pol");
        let p = build_problem::<f64>(&cfg).unwrap();
        let r = compute_reference(&cfg, &p).unwrap();
        let trace = RunTrace {
            records: (0..3)
                .map(|k| crate::optimize::TraceRecord {
                    wall_clock: k as f64,
                    k,
                    theta: r.theta.clone(),
                    objective: None,
                })
                .collect(),
            budget: 1.0,
            terminated_by: Termination::MaxIter,
            iterations: 2,
            rk_steps: 0,
        };
        let (rows, truncated) = replay_trace(&trace, &p, &r);
        assert!(!truncated);
        assert_eq!(rows, vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let single = RunTrace { records: trace.records[..1].to_vec(), ..trace.clone() };
        assert_eq!(replay_trace(&single, &p, &r).0.len(), 1);
    }

    #[test]
    fn replay_matches_direct_objective() {
        let mut cfg = small_cfg("fitzhugh_nagumo");
        cfg.solver.budget = 0.0;
        cfg.solver.max_iter = 5;
        let p = build_problem::<f64>(&cfg).unwrap();
        let r = compute_reference(&cfg, &p).unwrap();
        let theta0 = initial_iterate(&cfg, &p).unwrap();
        let (trace, _) = run_solver(&cfg, &p, &theta0, SolverKind::Gd, "systematic").unwrap();
        let (rows, _) = replay_trace(&trace, &p, &r);
        for (rec, (t, e)) in trace.records.iter().zip(&rows) {
            let direct = (p.objective(&rec.theta).unwrap() - r.objective) / r.objective;
            assert_eq!(*e, direct);
            assert_eq!(*t, rec.wall_clock);
        }
    }

    #[test]
    fn reference_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg("lotka_volterra");
        let p = build_problem::<f64>(&cfg).unwrap();
        let a = load_or_compute_reference(&cfg, &p, dir.path()).unwrap();
        let b = load_or_compute_reference(&cfg, &p, dir.path()).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 99;
        let p2 = build_problem::<f64>(&other).unwrap();
        let c2 = load_or_compute_reference(&other, &p2, dir.path()).unwrap();
        assert_ne!(c2.hash, a.hash);
    }

    #[test]
    fn race_entry_counts() {
        let cfg = ExperimentConfig::default();
        let entries = race_entries(&cfg);
        assert_eq!(entries.iter().filter(|e| e.group == RaceGroup::FirstOrder).count(), 8);
        assert_eq!(entries.iter().filter(|e| e.group == RaceGroup::SecondOrder).count(), 8);
        let mut both = cfg.clone();
        both.ksgd_samplers = vec!["systematic".into(), "simple".into()];
        assert_eq!(race_entries(&both).len(), 17);
    }

    #[test]
    fn perturbed_start_is_seeded() {
        let cfg = small_cfg("fitzhugh_nagumo");
        let p = build_problem::<f64>(&cfg).unwrap();
        let a = initial_iterate(&cfg, &p).unwrap();
        assert_eq!(a, initial_iterate(&cfg, &p).unwrap());
        assert_ne!(a, p.reference());
        let mut e = cfg.clone();
        e.solver.theta0 = Theta0Policy::Explicit(vec![1.0; 3]);
        assert!(initial_iterate(&e, &p).is_err());
    }

    #[test]
    fn observed_subset_builds_selection_operator() {
        let mut cfg = small_cfg("van_der_pol");
        cfg.observed = vec![1];
        let m = observation_model::<f64>(&cfg, 2).unwrap();
        assert_eq!(m.h(), &DMatrix::from_row_slice(1, 2, &[0.0, 1.0]));
        cfg.observed = vec![2];
        assert!(observation_model::<f64>(&cfg, 2).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..20).collect();
        let out = run_parallel(3, &items, |&i| Ok(i * i)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
    }
}
