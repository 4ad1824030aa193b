//! Experiment configuration: a sectioned `key = value` text format.
//!
//! ```text
//! [experiment]
//! model = fitzhugh_nagumo
//!
//! [solver]
//! eta0 = 0.003
//! ```
//!
//! Lines starting with `#` are comments. Keys are addressed as
//! `section.key` in overrides. Model-dependent settings left unset take the
//! model's defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modify::ModificationKind;
use crate::observe::DerivativeMode;
use crate::optimize::{Damping, KsgdForm, ScheduleKind};

/// Built-in defaults for one model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDefaults {
    pub period: f64,
    pub h: f64,
    pub gd_eta0: f64,
    pub sgd_eta0: f64,
}

/// Observation period, integration step and hand-tuned step sizes per model.
/// Step sizes are divided by the number of observations a solver sees.
pub fn model_defaults(model: &str) -> Result<ModelDefaults> {
    match model {
        "fitzhugh_nagumo" => Ok(ModelDefaults { period: 0.01, h: 1.0, gd_eta0: 3e-3, sgd_eta0: 1e-3 }),
        "lotka_volterra" => Ok(ModelDefaults { period: 0.005, h: 0.5, gd_eta0: 1e-4, sgd_eta0: 3e-5 }),
        "van_der_pol" => Ok(ModelDefaults { period: 0.001, h: 0.1, gd_eta0: 1e-3, sgd_eta0: 3e-5 }),
        other => Err(Error::Usage(format!("unknown model '{other}'"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SolverKind {
    Gd,
    #[default]
    Gn,
    Sgd,
    Ksgd,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Gd => "gd",
            SolverKind::Gn => "gn",
            SolverKind::Sgd => "sgd",
            SolverKind::Ksgd => "ksgd",
        }
    }
}

impl FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(SolverKind::Gd),
            "gn" => Ok(SolverKind::Gn),
            "sgd" => Ok(SolverKind::Sgd),
            "ksgd" => Ok(SolverKind::Ksgd),
            other => Err(Error::Usage(format!("unknown solver '{other}' (expected gd, gn, sgd or ksgd)"))),
        }
    }
}

/// Starting point for solver runs.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Theta0Policy {
    Reference,
    /// Reference scaled componentwise by `1 + scale * N(0, 1)`.
    #[default]
    Perturbed,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverSettings {
    pub name: SolverKind,
    pub eta0: Option<f64>,
    pub sgd_eta0: Option<f64>,
    pub schedule: ScheduleKind,
    pub alpha: f64,
    pub k0: f64,
    pub lambda: Damping,
    pub sampler: String,
    /// Sampling interval for stochastic solvers; 0 derives it from `modify.potp`.
    pub batch_kappa: usize,
    pub form: KsgdForm,
    pub mode: DerivativeMode,
    pub tol: f64,
    pub max_iter: usize,
    pub budget: f64,
    pub theta0: Theta0Policy,
    pub theta0_scale: f64,
    pub theta0_seed: u64,
    pub sampling_seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            name: SolverKind::Gn,
            eta0: None,
            sgd_eta0: None,
            schedule: ScheduleKind::Constant,
            alpha: 1.0,
            k0: 100.0,
            lambda: Damping::Auto,
            sampler: "systematic".into(),
            batch_kappa: 0,
            form: KsgdForm::Auto,
            mode: DerivativeMode::Forward,
            tol: 1e-10,
            max_iter: 0,
            budget: 1.0,
            theta0: Theta0Policy::Perturbed,
            theta0_scale: 0.5,
            theta0_seed: 1,
            sampling_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: String,
    pub seed: u64,
    pub estimate_initial_state: bool,
    pub output: PathBuf,
    pub jobs: usize,

    pub period: Option<f64>,
    pub sigma: f64,
    /// Observed state components; empty means all.
    pub observed: Vec<usize>,

    pub h: Option<f64>,

    pub modify_kind: Option<ModificationKind>,
    pub schemes: Vec<ModificationKind>,
    pub potp: f64,
    pub modify_seed: u64,
    pub reweight: bool,

    pub solver: SolverSettings,

    pub ksgd_samplers: Vec<String>,
    pub stochastic_record_every: usize,

    pub table1_potps: Vec<f64>,
    pub reference_max_iter: usize,
    pub reference_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "fitzhugh_nagumo".into(),
            seed: 1,
            estimate_initial_state: true,
            output: PathBuf::from("out"),
            jobs: 1,
            period: None,
            sigma: 0.1,
            observed: Vec::new(),
            h: None,
            modify_kind: None,
            schemes: ModificationKind::ALL.to_vec(),
            potp: 0.01,
            modify_seed: 1,
            reweight: false,
            solver: SolverSettings::default(),
            ksgd_samplers: vec!["systematic".into()],
            stochastic_record_every: 10,
            table1_potps: vec![0.01, 0.1],
            reference_max_iter: 100,
            reference_tol: 1e-12,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the named model.
    pub fn for_model(model: &str) -> Result<Self> {
        model_defaults(model)?;
        Ok(ExperimentConfig { model: model.to_string(), ..Default::default() })
    }

    fn defaults(&self) -> Result<ModelDefaults> {
        model_defaults(&self.model)
    }

    pub fn period(&self) -> Result<f64> {
        Ok(self.period.unwrap_or(self.defaults()?.period))
    }

    pub fn h(&self) -> Result<f64> {
        Ok(self.h.unwrap_or(self.defaults()?.h))
    }

    pub fn gd_eta0(&self) -> Result<f64> {
        Ok(self.solver.eta0.unwrap_or(self.defaults()?.gd_eta0))
    }

    pub fn sgd_eta0(&self) -> Result<f64> {
        Ok(self.solver.sgd_eta0.unwrap_or(self.defaults()?.sgd_eta0))
    }

    /// Checks cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        let defaults = self.defaults()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Usage(format!("{name} must be positive, got {v}")))
            }
        };
        positive("observations.period", self.period.unwrap_or(defaults.period))?;
        positive("grid.h", self.h.unwrap_or(defaults.h))?;
        positive("observations.sigma", self.sigma)?;
        if !(self.potp > 0.0 && self.potp <= 1.0) {
            return Err(Error::Usage(format!("modify.potp must lie in (0, 1], got {}", self.potp)));
        }
        if self.table1_potps.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Usage("table1.potps must lie in (0, 1]".into()));
        }
        if self.solver.budget < 0.0 || (self.solver.budget == 0.0 && self.solver.max_iter == 0) {
            return Err(Error::Usage("solver.budget or solver.max_iter must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Usage("experiment.jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Digest of every setting that determines the data and the reference
    /// minimizer.
    pub fn reference_hash(&self) -> Result<String> {
        let mut text = String::new();
        let _ = write!(
            text,
            "model={};seed={};x0={};period={:e};sigma={:e};observed={:?};h={:e};max_iter={};tol={:e};lambda={:?};mode={:?}",
            self.model,
            self.seed,
            self.estimate_initial_state,
            self.period()?,
            self.sigma,
            self.observed,
            self.h()?,
            self.reference_max_iter,
            self.reference_tol,
            self.solver.lambda,
            self.solver.mode,
        );
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// One documented configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
    /// A valid value, used by tests.
    pub example: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc {
        key: "experiment.model",
        default: "fitzhugh_nagumo",
        doc: "fitzhugh_nagumo, lotka_volterra or van_der_pol",
        example: "van_der_pol",
    },
    KeyDoc { key: "experiment.seed", default: "1", doc: "observation noise seed", example: "7" },
    KeyDoc {
        key: "experiment.estimate_initial_state",
        default: "true",
        doc: "estimate x0 together with the parameters",
        example: "false",
    },
    KeyDoc { key: "experiment.output", default: "out", doc: "output directory", example: "results" },
    KeyDoc { key: "experiment.jobs", default: "1", doc: "worker threads for independent runs", example: "2" },
    KeyDoc {
        key: "observations.period",
        default: "per model",
        doc: "time between observations (FN 0.01, LV 0.005, VdP 0.001)",
        example: "0.02",
    },
    KeyDoc {
        key: "observations.sigma",
        default: "0.1",
        doc: "noise standard deviation, V = sigma^2 I",
        example: "0.2",
    },
    KeyDoc {
        key: "observations.observed",
        default: "all",
        doc: "observed state components, e.g. 0 or 0,1",
        example: "0",
    },
    KeyDoc { key: "grid.h", default: "per model", doc: "integration step (FN 1, LV 0.5, VdP 0.1)", example: "0.5" },
    KeyDoc {
        key: "modify.kind",
        default: "none",
        doc: "modification for solve/modify: none or a scheme name",
        example: "systematic_random",
    },
    KeyDoc {
        key: "modify.schemes",
        default: "all",
        doc: "schemes used by table1 and race",
        example: "accumulate_upper,simple_random",
    },
    KeyDoc { key: "modify.potp", default: "0.01", doc: "fraction of observation times kept", example: "0.1" },
    KeyDoc { key: "modify.seed", default: "1", doc: "seed for random modification schemes", example: "3" },
    KeyDoc {
        key: "modify.reweight",
        default: "false",
        doc: "multiply averaged observations' losses by their member counts",
        example: "true",
    },
    KeyDoc { key: "solver.name", default: "gn", doc: "solver for solve: gd, gn, sgd or ksgd", example: "ksgd" },
    KeyDoc {
        key: "solver.eta0",
        default: "per model",
        doc: "gradient descent step size (divided by the observation count)",
        example: "0.01",
    },
    KeyDoc {
        key: "solver.sgd_eta0",
        default: "per model",
        doc: "SGD step size (divided by the observation count)",
        example: "0.001",
    },
    KeyDoc {
        key: "solver.schedule",
        default: "constant",
        doc: "constant or polynomial: eta0 / (1 + k/k0)^alpha",
        example: "polynomial",
    },
    KeyDoc { key: "solver.alpha", default: "1", doc: "polynomial schedule exponent in (0.5, 1]", example: "0.75" },
    KeyDoc { key: "solver.k0", default: "100", doc: "polynomial schedule offset", example: "10" },
    KeyDoc { key: "solver.lambda", default: "auto", doc: "Gauss-Newton damping: auto or a number", example: "0.001" },
    KeyDoc {
        key: "solver.sampler",
        default: "systematic",
        doc: "systematic, simple, stratified or full",
        example: "simple",
    },
    KeyDoc {
        key: "solver.batch_kappa",
        default: "0",
        doc: "sampling interval; 0 uses round(1/modify.potp)",
        example: "50",
    },
    KeyDoc {
        key: "solver.form",
        default: "auto",
        doc: "kSGD update: auto, information or covariance",
        example: "covariance",
    },
    KeyDoc { key: "solver.mode", default: "forward", doc: "derivatives: forward or adjoint", example: "adjoint" },
    KeyDoc { key: "solver.tol", default: "1e-10", doc: "Gauss-Newton relative step tolerance", example: "1e-8" },
    KeyDoc { key: "solver.max_iter", default: "0", doc: "iteration cap, 0 for none", example: "20" },
    KeyDoc { key: "solver.budget", default: "1", doc: "solver seconds per run, 0 for none", example: "0.5" },
    KeyDoc {
        key: "solver.theta0",
        default: "perturbed",
        doc: "reference, perturbed or a comma-separated vector",
        example: "1,2,3",
    },
    KeyDoc {
        key: "solver.theta0_scale",
        default: "0.5",
        doc: "relative perturbation of the reference",
        example: "0.1",
    },
    KeyDoc { key: "solver.theta0_seed", default: "1", doc: "seed of the perturbation", example: "2" },
    KeyDoc { key: "solver.sampling_seed", default: "1", doc: "seed of the per-iteration samples", example: "2" },
    KeyDoc {
        key: "race.ksgd_samplers",
        default: "systematic",
        doc: "kSGD samplers raced (systematic, simple, stratified)",
        example: "systematic,simple",
    },
    KeyDoc {
        key: "race.stochastic_record_every",
        default: "10",
        doc: "recording cadence of SGD and kSGD",
        example: "5",
    },
    KeyDoc { key: "table1.potps", default: "0.01,0.1", doc: "fractions kept in the scheme study", example: "0.05" },
    KeyDoc {
        key: "reference.max_iter",
        default: "100",
        doc: "Gauss-Newton iterations for the reference minimizer",
        example: "50",
    },
    KeyDoc {
        key: "reference.tol",
        default: "1e-12",
        doc: "Gauss-Newton tolerance for the reference minimizer",
        example: "1e-10",
    },
];

/// Key listing for `--help`.
pub fn help_text() -> String {
    let mut out = String::from("Configuration keys (section.key = value):\n");
    for k in KEYS {
        let _ = writeln!(out, "  {:<34} {}  [default: {}]", k.key, k.doc, k.default);
    }
    out
}

fn parse<V: FromStr>(value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("invalid value '{value}'"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{value}'")),
    }
}

fn parse_list<V: FromStr>(value: &str) -> std::result::Result<Vec<V>, String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Assigns one `section.key`.
pub fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let s = &mut cfg.solver;
    match key {
        "experiment.model" => {
            model_defaults(value).map_err(err)?;
            cfg.model = value.to_string();
        }
        "experiment.seed" => cfg.seed = parse(value)?,
        "experiment.estimate_initial_state" => cfg.estimate_initial_state = parse_bool(value)?,
        "experiment.output" => cfg.output = PathBuf::from(value),
        "experiment.jobs" => cfg.jobs = parse(value)?,
        "observations.period" => cfg.period = Some(parse(value)?),
        "observations.sigma" => cfg.sigma = parse(value)?,
        "observations.observed" => cfg.observed = if value == "all" { Vec::new() } else { parse_list(value)? },
        "grid.h" => cfg.h = Some(parse(value)?),
        "modify.kind" => cfg.modify_kind = if value == "none" { None } else { Some(value.parse().map_err(err)?) },
        "modify.schemes" => {
            cfg.schemes = if value == "all" {
                ModificationKind::ALL.to_vec()
            } else {
                value.split(',').map(|v| v.trim().parse().map_err(err)).collect::<std::result::Result<_, _>>()?
            }
        }
        "modify.potp" => cfg.potp = parse(value)?,
        "modify.seed" => cfg.modify_seed = parse(value)?,
        "modify.reweight" => cfg.reweight = parse_bool(value)?,
        "solver.name" => s.name = value.parse().map_err(err)?,
        "solver.eta0" => s.eta0 = Some(parse(value)?),
        "solver.sgd_eta0" => s.sgd_eta0 = Some(parse(value)?),
        "solver.schedule" => {
            s.schedule = match value {
                "constant" => ScheduleKind::Constant,
                "polynomial" => ScheduleKind::Polynomial,
                _ => return Err(format!("expected constant or polynomial, got '{value}'")),
            }
        }
        "solver.alpha" => s.alpha = parse(value)?,
        "solver.k0" => s.k0 = parse(value)?,
        "solver.lambda" => s.lambda = if value == "auto" { Damping::Auto } else { Damping::Fixed(parse(value)?) },
        "solver.sampler" => {
            if !["systematic", "simple", "stratified", "full"].contains(&value) {
                return Err(format!("unknown sampler '{value}'"));
            }
            s.sampler = value.to_string();
        }
        "solver.batch_kappa" => s.batch_kappa = parse(value)?,
        "solver.form" => s.form = value.parse().map_err(err)?,
        "solver.mode" => s.mode = value.parse().map_err(err)?,
        "solver.tol" => s.tol = parse(value)?,
        "solver.max_iter" => s.max_iter = parse(value)?,
        "solver.budget" => s.budget = parse(value)?,
        "solver.theta0" => {
            s.theta0 = match value {
                "reference" => Theta0Policy::Reference,
                "perturbed" => Theta0Policy::Perturbed,
                _ => Theta0Policy::Explicit(parse_list(value)?),
            }
        }
        "solver.theta0_scale" => s.theta0_scale = parse(value)?,
        "solver.theta0_seed" => s.theta0_seed = parse(value)?,
        "solver.sampling_seed" => s.sampling_seed = parse(value)?,
        "race.ksgd_samplers" => {
            let list: Vec<String> = value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if let Some(bad) = list.iter().find(|v| !["systematic", "simple", "stratified"].contains(&v.as_str())) {
                return Err(format!("unknown sampler '{bad}'"));
            }
            cfg.ksgd_samplers = list;
        }
        "race.stochastic_record_every" => cfg.stochastic_record_every = parse(value)?,
        "table1.potps" => cfg.table1_potps = parse_list(value)?,
        "reference.max_iter" => cfg.reference_max_iter = parse(value)?,
        "reference.tol" => cfg.reference_tol = parse(value)?,
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

/// Parses configuration text, then applies `overrides` (`section.key=value`).
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| Error::Config { line: line_no, message };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| fail(format!("malformed section header '{line}'")))?.trim();
            if !KEYS.iter().any(|k| k.key.split('.').next() == Some(name)) {
                return Err(fail(format!("unknown section '{name}'")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| fail(format!("expected 'key = value', got '{line}'")))?;
        let sect = section.as_deref().ok_or_else(|| fail("key outside of a section".into()))?;
        let full = format!("{sect}.{}", key.trim());
        set_key(&mut cfg, &full, value.trim()).map_err(|m| fail(format!("{full}: {m}")))?;
    }
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `section.key=value` overrides; errors report line 0.
pub fn apply_overrides(cfg: &mut ExperimentConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| Error::Config { line: 0, message: format!("override '{o}' is not 'section.key=value'") })?;
        set_key(cfg, key.trim(), value.trim())
            .map_err(|m| Error::Config { line: 0, message: format!("override {}: {m}", key.trim()) })?;
    }
    Ok(())
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, overrides)
}
