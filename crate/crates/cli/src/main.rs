use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hfda::check::{corrupt_jacobian, run_checks};
use hfda::config::{help_text, parse_config, parse_config_str, ExperimentConfig};
use hfda::dynamics::{ModelSpec, MODEL_NAMES};
use hfda::harness::{
    build_problem, initial_iterate, load_or_compute_reference, modified_problem, replay_trace, run_budget_race,
    run_solver, run_table1_study,
};
use hfda::io::{meta_path, read_observations, write_meta, write_observations, write_trace_csv};
use hfda::modify::{ModificationKind, ModificationScheme};
use hfda::observe::ObservationSet;

#[derive(Parser)]
#[command(name = "hfda", version, about = "Parameter estimation for ODE models from high-frequency observations", after_long_help = help_text())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (`[section]` headers and `key = value` lines)
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set solver.eta0=0.01`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides experiment.output)
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Worker threads for independent runs (overrides experiment.jobs)
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy observations and write them as CSV
    Simulate,
    /// Apply a modification scheme to an observation file
    Modify {
        /// Scheme name, e.g. systematic_random
        #[arg(long = "modify")]
        kind: Option<ModificationKind>,
        /// Fraction of observation times kept
        #[arg(long)]
        potp: Option<f64>,
        /// Seed of the random schemes
        #[arg(long)]
        seed: Option<u64>,
        /// Observation CSV; simulated from the config when omitted
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the configured solver once and write its error trace
    Solve,
    /// Derivative, unbiasedness and kSGD self-checks
    Check {
        /// Shift the state Jacobian by this amount (negative control)
        #[arg(long, hide = true)]
        corrupt_jacobian: Option<f64>,
    },
    /// Relative errors of every scheme at the configured fractions
    Table1 {
        /// Run for all three models
        #[arg(long)]
        all_models: bool,
    },
    /// Budget race of GD, SGD, GN and kSGD variants
    Race {
        /// Run for all three models
        #[arg(long)]
        all_models: bool,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path, &common.overrides).with_context(|| format!("reading {}", path.display()))?,
        None => parse_config_str("", &common.overrides)?,
    };
    if let Some(out) = &common.output {
        cfg.output = out.clone();
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn per_model(cfg: &ExperimentConfig, all: bool) -> Result<Vec<ExperimentConfig>> {
    if !all {
        return Ok(vec![cfg.clone()]);
    }
    MODEL_NAMES
        .iter()
        .map(|m| {
            let mut c = cfg.clone();
            hfda::config::set_key(&mut c, "experiment.model", m).map_err(anyhow::Error::msg)?;
            Ok(c)
        })
        .collect()
}

fn observations_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join(format!("observations_{}.csv", cfg.model))
}

fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let problem = build_problem::<f64>(cfg)?;
    fs::create_dir_all(&cfg.output)?;
    let path = observations_path(cfg);
    write_observations(&path, &problem.data, &cfg.model, cfg.seed)?;
    println!("simulate {}: {} observations -> {}", cfg.model, problem.data.len(), path.display());
    Ok(())
}

fn modify(
    cfg: &ExperimentConfig,
    kind: Option<ModificationKind>,
    potp: Option<f64>,
    seed: Option<u64>,
    input: Option<&Path>,
) -> Result<()> {
    let kind = match kind.or(cfg.modify_kind) {
        Some(k) => k,
        None => bail!("no scheme given: pass --modify or set modify.kind"),
    };
    let potp = potp.unwrap_or(cfg.potp);
    let seed = seed.unwrap_or(cfg.modify_seed);
    let (data, model, data_seed): (ObservationSet<f64>, String, u64) = match input {
        Some(path) => {
            let loaded = read_observations(path).with_context(|| format!("reading {}", path.display()))?;
            (loaded.data, loaded.model, loaded.seed)
        }
        None => (build_problem::<f64>(cfg)?.data, cfg.model.clone(), cfg.seed),
    };
    let scheme = ModificationScheme::for_data(kind, &data, potp, seed)?;
    let mut out = scheme.apply(&data)?;
    out.apply_weights = cfg.reweight;
    fs::create_dir_all(&cfg.output)?;
    let path = cfg.output.join(format!("modified_{model}_{}.csv", kind.name()));
    write_observations(&path, &out, &model, data_seed)?;
    println!("modify {model} {kind} potp={potp}: {} -> {} observations -> {}", data.len(), out.len(), path.display());
    Ok(())
}

fn solve(cfg: &ExperimentConfig) -> Result<()> {
    let problem = build_problem::<f64>(cfg)?;
    let dir = cfg.output.join("solve");
    let reference = load_or_compute_reference(cfg, &problem, &dir)?;
    let target = match cfg.modify_kind {
        Some(kind) => modified_problem(&problem, kind, cfg.potp, cfg.modify_seed)?,
        None => problem.clone(),
    };
    let theta0 = initial_iterate(cfg, &problem)?;
    let kind = cfg.solver.name;
    let (trace, mut meta) = run_solver(cfg, &target, &theta0, kind, &cfg.solver.sampler).with_context(|| {
        if cfg.modify_kind.is_some() && cfg.solver.batch_kappa == 0 {
            format!(
                "{} on {} modified observations; set solver.batch_kappa to sample them",
                kind.name(),
                target.data.len()
            )
        } else {
            format!("running {}", kind.name())
        }
    })?;
    let (errors, truncated) = replay_trace(&trace, &problem, &reference);
    let scheme = cfg.modify_kind.map_or("none", |k| k.name());
    let path = dir.join(format!("{}_{}_{}.csv", cfg.model, kind.name(), scheme));
    write_trace_csv(&path, &errors)?;
    meta.push(("scheme".into(), scheme.into()));
    meta.push(("final_theta".into(), format!("{:?}", trace.final_theta().as_slice())));
    meta.push(("replay_truncated".into(), truncated.to_string()));
    write_meta(&meta_path(&path), &meta)?;
    let final_error = errors.last().map_or(f64::NAN, |r| r.1);
    println!(
        "solve {} {} scheme={scheme}: {} iterations, {}, final relative error {:.6e} -> {}",
        cfg.model,
        kind.name(),
        trace.iterations,
        trace.terminated_by,
        final_error,
        path.display()
    );
    println!("  theta = {:?}", trace.final_theta().as_slice());
    Ok(())
}

fn check(cfg: &ExperimentConfig, corrupt: Option<f64>) -> Result<bool> {
    let mut model = ModelSpec::<f64>::by_name(&cfg.model)?;
    if let Some(delta) = corrupt {
        model = corrupt_jacobian(&model, delta);
    }
    let results = run_checks(cfg, model)?;
    for r in &results {
        println!("{r}");
    }
    Ok(results.iter().all(|r| r.passed()))
}

fn table1(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_table1_study::<f64>(cfg)?;
    fs::create_dir_all(&cfg.output)?;
    let path = cfg.output.join(format!("table1_{}.csv", cfg.model));
    report.write_csv(&path)?;
    println!("table1 {} (reference objective {:.6e}) -> {}", cfg.model, report.reference_objective, path.display());
    for e in &report.entries {
        let err = e.relative_error.map_or("failed".to_string(), |v| format!("{v:.6e}"));
        println!("  {:<20} potp={:<5} n={:<6} {err}", e.scheme.map_or("none", |k| k.name()), e.potp, e.observations);
    }
    Ok(())
}

fn race(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.output.join("race");
    let report = run_budget_race::<f64>(cfg, Some(&out))?;
    for run in &report.runs {
        println!(
            "race {} {:<26} iterations={:<7} {:<10} final_error={:.6e}{}",
            cfg.model,
            run.entry.label,
            run.trace.iterations,
            run.trace.terminated_by.to_string(),
            run.final_error(),
            if run.replay_truncated { " (replay stopped at a non-finite error)" } else { "" }
        );
    }
    println!("race {}: traces in {}", cfg.model, out.join(&cfg.model).display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Simulate => simulate(&cfg)?,
        Command::Modify { kind, potp, seed, input } => modify(&cfg, kind, potp, seed, input.as_deref())?,
        Command::Solve => solve(&cfg)?,
        Command::Check { corrupt_jacobian } => return check(&cfg, corrupt_jacobian),
        Command::Table1 { all_models } => {
            for c in per_model(&cfg, all_models)? {
                table1(&c)?;
            }
        }
        Command::Race { all_models } => {
            for c in per_model(&cfg, all_models)? {
                race(&c)?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
