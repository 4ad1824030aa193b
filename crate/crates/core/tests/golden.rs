//! Simulated observations must not drift between releases: a change in the
//! RNG streams, the integrator or the noise transform shows up here first.

use std::path::PathBuf;

use hfda::config::ExperimentConfig;
use hfda::harness::build_problem;
use hfda::io::read_observations;

#[test]
fn fitzhugh_nagumo_observations_match_golden_file() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/fitzhugh_nagumo_period0.5_seed11.csv");
    let golden = read_observations::<f64>(&path).unwrap();
    assert_eq!(golden.model, "fitzhugh_nagumo");
    assert_eq!(golden.seed, 11);

    let mut cfg = ExperimentConfig::for_model("fitzhugh_nagumo").unwrap();
    cfg.period = Some(0.5);
    cfg.seed = 11;
    let problem = build_problem::<f64>(&cfg).unwrap();
    assert_eq!(problem.data.len(), 100);
    // The CSV stores shortest round-trip decimals, so equality is exact.
    assert_eq!(problem.data, golden.data);
}
