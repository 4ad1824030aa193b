//! Data modification: accumulation, averaging and sampling of observations.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{usage, Error, Result};
use crate::observe::ObservationSet;
use crate::rng::{stream, Stream};
use crate::scalar::{c, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModificationKind {
    AccumulateUpper,
    AccumulateNearest,
    AverageUpper,
    AverageNearest,
    SimpleRandom,
    SystematicRandom,
}

impl ModificationKind {
    pub const ALL: [ModificationKind; 6] = [
        ModificationKind::AccumulateUpper,
        ModificationKind::AccumulateNearest,
        ModificationKind::AverageUpper,
        ModificationKind::AverageNearest,
        ModificationKind::SimpleRandom,
        ModificationKind::SystematicRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModificationKind::AccumulateUpper => "accumulate_upper",
            ModificationKind::AccumulateNearest => "accumulate_nearest",
            ModificationKind::AverageUpper => "average_upper",
            ModificationKind::AverageNearest => "average_nearest",
            ModificationKind::SimpleRandom => "simple_random",
            ModificationKind::SystematicRandom => "systematic_random",
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, ModificationKind::SimpleRandom | ModificationKind::SystematicRandom)
    }
}

impl fmt::Display for ModificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModificationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModificationKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = ModificationKind::ALL.iter().map(|k| k.name()).collect();
            usage(format!("unknown modification '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// A configured modification. Accumulation and averaging carry their target
/// times; sampling carries the target fraction and seed.
#[derive(Clone, Debug, PartialEq)]
pub enum ModificationScheme<T: Real> {
    AccumulateUpper { predetermined: Vec<T> },
    AccumulateNearest { predetermined: Vec<T> },
    AverageUpper { predetermined: Vec<T> },
    AverageNearest { predetermined: Vec<T> },
    SimpleRandom { potp: f64, seed: u64 },
    SystematicRandom { potp: f64, seed: u64 },
}

impl<T: Real> ModificationScheme<T> {
    /// Builds a scheme of the given kind for `data` at fraction `potp`.
    ///
    /// Target times for accumulation and averaging are every `kappa`-th
    /// observation time (`kappa = round(1/potp)`), plus the last observation
    /// time when `N` is not a multiple of `kappa`.
    pub fn for_data(kind: ModificationKind, data: &ObservationSet<T>, potp: f64, seed: u64) -> Result<Self> {
        let predetermined = || -> Result<Vec<T>> {
            let kappa = kappa_from_potp(potp)?;
            let n = data.len();
            if kappa > n {
                return Err(usage(format!("potp {potp} keeps fewer than one of {n} observations")));
            }
            let mut times: Vec<T> = (1..=n / kappa).map(|j| data.times[j * kappa - 1]).collect();
            let last = data.times[n - 1];
            if times.last() != Some(&last) {
                times.push(last);
            }
            Ok(times)
        };
        Ok(match kind {
            ModificationKind::AccumulateUpper => {
                ModificationScheme::AccumulateUpper { predetermined: predetermined()? }
            }
            ModificationKind::AccumulateNearest => {
                ModificationScheme::AccumulateNearest { predetermined: predetermined()? }
            }
            ModificationKind::AverageUpper => ModificationScheme::AverageUpper { predetermined: predetermined()? },
            ModificationKind::AverageNearest => ModificationScheme::AverageNearest { predetermined: predetermined()? },
            ModificationKind::SimpleRandom => ModificationScheme::SimpleRandom { potp, seed },
            ModificationKind::SystematicRandom => ModificationScheme::SystematicRandom { potp, seed },
        })
    }

    pub fn kind(&self) -> ModificationKind {
        match self {
            ModificationScheme::AccumulateUpper { .. } => ModificationKind::AccumulateUpper,
            ModificationScheme::AccumulateNearest { .. } => ModificationKind::AccumulateNearest,
            ModificationScheme::AverageUpper { .. } => ModificationKind::AverageUpper,
            ModificationScheme::AverageNearest { .. } => ModificationKind::AverageNearest,
            ModificationScheme::SimpleRandom { .. } => ModificationKind::SimpleRandom,
            ModificationScheme::SystematicRandom { .. } => ModificationKind::SystematicRandom,
        }
    }

    pub fn apply(&self, data: &ObservationSet<T>) -> Result<ObservationSet<T>> {
        match self {
            ModificationScheme::AccumulateUpper { predetermined } => accumulate_upper(data, predetermined),
            ModificationScheme::AccumulateNearest { predetermined } => accumulate_nearest(data, predetermined),
            ModificationScheme::AverageUpper { predetermined } => average_upper(data, predetermined),
            ModificationScheme::AverageNearest { predetermined } => average_nearest(data, predetermined),
            ModificationScheme::SimpleRandom { potp, seed } => simple_random_sample(data, *potp, *seed),
            ModificationScheme::SystematicRandom { potp, seed } => systematic_random_sample(data, *potp, *seed),
        }
    }
}

/// `round(1/potp)`, rounding half away from zero.
pub fn kappa_from_potp(potp: f64) -> Result<usize> {
    if !(potp > 0.0 && potp <= 1.0) {
        return Err(usage(format!("potp must lie in (0, 1], got {potp}")));
    }
    Ok((1.0 / potp).round() as usize)
}

fn check_targets<T: Real>(data: &ObservationSet<T>, predetermined: &[T]) -> Result<()> {
    if predetermined.is_empty() {
        return Err(usage("no predetermined times"));
    }
    if predetermined.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(usage("predetermined times must be strictly increasing"));
    }
    let last_obs = data.times[data.len() - 1];
    if last_obs > predetermined[predetermined.len() - 1] {
        return Err(usage("observation later than the last predetermined time"));
    }
    Ok(())
}

/// Target index for each observation: the first target at or after it.
fn upper_assignment<T: Real>(times: &[T], targets: &[T]) -> Vec<usize> {
    let mut j = 0;
    times
        .iter()
        .map(|&t| {
            while targets[j] < t {
                j += 1;
            }
            j
        })
        .collect()
}

/// Target index for each observation: the closest target, ties going up.
fn nearest_assignment<T: Real>(times: &[T], targets: &[T]) -> Vec<usize> {
    upper_assignment(times, targets)
        .into_iter()
        .zip(times)
        .map(|(j, &t)| if j > 0 && t - targets[j - 1] < targets[j] - t { j - 1 } else { j })
        .collect()
}

fn accumulate<T: Real>(data: &ObservationSet<T>, targets: &[T], assign: &[usize]) -> Result<ObservationSet<T>> {
    let mut out = ObservationSet::with_weights(
        assign.iter().map(|&j| targets[j]).collect(),
        data.values.clone(),
        data.weights.clone(),
        data.model.clone(),
    )?;
    out.apply_weights = data.apply_weights;
    Ok(out)
}

fn average<T: Real>(data: &ObservationSet<T>, targets: &[T], assign: &[usize]) -> Result<ObservationSet<T>> {
    let (mut times, mut values, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    while start < assign.len() {
        let j = assign[start];
        let end = start + assign[start..].iter().take_while(|&&a| a == j).count();
        let mut sum = DVector::zeros(data.obs_dim());
        let mut weight = T::zero();
        for i in start..end {
            sum += &data.values[i];
            weight += data.weights[i];
        }
        times.push(targets[j]);
        values.push(sum / c::<T>((end - start) as f64));
        weights.push(weight);
        start = end;
    }
    let mut out = ObservationSet::with_weights(times, values, weights, data.model.clone())?;
    out.apply_weights = data.apply_weights;
    Ok(out)
}

/// Moves every observation in `(p_{j-1}, p_j]` to `p_j`.
pub fn accumulate_upper<T: Real>(data: &ObservationSet<T>, predetermined: &[T]) -> Result<ObservationSet<T>> {
    check_targets(data, predetermined)?;
    accumulate(data, predetermined, &upper_assignment(&data.times, predetermined))
}

/// Moves every observation to its nearest predetermined time.
pub fn accumulate_nearest<T: Real>(data: &ObservationSet<T>, predetermined: &[T]) -> Result<ObservationSet<T>> {
    check_targets(data, predetermined)?;
    accumulate(data, predetermined, &nearest_assignment(&data.times, predetermined))
}

/// One mean observation per interval `(p_{j-1}, p_j]`, placed at `p_j`, with
/// weight equal to the members' total weight.
pub fn average_upper<T: Real>(data: &ObservationSet<T>, predetermined: &[T]) -> Result<ObservationSet<T>> {
    check_targets(data, predetermined)?;
    average(data, predetermined, &upper_assignment(&data.times, predetermined))
}

/// Like [`average_upper`] with nearest-time grouping.
pub fn average_nearest<T: Real>(data: &ObservationSet<T>, predetermined: &[T]) -> Result<ObservationSet<T>> {
    check_targets(data, predetermined)?;
    average(data, predetermined, &nearest_assignment(&data.times, predetermined))
}

/// Keeps `round(potp * N)` observations chosen uniformly without replacement.
pub fn simple_random_sample<T: Real>(data: &ObservationSet<T>, potp: f64, seed: u64) -> Result<ObservationSet<T>> {
    if !(potp > 0.0 && potp <= 1.0) {
        return Err(usage(format!("potp must lie in (0, 1], got {potp}")));
    }
    let n = data.len();
    let m = (potp * n as f64).round() as usize;
    if m == 0 {
        return Err(usage(format!("potp {potp} keeps no observations out of {n}")));
    }
    let mut rng = stream(seed, Stream::Modification);
    let mut keep = rand::seq::index::sample(&mut rng, n, m).into_vec();
    keep.sort_unstable();
    data.subset(&keep)
}

/// Keeps every `kappa`-th observation from a uniform random offset,
/// `kappa = round(1/potp)`.
pub fn systematic_random_sample<T: Real>(data: &ObservationSet<T>, potp: f64, seed: u64) -> Result<ObservationSet<T>> {
    let kappa = kappa_from_potp(potp)?;
    let n = data.len();
    if kappa > n {
        return Err(usage(format!("sampling interval {kappa} exceeds the {n} observations")));
    }
    let mut rng = stream(seed, Stream::Modification);
    let offset = rng.random_range(0..kappa);
    let keep: Vec<usize> = (offset..n).step_by(kappa).collect();
    data.subset(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observe::LinearGaussian;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn ten() -> ObservationSet<f64> {
        let m = LinearGaussian::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        ObservationSet::new(
            (1..=10).map(|i| i as f64).collect(),
            (1..=10).map(|i| DVector::from_element(1, i as f64)).collect(),
            m,
        )
        .unwrap()
    }

    fn uniform(n: usize) -> ObservationSet<f64> {
        let m = LinearGaussian::identity(2, 0.1).unwrap();
        ObservationSet::new(
            (1..=n).map(|i| i as f64 * 0.01).collect(),
            (1..=n).map(|i| DVector::from_vec(vec![i as f64, -(i as f64)])).collect(),
            m,
        )
        .unwrap()
    }

    #[test]
    fn accumulate_upper_figure_example() {
        let out = accumulate_upper(&ten(), &[5.0, 10.0]).unwrap();
        let expect: Vec<f64> = [5.0; 5].into_iter().chain([10.0; 5]).collect();
        assert_eq!(out.times, expect);
        assert_eq!(out.values, ten().values);
    }

    #[test]
    fn accumulate_nearest_figure_example() {
        let out = accumulate_nearest(&ten(), &[5.0, 10.0]).unwrap();
        let expect: Vec<f64> = [5.0; 7].into_iter().chain([10.0; 3]).collect();
        assert_eq!(out.times, expect);
    }

    #[test]
    fn nearest_ties_go_up() {
        let out = accumulate_nearest(&ten(), &[4.0, 6.0, 10.0]).unwrap();
        assert_eq!(out.times[4], 6.0);
        assert_eq!(out.times[7], 10.0);
    }

    #[test]
    fn accumulation_degenerate_cases() {
        let d = ten();
        assert_eq!(accumulate_upper(&d, &d.times).unwrap(), d);
        assert_eq!(accumulate_nearest(&d, &d.times).unwrap(), d);
        assert!(accumulate_upper(&d, &[10.0]).unwrap().times.iter().all(|&t| t == 10.0));
        assert!(accumulate_upper(&d, &[5.0]).is_err());
    }

    #[test]
    fn averaging_figure_examples() {
        let up = average_upper(&ten(), &[5.0, 10.0]).unwrap();
        assert_eq!(up.times, vec![5.0, 10.0]);
        assert_eq!(up.values[0][0], 3.0);
        assert_eq!(up.values[1][0], 8.0);
        assert_eq!(up.weights, vec![5.0, 5.0]);
        let near = average_nearest(&ten(), &[5.0, 10.0]).unwrap();
        assert_eq!(near.weights, vec![7.0, 3.0]);
        assert_eq!(near.values[0][0], 4.0);
        assert_eq!(near.values[1][0], 9.0);
        let d = ten();
        assert_eq!(average_upper(&d, &d.times).unwrap(), d);
    }

    #[test]
    fn averaging_skips_empty_intervals() {
        let out = average_upper(&ten(), &[5.0, 5.5, 10.0]).unwrap();
        assert_eq!(out.times, vec![5.0, 10.0]);
    }

    #[test]
    fn simple_random_counts() {
        let d = uniform(5000);
        let s = simple_random_sample(&d, 0.01, 3).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s, simple_random_sample(&d, 0.01, 3).unwrap());
        assert_ne!(s, simple_random_sample(&d, 0.01, 4).unwrap());
        assert_eq!(simple_random_sample(&d, 1.0, 3).unwrap(), d);
        assert!(simple_random_sample(&uniform(10), 0.01, 3).is_err());
    }

    #[test]
    fn systematic_counts() {
        let d = uniform(5000);
        for seed in 0..20 {
            let s = systematic_random_sample(&d, 0.01, seed).unwrap();
            assert_eq!(s.len(), 50);
            let idx = (s.times[0] / 0.01).round() as usize;
            assert!((1..=100).contains(&idx));
        }
        assert_eq!(systematic_random_sample(&d, 1.0, 0).unwrap(), d);
        assert!(systematic_random_sample(&uniform(10), 0.01, 0).is_err());
    }

    #[test]
    fn systematic_offset_one_of_ten() {
        let d = ten();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let s = systematic_random_sample(&d, 0.2, seed).unwrap();
            assert_eq!(s.len(), 2);
            assert_eq!(s.times[1] - s.times[0], 5.0);
            seen.insert(s.times[0] as usize);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn predetermined_times_from_potp() {
        let d = uniform(5000);
        let s = ModificationScheme::for_data(ModificationKind::AccumulateUpper, &d, 0.01, 0).unwrap();
        match s {
            ModificationScheme::AccumulateUpper { predetermined } => {
                assert_eq!(predetermined.len(), 50);
                assert_eq!(predetermined[0], d.times[99]);
                assert_eq!(predetermined[49], d.times[4999]);
            }
            _ => unreachable!(),
        }
        let d = ten();
        let s = ModificationScheme::for_data(ModificationKind::AverageUpper, &d, 0.3, 0).unwrap();
        assert_eq!(s, ModificationScheme::AverageUpper { predetermined: vec![3.0, 6.0, 9.0, 10.0] });
        assert_eq!("average_nearest".parse::<ModificationKind>().unwrap(), ModificationKind::AverageNearest);
        assert!("bogus".parse::<ModificationKind>().is_err());
    }

    proptest! {
        #[test]
        fn scheme_invariants(n in 2usize..300, potp in 0.02f64..1.0, seed in 0u64..1000, which in 0usize..6) {
            let d = uniform(n);
            let kind = ModificationKind::ALL[which];
            let scheme = match ModificationScheme::for_data(kind, &d, potp, seed) {
                Ok(s) => s,
                Err(_) => return Ok(()),
            };
            let out = match scheme.apply(&d) {
                Ok(o) => o,
                Err(_) => { prop_assert!(kind == ModificationKind::SimpleRandom || kind == ModificationKind::SystematicRandom); return Ok(()) }
            };
            prop_assert!(out.len() <= n);
            prop_assert!(out.times.windows(2).all(|w| w[1] >= w[0]));
            let total: f64 = out.weights.iter().sum();
            match kind {
                ModificationKind::AccumulateUpper | ModificationKind::AccumulateNearest => {
                    prop_assert_eq!(&out.values, &d.values);
                }
                ModificationKind::AverageUpper | ModificationKind::AverageNearest => {
                    prop_assert_eq!(total, n as f64);
                    prop_assert!(out.times.windows(2).all(|w| w[1] > w[0]));
                }
                ModificationKind::SimpleRandom => {
                    prop_assert!((out.distinct_times() as f64 - potp * n as f64).abs() <= 1.0);
                }
                ModificationKind::SystematicRandom => {
                    let kappa = kappa_from_potp(potp).unwrap();
                    prop_assert!((out.distinct_times() as f64 - n as f64 / kappa as f64).abs() <= 1.0);
                }
            }
            prop_assert_eq!(scheme.apply(&d).unwrap(), out);
        }
    }
}
