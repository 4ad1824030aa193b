//! CSV and sidecar files for observations, traces and reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{usage, Result};
use crate::observe::{LinearGaussian, ObservationSet};
use crate::scalar::{c, to_f64, Real};

/// Path of the `key = value` sidecar belonging to `path`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `key = value` lines in the given order.
pub fn write_meta(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| crate::Error::Config {
            line: i + 1,
            message: format!("expected 'key = value' in {}", path.display()),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn join<T: Real>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| to_f64(v).to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split_whitespace().map(|s| s.parse::<f64>().map_err(|_| usage(format!("invalid number '{s}'")))).collect()
}

/// Writes `t,y1,...,yn,weight` rows plus a sidecar with the observation
/// operator, covariance, model name and seed.
pub fn write_observations<T: Real>(path: &Path, data: &ObservationSet<T>, model: &str, seed: u64) -> Result<()> {
    let n = data.obs_dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("y{i}")));
    header.push("weight".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut row = vec![to_f64(data.times[i]).to_string()];
        row.extend(data.values[i].iter().map(|v| to_f64(*v).to_string()));
        row.push(to_f64(data.weights[i]).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    let h = data.model.h();
    let v = data.model.v();
    write_meta(
        &meta_path(path),
        &[
            ("model".into(), model.to_string()),
            ("seed".into(), seed.to_string()),
            ("obs_dim".into(), n.to_string()),
            ("state_dim".into(), h.ncols().to_string()),
            ("H".into(), join(h.transpose().iter().copied())),
            ("V".into(), join(v.transpose().iter().copied())),
            ("apply_weights".into(), data.apply_weights.to_string()),
        ],
    )
}

/// Observations written by [`write_observations`] with the sidecar's model
/// name and seed.
pub struct LoadedObservations<T: Real> {
    pub data: ObservationSet<T>,
    pub model: String,
    pub seed: u64,
}

pub fn read_observations<T: Real>(path: &Path) -> Result<LoadedObservations<T>> {
    let meta = read_meta(&meta_path(path))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| usage(format!("observation sidecar lacks '{k}'")));
    let n: usize = get("obs_dim")?.parse().map_err(|_| usage("bad obs_dim"))?;
    let d: usize = get("state_dim")?.parse().map_err(|_| usage("bad state_dim"))?;
    let h = parse_numbers(get("H")?)?;
    let v = parse_numbers(get("V")?)?;
    if h.len() != n * d || v.len() != n * n {
        return Err(usage("observation sidecar matrices have the wrong size"));
    }
    let model = LinearGaussian::new(
        DMatrix::from_row_iterator(n, d, h.into_iter().map(c::<T>)),
        DMatrix::from_row_iterator(n, n, v.into_iter().map(c::<T>)),
    )?;
    let mut r = csv::Reader::from_path(path)?;
    let (mut times, mut values, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != n + 2 {
            return Err(usage(format!("observation row has {} fields, expected {}", rec.len(), n + 2)));
        }
        let nums: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("invalid number '{s}'"))))
            .collect::<Result<_>>()?;
        times.push(c::<T>(nums[0]));
        values.push(DVector::from_iterator(n, nums[1..=n].iter().map(|&x| c::<T>(x))));
        weights.push(c::<T>(nums[n + 1]));
    }
    let mut data = ObservationSet::with_weights(times, values, weights, model)?;
    data.apply_weights = get("apply_weights").map(|s| s == "true").unwrap_or(false);
    Ok(LoadedObservations {
        data,
        model: get("model")?.clone(),
        seed: get("seed")?.parse().map_err(|_| usage("bad seed"))?,
    })
}

/// Writes a `time,error` trace.
pub fn write_trace_csv(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "error"])?;
    for (t, e) in rows {
        w.write_record([t.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<(Vec<String>, Vec<(f64, f64)>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| usage(format!("bad trace row {:?}", rec)))
        };
        rows.push((num(0)?, num(1)?));
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observations_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let model =
            LinearGaussian::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.5]), DMatrix::from_element(1, 1, 0.04)).unwrap();
        let data = ObservationSet::with_weights(
            vec![0.1, 0.2, 0.2],
            vec![DVector::from_element(1, 1.25), DVector::from_element(1, -0.1), DVector::from_element(1, 1e-17)],
            vec![1.0, 3.0, 1.0],
            model,
        )
        .unwrap();
        write_observations(&path, &data, "van_der_pol", 42).unwrap();
        let back = read_observations::<f64>(&path).unwrap();
        assert_eq!(back.data, data);
        assert_eq!(back.model, "van_der_pol");
        assert_eq!(back.seed, 42);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,y1,weight\n"));
    }

    #[test]
    fn trace_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace_csv(&path, &[(0.0, 1.5), (0.25, 1e-3)]).unwrap();
        let (h, rows) = read_trace_csv(&path).unwrap();
        assert_eq!(h, vec!["time", "error"]);
        assert_eq!(rows, vec![(0.0, 1.5), (0.25, 1e-3)]);
    }
}
