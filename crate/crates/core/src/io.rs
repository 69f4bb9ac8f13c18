//! CSV and summary artifacts.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::ResidualSample;
use crate::error::{Error, Result};
use crate::simulation::{LearningResult, MapCell, RolloutLog};

/// 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn parse_f64(field: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse number {field:?}")))
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

pub fn write_rollout_csv(path: &Path, log: &RolloutLog) -> Result<()> {
    let n = log.records.first().map_or(0, |r| r.x.len());
    let m = log.records.first().map_or(0, |r| r.u.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(indexed("x", n));
    header.extend(indexed("u", m));
    header.extend(["d", "V", "B", "status", "case", "clf_margin", "cbf_margin"].map(String::from));
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![fmt_f64(r.t)];
        row.extend(r.x.iter().map(|v| fmt_f64(*v)));
        row.extend(r.u.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(r.d));
        row.push(fmt_f64(r.v_value));
        row.push(fmt_f64(r.b_value));
        row.push(
            r.status
                .map_or_else(String::new, |s| s.as_str().to_string()),
        );
        row.push(r.case.map_or_else(String::new, |c| c.as_str().to_string()));
        row.push(fmt_f64(r.clf_margin));
        row.push(fmt_f64(r.cbf_margin));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `x0.., u0.., z_v, z_b`.
pub fn write_dataset_csv(
    path: &Path,
    samples: &[ResidualSample],
    state_dim: usize,
    control_dim: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = indexed("x", state_dim).collect();
    header.extend(indexed("u", control_dim));
    header.push("z_v".into());
    header.push("z_b".into());
    w.write_record(&header)?;
    for s in samples {
        if s.x.len() != state_dim || s.u.len() != control_dim {
            return Err(Error::DimensionMismatch {
                what: "dataset row",
                expected: state_dim + control_dim,
                got: s.x.len() + s.u.len(),
            });
        }
        let mut row: Vec<String> = s.x.iter().chain(s.u.iter()).map(|v| fmt_f64(*v)).collect();
        row.push(fmt_f64(s.z_v));
        row.push(fmt_f64(s.z_b));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A residual dataset read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub state_dim: usize,
    pub control_dim: usize,
    pub samples: Vec<ResidualSample>,
}

pub fn read_dataset_csv(path: &Path) -> Result<DatasetFile> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let count = |p: char| {
        names
            .iter()
            .filter(|h| h.starts_with(p) && h[1..].parse::<usize>().is_ok())
            .count()
    };
    let (n, m) = (count('x'), count('u'));
    let mut expected: Vec<String> = indexed("x", n).collect();
    expected.extend(indexed("u", m));
    expected.push("z_v".into());
    expected.push("z_b".into());
    if names != expected {
        return Err(Error::Config(format!(
            "{}: dataset header must be {}, got {}",
            path.display(),
            expected.join(","),
            names.join(",")
        )));
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| parse_f64(f, line))
            .collect::<Result<_>>()?;
        if vals.len() != n + m + 2 {
            return Err(Error::Config(format!(
                "line {line}: expected {} fields",
                n + m + 2
            )));
        }
        samples.push(ResidualSample {
            x: DVector::from_column_slice(&vals[..n]),
            u: DVector::from_column_slice(&vals[n..n + m]),
            z_v: vals[n + m],
            z_b: vals[n + m + 1],
        });
    }
    Ok(DatasetFile {
        state_dim: n,
        control_dim: m,
        samples,
    })
}

pub fn write_map_csv(path: &Path, cells: &[MapCell]) -> Result<()> {
    let n = cells.first().map_or(0, |c| c.x.len());
    let m = cells.first().map_or(0, |c| c.report.h.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = indexed("x", n).collect();
    header.extend(
        [
            "geometry",
            "case",
            "feasible",
            "lambda_dagger",
            "eig_tol",
            "necessary_value",
            "case_value",
        ]
        .map(String::from),
    );
    header.extend(indexed("witness_u", m));
    w.write_record(&header)?;
    for c in cells {
        let r = &c.report;
        let mut row: Vec<String> = c.x.iter().map(|v| fmt_f64(*v)).collect();
        row.push(r.geometry.as_str().to_string());
        row.push(r.case().as_str().to_string());
        row.push(r.feasible.to_string());
        row.push(fmt_f64(r.lambda_dagger));
        row.push(fmt_f64(r.eig_tol));
        row.push(fmt_f64(r.necessary_value));
        row.push(r.case_value.map_or_else(String::new, fmt_f64));
        match &r.certificate {
            Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Headline numbers of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub controller: String,
    pub termination: String,
    pub steps: usize,
    pub end_time: f64,
    pub min_barrier: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation_time: Option<f64>,
    pub final_state: Vec<f64>,
    pub samples: usize,
    /// Informational, machine dependent.
    pub mean_solve_ms: f64,
}

impl RolloutSummary {
    pub fn from_log(log: &RolloutLog) -> Self {
        RolloutSummary {
            controller: log.controller.as_str().to_string(),
            termination: log.termination.as_str().to_string(),
            steps: log.solve_times.len(),
            end_time: log.records.last().map_or(0.0, |r| r.t),
            min_barrier: log.min_barrier(),
            violation_time: log.violation_time(),
            final_state: log.final_state().to_vec(),
            samples: log.samples.len(),
            mean_solve_ms: log.mean_solve_time().as_secs_f64() * 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub index: usize,
    pub data_added: usize,
    pub data_total: usize,
    /// Fraction of map grid states where the episode's CBF constraint is
    /// feasible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feasible_fraction: Option<f64>,
    pub rollout: RolloutSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningSummary {
    pub converged: bool,
    pub episodes_run: usize,
    pub final_dataset_size: usize,
    pub episodes: Vec<EpisodeSummary>,
}

impl LearningSummary {
    pub fn new(result: &LearningResult, fractions: &[Option<f64>]) -> Self {
        LearningSummary {
            converged: result.converged,
            episodes_run: result.episodes.len(),
            final_dataset_size: result.samples.len(),
            episodes: result
                .episodes
                .iter()
                .enumerate()
                .map(|(i, e)| EpisodeSummary {
                    index: e.index,
                    data_added: e.data_added,
                    data_total: e.data_total,
                    feasible_fraction: fractions.get(i).copied().flatten(),
                    rollout: RolloutSummary::from_log(&e.log),
                })
                .collect(),
        }
    }
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let samples = vec![
            ResidualSample {
                x: dvector![0.1 + 0.2, 1.0 / 3.0],
                u: dvector![-1234.5678901234567],
                z_v: f64::MIN_POSITIVE,
                z_b: -2.0f64.sqrt(),
            },
            ResidualSample {
                x: dvector![1e300, -0.0],
                u: dvector![5e-324],
                z_v: 0.0,
                z_b: 7.0,
            },
        ];
        write_dataset_csv(&path, &samples, 2, 1).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!((back.state_dim, back.control_dim), (2, 1));
        for (a, b) in samples.iter().zip(&back.samples) {
            for (x, y) in
                a.x.iter()
                    .chain(a.u.iter())
                    .zip(b.x.iter().chain(b.u.iter()))
            {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.z_v.to_bits(), b.z_v.to_bits());
            assert_eq!(a.z_b.to_bits(), b.z_b.to_bits());
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x0,u0,zz\n1,2,3\n").unwrap();
        assert!(read_dataset_csv(&path).is_err());
        std::fs::write(&path, "x0,u0,z_v,z_b\n1,2,abc,3\n").unwrap();
        let err = read_dataset_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn empty_dataset_reads_back_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset_csv(&path, &[], 2, 1).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(
            (back.state_dim, back.control_dim, back.samples.len()),
            (2, 1, 0)
        );
    }
}
