//! Output files. CSVs start with a header row and print floats in
//! scientific notation with 17 significant digits; JSON floats use the
//! shortest representation that round-trips. Wall-clock times go to a
//! separate file so that every other output is reproducible byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::dynamics::{DynamicsReport, MethodRun};
use crate::error::{Error, Result};
use crate::optimize::TrainingTrace;

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Creates parent directories as needed.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

pub fn trace_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("iteration,total,mse_u,mse_f,recovery,slope_min,slope_mean,slope_max");
    for name in &trace.inverse_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in &trace.rows {
        write!(out, "{}", r.iteration).unwrap();
        for v in [
            r.total,
            r.mse_u,
            r.mse_f,
            r.recovery,
            r.slope_min,
            r.slope_mean,
            r.slope_max,
        ]
        .iter()
        .chain(&r.inverse)
        {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push('\n');
    }
    out
}

pub fn timing_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("iteration,elapsed_ms\n");
    for r in &trace.rows {
        writeln!(out, "{},{}", r.iteration, fmt_float(r.elapsed_ms)).unwrap();
    }
    out
}

pub fn dynamics_csv(run: &MethodRun) -> String {
    let mut out = String::from("epoch,loss,condition,normalized_condition\n");
    for r in &run.records {
        writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            fmt_float(r.loss),
            fmt_float(r.condition),
            fmt_float(r.normalized_condition)
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InverseEstimate {
    pub name: String,
    pub estimate: f64,
    pub truth: Option<f64>,
    /// `|estimate - truth| / |truth|`.
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub preset: String,
    pub mode: String,
    pub seed: u64,
    pub iterations: usize,
    pub stopped_early: bool,
    pub final_total: f64,
    pub final_mse_u: f64,
    pub final_mse_f: f64,
    pub final_recovery: f64,
    pub inverse: Vec<InverseEstimate>,
    /// Against the preset's reference solution, where it has one.
    pub relative_l2: Option<f64>,
}

pub fn inverse_estimates(trace: &TrainingTrace, truth: &[(String, f64)]) -> Vec<InverseEstimate> {
    trace
        .inverse_names
        .iter()
        .zip(&trace.last().inverse)
        .map(|(name, &estimate)| {
            let truth = truth.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
            InverseEstimate {
                name: name.clone(),
                estimate,
                truth,
                relative_error: truth.map(|t| (estimate - t).abs() / t.abs()),
            }
        })
        .collect()
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::from(
        m.row_iter()
            .map(|r| r.iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    )
}

/// JSON form of a [`DynamicsReport`]; matrices only when `full`.
pub fn dynamics_report_json(r: &DynamicsReport, full: bool) -> Value {
    let mut v = json!({
        "mode": r.mode.to_string(),
        "eta": r.eta,
        "condition_number": r.condition_number,
        "normalized_condition": r.normalized_condition,
        "equivalence_residual": r.equivalence_residual,
        "hessian_asymmetry": r.hessian_asymmetry,
        "condition_matrix": "G0 = diag((Aa)^2) + diag(W) A A^T diag(W); the -eta diag(V) term is dropped",
        "v": r.v.as_slice(),
    });
    if full {
        v["g"] = matrix_json(&r.g);
        v["h_hat"] = matrix_json(&r.h_hat);
        v["hessian"] = matrix_json(&r.hessian);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::TraceRow;

    fn trace() -> TrainingTrace {
        let row = |i: usize, t: f64| TraceRow {
            iteration: i,
            total: t,
            mse_u: 0.1,
            mse_f: 0.0,
            recovery: 1.0,
            slope_min: f64::NAN,
            slope_mean: f64::NAN,
            slope_max: f64::NAN,
            inverse: vec![0.5],
            elapsed_ms: 3.0,
        };
        TrainingTrace {
            inverse_names: vec!["nu".into()],
            rows: vec![row(0, 1.0), row(1, 1.0 / 3.0)],
            final_theta: vec![],
            stopped_early: false,
        }
    }

    #[test]
    fn floats_round_trip() {
        for v in [1.0 / 3.0, 1e-300, -2.5e17, std::f64::consts::PI] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            assert_eq!(s.split('e').next().unwrap().trim_start_matches('-').len(), 18);
        }
    }

    #[test]
    fn trace_layout() {
        let csv = trace_csv(&trace());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,total,mse_u,mse_f,recovery,slope_min,slope_mean,slope_max,nu"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,3.3333333333333331e-1,"));
        assert!(lines[1].contains("NaN"));
        assert!(!csv.contains("3.0000000000000000e0"));
        assert!(timing_csv(&trace()).contains("3.0000000000000000e0"));
    }

    #[test]
    fn estimates() {
        let e = inverse_estimates(&trace(), &[("nu".into(), 0.25)]);
        assert_eq!(e[0].relative_error, Some(1.0));
        assert_eq!(inverse_estimates(&trace(), &[])[0].truth, None);
    }
}
