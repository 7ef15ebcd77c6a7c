//! Datasets, PDE residual operators and experiment presets.
//!
//! All randomness comes from named streams of one seed ([`crate::rng`]):
//! data locations from `data`, collocation points from `sampling`, target
//! noise from `noise`, network initialization from `init`.

mod burgers;
mod circles;
mod discontinuous;
mod poisson;
mod sampling;

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use burgers::{burgers_exact, burgers_inverse_preset, BurgersOperator};
pub use circles::{circles_dataset, circles_preset, CirclesPreset};
pub use discontinuous::{discontinuous_preset, discontinuous_target};
pub use poisson::{poisson_exact, poisson_inverse_preset, PoissonOperator};
pub use sampling::{collocation_sample, linspace, BoxDomain};

use crate::error::Result;
use crate::network::{Activation, ActivationMode, NetworkParams, SlopeKind};
use crate::objective::{DataTerm, ObjectiveSpec, PointSet, RecoveryKind, ResidualTerm};

/// Exact solution used for error reporting.
pub type ReferenceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A fully specified training problem.
#[derive(Clone)]
pub struct ProblemPreset {
    pub name: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Scaling factor `n`.
    pub scale: f64,
    /// Adam learning rate.
    pub lr: f64,
    pub iterations: usize,
    pub w_f: f64,
    pub w_u: f64,
    pub w_a: f64,
    pub data: DataTerm,
    pub residual: Option<ResidualTerm>,
    pub reference: Option<ReferenceFn>,
    /// Points where the relative L2 error against `reference` is measured.
    pub eval_points: PointSet,
    /// True values of the inverse parameters, by name.
    pub truth: Vec<(String, f64)>,
}

impl std::fmt::Debug for ProblemPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemPreset")
            .field("name", &self.name)
            .field("widths", &self.widths)
            .field("activation", &self.activation)
            .field("scale", &self.scale)
            .field("lr", &self.lr)
            .field("iterations", &self.iterations)
            .field("weights", &(self.w_f, self.w_u, self.w_a))
            .field("data_points", &self.data.len())
            .field("residual_points", &self.residual.as_ref().map(|r| r.points.len()))
            .field("truth", &self.truth)
            .finish()
    }
}

impl ProblemPreset {
    pub fn mode(&self, kind: SlopeKind) -> Result<ActivationMode> {
        ActivationMode::new(kind, self.activation, self.scale)
    }

    pub fn network(&self, kind: SlopeKind, seed: u64) -> Result<NetworkParams> {
        NetworkParams::init(&self.widths, self.mode(kind)?, seed)
    }

    /// Objective with the slope-recovery term matching `kind` (none for a
    /// fixed activation).
    pub fn objective_spec(&self, kind: SlopeKind) -> ObjectiveSpec {
        ObjectiveSpec {
            w_f: if self.residual.is_some() { self.w_f } else { 0.0 },
            w_u: self.w_u,
            w_a: self.w_a,
            data: Some(self.data.clone()),
            residual: self.residual.clone(),
            recovery: RecoveryKind::for_mode(kind),
        }
    }

    /// `||u - u_ref|| / ||u_ref||` over `eval_points`.
    pub fn relative_l2(&self, params: &NetworkParams) -> Result<Option<f64>> {
        let Some(reference) = &self.reference else {
            return Ok(None);
        };
        let (mut num, mut den) = (0.0, 0.0);
        for x in self.eval_points.iter() {
            let u = params.predict(x)?[0];
            let r = reference(x);
            num += (u - r) * (u - r);
            den += r * r;
        }
        Ok(Some((num / den).sqrt()))
    }
}

/// Named presets accepted by the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Discontinuous,
    PoissonInverse,
    BurgersInverse,
    Circles,
}

impl PresetName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "discontinuous" => Some(PresetName::Discontinuous),
            "poisson_inverse" => Some(PresetName::PoissonInverse),
            "burgers_inverse" => Some(PresetName::BurgersInverse),
            "circles" => Some(PresetName::Circles),
            _ => None,
        }
    }
}

/// CSV with one row per point: coordinates, then target values or label.
pub fn dataset_csv(data: &DataTerm) -> String {
    let points = data.points();
    let mut out = String::new();
    let coords: Vec<String> = (0..points.dim).map(|i| format!("x{i}")).collect();
    match data {
        DataTerm::Regression { targets, outputs, .. } => {
            let t: Vec<String> = if *outputs == 1 {
                vec!["target".into()]
            } else {
                (0..*outputs).map(|o| format!("target{o}")).collect()
            };
            let _ = writeln!(out, "{},{}", coords.join(","), t.join(","));
            for (i, x) in points.iter().enumerate() {
                let row: Vec<String> = x
                    .iter()
                    .chain(&targets[i * outputs..(i + 1) * outputs])
                    .map(|v| format!("{v:.16e}"))
                    .collect();
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
        DataTerm::Classification { labels, .. } => {
            let _ = writeln!(out, "{},label", coords.join(","));
            for (x, l) in points.iter().zip(labels) {
                let row: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(out, "{},{l}", row.join(","));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_csv_layout() {
        let d = DataTerm::regression(PointSet::new(1, vec![0.5, -1.0]).unwrap(), vec![1.0, 2.0]).unwrap();
        let csv = dataset_csv(&d);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,target");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "5.0000000000000000e-1,1.0000000000000000e0");
        let c = DataTerm::classification(PointSet::new(2, vec![0.0, 1.0]).unwrap(), vec![1], 2).unwrap();
        assert_eq!(
            dataset_csv(&c).lines().nth(1).unwrap(),
            "0.0000000000000000e0,1.0000000000000000e0,1"
        );
    }

    #[test]
    fn preset_names() {
        for (s, p) in [
            ("discontinuous", PresetName::Discontinuous),
            ("poisson_inverse", PresetName::PoissonInverse),
            ("burgers_inverse", PresetName::BurgersInverse),
            ("circles", PresetName::Circles),
        ] {
            assert_eq!(PresetName::parse(s), Some(p));
        }
        assert_eq!(PresetName::parse("nope"), None);
    }
}
