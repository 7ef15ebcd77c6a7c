use crate::error::Result;
use crate::network::Activation;
use crate::objective::{DataTerm, PointSet};
use crate::rng;

use super::{linspace, BoxDomain, ProblemPreset};

/// `0.2 sin(6x)` for `x <= 0`, `1 + 0.1 x cos(18x)` otherwise.
pub fn discontinuous_target(x: f64) -> f64 {
    if x <= 0.0 {
        0.2 * (6.0 * x).sin()
    } else {
        1.0 + 0.1 * x * (18.0 * x).cos()
    }
}

/// Regression of [`discontinuous_target`] on `[-3, 3]` from 300 uniform
/// random points; four hidden layers of 50 tanh units, `n = 10`.
pub fn discontinuous_preset(seed: u64) -> Result<ProblemPreset> {
    let domain = BoxDomain::new(vec![-3.0], vec![3.0])?;
    let points = domain.sample(300, &mut rng::stream(seed, rng::DATA));
    let targets = points.iter().map(|x| discontinuous_target(x[0])).collect();
    Ok(ProblemPreset {
        name: "discontinuous".into(),
        widths: vec![1, 50, 50, 50, 50, 1],
        activation: Activation::Tanh,
        scale: 10.0,
        lr: 2.0e-4,
        iterations: 15_000,
        w_f: 0.0,
        w_u: 1.0,
        w_a: 1.0,
        data: DataTerm::regression(points, targets)?,
        residual: None,
        reference: Some(std::sync::Arc::new(|x: &[f64]| discontinuous_target(x[0]))),
        eval_points: PointSet::new(1, linspace(-3.0, 3.0, 1001))?,
        truth: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_examples() {
        assert_eq!(discontinuous_target(0.0), 0.0);
        let x = -std::f64::consts::PI / 12.0;
        assert!((discontinuous_target(x) + 0.2).abs() < 1e-15);
        assert!((discontinuous_target(1.0) - 1.0660317).abs() < 1e-7);
        // Jump of height one across the origin.
        assert!((discontinuous_target(1e-12) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn preset_is_reproducible() {
        let a = discontinuous_preset(3).unwrap();
        let b = discontinuous_preset(3).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, discontinuous_preset(4).unwrap().data);
        assert_eq!(a.data.len(), 300);
        assert!(a.data.points().iter().all(|x| (-3.0..=3.0).contains(&x[0])));
    }
}
