use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::Activation;
use crate::objective::{DataTerm, Deriv, InverseParam, PointSet, ResidualInputs, ResidualOperator, ResidualTerm};
use crate::rng;

use super::{collocation_sample, BoxDomain, ProblemPreset};

const DATA_POINTS: usize = 300;
const COLLOCATION: usize = 8000;

/// Viscous traveling wave
/// `u = (a+b)/2 - (a-b)/2 tanh((a-b)(x - c t) / (4 nu))`, `c = (a+b)/2`.
pub fn burgers_exact(x: f64, t: f64, nu: f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    c - 0.5 * (a - b) * ((a - b) * (x - c * t) / (4.0 * nu)).tanh()
}

/// `u_t + u u_x - nu u_xx` over inputs `(x, t)`; `nu` is the inverse
/// parameter.
#[derive(Debug, Clone)]
pub struct BurgersOperator {
    pub nu_init: f64,
}

impl ResidualOperator for BurgersOperator {
    fn name(&self) -> &str {
        "burgers"
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn derivatives(&self) -> Vec<Deriv> {
        vec![
            Deriv { input: 0, order: 1 },
            Deriv { input: 0, order: 2 },
            Deriv { input: 1, order: 1 },
        ]
    }

    fn inverse_params(&self) -> Vec<InverseParam> {
        vec![InverseParam {
            name: "nu".into(),
            init: self.nu_init,
            trainable: true,
        }]
    }

    fn build(&self, tape: &mut Tape, i: &ResidualInputs<'_>) -> Result<Var> {
        let nu = i.inverse[0];
        let adv = tape.mul(i.u, i.d(0, 1)?);
        let diff = tape.mul(nu, i.d(0, 2)?);
        let lhs = tape.add(i.d(1, 1)?, adv);
        Ok(tape.sub(lhs, diff))
    }
}

/// Inverse problem for `nu` on `x in [-1, 1]`, `t in [0, 1]` with 300 exact
/// data samples and 8000 collocation points; six hidden layers of 20 tanh
/// units, `n = 5`.
pub fn burgers_inverse_preset(nu_true: f64, a: f64, b: f64, nu_init: f64, seed: u64) -> Result<ProblemPreset> {
    if !(nu_true > 0.0 && nu_true.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "nu_true must be positive, got {nu_true}"
        )));
    }
    if !(a > b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need left state a > right state b, got a={a}, b={b}"
        )));
    }
    if !nu_init.is_finite() {
        return Err(Error::InvalidArgument("nu_init must be finite".into()));
    }
    let domain = BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 1.0])?;
    let points = domain.sample(DATA_POINTS, &mut rng::stream(seed, rng::DATA));
    let targets = points
        .iter()
        .map(|p| burgers_exact(p[0], p[1], nu_true, a, b))
        .collect();
    let mut eval = Vec::new();
    for x in super::linspace(-1.0, 1.0, 101) {
        for t in super::linspace(0.0, 1.0, 21) {
            eval.extend([x, t]);
        }
    }
    Ok(ProblemPreset {
        name: "burgers_inverse".into(),
        widths: vec![2, 20, 20, 20, 20, 20, 20, 1],
        activation: Activation::Tanh,
        scale: 5.0,
        lr: 6e-4,
        iterations: 40_000,
        w_f: 1.0,
        w_u: 10.0,
        w_a: 20.0,
        data: DataTerm::regression(points, targets)?,
        residual: Some(ResidualTerm {
            operator: Arc::new(BurgersOperator { nu_init }),
            points: collocation_sample(&domain, COLLOCATION, seed)?,
        }),
        reference: Some(Arc::new(move |p: &[f64]| burgers_exact(p[0], p[1], nu_true, a, b))),
        eval_points: PointSet::new(2, eval)?,
        truth: vec![("nu".into(), nu_true)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::residual_of_function;
    use rand::Rng;

    fn wave(nu: f64, a: f64, b: f64) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> {
        move |t, x| {
            let c = 0.5 * (a + b);
            let ct = t.scale(x[1], c);
            let s = t.sub(x[0], ct);
            let arg = t.scale(s, (a - b) / (4.0 * nu));
            let th = t.tanh(arg);
            let amp = t.scale(th, -0.5 * (a - b));
            let base = t.lift(c)?;
            Ok(t.add(base, amp))
        }
    }

    #[test]
    fn exact_wave_has_zero_residual() {
        let op = BurgersOperator { nu_init: 0.5 };
        let mut r = rng::stream(2, "test");
        for _ in 0..50 {
            let p = [r.random_range(-1.0..1.0), r.random_range(0.0..1.0)];
            let res = residual_of_function(&op, &p, &[0.05], wave(0.05, 2.0, 0.0)).unwrap();
            assert!(res.abs() < 1e-8, "{res}");
            let res = residual_of_function(&op, &p, &[0.3], wave(0.3, 1.0, -0.5)).unwrap();
            assert!(res.abs() < 1e-8, "{res}");
        }
    }

    #[test]
    fn wave_values() {
        assert_eq!(burgers_exact(0.5, 0.5, 0.05, 2.0, 0.0), 1.0);
        assert!((burgers_exact(-50.0, 0.0, 0.05, 2.0, 0.0) - 2.0).abs() < 1e-15);
        assert!(burgers_exact(50.0, 0.0, 0.05, 2.0, 0.0).abs() < 1e-15);
    }

    #[test]
    fn preset_checks() {
        assert!(burgers_inverse_preset(0.0, 2.0, 0.0, 0.5, 0).is_err());
        assert!(burgers_inverse_preset(0.05, 0.0, 2.0, 0.5, 0).is_err());
        let p = burgers_inverse_preset(0.05, 2.0, 0.0, 0.5, 0).unwrap();
        assert_eq!(p.data.len(), 300);
        assert_eq!(p.residual.as_ref().unwrap().points.len(), 8000);
        assert_eq!(p.widths.len(), 8);
    }
}
