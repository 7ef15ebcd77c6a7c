use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::Activation;
use crate::objective::{DataTerm, Deriv, InverseParam, PointSet, ResidualInputs, ResidualOperator, ResidualTerm};
use crate::rng;

use super::{collocation_sample, BoxDomain, ProblemPreset};

/// Relative standard deviation of the optional target noise.
pub const NOISE_LEVEL: f64 = 0.025;

const BOUNDARY_PER_EDGE: usize = 25;
const INTERIOR_DATA: usize = 100;
const COLLOCATION: usize = 1000;

/// Manufactured solution `cos(pi x) cos(pi y)`.
pub fn poisson_exact(x: f64, y: f64) -> f64 {
    (PI * x).cos() * (PI * y).cos()
}

/// `div((1 + alpha x) grad u) + f* = 0` with `f*` chosen so that
/// [`poisson_exact`] solves the equation at `alpha_true`:
/// `f* = alpha_true pi sin(pi x) cos(pi y) + (1 + alpha_true x) 2 pi^2 cos(pi x) cos(pi y)`.
/// `alpha` is the inverse parameter.
#[derive(Debug, Clone)]
pub struct PoissonOperator {
    pub alpha_true: f64,
    pub alpha_init: f64,
}

impl PoissonOperator {
    pub fn source(&self, x: f64, y: f64) -> f64 {
        let a = self.alpha_true;
        a * PI * (PI * x).sin() * (PI * y).cos() + (1.0 + a * x) * 2.0 * PI * PI * poisson_exact(x, y)
    }
}

impl ResidualOperator for PoissonOperator {
    fn name(&self) -> &str {
        "poisson"
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn derivatives(&self) -> Vec<Deriv> {
        vec![
            Deriv { input: 0, order: 1 },
            Deriv { input: 0, order: 2 },
            Deriv { input: 1, order: 2 },
        ]
    }

    fn inverse_params(&self) -> Vec<InverseParam> {
        vec![InverseParam {
            name: "alpha".into(),
            init: self.alpha_init,
            trainable: true,
        }]
    }

    fn build(&self, tape: &mut Tape, i: &ResidualInputs<'_>) -> Result<Var> {
        let alpha = i.inverse[0];
        let (x, y) = (i.x[0], i.x[1]);
        let f = tape.lift(self.source(tape.value(x), tape.value(y)))?;
        let ax = tape.mul(alpha, x);
        let one = tape.lift(1.0)?;
        let diff = tape.add(one, ax);
        let lap = tape.add(i.d(0, 2)?, i.d(1, 2)?);
        let t1 = tape.mul(diff, lap);
        let t2 = tape.mul(alpha, i.d(0, 1)?);
        let lhs = tape.add(t1, t2);
        Ok(tape.add(lhs, f))
    }
}

/// Single-instance inverse problem on `[-1/sqrt 2, 1/sqrt 2]^2`: boundary and
/// interior samples of the manufactured solution, 1000 collocation points,
/// `alpha` learned from 0.5. With `noise`, targets are multiplied by
/// `1 + 0.025 xi`, `xi ~ N(0, 1)`.
pub fn poisson_inverse_preset(alpha_true: f64, noise: bool, seed: u64) -> Result<ProblemPreset> {
    if !(0.05..=0.95).contains(&alpha_true) {
        return Err(Error::InvalidArgument(format!(
            "alpha_true {alpha_true} outside [0.05, 0.95]"
        )));
    }
    let h = FRAC_1_SQRT_2;
    let domain = BoxDomain::new(vec![-h, -h], vec![h, h])?;
    let mut r = rng::stream(seed, rng::DATA);
    let edge = BoxDomain::new(vec![-h], vec![h])?;
    let mut coords = Vec::new();
    for side in 0..4 {
        let s = edge.sample(BOUNDARY_PER_EDGE, &mut r);
        for t in s.coords {
            let p = match side {
                0 => [-h, t],
                1 => [h, t],
                2 => [t, -h],
                _ => [t, h],
            };
            coords.extend(p);
        }
    }
    coords.extend(domain.sample(INTERIOR_DATA, &mut r).coords);
    let points = PointSet::new(2, coords)?;
    let mut targets: Vec<f64> = points.iter().map(|p| poisson_exact(p[0], p[1])).collect();
    if noise {
        let mut nr = rng::stream(seed, rng::NOISE);
        for t in &mut targets {
            let xi: f64 = StandardNormal.sample(&mut nr);
            *t *= 1.0 + NOISE_LEVEL * xi;
        }
    }
    let op = PoissonOperator {
        alpha_true,
        alpha_init: 0.5,
    };
    let mut eval = Vec::new();
    for x in super::linspace(-h, h, 41) {
        for y in super::linspace(-h, h, 41) {
            eval.extend([x, y]);
        }
    }
    Ok(ProblemPreset {
        name: if noise {
            "poisson_inverse_noisy"
        } else {
            "poisson_inverse"
        }
        .into(),
        widths: vec![2, 30, 30, 30, 1],
        activation: Activation::Tanh,
        scale: 1.0,
        lr: 8e-4,
        iterations: 20_000,
        w_f: 1.0,
        w_u: 10.0,
        w_a: 10.0,
        data: DataTerm::regression(points, targets)?,
        residual: Some(ResidualTerm {
            operator: Arc::new(op),
            points: collocation_sample(&domain, COLLOCATION, seed)?,
        }),
        reference: Some(Arc::new(|p: &[f64]| poisson_exact(p[0], p[1]))),
        eval_points: PointSet::new(2, eval)?,
        truth: vec![("alpha".into(), alpha_true)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::residual_of_function;
    use rand::Rng;

    fn exact_on_tape(t: &mut Tape, x: &[Var]) -> Result<Var> {
        let pi = t.lift(PI)?;
        let px = t.mul(pi, x[0]);
        let py = t.mul(pi, x[1]);
        let cx = t.cos(px);
        let cy = t.cos(py);
        Ok(t.mul(cx, cy))
    }

    #[test]
    fn source_at_origin() {
        let op = PoissonOperator {
            alpha_true: 0.3,
            alpha_init: 0.5,
        };
        assert!((op.source(0.0, 0.0) - 2.0 * PI * PI).abs() < 1e-12);
        assert!((op.source(0.0, 0.0) - 19.7392).abs() < 1e-4);
    }

    #[test]
    fn manufactured_solution_has_zero_residual() {
        let op = PoissonOperator {
            alpha_true: 0.7,
            alpha_init: 0.5,
        };
        let mut r = rng::stream(1, "test");
        let h = FRAC_1_SQRT_2;
        for _ in 0..50 {
            let p = [r.random_range(-h..h), r.random_range(-h..h)];
            let res = residual_of_function(&op, &p, &[0.7], exact_on_tape).unwrap();
            assert!(res.abs() < 1e-10, "{res}");
            // A wrong alpha leaves a visible residual away from x = 0.
            if p[0].abs() > 0.1 {
                let off = residual_of_function(&op, &p, &[0.2], exact_on_tape).unwrap();
                assert!(off.abs() > 1e-6);
            }
        }
    }

    #[test]
    fn preset_checks() {
        assert!(poisson_inverse_preset(0.01, false, 0).is_err());
        let p = poisson_inverse_preset(0.7, false, 0).unwrap();
        assert_eq!(p.data.len(), 4 * BOUNDARY_PER_EDGE + INTERIOR_DATA);
        assert_eq!(p.residual.as_ref().unwrap().points.len(), COLLOCATION);
        let noisy = poisson_inverse_preset(0.7, true, 0).unwrap();
        assert_eq!(p.data.points(), noisy.data.points());
        assert_ne!(p.data, noisy.data);
    }
}
