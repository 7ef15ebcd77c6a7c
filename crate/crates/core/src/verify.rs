//! Randomized sweeps of the numerical checks behind `laaf verify`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::config::VerifyParams;
use crate::dynamics::{
    conditioning_gaaf, conditioning_general, constant_network_check, euler_identity_check, locality_matrix,
    verify_step_equivalence_with,
};
use crate::error::Result;
use crate::network::{Activation, ActivationMode, NetworkParams, SlopeKind};
use crate::objective::{DataTerm, Objective, ObjectiveSpec, PointSet, RecoveryKind, ResidualTerm};
use crate::problems::{discontinuous_target, PoissonOperator};
use crate::rng::{self, SplitMix64};

pub const GRADIENT_TOL: f64 = 1e-5;
pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const REDUCTION_TOL: f64 = 1e-14;
pub const EULER_TOL: f64 = 1e-9;
pub const CONSTANT_LOSS_TOL: f64 = 1e-12;
pub const CONSTANT_GRAD_TOL: f64 = 1e-14;

/// Step of the five-point difference stencil used by gradient checks.
pub const FD_STEP: f64 = 1e-3;

/// Largest relative disagreement between the objective gradient and a
/// fourth-order central difference of its value:
/// `max_i |g_i - fd_i| / max(|g_i|, |fd_i|, 1e-6)`.
pub fn objective_gradient_check(objective: &Objective, theta: &[f64], step: f64) -> Result<f64> {
    let g = objective.evaluate(theta)?.gradient;
    let mut p = theta.to_vec();
    let mut worst: f64 = 0.0;
    let at = |p: &mut Vec<f64>, i: usize, h: f64| -> Result<f64> {
        p[i] = theta[i] + h;
        let v = objective.loss(p)?.total;
        p[i] = theta[i];
        Ok(v)
    };
    for i in 0..theta.len() {
        let fd = (8.0 * (at(&mut p, i, step)? - at(&mut p, i, -step)?)
            - (at(&mut p, i, 2.0 * step)? - at(&mut p, i, -2.0 * step)?))
            / (12.0 * step);
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub mode: SlopeKind,
    pub cases: usize,
    /// Largest residual over all cases.
    pub worst: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {:<6} {:>5} {:>12.3e} {:>9.0e}  {}",
            self.check,
            self.mode.to_string(),
            self.cases,
            self.worst,
            self.threshold,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn uniform(r: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn randomize(p: &mut NetworkParams, r: &mut SplitMix64) {
    let len = p.param_count();
    let mut flat = uniform(r, len, -1.0, 1.0);
    let off = p.layout().slope_offset();
    for a in &mut flat[off..] {
        // Slopes near n a = 1, either sign occasionally.
        *a = r.random_range(0.3..1.5) / p.mode().scale * if r.random_bool(0.1) { -1.0 } else { 1.0 };
    }
    p.set_flat(&flat).expect("length from the layout");
}

fn random_widths(r: &mut SplitMix64, input: usize, max_width: usize) -> Vec<usize> {
    let depth = r.random_range(2..=4);
    let mut w = vec![input];
    w.extend((1..depth).map(|_| r.random_range(1..=max_width)));
    w.push(1);
    w
}

/// Regression on a 1-D target, or a 2-D Poisson residual plus boundary data
/// with a trainable coefficient.
fn random_problem(
    r: &mut SplitMix64,
    kind: SlopeKind,
    activation: Activation,
    scale: f64,
    max_width: usize,
) -> Result<(NetworkParams, ObjectiveSpec)> {
    let pde = r.random_bool(0.5);
    let input = if pde { 2 } else { 1 };
    let widths = random_widths(r, input, max_width);
    let mode = ActivationMode::new(kind, activation, scale)?;
    let mut params = NetworkParams::init(&widths, mode, r.random())?;
    randomize(&mut params, r);
    let n = r.random_range(3..8);
    let coords = uniform(r, n * input, -1.0, 1.0);
    let targets = coords
        .chunks(input)
        .map(|x| discontinuous_target(x[0]) + 0.3 * x[input - 1])
        .collect();
    let data = DataTerm::regression(PointSet::new(input, coords)?, targets)?;
    let residual = if pde {
        let m = r.random_range(2..6);
        Some(ResidualTerm {
            operator: Arc::new(PoissonOperator {
                alpha_true: 0.7,
                alpha_init: r.random_range(0.1..0.9),
            }),
            points: PointSet::new(2, uniform(r, 2 * m, -0.7, 0.7))?,
        })
    } else {
        None
    };
    let spec = ObjectiveSpec {
        w_f: if pde { r.random_range(0.5..2.0) } else { 0.0 },
        w_u: r.random_range(0.5..2.0),
        w_a: r.random_range(0.0..2.0),
        data: Some(data),
        residual,
        recovery: RecoveryKind::for_mode(kind),
    };
    Ok((params, spec))
}

/// Gradient checks over `count` random networks (depth 2 to 4, width at most
/// 10, tanh or sigmoid). `kinds` cycles through the modes.
pub fn gradient_sweep(kinds: &[SlopeKind], count: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, "verify-gradient");
    let mut out: Vec<CheckResult> = kinds
        .iter()
        .map(|&mode| CheckResult {
            check: "gradient".into(),
            mode,
            cases: 0,
            worst: 0.0,
            threshold: GRADIENT_TOL,
        })
        .collect();
    for i in 0..count {
        let k = i % kinds.len();
        let activation = if r.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Sigmoid
        };
        let scale = if r.random_bool(0.5) {
            1.0
        } else {
            r.random_range(1.0..5.0)
        };
        let (params, spec) = random_problem(&mut r, kinds[k], activation, scale, 10)?;
        let objective = Objective::new(spec, &params)?;
        let theta = objective.initial_theta(&params);
        let e = objective_gradient_check(&objective, &theta, FD_STEP)?;
        out[k].cases += 1;
        out[k].worst = out[k].worst.max(e);
    }
    Ok(out)
}

/// Step identity on `nets` random tiny networks (widths 1 to 3, depth 2 to
/// 4, `n = 1`) for every `eta`, plus the exact reduction of the general
/// conditioning matrix to the global one for GAAF. With `corrupt_a` the
/// right-hand side uses a deliberately wrong locality matrix.
pub fn equivalence_sweep(
    kind: SlopeKind,
    params: &VerifyParams,
    corrupt_a: bool,
    seed: u64,
) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, "verify-equivalence");
    let mut eq = CheckResult {
        check: "step_equivalence".into(),
        mode: kind,
        cases: 0,
        worst: 0.0,
        threshold: EQUIVALENCE_TOL,
    };
    let mut red = CheckResult {
        check: "gaaf_reduction".into(),
        mode: kind,
        cases: 0,
        worst: 0.0,
        threshold: REDUCTION_TOL,
    };
    for _ in 0..params.nets {
        let activation = if r.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Sigmoid
        };
        let (net, spec) = random_problem(&mut r, kind, activation, 1.0, 3)?;
        let mut loc = locality_matrix(&net)?;
        if corrupt_a {
            loc = loc.corrupted();
        }
        for &eta in &params.etas {
            let e = verify_step_equivalence_with(&net, &spec, eta, &loc)?;
            eq.cases += 1;
            eq.worst = eq.worst.max(e.residual());
            if kind == SlopeKind::Gaaf {
                let d = loc.rows();
                let w = &net.to_flat()[..d];
                let g = uniform(&mut r, d, -1.0, 1.0);
                let (gm, v) = conditioning_general(&loc, &net.slopes, w, &g, eta)?;
                let hat = conditioning_gaaf(net.slopes[0], w) - nalgebra::DMatrix::from_diagonal(&v) * eta;
                red.cases += 1;
                red.worst = red.worst.max((gm - hat).amax());
            }
        }
    }
    let mut out = vec![eq];
    if kind == SlopeKind::Gaaf {
        out.push(red);
    }
    Ok(out)
}

/// Homogeneity identities at `points` random parameter points, and the
/// constant-network identities at the same networks with slopes zeroed.
pub fn identity_sweep(kind: SlopeKind, points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, "verify-identities");
    let check = |name: &str, threshold| CheckResult {
        check: name.into(),
        mode: kind,
        cases: 0,
        worst: 0.0,
        threshold,
    };
    let mut euler = check("euler_identity", EULER_TOL);
    let mut gap = check("constant_loss", CONSTANT_LOSS_TOL);
    let mut grad = check("constant_gradient", CONSTANT_GRAD_TOL);
    for _ in 0..points {
        let activation = if r.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Sigmoid
        };
        let scale = if r.random_bool(0.5) {
            1.0
        } else {
            r.random_range(1.0..5.0)
        };
        let (mut net, spec) = random_problem(&mut r, kind, activation, scale, 6)?;
        let e = euler_identity_check(&net, &spec)?;
        euler.cases += 1;
        euler.worst = e.into_iter().fold(euler.worst, f64::max);
        net.slopes.iter_mut().for_each(|a| *a = 0.0);
        let c = constant_network_check(&net, &spec)?;
        gap.cases += 1;
        gap.worst = gap.worst.max(c.gap);
        grad.cases += 1;
        grad.worst = grad.worst.max(c.max_hidden_gradient);
    }
    Ok(vec![euler, gap, grad])
}

/// Every check for the given modes. Fixed mode only gets gradient checks.
pub fn run_all(kinds: &[SlopeKind], params: &VerifyParams, corrupt_a: bool, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = gradient_sweep(kinds, params.grad_configs.max(kinds.len()), seed)?;
    for &kind in kinds.iter().filter(|k| k.is_adaptive()) {
        out.extend(equivalence_sweep(kind, params, corrupt_a, seed)?);
        out.extend(identity_sweep(kind, params.euler_points, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_passes() {
        let params = VerifyParams {
            nets: 3,
            etas: vec![1e-2],
            euler_points: 4,
            grad_configs: 4,
        };
        let all = run_all(&SlopeKind::ALL, &params, false, 0).unwrap();
        assert!(all.iter().all(|c| c.passed() && c.cases > 0), "{all:#?}");
        assert_eq!(all.iter().filter(|c| c.mode == SlopeKind::Fixed).count(), 1);
    }

    #[test]
    fn corrupted_locality_fails() {
        let params = VerifyParams {
            nets: 2,
            ..VerifyParams::default()
        };
        for kind in [SlopeKind::Gaaf, SlopeKind::Llaaf, SlopeKind::Nlaaf] {
            let r = equivalence_sweep(kind, &params, true, 1).unwrap();
            assert!(!r[0].passed(), "{kind}");
        }
    }
}
