//! First-order optimizers and the training loop.
//!
//! Plain gradient descent comes in three learning-rate regimes (constant,
//! diminishing `eta_0 / (1 + m)`, Armijo backtracking); Adam is what the
//! experiments use.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{LossBreakdown, Objective};

/// Backtracking limit for [`armijo_search`].
pub const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    GdConstant { lr: f64 },
    GdDiminishing { lr0: f64 },
    GdArmijo { eta0: f64, beta: f64, sigma: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("optimizer: {what}")));
        match *self {
            OptimizerKind::GdConstant { lr }
            | OptimizerKind::GdDiminishing { lr0: lr }
            | OptimizerKind::Adam { lr, .. }
                if !(lr > 0.0 && lr.is_finite()) =>
            {
                bad("learning rate must be positive")
            }
            OptimizerKind::GdArmijo { eta0, beta, sigma } => {
                if !(eta0 > 0.0 && eta0.is_finite()) {
                    bad("eta0 must be positive")
                } else if !(0.0 < beta && beta < 1.0) || !(0.0 < sigma && sigma < 1.0) {
                    bad("armijo needs 0 < beta < 1 and 0 < sigma < 1")
                } else {
                    Ok(())
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps < 0.0 {
                    bad("adam needs 0 <= beta < 1 and eps >= 0")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Result<Self> {
        kind.validate()?;
        let moments = if matches!(kind, OptimizerKind::Adam { .. }) {
            dim
        } else {
            0
        };
        Ok(OptimizerState {
            kind,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Update `theta` in place given the gradient at it.
    ///
    /// `value` is the loss at `theta` and `value_fn` evaluates the loss
    /// elsewhere; both are only used by the Armijo rule. Entries flagged in
    /// `frozen` are never changed. Returns the step size used (for Adam, the
    /// base learning rate).
    pub fn apply(
        &mut self,
        theta: &mut [f64],
        grad: &[f64],
        value: f64,
        frozen: Option<&[bool]>,
        value_fn: &mut dyn FnMut(&[f64]) -> Result<f64>,
    ) -> Result<f64> {
        if grad.len() != theta.len() {
            return Err(Error::Dimension {
                what: "gradient",
                expected: theta.len(),
                actual: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {} at step {}",
                grad[i], self.step
            )));
        }
        let live = |i: usize| frozen.is_none_or(|f| !f[i]);
        let m = self.step;
        self.step += 1;
        match self.kind {
            OptimizerKind::GdConstant { lr } => {
                gd_update(theta, grad, lr, &live);
                Ok(lr)
            }
            OptimizerKind::GdDiminishing { lr0 } => {
                let lr = lr0 / (1.0 + m as f64);
                gd_update(theta, grad, lr, &live);
                Ok(lr)
            }
            OptimizerKind::GdArmijo { eta0, beta, sigma } => {
                let d: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| if live(i) { -g } else { 0.0 })
                    .collect();
                if d.iter().all(|&x| x == 0.0) {
                    return Ok(0.0);
                }
                let eta = armijo_search(theta, value, grad, &d, eta0, beta, sigma, value_fn)?;
                for (t, di) in theta.iter_mut().zip(&d) {
                    *t += eta * di;
                }
                Ok(eta)
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = (m + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, th) in theta.iter_mut().enumerate() {
                    if !live(i) {
                        continue;
                    }
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    let denom = vh.sqrt() + eps;
                    if denom > 0.0 {
                        *th -= lr * mh / denom;
                    }
                }
                Ok(lr)
            }
        }
    }

    /// Evaluate `f` (value and gradient) at `theta`, then update.
    pub fn step<F>(&mut self, theta: &mut [f64], mut f: F) -> Result<f64>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (value, grad) = f(theta)?;
        let mut value_fn = |p: &[f64]| f(p).map(|(v, _)| v);
        self.apply(theta, &grad, value, None, &mut value_fn)
    }
}

fn gd_update(theta: &mut [f64], grad: &[f64], lr: f64, live: &dyn Fn(usize) -> bool) {
    for (i, (t, g)) in theta.iter_mut().zip(grad).enumerate() {
        if live(i) {
            *t -= lr * g;
        }
    }
}

/// Largest `eta` in `eta0 * beta^j` with
/// `f(theta + eta d) <= f(theta) + sigma * eta * grad . d`.
#[allow(clippy::too_many_arguments)]
pub fn armijo_search(
    theta: &[f64],
    value: f64,
    grad: &[f64],
    direction: &[f64],
    eta0: f64,
    beta: f64,
    sigma: f64,
    value_fn: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    if !(0.0 < beta && beta < 1.0 && 0.0 < sigma && sigma < 1.0 && eta0 > 0.0) {
        return Err(Error::InvalidArgument(
            "armijo search needs eta0 > 0, 0 < beta < 1, 0 < sigma < 1".into(),
        ));
    }
    let slope: f64 = grad.iter().zip(direction).map(|(g, d)| g * d).sum();
    if slope.is_nan() || slope >= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "armijo search needs a descent direction (grad . d = {slope})"
        )));
    }
    let mut eta = eta0;
    let mut trial = theta.to_vec();
    for _ in 0..=MAX_BACKTRACKS {
        for ((t, th), d) in trial.iter_mut().zip(theta).zip(direction) {
            *t = th + eta * d;
        }
        // A trial point where the loss cannot be evaluated is rejected.
        let accepted = match value_fn(&trial) {
            Ok(v) => v.is_finite() && v <= value + sigma * eta * slope,
            Err(e) if e.is_numerical() => false,
            Err(e) => return Err(e),
        };
        if accepted {
            return Ok(eta);
        }
        eta *= beta;
    }
    Err(Error::LineSearch(MAX_BACKTRACKS))
}

/// One training-trace record, taken at the parameters before the update of
/// the same iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    pub mse_u: f64,
    pub mse_f: f64,
    pub recovery: f64,
    pub slope_min: f64,
    pub slope_mean: f64,
    pub slope_max: f64,
    pub inverse: Vec<f64>,
    /// Wall-clock milliseconds since training started.
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub inverse_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub final_theta: Vec<f64>,
    /// Set when a stop rule ended training early.
    pub stopped_early: bool,
}

impl TrainingTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace always holds the initial record")
    }
}

/// Ends training before the iteration budget once every inverse parameter
/// has moved by less than `rel_tol` (relative) over the last `window`
/// iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub window: usize,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOptions {
    pub iterations: usize,
    /// Keep all slopes at their initial values.
    pub freeze_slopes: bool,
    pub stop: Option<StopRule>,
}

/// Slope entries of the objective's parameter vector.
pub fn slope_mask(objective: &Objective) -> Vec<bool> {
    let layout = objective.template().layout();
    let off = layout.slope_offset();
    (0..objective.dim())
        .map(|i| i >= off && i < off + layout.slope_count())
        .collect()
}

/// Full-batch training. Records `iterations + 1` rows (the initial state and
/// the state after each update) and hands every row to `sink` as it is made.
pub fn train(
    objective: &Objective,
    theta0: Vec<f64>,
    optimizer: OptimizerKind,
    options: &TrainOptions,
    sink: &mut dyn FnMut(&TraceRow),
) -> Result<TrainingTrace> {
    let mut state = OptimizerState::new(optimizer, objective.dim())?;
    let mut frozen = objective.frozen_mask();
    if options.freeze_slopes {
        for (f, s) in frozen.iter_mut().zip(slope_mask(objective)) {
            *f |= s;
        }
    }
    let nn = objective.network_len();
    let slope_range = {
        let l = objective.template().layout();
        l.slope_offset()..l.slope_offset() + l.slope_count()
    };
    let mut theta = theta0;
    let mut rows: Vec<TraceRow> = Vec::with_capacity(options.iterations + 1);
    let start = Instant::now();
    let diverged = |iteration: usize, e: Error| -> Error {
        if e.is_numerical() {
            Error::Divergence {
                iteration,
                reason: e.to_string(),
            }
        } else {
            e
        }
    };
    let mut stopped_early = false;
    for m in 0..=options.iterations {
        let eval = objective.evaluate(&theta).map_err(|e| diverged(m, e))?;
        let row = make_row(m, &eval.loss, &theta[slope_range.clone()], &theta[nn..], start);
        sink(&row);
        rows.push(row);
        if m == options.iterations {
            break;
        }
        if let Some(rule) = options.stop {
            if stagnated(&rows, rule) {
                stopped_early = true;
                break;
            }
        }
        let mut value_fn = |p: &[f64]| objective.loss(p).map(|l| l.total);
        state
            .apply(
                &mut theta,
                &eval.gradient,
                eval.loss.total,
                Some(&frozen),
                &mut value_fn,
            )
            .map_err(|e| diverged(m, e))?;
    }
    Ok(TrainingTrace {
        inverse_names: objective.inverse_params().iter().map(|p| p.name.clone()).collect(),
        rows,
        final_theta: theta,
        stopped_early,
    })
}

fn make_row(m: usize, loss: &LossBreakdown, slopes: &[f64], inverse: &[f64], start: Instant) -> TraceRow {
    let (slope_min, slope_mean, slope_max) = if slopes.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        (
            slopes.iter().copied().fold(f64::INFINITY, f64::min),
            slopes.iter().sum::<f64>() / slopes.len() as f64,
            slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    TraceRow {
        iteration: m,
        total: loss.total,
        mse_u: loss.data,
        mse_f: loss.residual,
        recovery: loss.recovery,
        slope_min,
        slope_mean,
        slope_max,
        inverse: inverse.to_vec(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn stagnated(rows: &[TraceRow], rule: StopRule) -> bool {
    if rule.window == 0 || rows.len() <= rule.window || rows[0].inverse.is_empty() {
        return false;
    }
    let now = &rows[rows.len() - 1].inverse;
    let then = &rows[rows.len() - 1 - rule.window].inverse;
    now.iter()
        .zip(then)
        .all(|(a, b)| (a - b).abs() <= rule.rel_tol * a.abs().max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(p: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((p.iter().map(|x| x * x).sum(), p.iter().map(|x| 2.0 * x).collect()))
    }

    #[test]
    fn constant_step_example() {
        let mut s = OptimizerState::new(OptimizerKind::GdConstant { lr: 0.1 }, 1).unwrap();
        let mut t = vec![1.0];
        s.step(&mut t, quad).unwrap();
        assert!((t[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn geometric_contraction() {
        let mut s = OptimizerState::new(OptimizerKind::GdConstant { lr: 0.4 }, 1).unwrap();
        let mut t = vec![1.0];
        for _ in 0..50 {
            s.step(&mut t, quad).unwrap();
        }
        assert!(t[0].abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let kinds = [
            OptimizerKind::GdConstant { lr: 0.1 },
            OptimizerKind::GdDiminishing { lr0: 0.1 },
            OptimizerKind::GdArmijo {
                eta0: 1.0,
                beta: 0.5,
                sigma: 0.1,
            },
            OptimizerKind::adam(0.1),
        ];
        for k in kinds {
            let mut s = OptimizerState::new(k, 2).unwrap();
            let mut t = vec![0.0, 0.0];
            for _ in 0..3 {
                s.step(&mut t, quad).unwrap();
            }
            assert_eq!(t, vec![0.0, 0.0], "{k:?}");
        }
    }

    #[test]
    fn diminishing_schedule() {
        let mut s = OptimizerState::new(OptimizerKind::GdDiminishing { lr0: 0.3 }, 1).unwrap();
        let mut t = vec![1.0];
        let etas: Vec<f64> = (0..4).map(|_| s.step(&mut t, quad).unwrap()).collect();
        for (e, want) in etas.iter().zip([0.3, 0.15, 0.1, 0.075]) {
            assert!((e - want).abs() < 1e-15);
        }
    }

    #[test]
    fn armijo_example() {
        let mut f = |p: &[f64]| Ok(p[0] * p[0]);
        let eta = armijo_search(&[1.0], 1.0, &[2.0], &[-2.0], 1.0, 0.5, 0.1, &mut f).unwrap();
        assert_eq!(eta, 0.5);
        assert!(armijo_search(&[1.0], 1.0, &[2.0], &[2.0], 1.0, 0.5, 0.1, &mut f).is_err());
        let mut flat = |_: &[f64]| Ok(2.0);
        assert!(matches!(
            armijo_search(&[1.0], 1.0, &[2.0], &[-2.0], 1.0, 0.5, 0.1, &mut flat),
            Err(Error::LineSearch(_))
        ));
    }

    #[test]
    fn armijo_steps_satisfy_sufficient_decrease() {
        let q = [[3.0, 0.5], [0.5, 1.0]];
        let f = |p: &[f64]| {
            let v = 0.5 * (q[0][0] * p[0] * p[0] + 2.0 * q[0][1] * p[0] * p[1] + q[1][1] * p[1] * p[1]);
            let g = vec![q[0][0] * p[0] + q[0][1] * p[1], q[1][0] * p[0] + q[1][1] * p[1]];
            Ok((v, g))
        };
        let mut t = vec![1.0, -2.0];
        for _ in 0..20 {
            let (v, g) = f(&t).unwrap();
            let d: Vec<f64> = g.iter().map(|x| -x).collect();
            let mut vf = |p: &[f64]| f(p).map(|x| x.0);
            let eta = armijo_search(&t, v, &g, &d, 1.0, 0.5, 1e-4, &mut vf).unwrap();
            let next: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a + eta * b).collect();
            let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!(f(&next).unwrap().0 <= v + 1e-4 * eta * slope);
            t = next;
        }
    }

    #[test]
    fn adam_without_momentum_is_sign_descent() {
        let k = OptimizerKind::Adam {
            lr: 0.01,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        };
        let mut s = OptimizerState::new(k, 2).unwrap();
        let mut t = vec![3.0, -0.5];
        s.step(&mut t, quad).unwrap();
        assert!((t[0] - 2.99).abs() < 1e-15 && (t[1] + 0.49).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut s = OptimizerState::new(OptimizerKind::adam(0.1), 1).unwrap();
        let mut t = vec![5.0];
        s.step(&mut t, quad).unwrap();
        assert!((t[0] - 4.9).abs() < 1e-8);
    }

    #[test]
    fn frozen_entries_do_not_move() {
        for k in [OptimizerKind::GdConstant { lr: 0.1 }, OptimizerKind::adam(0.1)] {
            let mut s = OptimizerState::new(k, 2).unwrap();
            let mut t = vec![1.0, 1.0];
            let mut vf = |p: &[f64]| quad(p).map(|x| x.0);
            s.apply(&mut t, &[2.0, 2.0], 2.0, Some(&[false, true]), &mut vf)
                .unwrap();
            assert_eq!(t[1], 1.0);
            assert!(t[0] < 1.0);
        }
    }

    #[test]
    fn rejects_bad_settings_and_gradients() {
        assert!(OptimizerState::new(OptimizerKind::GdConstant { lr: 0.0 }, 1).is_err());
        assert!(OptimizerState::new(
            OptimizerKind::GdArmijo {
                eta0: 1.0,
                beta: 1.5,
                sigma: 0.1
            },
            1
        )
        .is_err());
        let mut s = OptimizerState::new(OptimizerKind::GdConstant { lr: 0.1 }, 1).unwrap();
        let mut t = vec![1.0];
        assert!(s.step(&mut t, |_| Ok((1.0, vec![f64::NAN]))).is_err());
    }
}
