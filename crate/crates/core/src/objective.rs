//! Composite training objective
//! `J = W_F * MSE_F + W_u * MSE_u + W_a * S(a)`.
//!
//! Two evaluation paths compute the same numbers. The free functions
//! ([`mse_data`], [`mse_residual`], [`slope_recovery`], [`total_loss`],
//! [`cross_entropy`]) build everything on one [`Tape`]; they are the
//! reference. [`Objective::evaluate`] uses the batched engine in
//! [`crate::batch`] and is what training runs on.
//!
//! The optimizer sees a single vector `theta = [network params, inverse
//! params]`, where the inverse params are the unknown PDE coefficients
//! declared by the residual operator.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::batch::{self, Channels, Mat};
use crate::error::{Error, Result};
use crate::network::{NetworkParams, SlopeKind, TapeParams};

/// Points stored row-major, `dim` coordinates each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub dim: usize,
    pub coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        Ok(PointSet { dim, coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn select(&self, indices: &[usize]) -> PointSet {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        PointSet { dim: self.dim, coords }
    }
}

/// Supervised data term.
#[derive(Debug, Clone, PartialEq)]
pub enum DataTerm {
    /// Squared error against `targets` (row-major, `outputs` per point).
    Regression {
        points: PointSet,
        targets: Vec<f64>,
        outputs: usize,
    },
    /// Mean cross-entropy. A single-output network is read as the logit
    /// pair `[0, u]`, i.e. a two-class model.
    Classification {
        points: PointSet,
        labels: Vec<usize>,
        classes: usize,
    },
}

impl DataTerm {
    pub fn regression(points: PointSet, targets: Vec<f64>) -> Result<Self> {
        if points.is_empty() || !targets.len().is_multiple_of(points.len()) {
            return Err(Error::Shape(format!(
                "{} targets for {} data points",
                targets.len(),
                points.len()
            )));
        }
        let outputs = targets.len() / points.len();
        Ok(DataTerm::Regression {
            points,
            targets,
            outputs,
        })
    }

    pub fn classification(points: PointSet, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::Dimension {
                what: "labels",
                expected: points.len(),
                actual: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(DataTerm::Classification {
            points,
            labels,
            classes,
        })
    }

    pub fn points(&self) -> &PointSet {
        match self {
            DataTerm::Regression { points, .. } | DataTerm::Classification { points, .. } => points,
        }
    }

    pub fn len(&self) -> usize {
        self.points().len()
    }

    pub fn is_empty(&self) -> bool {
        self.points().is_empty()
    }

    /// Same term restricted to the given point indices.
    pub fn select(&self, idx: &[usize]) -> DataTerm {
        match self {
            DataTerm::Regression {
                points,
                targets,
                outputs,
            } => DataTerm::Regression {
                points: points.select(idx),
                targets: idx
                    .iter()
                    .flat_map(|&i| targets[i * outputs..(i + 1) * outputs].iter().copied())
                    .collect(),
                outputs: *outputs,
            },
            DataTerm::Classification {
                points,
                labels,
                classes,
            } => DataTerm::Classification {
                points: points.select(idx),
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

/// A derivative of the network output that a residual needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Deriv {
    pub input: usize,
    /// 1 or 2 (pure second derivative).
    pub order: u8,
}

/// Unknown coefficient of a PDE, learned alongside the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseParam {
    pub name: String,
    pub init: f64,
    pub trainable: bool,
}

/// What a residual builder gets to work with at one point.
pub struct ResidualInputs<'a> {
    pub u: Var,
    pub x: &'a [Var],
    pub inverse: &'a [Var],
    derivs: &'a [(Deriv, Var)],
}

impl<'a> ResidualInputs<'a> {
    pub fn new(u: Var, x: &'a [Var], inverse: &'a [Var], derivs: &'a [(Deriv, Var)]) -> Self {
        ResidualInputs { u, x, inverse, derivs }
    }

    /// The declared derivative `d^order u / dx_input^order`.
    pub fn d(&self, input: usize, order: u8) -> Result<Var> {
        self.derivs
            .iter()
            .find(|(d, _)| d.input == input && d.order == order)
            .map(|&(_, v)| v)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "derivative of order {order} in input {input} was not declared by the operator"
                ))
            })
    }
}

/// PDE residual `F = L u - f` at a single point.
pub trait ResidualOperator: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;
    fn input_dim(&self) -> usize;
    fn derivatives(&self) -> Vec<Deriv>;
    fn inverse_params(&self) -> Vec<InverseParam>;
    fn build(&self, tape: &mut Tape, inputs: &ResidualInputs<'_>) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct ResidualTerm {
    pub operator: Arc<dyn ResidualOperator>,
    pub points: PointSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryKind {
    None,
    Gaaf,
    Llaaf,
    Nlaaf,
}

impl RecoveryKind {
    /// The recovery term matching a slope regime.
    pub fn for_mode(kind: SlopeKind) -> Self {
        match kind {
            SlopeKind::Fixed => RecoveryKind::None,
            SlopeKind::Gaaf => RecoveryKind::Gaaf,
            SlopeKind::Llaaf => RecoveryKind::Llaaf,
            SlopeKind::Nlaaf => RecoveryKind::Nlaaf,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub w_f: f64,
    pub w_u: f64,
    pub w_a: f64,
    pub data: Option<DataTerm>,
    pub residual: Option<ResidualTerm>,
    pub recovery: RecoveryKind,
}

impl ObjectiveSpec {
    pub fn validate(&self, params: &NetworkParams) -> Result<()> {
        for (name, w) in [("W_F", self.w_f), ("W_u", self.w_u), ("W_a", self.w_a)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        if self.w_u > 0.0 && self.data.as_ref().is_none_or(|d| d.is_empty()) {
            return Err(Error::InvalidArgument("W_u > 0 needs at least one data point".into()));
        }
        if self.w_f > 0.0 && self.residual.as_ref().is_none_or(|r| r.points.is_empty()) {
            return Err(Error::InvalidArgument(
                "W_F > 0 needs at least one residual point".into(),
            ));
        }
        if self.recovery != RecoveryKind::None && self.recovery != RecoveryKind::for_mode(params.mode().kind) {
            return Err(Error::Mode {
                mode: params.mode().kind.to_string(),
                reason: format!("recovery kind {:?} does not match", self.recovery),
            });
        }
        if let Some(d) = &self.data {
            if d.points().dim != params.input_dim() {
                return Err(Error::Dimension {
                    what: "data point dimension",
                    expected: params.input_dim(),
                    actual: d.points().dim,
                });
            }
            match d {
                DataTerm::Regression { outputs, .. } if *outputs != params.output_dim() => {
                    return Err(Error::Dimension {
                        what: "targets per point",
                        expected: params.output_dim(),
                        actual: *outputs,
                    });
                }
                DataTerm::Classification { classes, .. } => {
                    let ok = if params.output_dim() == 1 {
                        *classes == 2
                    } else {
                        *classes == params.output_dim()
                    };
                    if !ok {
                        return Err(Error::Dimension {
                            what: "classes",
                            expected: params.output_dim().max(2),
                            actual: *classes,
                        });
                    }
                }
                _ => {}
            }
        }
        if let Some(r) = &self.residual {
            let op = &r.operator;
            if op.input_dim() != params.input_dim() || r.points.dim != params.input_dim() {
                return Err(Error::Dimension {
                    what: "residual input dimension",
                    expected: params.input_dim(),
                    actual: op.input_dim(),
                });
            }
            if params.output_dim() != 1 {
                return Err(Error::Dimension {
                    what: "network outputs for a residual",
                    expected: 1,
                    actual: params.output_dim(),
                });
            }
            for d in op.derivatives() {
                if d.input >= op.input_dim() || !(1..=2).contains(&d.order) {
                    return Err(Error::InvalidArgument(format!(
                        "unsupported derivative order {} in input {}",
                        d.order, d.input
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn inverse_params(&self) -> Vec<InverseParam> {
        self.residual
            .as_ref()
            .map(|r| r.operator.inverse_params())
            .unwrap_or_default()
    }
}

/// Mean squared data misfit `(1/N_u) sum |u_i - u(x_i)|^2`.
pub fn mse_data(tape: &mut Tape, net: &TapeParams, points: &PointSet, targets: &[f64]) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty data set".into()));
    }
    let outs = targets.len() / points.len();
    let mut terms = Vec::with_capacity(targets.len());
    for (i, x) in points.iter().enumerate() {
        let xv = tape.lift_all(x)?;
        let u = net.forward(tape, &xv)?;
        if u.len() != outs {
            return Err(Error::Dimension {
                what: "targets per point",
                expected: u.len(),
                actual: outs,
            });
        }
        for (o, &uo) in u.iter().enumerate() {
            let t = tape.lift(targets[i * outs + o])?;
            let e = tape.sub(uo, t);
            terms.push(tape.abs_sq(e));
        }
    }
    let s = tape.sum(&terms)?;
    Ok(tape.scale(s, 1.0 / points.len() as f64))
}

/// Network output at `x` with the operator's declared derivatives.
fn residual_at(
    tape: &mut Tape,
    net: &TapeParams,
    x: &[f64],
    op: &dyn ResidualOperator,
    inverse: &[Var],
) -> Result<Var> {
    let xv = tape.lift_all(x)?;
    let u = net.forward(tape, &xv)?[0];
    let derivs = input_derivatives(tape, u, &xv, op)?;
    op.build(tape, &ResidualInputs::new(u, &xv, inverse, &derivs))
}

/// Residual of `op` for an arbitrary function `u(x)` built on a tape by
/// `u_fn`, e.g. an exact solution. Derivatives come from
/// [`Tape::derivative_graph`].
pub fn residual_of_function<F>(op: &dyn ResidualOperator, x: &[f64], inverse: &[f64], u_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.lift_all(x)?;
    let iv = tape.lift_all(inverse)?;
    let u = u_fn(&mut tape, &xv)?;
    let derivs = input_derivatives(&mut tape, u, &xv, op)?;
    let r = op.build(&mut tape, &ResidualInputs::new(u, &xv, &iv, &derivs))?;
    Ok(tape.value(r))
}

fn input_derivatives(tape: &mut Tape, u: Var, xv: &[Var], op: &dyn ResidualOperator) -> Result<Vec<(Deriv, Var)>> {
    let mut derivs = Vec::new();
    let mut firsts: Vec<(usize, Var)> = Vec::new();
    let mut wanted = op.derivatives();
    wanted.sort_by_key(|d| (d.order, d.input));
    for d in wanted {
        if d.input >= xv.len() || !(1..=2).contains(&d.order) {
            return Err(Error::InvalidArgument(format!(
                "unsupported derivative order {} in input {}",
                d.order, d.input
            )));
        }
        let first = match firsts.iter().find(|(i, _)| *i == d.input) {
            Some(&(_, v)) => v,
            None => {
                let v = tape.derivative_graph(u, xv[d.input])?;
                firsts.push((d.input, v));
                v
            }
        };
        let v = if d.order == 1 {
            first
        } else {
            tape.derivative_graph(first, xv[d.input])?
        };
        derivs.push((d, v));
    }
    Ok(derivs)
}

/// Mean squared residual `(1/N_f) sum |F(x_f^i)|^2`.
pub fn mse_residual(
    tape: &mut Tape,
    net: &TapeParams,
    points: &PointSet,
    op: &dyn ResidualOperator,
    inverse: &[Var],
) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty residual point set".into()));
    }
    if points.dim != op.input_dim() {
        return Err(Error::Dimension {
            what: "residual input dimension",
            expected: op.input_dim(),
            actual: points.dim,
        });
    }
    let mut terms = Vec::with_capacity(points.len());
    for x in points.iter() {
        let r = residual_at(tape, net, x, op, inverse)?;
        terms.push(tape.abs_sq(r));
    }
    let s = tape.sum(&terms)?;
    Ok(tape.scale(s, 1.0 / points.len() as f64))
}

/// Slope recovery `S(a)`:
/// L-LAAF `(D-1) / sum_k exp(a^k)`, N-LAAF the same with `a^k` replaced by
/// the layer mean of `a_i^k`, GAAF `exp(-a)`.
pub fn slope_recovery(tape: &mut Tape, net: &TapeParams, kind: RecoveryKind) -> Result<Var> {
    let mode = net.mode().kind;
    if kind == RecoveryKind::None || RecoveryKind::for_mode(mode) != kind {
        return Err(Error::Mode {
            mode: mode.to_string(),
            reason: format!("no slope recovery of kind {kind:?}"),
        });
    }
    let layout = net.layout();
    let hidden = layout.depth() - 1;
    let slopes = &net.slopes;
    match kind {
        RecoveryKind::Gaaf => {
            let e = tape.exp(slopes[0]);
            let one = tape.lift(1.0)?;
            Ok(tape.apply(Op::Div, &[one, e])?)
        }
        RecoveryKind::Llaaf | RecoveryKind::Nlaaf => {
            let mut exps = Vec::with_capacity(hidden);
            let mut start = 0;
            for k in 1..=hidden {
                let m = if kind == RecoveryKind::Llaaf {
                    slopes[k - 1]
                } else {
                    let width = layout.widths()[k];
                    let s = tape.sum(&slopes[start..start + width])?;
                    start += width;
                    tape.scale(s, 1.0 / width as f64)
                };
                exps.push(tape.exp(m));
            }
            let total = tape.sum(&exps)?;
            let num = tape.lift(hidden as f64)?;
            Ok(tape.apply(Op::Div, &[num, total])?)
        }
        RecoveryKind::None => unreachable!(),
    }
}

/// `-ln softmax(logits)[label]`, stabilized by subtracting the largest logit.
pub fn cross_entropy(tape: &mut Tape, logits: &[Var], label: usize) -> Result<Var> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("cross entropy needs at least two logits".into()));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let top = logits
        .iter()
        .copied()
        .max_by(|a, b| tape.value(*a).total_cmp(&tape.value(*b)))
        .expect("nonempty");
    let mut exps = Vec::with_capacity(logits.len());
    for &z in logits {
        let shifted = tape.sub(z, top);
        exps.push(tape.exp(shifted));
    }
    let s = tape.sum(&exps)?;
    let lse = tape.apply(Op::Ln, &[s])?;
    let zl = tape.sub(logits[label], top);
    Ok(tape.sub(lse, zl))
}

/// Logits used for classification: a single output `u` reads as `[0, u]`.
fn logits(tape: &mut Tape, out: &[Var]) -> Result<Vec<Var>> {
    if out.len() == 1 {
        Ok(vec![tape.lift(0.0)?, out[0]])
    } else {
        Ok(out.to_vec())
    }
}

/// Mean cross-entropy over a labelled point set.
pub fn mean_cross_entropy(tape: &mut Tape, net: &TapeParams, points: &PointSet, labels: &[usize]) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty data set".into()));
    }
    let mut terms = Vec::with_capacity(points.len());
    for (x, &l) in points.iter().zip(labels) {
        let xv = tape.lift_all(x)?;
        let out = net.forward(tape, &xv)?;
        let z = logits(tape, &out)?;
        terms.push(cross_entropy(tape, &z, l)?);
    }
    let s = tape.sum(&terms)?;
    Ok(tape.scale(s, 1.0 / points.len() as f64))
}

/// Components of the objective as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct TapeLoss {
    pub total: Var,
    pub data: Option<Var>,
    pub residual: Option<Var>,
    pub recovery: Option<Var>,
}

/// The weighted sum on a tape. `inverse` are the lifted inverse parameters.
pub fn total_loss(tape: &mut Tape, net: &TapeParams, spec: &ObjectiveSpec, inverse: &[Var]) -> Result<TapeLoss> {
    let mut terms = Vec::new();
    let data = match &spec.data {
        Some(DataTerm::Regression { points, targets, .. }) => Some(mse_data(tape, net, points, targets)?),
        Some(DataTerm::Classification { points, labels, .. }) => Some(mean_cross_entropy(tape, net, points, labels)?),
        None => None,
    };
    if let Some(d) = data {
        terms.push(tape.scale(d, spec.w_u));
    }
    let residual = match &spec.residual {
        Some(r) => Some(mse_residual(tape, net, &r.points, r.operator.as_ref(), inverse)?),
        None => None,
    };
    if let Some(r) = residual {
        terms.push(tape.scale(r, spec.w_f));
    }
    let recovery = match spec.recovery {
        RecoveryKind::None => None,
        kind => Some(slope_recovery(tape, net, kind)?),
    };
    if let Some(s) = recovery {
        terms.push(tape.scale(s, spec.w_a));
    }
    let total = if terms.is_empty() {
        tape.lift(0.0)?
    } else {
        tape.sum(&terms)?
    };
    Ok(TapeLoss {
        total,
        data,
        residual,
        recovery,
    })
}

/// Unweighted components and weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// MSE_u, or mean cross-entropy for classification.
    pub data: f64,
    /// MSE_F.
    pub residual: f64,
    /// S(a), before weighting.
    pub recovery: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub gradient: Vec<f64>,
}

/// A validated objective bound to one network shape.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: ObjectiveSpec,
    template: NetworkParams,
    inverse: Vec<InverseParam>,
    channels: Channels,
}

impl Objective {
    pub fn new(spec: ObjectiveSpec, template: &NetworkParams) -> Result<Self> {
        spec.validate(template)?;
        let inverse = spec.inverse_params();
        let channels = match &spec.residual {
            Some(r) => {
                let ds = r.operator.derivatives();
                let first = ds.iter().map(|d| d.input).collect();
                let second = ds.iter().filter(|d| d.order == 2).map(|d| d.input).collect();
                Channels::new(first, second)?
            }
            None => Channels::value_only(),
        };
        Ok(Objective {
            spec,
            template: template.clone(),
            inverse,
            channels,
        })
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn template(&self) -> &NetworkParams {
        &self.template
    }

    pub fn inverse_params(&self) -> &[InverseParam] {
        &self.inverse
    }

    pub fn network_len(&self) -> usize {
        self.template.param_count()
    }

    pub fn dim(&self) -> usize {
        self.network_len() + self.inverse.len()
    }

    /// `[network params, inverse-parameter initial values]`.
    pub fn initial_theta(&self, params: &NetworkParams) -> Vec<f64> {
        let mut t = params.to_flat();
        t.extend(self.inverse.iter().map(|p| p.init));
        t
    }

    /// Entries the optimizer must leave alone: slopes of a fixed-activation
    /// network never exist, so only non-trainable inverse parameters here.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.network_len()];
        m.extend(self.inverse.iter().map(|p| !p.trainable));
        m
    }

    pub fn network(&self, theta: &[f64]) -> Result<NetworkParams> {
        self.check_len(theta)?;
        self.template.with_flat(&theta[..self.network_len()])
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension {
                what: "objective parameter vector",
                expected: self.dim(),
                actual: theta.len(),
            });
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", theta[i])));
        }
        Ok(())
    }

    /// Loss and gradient on the batched engine.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        self.evaluate_subset(theta, None)
    }

    /// As [`Objective::evaluate`], with the data term restricted to the given
    /// indices (mini-batches). Residual and recovery terms are unaffected.
    pub fn evaluate_subset(&self, theta: &[f64], subset: Option<&[usize]>) -> Result<Evaluation> {
        let net = self.network(theta)?;
        let nn = self.network_len();
        let inverse = &theta[nn..];
        let mut grad = vec![0.0; theta.len()];
        let mut loss = LossBreakdown::default();

        if let Some(data) = &self.spec.data {
            let selected;
            let data = match subset {
                Some(idx) => {
                    selected = data.select(idx);
                    &selected
                }
                None => data,
            };
            let (value, g) = data_term(&net, data, self.spec.w_u)?;
            loss.data = value;
            loss.total += self.spec.w_u * value;
            add_into(&mut grad[..nn], &g);
        }
        if let Some(r) = &self.spec.residual {
            let (value, g, ginv) = residual_term(&net, r, inverse, &self.channels, self.spec.w_f)?;
            loss.residual = value;
            loss.total += self.spec.w_f * value;
            add_into(&mut grad[..nn], &g);
            add_into(&mut grad[nn..], &ginv);
        }
        if self.spec.recovery != RecoveryKind::None {
            let mut tape = Tape::new();
            let tp = net.lift(&mut tape)?;
            let s = slope_recovery(&mut tape, &tp, self.spec.recovery)?;
            loss.recovery = tape.value(s);
            loss.total += self.spec.w_a * loss.recovery;
            let gs = tape.backward(s)?;
            let off = net.layout().slope_offset();
            for (i, v) in tp.slopes.iter().enumerate() {
                grad[off + i] += self.spec.w_a * gs.wrt(*v);
            }
        }
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("objective value {}", loss.total)));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
        }
        Ok(Evaluation { loss, gradient: grad })
    }

    /// Value only.
    pub fn loss(&self, theta: &[f64]) -> Result<LossBreakdown> {
        Ok(self.evaluate(theta)?.loss)
    }

    /// Same as [`Objective::evaluate`] but entirely on one scalar tape.
    pub fn evaluate_tape(&self, theta: &[f64]) -> Result<Evaluation> {
        let net = self.network(theta)?;
        let mut tape = Tape::new();
        let tp = net.lift(&mut tape)?;
        let inv = tape.lift_all(&theta[self.network_len()..])?;
        let tl = total_loss(&mut tape, &tp, &self.spec, &inv)?;
        let g = tape.backward(tl.total)?;
        let mut vars = tp.flat_vars();
        vars.extend_from_slice(&inv);
        let value = |v: Option<Var>| v.map(|v| tape.value(v)).unwrap_or(0.0);
        Ok(Evaluation {
            loss: LossBreakdown {
                total: tape.value(tl.total),
                data: value(tl.data),
                residual: value(tl.residual),
                recovery: value(tl.recovery),
            },
            gradient: g.wrt_all(&vars),
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Points per batched pass. Small enough that every layer's activations stay
/// in cache; the loss is a sum over points, so chunking is exact.
const CHUNK: usize = 256;

fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(CHUNK).map(move |s| (s, (s + CHUNK).min(n)))
}

/// Data term value and `weight *` its network gradient.
fn data_term(net: &NetworkParams, data: &DataTerm, weight: f64) -> Result<(f64, Vec<f64>)> {
    let points = data.points();
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty data set".into()));
    }
    let dim = points.dim;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    let mut z = Vec::new();
    for (start, end) in chunks(n) {
        let m = end - start;
        let fwd = batch::forward(net, &points.coords[start * dim..end * dim], &Channels::value_only())?;
        let out = fwd.output();
        let mut adj = Mat::zeros(out.rows, out.cols);
        match data {
            DataTerm::Regression { targets, outputs, .. } => {
                for q in 0..m {
                    let p = start + q;
                    for o in 0..*outputs {
                        let e = out.at(o, q) - targets[p * outputs + o];
                        value += e * e;
                        adj.data[o * m + q] = weight * 2.0 * e * inv_n;
                    }
                }
            }
            DataTerm::Classification { labels, .. } => {
                for q in 0..m {
                    let label = labels[start + q];
                    z.clear();
                    if out.rows == 1 {
                        z.extend([0.0, out.at(0, q)]);
                    } else {
                        z.extend((0..out.rows).map(|o| out.at(o, q)));
                    }
                    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|v| (v - top).exp()).sum();
                    let lse = top + sum.ln();
                    value += lse - z[label];
                    let mut probs = z.iter().map(|v| (v - lse).exp());
                    if out.rows == 1 {
                        let p1 = probs.next_back().expect("two logits");
                        adj.data[q] = weight * (p1 - (label == 1) as u8 as f64) * inv_n;
                    } else {
                        for (o, pr) in probs.enumerate() {
                            adj.data[o * m + q] = weight * (pr - (label == o) as u8 as f64) * inv_n;
                        }
                    }
                }
            }
        }
        add_into(&mut grad, &fwd.backward(net, &adj)?);
    }
    Ok((value * inv_n, grad))
}

/// Residual term value, `weight *` network gradient, `weight *` inverse gradient.
fn residual_term(
    net: &NetworkParams,
    term: &ResidualTerm,
    inverse: &[f64],
    channels: &Channels,
    weight: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let op = term.operator.as_ref();
    let points = &term.points;
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty residual point set".into()));
    }
    let dim = points.dim;
    let derivs = op.derivatives();
    let slots: Vec<usize> = derivs
        .iter()
        .map(|d| {
            if d.order == 1 {
                channels.first_channel(d.input)
            } else {
                channels.second_channel(d.input)
            }
            .expect("channels built from the operator")
        })
        .collect();
    let mut grad = vec![0.0; net.param_count()];
    let mut ginv = vec![0.0; inverse.len()];
    let mut value = 0.0;
    let scale = weight * 2.0 / n as f64;
    let mut tape = Tape::with_capacity(64);
    let mut dvars = Vec::with_capacity(derivs.len());
    for (start, end) in chunks(n) {
        let m = end - start;
        let fwd = batch::forward(net, &points.coords[start * dim..end * dim], channels)?;
        let mut adj = Mat::zeros(1, fwd.output().cols);
        for q in 0..m {
            tape.reset();
            let u = tape.lift(fwd.value(0, q))?;
            dvars.clear();
            for (d, &slot) in derivs.iter().zip(&slots) {
                dvars.push((*d, tape.lift(fwd.channel(0, slot, q))?));
            }
            let xv = tape.lift_all(points.point(start + q))?;
            let iv = tape.lift_all(inverse)?;
            let r = op.build(&mut tape, &ResidualInputs::new(u, &xv, &iv, &dvars))?;
            let rv = tape.value(r);
            value += rv * rv;
            let g = tape.backward(r)?;
            let c = scale * rv;
            adj.data[q] += c * g.wrt(u);
            for (&(_, v), &slot) in dvars.iter().zip(&slots) {
                adj.data[slot * m + q] += c * g.wrt(v);
            }
            for (gi, v) in ginv.iter_mut().zip(&iv) {
                *gi += c * g.wrt(*v);
            }
        }
        add_into(&mut grad, &fwd.backward(net, &adj)?);
    }
    Ok((value / n as f64, grad, ginv))
}
