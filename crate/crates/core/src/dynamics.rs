//! The conditioning view of adaptive slopes.
//!
//! With `n = 1`, gradient descent on `(a, W)` moves the effective hidden
//! parameters `Θ̃ = A a ∘ W` exactly like gradient descent on the standard
//! objective preconditioned by
//! `G = diag((Aa)²) + diag(W) A Aᵀ diag(W) - η diag(V)`,
//! `V = diag(Aa) A Aᵀ diag(W) ∇J(Θ̃)`.
//! This module builds `A`, `G` and `V`, checks that identity and the
//! homogeneity identities of the slope gradients numerically, and measures
//! condition numbers of `G0^{1/2} ∇²J G0^{1/2}` along SGD runs on the circles
//! data.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::{ActivationMode, NetworkParams, ParamRole, SlopeKind};
use crate::objective::{residual_of_function, slope_recovery, DataTerm, Objective, ObjectiveSpec, RecoveryKind};
use crate::optimize::{OptimizerKind, OptimizerState};
use crate::problems::{circles_dataset, CirclesPreset};
use crate::rng;

/// Finite-difference step for Hessians.
pub const HESSIAN_STEP: f64 = 1e-4;

/// Largest parameter count for which dense matrices are built.
pub const MAX_DENSE: usize = 2000;

/// Floor on the smallest singular value in condition numbers.
pub const SIGMA_FLOOR: f64 = 1e-300;

/// 0/1 matrix assigning each hidden weight and bias to its slope.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityMatrix {
    pub matrix: DMatrix<f64>,
    /// Role of each row, in flat parameter order.
    pub rows: Vec<ParamRole>,
    /// `a`, `a^k` or `a^k_j` per column.
    pub columns: Vec<String>,
}

impl LocalityMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Copy with row 0 reassigned to another slope (or dropped when there is
    /// only one). Used as a negative control for the equivalence check.
    pub fn corrupted(&self) -> LocalityMatrix {
        let mut out = self.clone();
        let cols = self.cols();
        let own = (0..cols).find(|&j| self.matrix[(0, j)] != 0.0).unwrap_or(0);
        out.matrix[(0, own)] = 0.0;
        if cols > 1 {
            out.matrix[(0, (own + 1) % cols)] = 1.0;
        }
        out
    }

    /// `A a`.
    pub fn expand(&self, a: &[f64]) -> Result<DVector<f64>> {
        if a.len() != self.cols() {
            return Err(Error::Dimension {
                what: "slope vector",
                expected: self.cols(),
                actual: a.len(),
            });
        }
        Ok(&self.matrix * DVector::from_column_slice(a))
    }
}

fn require_adaptive(params: &NetworkParams) -> Result<()> {
    if !params.mode().kind.is_adaptive() {
        return Err(Error::Mode {
            mode: params.mode().kind.to_string(),
            reason: "no slopes, so no locality matrix".into(),
        });
    }
    Ok(())
}

fn require_unit_scale(params: &NetworkParams) -> Result<()> {
    if params.mode().scale != 1.0 {
        return Err(Error::Mode {
            mode: params.mode().kind.to_string(),
            reason: format!("conditioning analysis needs n = 1, got n = {}", params.mode().scale),
        });
    }
    Ok(())
}

fn check_dense(d: usize) -> Result<()> {
    if d > MAX_DENSE {
        return Err(Error::InvalidArgument(format!(
            "{d} parameters exceed the dense-matrix limit of {MAX_DENSE}"
        )));
    }
    Ok(())
}

pub fn locality_matrix(params: &NetworkParams) -> Result<LocalityMatrix> {
    require_adaptive(params)?;
    let layout = params.layout();
    let d = layout.hidden_len();
    let cols = layout.slope_count();
    check_dense(d)?;
    let mut matrix = DMatrix::zeros(d, cols);
    let mut rows = Vec::with_capacity(d);
    for i in 0..d {
        let role = layout.locate(i).expect("hidden offset");
        let (layer, row) = match role {
            ParamRole::Weight { layer, row, .. } | ParamRole::Bias { layer, row } => (layer, row),
            ParamRole::Slope { .. } => unreachable!("slopes follow all weights"),
        };
        let j = layout.slope_index(layer, row).expect("adaptive mode");
        matrix[(i, j)] = 1.0;
        rows.push(role);
    }
    let widths = layout.widths();
    let columns = match params.mode().kind {
        SlopeKind::Gaaf => vec!["a".to_string()],
        SlopeKind::Llaaf => (1..layout.depth()).map(|k| format!("a^{k}")).collect(),
        SlopeKind::Nlaaf => (1..layout.depth())
            .flat_map(|k| (1..=widths[k]).map(move |j| format!("a^{k}_{j}")))
            .collect(),
        SlopeKind::Fixed => unreachable!(),
    };
    Ok(LocalityMatrix { matrix, rows, columns })
}

/// `Ĝ = a² I + W Wᵀ` for a single global slope.
pub fn conditioning_gaaf(a: f64, w: &[f64]) -> DMatrix<f64> {
    let w = DVector::from_column_slice(w);
    let mut g = &w * w.transpose();
    for i in 0..w.len() {
        g[(i, i)] += a * a;
    }
    g
}

/// Rank-one second-order term `Ĥ_J = g gᵀ`.
pub fn approx_hessian(g: &[f64]) -> DMatrix<f64> {
    let g = DVector::from_column_slice(g);
    &g * g.transpose()
}

/// `(G, V)` for any locality matrix.
pub fn conditioning_general(
    locality: &LocalityMatrix,
    a: &[f64],
    w: &[f64],
    g: &[f64],
    eta: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = locality.rows();
    for (what, len) in [("hidden parameter vector", w.len()), ("gradient", g.len())] {
        if len != d {
            return Err(Error::Dimension {
                what,
                expected: d,
                actual: len,
            });
        }
    }
    let aa = locality.expand(a)?;
    let wv = DVector::from_column_slice(w);
    let gv = DVector::from_column_slice(g);
    let aat = &locality.matrix * locality.matrix.transpose();
    let v = aa.component_mul(&(&aat * wv.component_mul(&gv)));
    let mut gm = DMatrix::from_fn(d, d, |i, j| w[i] * aat[(i, j)] * w[j]);
    for i in 0..d {
        gm[(i, i)] += aa[i] * aa[i] - eta * v[i];
    }
    Ok((gm, v))
}

/// `G0`: the conditioning matrix without the `η` term, extended by an
/// identity block over the output layer so it acts on all of `Θ̃`.
pub fn conditioning_full(params: &NetworkParams) -> Result<DMatrix<f64>> {
    let total = params.layout().slope_offset();
    check_dense(total)?;
    if !params.mode().kind.is_adaptive() {
        return Ok(DMatrix::identity(total, total));
    }
    require_unit_scale(params)?;
    let loc = locality_matrix(params)?;
    let flat = params.to_flat();
    let d = loc.rows();
    let zeros = vec![0.0; d];
    let (g0, _) = conditioning_general(&loc, &params.slopes, &flat[..d], &zeros, 0.0)?;
    let mut full = DMatrix::identity(total, total);
    full.view_mut((0, 0), (d, d)).copy_from(&g0);
    Ok(full)
}

/// Objective without slope recovery, as analysed here.
fn plain_spec(spec: &ObjectiveSpec) -> ObjectiveSpec {
    ObjectiveSpec {
        w_a: 0.0,
        recovery: RecoveryKind::None,
        ..spec.clone()
    }
}

fn network_gradient(objective: &Objective, params: &NetworkParams) -> Result<(f64, Vec<f64>)> {
    let theta = objective.initial_theta(params);
    let e = objective.evaluate(&theta)?;
    let mut g = e.gradient;
    g.truncate(objective.network_len());
    Ok((e.loss.total, g))
}

/// `∇J(Θ̃)` of the recovery-free objective, over hidden then output
/// parameters, evaluated on the equivalent fixed-activation network.
pub fn standard_gradient(params: &NetworkParams, spec: &ObjectiveSpec) -> Result<(f64, Vec<f64>)> {
    let standard = params.to_standard();
    let objective = Objective::new(plain_spec(spec), &standard)?;
    network_gradient(&objective, &standard)
}

/// Maximum absolute differences between the two sides of the step identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    /// Over slope-governed parameters `Θ̃`.
    pub hidden: f64,
    /// Over output-layer parameters (plain GD on both sides).
    pub output: f64,
}

impl Equivalence {
    pub fn residual(&self) -> f64 {
        self.hidden.max(self.output)
    }
}

/// One plain gradient step of size `eta` on `(a, W)` versus
/// `Θ̃ - η G ∇J(Θ̃)`.
pub fn verify_step_equivalence(params: &NetworkParams, spec: &ObjectiveSpec, eta: f64) -> Result<Equivalence> {
    let loc = locality_matrix(params)?;
    verify_step_equivalence_with(params, spec, eta, &loc)
}

/// As [`verify_step_equivalence`] with the right-hand side built from a
/// caller-supplied locality matrix.
pub fn verify_step_equivalence_with(
    params: &NetworkParams,
    spec: &ObjectiveSpec,
    eta: f64,
    locality: &LocalityMatrix,
) -> Result<Equivalence> {
    require_adaptive(params)?;
    require_unit_scale(params)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size must be finite and nonnegative, got {eta}"
        )));
    }
    let layout = params.layout();
    let d = layout.hidden_len();
    if locality.rows() != d || locality.cols() != layout.slope_count() {
        return Err(Error::Dimension {
            what: "locality matrix rows",
            expected: d,
            actual: locality.rows(),
        });
    }
    let end = layout.slope_offset();

    // Left: step the adaptive parameterization, then map to Θ̃.
    let adaptive = Objective::new(plain_spec(spec), params)?;
    let (_, grad) = network_gradient(&adaptive, params)?;
    let mut stepped = params.to_flat();
    for (p, g) in stepped.iter_mut().zip(&grad) {
        *p -= eta * g;
    }
    let left = params.with_flat(&stepped)?.effective_theta()?;

    // Right: conditioned standard step.
    let (_, g) = standard_gradient(params, spec)?;
    let flat = params.to_flat();
    let w = &flat[..d];
    let aa = locality.expand(&params.slopes)?;
    let (gm, _) = conditioning_general(locality, &params.slopes, w, &g[..d], eta)?;
    let step = &gm * DVector::from_column_slice(&g[..d]);
    let hidden = (0..d)
        .map(|i| (left[i] - (aa[i] * w[i] - eta * step[i])).abs())
        .fold(0.0, f64::max);
    let output = (d..end)
        .map(|i| (left[i] - (flat[i] - eta * g[i])).abs())
        .fold(0.0, f64::max);
    Ok(Equivalence { hidden, output })
}

/// Halves `eta0` until one conditioned step lowers the recovery-free loss.
/// Returns `(eta, J before, J after)`.
pub fn descent_check(params: &NetworkParams, spec: &ObjectiveSpec, eta0: f64) -> Result<(f64, f64, f64)> {
    let objective = Objective::new(plain_spec(spec), params)?;
    let (before, grad) = network_gradient(&objective, params)?;
    let flat = params.to_flat();
    let mut eta = eta0;
    for _ in 0..60 {
        let next: Vec<f64> = flat.iter().zip(&grad).map(|(p, g)| p - eta * g).collect();
        let after = objective
            .loss(&objective.initial_theta(&params.with_flat(&next)?))?
            .total;
        if after < before {
            return Ok((eta, before, after));
        }
        eta *= 0.5;
    }
    Err(Error::LineSearch(60))
}

fn recovery_gradient(params: &NetworkParams, kind: RecoveryKind) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let tp = params.lift(&mut tape)?;
    let s = slope_recovery(&mut tape, &tp, kind)?;
    let g = tape.backward(s)?;
    Ok((tape.value(s), g.wrt_all(&tp.slopes)))
}

/// Per-slope residuals of
/// `a_j (∂J̃/∂a_j - W_a ∂S/∂a_j) = Σ_{i governed by j} θ_i ∂J̃/∂θ_i`:
/// one entry per layer for L-LAAF, per neuron for N-LAAF.
pub fn euler_identity_check(params: &NetworkParams, spec: &ObjectiveSpec) -> Result<Vec<f64>> {
    require_adaptive(params)?;
    let objective = Objective::new(spec.clone(), params)?;
    let (_, grad) = network_gradient(&objective, params)?;
    let layout = params.layout();
    let off = layout.slope_offset();
    let ds = if spec.recovery == RecoveryKind::None || spec.w_a == 0.0 {
        vec![0.0; layout.slope_count()]
    } else {
        recovery_gradient(params, spec.recovery)?.1
    };
    let flat = params.to_flat();
    let mut rhs = vec![0.0; layout.slope_count()];
    for i in 0..layout.hidden_len() {
        let (layer, row) = match layout.locate(i) {
            Some(ParamRole::Weight { layer, row, .. } | ParamRole::Bias { layer, row }) => (layer, row),
            _ => unreachable!(),
        };
        rhs[layout.slope_index(layer, row).expect("adaptive")] += flat[i] * grad[i];
    }
    Ok(params
        .slopes
        .iter()
        .enumerate()
        .map(|(j, a)| (a * (grad[off + j] - spec.w_a * ds[j]) - rhs[j]).abs())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantNetworkReport {
    /// `J̃` of the network.
    pub loss: f64,
    /// `J̃_c(0) + W_a S(0)` computed from the constant output directly.
    pub expected: f64,
    pub gap: f64,
    /// The constant network output.
    pub constant: Vec<f64>,
    /// Largest `|∂J̃/∂w|`, `|∂J̃/∂b|` over hidden layers.
    pub max_hidden_gradient: f64,
    pub slope_gradient: Vec<f64>,
    /// `∂S/∂a`.
    pub recovery_gradient: Vec<f64>,
}

/// Loss and gradients at a network whose slopes are all zero.
pub fn constant_network_check(params: &NetworkParams, spec: &ObjectiveSpec) -> Result<ConstantNetworkReport> {
    require_adaptive(params)?;
    if params.slopes.iter().any(|&a| a != 0.0) {
        return Err(Error::InvalidArgument(
            "constant-network check needs every slope equal to 0".into(),
        ));
    }
    let objective = Objective::new(spec.clone(), params)?;
    let theta = objective.initial_theta(params);
    let eval = objective.evaluate(&theta)?;
    let layout = params.layout();
    let off = layout.slope_offset();

    // Every hidden unit outputs σ(0), so the output is W^D σ(0) 1 + b^D.
    let depth = params.depth();
    let s0 = params.mode().base.eval(0.0);
    let fan_in = params.widths()[depth - 1];
    let constant: Vec<f64> = params.biases[depth - 1]
        .iter()
        .enumerate()
        .map(|(o, b)| {
            b + params.weights[depth - 1][o * fan_in..(o + 1) * fan_in]
                .iter()
                .sum::<f64>()
                * s0
        })
        .collect();

    let mut expected = 0.0;
    if let Some(data) = &spec.data {
        expected += spec.w_u * constant_data_loss(data, &constant);
    }
    if let Some(r) = &spec.residual {
        let inverse: Vec<f64> = spec.inverse_params().iter().map(|p| p.init).collect();
        let c = constant[0];
        let mut sum = 0.0;
        for x in r.points.iter() {
            let v = residual_of_function(r.operator.as_ref(), x, &inverse, |t, _| Ok(t.lift(c)?))?;
            sum += v * v;
        }
        expected += spec.w_f * sum / r.points.len() as f64;
    }
    let (s, ds) = if spec.recovery == RecoveryKind::None {
        (0.0, vec![0.0; layout.slope_count()])
    } else {
        recovery_gradient(params, spec.recovery)?
    };
    expected += spec.w_a * s;
    let max_hidden_gradient = eval.gradient[..layout.hidden_len()]
        .iter()
        .fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(ConstantNetworkReport {
        loss: eval.loss.total,
        expected,
        gap: (eval.loss.total - expected).abs(),
        constant,
        max_hidden_gradient,
        slope_gradient: eval.gradient[off..off + layout.slope_count()].to_vec(),
        recovery_gradient: ds,
    })
}

fn constant_data_loss(data: &DataTerm, c: &[f64]) -> f64 {
    match data {
        DataTerm::Regression { targets, outputs, .. } => {
            let sum: f64 = targets
                .chunks(*outputs)
                .map(|t| t.iter().zip(c).map(|(t, c)| (c - t) * (c - t)).sum::<f64>())
                .sum();
            sum / data.len() as f64
        }
        DataTerm::Classification { labels, .. } => {
            let logits: Vec<f64> = if c.len() == 1 { vec![0.0, c[0]] } else { c.to_vec() };
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
            labels.iter().map(|&l| lse - logits[l]).sum::<f64>() / labels.len() as f64
        }
    }
}

/// Symmetrized Hessian and the asymmetry of the raw difference quotients.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian {
    pub matrix: DMatrix<f64>,
    /// `max |H - Hᵀ|` before symmetrization.
    pub asymmetry: f64,
}

/// Central differences of `gradient` around `point`, column by column.
pub fn hessian_fd<F>(gradient: F, point: &[f64], step: f64) -> Result<Hessian>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let d = point.len();
    check_dense(d)?;
    let mut h = DMatrix::zeros(d, d);
    let mut x = point.to_vec();
    for j in 0..d {
        x[j] = point[j] + step;
        let gp = gradient(&x)?;
        x[j] = point[j] - step;
        let gm = gradient(&x)?;
        x[j] = point[j];
        if gp.len() != d || gm.len() != d {
            return Err(Error::Dimension {
                what: "gradient length",
                expected: d,
                actual: gp.len(),
            });
        }
        for i in 0..d {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    if let Some(v) = h.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("Hessian entry {v}")));
    }
    let asymmetry = (&h - h.transpose()).amax();
    let matrix = (&h + h.transpose()) * 0.5;
    Ok(Hessian { matrix, asymmetry })
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!("{what} is not square")));
    }
    let tol = 1e-10 * m.amax().max(1.0);
    if (m - m.transpose()).amax() > tol {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// `σ_max(M) / σ_min(M)` with `M = G0^{1/2} H G0^{1/2}`.
pub fn condition_number(g0: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(g0, "G0")?;
    check_symmetric(h, "Hessian")?;
    if g0.shape() != h.shape() {
        return Err(Error::Dimension {
            what: "Hessian size",
            expected: g0.nrows(),
            actual: h.nrows(),
        });
    }
    let eig = SymmetricEigen::new(g0.clone());
    let roots = eig.eigenvalues.map(|l| {
        if l < -1e-10 {
            warn!("clamping eigenvalue {l:e} of G0 to zero");
        }
        l.max(0.0).sqrt()
    });
    let q = &eig.eigenvectors;
    let half = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let m = &half * h * &half;
    let m = (&m + m.transpose()) * 0.5;
    let sv = SymmetricEigen::new(m).eigenvalues.map(f64::abs);
    let max = sv.max();
    let min = sv.min().max(SIGMA_FLOOR);
    Ok(max / min)
}

/// Running minimum of `kappas` divided by `baseline[0]`.
pub fn normalized_condition_trace(kappas: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    let base = *baseline
        .first()
        .ok_or_else(|| Error::InvalidArgument("missing baseline condition numbers".into()))?;
    let mut best = f64::INFINITY;
    Ok(kappas
        .iter()
        .map(|&k| {
            best = best.min(k);
            best / base
        })
        .collect())
}

/// Conditioning quantities at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsReport {
    pub mode: SlopeKind,
    pub eta: f64,
    /// Over hidden parameters.
    pub g: DMatrix<f64>,
    pub v: DVector<f64>,
    pub h_hat: DMatrix<f64>,
    /// Over all of `Θ̃` (hidden then output).
    pub hessian: DMatrix<f64>,
    pub hessian_asymmetry: f64,
    /// Uses `G0`, i.e. `G` without the `η diag(V)` term.
    pub condition_number: f64,
    pub normalized_condition: f64,
    pub equivalence_residual: f64,
}

/// Everything at `params`; `baseline` is the standard method's initial
/// condition number.
pub fn dynamics_report(
    params: &NetworkParams,
    spec: &ObjectiveSpec,
    eta: f64,
    baseline: f64,
) -> Result<DynamicsReport> {
    let loc = locality_matrix(params)?;
    let equivalence = verify_step_equivalence_with(params, spec, eta, &loc)?;
    let (_, grad) = standard_gradient(params, spec)?;
    let d = loc.rows();
    let flat = params.to_flat();
    let (g, v) = conditioning_general(&loc, &params.slopes, &flat[..d], &grad[..d], eta)?;
    let hess = standard_hessian(params, spec)?;
    let kappa = condition_number(&conditioning_full(params)?, &hess.matrix)?;
    Ok(DynamicsReport {
        mode: params.mode().kind,
        eta,
        g,
        v,
        h_hat: approx_hessian(&grad[..d]),
        hessian: hess.matrix,
        hessian_asymmetry: hess.asymmetry,
        condition_number: kappa,
        normalized_condition: kappa / baseline,
        equivalence_residual: equivalence.residual(),
    })
}

/// `∇²J(Θ̃)` of the recovery-free objective.
pub fn standard_hessian(params: &NetworkParams, spec: &ObjectiveSpec) -> Result<Hessian> {
    let standard = params.to_standard();
    let objective = Objective::new(plain_spec(spec), &standard)?;
    let nn = objective.network_len();
    let extra: Vec<f64> = objective.inverse_params().iter().map(|p| p.init).collect();
    let grad = |p: &[f64]| -> Result<Vec<f64>> {
        let mut theta = p.to_vec();
        theta.extend_from_slice(&extra);
        let mut g = objective.evaluate(&theta)?.gradient;
        g.truncate(nn);
        Ok(g)
    };
    hessian_fd(grad, &standard.to_flat(), HESSIAN_STEP)
}

/// One sample of a conditioning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the full data set.
    pub loss: f64,
    pub condition: f64,
    pub normalized_condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub mode: SlopeKind,
    pub records: Vec<EpochRecord>,
    pub final_params: NetworkParams,
}

/// Mini-batch SGD on the circles data for the standard network and each
/// adaptive mode, from the same initial function and the same batch order,
/// sampling the condition number every `hessian_every` epochs. The first
/// run is always the standard one and supplies the normalization.
pub fn run_circles(preset: &CirclesPreset, seed: u64) -> Result<Vec<MethodRun>> {
    if preset.batch_size == 0 || preset.hessian_every == 0 {
        return Err(Error::InvalidArgument(
            "batch size and Hessian interval must be positive".into(),
        ));
    }
    let data = circles_dataset(preset.n_samples, preset.noise, preset.factor, preset.data_seed)?;
    let mut runs: Vec<MethodRun> = Vec::with_capacity(4);
    let mut baseline = f64::NAN;
    for kind in SlopeKind::ALL {
        let mode = ActivationMode::new(kind, preset.activation, 1.0)?;
        let run = circles_method(preset, &data, mode, seed, &mut baseline)?;
        runs.push(run);
    }
    Ok(runs)
}

fn circles_method(
    preset: &CirclesPreset,
    data: &DataTerm,
    mode: ActivationMode,
    seed: u64,
    baseline: &mut f64,
) -> Result<MethodRun> {
    let params = NetworkParams::init(&preset.widths(), mode, seed)?;
    let spec = ObjectiveSpec {
        w_f: 0.0,
        w_u: 1.0,
        w_a: 0.0,
        data: Some(data.clone()),
        residual: None,
        recovery: RecoveryKind::None,
    };
    let objective = Objective::new(spec.clone(), &params)?;
    let mut theta = objective.initial_theta(&params);
    let mut opt = OptimizerState::new(OptimizerKind::GdConstant { lr: preset.lr }, theta.len())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(seed, "batches");
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let divergence = |epoch: usize, e: Error| {
        if e.is_numerical() {
            Error::Divergence {
                iteration: epoch,
                reason: e.to_string(),
            }
        } else {
            e
        }
    };
    for epoch in 0..=preset.epochs {
        if epoch > 0 {
            order.shuffle(&mut shuffle);
            for batch in order.chunks(preset.batch_size) {
                let e = objective
                    .evaluate_subset(&theta, Some(batch))
                    .map_err(|e| divergence(epoch, e))?;
                let mut no_search = |_: &[f64]| -> Result<f64> { unreachable!("constant step") };
                opt.apply(&mut theta, &e.gradient, e.loss.total, None, &mut no_search)
                    .map_err(|e| divergence(epoch, e))?;
            }
        }
        if epoch % preset.hessian_every != 0 && epoch != preset.epochs {
            continue;
        }
        let net = objective.network(&theta)?;
        let loss = objective.loss(&theta).map_err(|e| divergence(epoch, e))?.data;
        let hess = standard_hessian(&net, &spec).map_err(|e| divergence(epoch, e))?;
        let kappa = condition_number(&conditioning_full(&net)?, &hess.matrix)?;
        if epoch == 0 && !mode.kind.is_adaptive() {
            *baseline = kappa;
        }
        best = best.min(kappa);
        records.push(EpochRecord {
            epoch,
            loss,
            condition: kappa,
            normalized_condition: best / *baseline,
        });
    }
    Ok(MethodRun {
        mode: mode.kind,
        records,
        final_params: objective.network(&theta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use crate::objective::{DataTerm, PointSet};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn net(widths: &[usize], kind: SlopeKind, seed: u64) -> NetworkParams {
        let mode = ActivationMode::new(kind, Activation::Tanh, 1.0).unwrap();
        let mut p = NetworkParams::init(widths, mode, seed).unwrap();
        let mut r = rng::stream(seed, "test");
        let flat: Vec<f64> = p.to_flat().iter().map(|_| r.random_range(-1.0..1.0)).collect();
        p.set_flat(&flat).unwrap();
        p
    }

    fn spec(kind: SlopeKind, dim: usize) -> ObjectiveSpec {
        let mut r = rng::stream(9, "data");
        let coords: Vec<f64> = (0..8 * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let targets = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        ObjectiveSpec {
            w_f: 0.0,
            w_u: 1.0,
            w_a: 0.7,
            data: Some(DataTerm::regression(PointSet::new(dim, coords).unwrap(), targets).unwrap()),
            residual: None,
            recovery: RecoveryKind::for_mode(kind),
        }
    }

    #[test]
    fn locality_shapes() {
        let g = locality_matrix(&net(&[1, 2, 1], SlopeKind::Gaaf, 0)).unwrap();
        assert_eq!(g.matrix, DMatrix::from_element(4, 1, 1.0));
        let l = locality_matrix(&net(&[1, 2, 1], SlopeKind::Llaaf, 0)).unwrap();
        assert_eq!(l.matrix, DMatrix::from_element(4, 1, 1.0));
        assert_eq!(l.columns, vec!["a^1"]);
        let n = locality_matrix(&net(&[1, 2, 1], SlopeKind::Nlaaf, 0)).unwrap();
        // Rows: w_1, w_2, b_1, b_2.
        let want = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(n.matrix, want);
        assert!(locality_matrix(&net(&[1, 2, 1], SlopeKind::Fixed, 0)).is_err());
    }

    #[test]
    fn locality_reproduces_effective_theta() {
        for kind in [SlopeKind::Gaaf, SlopeKind::Llaaf, SlopeKind::Nlaaf] {
            let p = net(&[2, 3, 4, 1], kind, 1);
            let loc = locality_matrix(&p).unwrap();
            for r in 0..loc.rows() {
                assert_eq!(loc.matrix.row(r).sum(), 1.0);
            }
            let aa = loc.expand(&p.slopes).unwrap();
            let flat = p.to_flat();
            let eff = p.effective_theta().unwrap();
            for i in 0..loc.rows() {
                assert_eq!(aa[i] * flat[i], eff[i]);
            }
        }
    }

    #[test]
    fn gaaf_conditioning_examples() {
        assert_eq!(conditioning_gaaf(1.0, &[0.0; 3]), DMatrix::identity(3, 3));
        let g = conditioning_gaaf(0.0, &[1.0, 0.0]);
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(approx_hessian(&[0.0, 0.0]), DMatrix::zeros(2, 2));
    }

    #[test]
    fn general_reduces_to_gaaf() {
        let p = net(&[1, 3, 2, 1], SlopeKind::Gaaf, 2);
        let loc = locality_matrix(&p).unwrap();
        let d = loc.rows();
        let w = &p.to_flat()[..d];
        let g: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let (gm, v) = conditioning_general(&loc, &p.slopes, w, &g, 0.01).unwrap();
        let hat = conditioning_gaaf(p.slopes[0], w) - DMatrix::from_diagonal(&v) * 0.01;
        assert!((gm - hat).amax() <= 1e-14);
        let (g0, v0) = conditioning_general(&loc, &[1.0], &vec![0.0; d], &vec![0.0; d], 0.3).unwrap();
        assert_eq!(g0, DMatrix::identity(d, d));
        assert_eq!(v0, DVector::zeros(d));
    }

    #[test]
    fn step_equivalence_small() {
        for kind in [SlopeKind::Gaaf, SlopeKind::Llaaf, SlopeKind::Nlaaf] {
            let p = net(&[1, 2, 1], kind, 3);
            let s = spec(kind, 1);
            let e = verify_step_equivalence(&p, &s, 0.01).unwrap();
            assert!(e.residual() < 1e-10, "{kind}: {e:?}");
            assert_eq!(verify_step_equivalence(&p, &s, 0.0).unwrap().residual(), 0.0);
            let loc = locality_matrix(&p).unwrap().corrupted();
            assert!(verify_step_equivalence_with(&p, &s, 0.01, &loc).unwrap().residual() > 1e-6);
        }
    }

    #[test]
    fn step_equivalence_rejects_scale() {
        let mode = ActivationMode::new(SlopeKind::Llaaf, Activation::Tanh, 2.0).unwrap();
        let p = NetworkParams::init(&[1, 2, 1], mode, 0).unwrap();
        assert!(matches!(
            verify_step_equivalence(&p, &spec(SlopeKind::Llaaf, 1), 0.01),
            Err(Error::Mode { .. })
        ));
    }

    #[test]
    fn euler_identities() {
        for kind in [SlopeKind::Gaaf, SlopeKind::Llaaf, SlopeKind::Nlaaf] {
            let p = net(&[2, 4, 3, 1], kind, 4);
            let r = euler_identity_check(&p, &spec(kind, 2)).unwrap();
            assert_eq!(r.len(), p.slopes.len());
            assert!(r.iter().all(|v| *v < 1e-9), "{kind}: {r:?}");
        }
    }

    #[test]
    fn constant_network() {
        for kind in [SlopeKind::Gaaf, SlopeKind::Llaaf, SlopeKind::Nlaaf] {
            let mut p = net(&[2, 4, 3, 1], kind, 5);
            assert!(constant_network_check(&p, &spec(kind, 2)).is_err());
            p.slopes.iter_mut().for_each(|a| *a = 0.0);
            let r = constant_network_check(&p, &spec(kind, 2)).unwrap();
            assert!(r.gap < 1e-12, "{r:?}");
            assert_eq!(r.constant, p.biases[2]);
            assert!(r.max_hidden_gradient <= 1e-14);
            // -1/(D-1) per layer, shared evenly by the neurons under N-LAAF.
            let want: Vec<f64> = match kind {
                SlopeKind::Gaaf => vec![-1.0],
                SlopeKind::Llaaf => vec![-0.5; 2],
                _ => [vec![-0.5 / 4.0; 4], vec![-0.5 / 3.0; 3]].concat(),
            };
            for (g, w) in r.recovery_gradient.iter().zip(&want) {
                assert_relative_eq!(*g, *w, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn hessian_of_quadratic() {
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.5]);
        let grad = |x: &[f64]| Ok((&q * DVector::from_column_slice(x)).as_slice().to_vec());
        let h = hessian_fd(grad, &[0.3, -0.2, 0.9], HESSIAN_STEP).unwrap();
        assert!((h.matrix - &q).amax() < 1e-6);
        let lin = |_: &[f64]| Ok(vec![1.0, -2.0]);
        assert!(hessian_fd(lin, &[0.0, 1.0], HESSIAN_STEP).unwrap().matrix.amax() < 1e-8);
        assert!(hessian_fd(lin, &[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn hessian_of_network_is_nearly_symmetric() {
        let p = net(&[2, 3, 1], SlopeKind::Fixed, 6);
        let h = standard_hessian(&p, &spec(SlopeKind::Fixed, 2)).unwrap();
        assert!(h.asymmetry < 1e-5, "{}", h.asymmetry);
    }

    #[test]
    fn condition_examples() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert_relative_eq!(
            condition_number(&DMatrix::identity(2, 2), &h).unwrap(),
            4.0,
            max_relative = 1e-14
        );
        let g0 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        assert_relative_eq!(condition_number(&g0, &h).unwrap(), 1.0, max_relative = 1e-14);
        let g0 = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let eig = SymmetricEigen::new(g0.clone()).eigenvalues;
        assert_relative_eq!(
            condition_number(&g0, &DMatrix::identity(2, 2)).unwrap(),
            eig.max() / eig.min(),
            max_relative = 1e-12
        );
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(condition_number(&bad, &h).is_err());
        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(condition_number(&singular, &h).unwrap() > 1e300);
    }

    #[test]
    fn normalized_trace() {
        let t = normalized_condition_trace(&[10.0, 12.0, 5.0, 7.0], &[10.0]).unwrap();
        assert_eq!(t, vec![1.0, 1.0, 0.5, 0.5]);
        assert!(normalized_condition_trace(&[1.0], &[]).is_err());
    }

    #[test]
    fn g0_is_psd() {
        for kind in [SlopeKind::Gaaf, SlopeKind::Llaaf, SlopeKind::Nlaaf] {
            let p = net(&[2, 3, 3, 1], kind, 7);
            let g0 = conditioning_full(&p).unwrap();
            assert!((&g0 - g0.transpose()).amax() <= 1e-12);
            let mut r = rng::stream(1, "psd");
            for _ in 0..100 {
                let x = DVector::from_fn(g0.nrows(), |_, _| r.random_range(-1.0..1.0));
                assert!((x.transpose() * &g0 * &x)[0] >= -1e-12 * x.norm_squared());
            }
        }
    }

    #[test]
    fn tiny_circles_run() {
        let mut preset = crate::problems::circles_preset(4, Activation::Sigmoid);
        preset.n_samples = 60;
        preset.epochs = 2;
        preset.batch_size = 16;
        let runs = run_circles(&preset, 0).unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(runs[0].mode, SlopeKind::Fixed);
        assert_eq!(runs[0].records[0].normalized_condition, 1.0);
        for run in &runs {
            assert_eq!(run.records.len(), 3);
            // Identical initial function, so identical initial loss.
            assert_eq!(run.records[0].loss, runs[0].records[0].loss);
            assert!(run
                .records
                .windows(2)
                .all(|w| w[1].normalized_condition <= w[0].normalized_condition));
        }
        assert_eq!(run_circles(&preset, 0).unwrap(), runs);
    }
}
