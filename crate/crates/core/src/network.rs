//! Dense feed-forward networks with fixed, global (GAAF), layer-wise (L-LAAF)
//! and neuron-wise (N-LAAF) adaptive activation slopes.
//!
//! Hidden layer `k` computes `sigma(n * a * (w^k z + b^k))` where the slope
//! `a` is shared by the whole network (GAAF), by the layer (L-LAAF) or owned by
//! each neuron (N-LAAF). Slopes are stored unscaled; the scaling factor `n` is
//! applied in the forward pass. The output layer is affine with no slope.
//!
//! Flat parameter ordering: for each layer `k = 1..=D` the weights of `w^k`
//! row-major (`N_k x N_{k-1}`) followed by `b^k`, then all slopes.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, sigmoid, softplus, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
}

impl Activation {
    pub fn op(self) -> Op {
        match self {
            Activation::Tanh => Op::Tanh,
            Activation::Sigmoid => Op::Sigmoid,
            Activation::Relu => Op::Relu,
            Activation::Softplus => Op::Softplus,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => autodiff::tanh(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
        }
    }

    /// Value and the first three derivatives at `x`.
    pub fn jet(self, x: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let t = autodiff::tanh(x);
                let d1 = 1.0 - t * t;
                let d2 = -2.0 * t * d1;
                let d3 = d1 * (6.0 * t * t - 2.0);
                [t, d1, d2, d3]
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                let d1 = s * (1.0 - s);
                let d2 = d1 * (1.0 - 2.0 * s);
                let d3 = d1 * (1.0 - 6.0 * d1);
                [s, d1, d2, d3]
            }
            Activation::Relu => {
                let d1 = if x > 0.0 { 1.0 } else { 0.0 };
                [x.max(0.0), d1, 0.0, 0.0]
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                let d2 = s * (1.0 - s);
                [softplus(x), s, d2, d2 * (1.0 - 2.0 * s)]
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        };
        f.write_str(s)
    }
}

/// Slope granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlopeKind {
    Fixed,
    Gaaf,
    Llaaf,
    Nlaaf,
}

impl SlopeKind {
    pub const ALL: [SlopeKind; 4] = [SlopeKind::Fixed, SlopeKind::Gaaf, SlopeKind::Llaaf, SlopeKind::Nlaaf];

    pub fn is_adaptive(self) -> bool {
        self != SlopeKind::Fixed
    }

    pub fn parse(s: &str) -> Option<SlopeKind> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fixed" | "standard" => Some(SlopeKind::Fixed),
            "gaaf" => Some(SlopeKind::Gaaf),
            "llaaf" => Some(SlopeKind::Llaaf),
            "nlaaf" => Some(SlopeKind::Nlaaf),
            _ => None,
        }
    }
}

impl fmt::Display for SlopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SlopeKind::Fixed => "fixed",
            SlopeKind::Gaaf => "gaaf",
            SlopeKind::Llaaf => "llaaf",
            SlopeKind::Nlaaf => "nlaaf",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationMode {
    pub kind: SlopeKind,
    pub base: Activation,
    /// Scaling factor `n >= 1`.
    pub scale: f64,
}

impl ActivationMode {
    pub fn new(kind: SlopeKind, base: Activation, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "scaling factor must be finite and >= 1, got {scale}"
            )));
        }
        Ok(ActivationMode { kind, base, scale })
    }

    pub fn fixed(base: Activation) -> Self {
        ActivationMode {
            kind: SlopeKind::Fixed,
            base,
            scale: 1.0,
        }
    }
}

/// Where a flat parameter lives in the structured network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Layer `layer` (1-based), entry `(row, col)` of `w^layer`.
    Weight {
        layer: usize,
        row: usize,
        col: usize,
    },
    Bias {
        layer: usize,
        row: usize,
    },
    Slope {
        index: usize,
    },
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    widths: Vec<usize>,
    kind: SlopeKind,
    weight_offsets: Vec<usize>,
    bias_offsets: Vec<usize>,
    slope_offset: usize,
    slope_count: usize,
}

impl ParamLayout {
    pub fn new(widths: &[usize], kind: SlopeKind) -> Result<Self> {
        validate_widths(widths)?;
        let mut weight_offsets = Vec::with_capacity(widths.len() - 1);
        let mut bias_offsets = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for k in 1..widths.len() {
            weight_offsets.push(offset);
            offset += widths[k] * widths[k - 1];
            bias_offsets.push(offset);
            offset += widths[k];
        }
        let hidden = &widths[1..widths.len() - 1];
        let slope_count = match kind {
            SlopeKind::Fixed => 0,
            SlopeKind::Gaaf => 1,
            SlopeKind::Llaaf => hidden.len(),
            SlopeKind::Nlaaf => hidden.iter().sum(),
        };
        Ok(ParamLayout {
            widths: widths.to_vec(),
            kind,
            weight_offsets,
            bias_offsets,
            slope_offset: offset,
            slope_count,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of affine layers `D`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_offset(&self, layer: usize) -> usize {
        self.weight_offsets[layer - 1]
    }

    pub fn bias_offset(&self, layer: usize) -> usize {
        self.bias_offsets[layer - 1]
    }

    /// `omega + beta`, i.e. the offset of the first slope.
    pub fn slope_offset(&self) -> usize {
        self.slope_offset
    }

    pub fn slope_count(&self) -> usize {
        self.slope_count
    }

    pub fn len(&self) -> usize {
        self.slope_offset + self.slope_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of hidden-layer weights and biases (rows of the locality matrix).
    pub fn hidden_len(&self) -> usize {
        self.weight_offset(self.depth())
    }

    /// Index into the slope vector governing neuron `row` of hidden layer `layer`.
    pub fn slope_index(&self, layer: usize, row: usize) -> Option<usize> {
        match self.kind {
            SlopeKind::Fixed => None,
            SlopeKind::Gaaf => Some(0),
            SlopeKind::Llaaf => Some(layer - 1),
            SlopeKind::Nlaaf => Some(self.widths[1..layer].iter().sum::<usize>() + row),
        }
    }

    pub fn locate(&self, offset: usize) -> Option<ParamRole> {
        if offset >= self.len() {
            return None;
        }
        if offset >= self.slope_offset {
            return Some(ParamRole::Slope {
                index: offset - self.slope_offset,
            });
        }
        let layer = self.weight_offsets.partition_point(|&o| o <= offset);
        let cols = self.widths[layer - 1];
        let w0 = self.weight_offset(layer);
        let b0 = self.bias_offset(layer);
        Some(if offset < b0 {
            let local = offset - w0;
            ParamRole::Weight {
                layer,
                row: local / cols,
                col: local % cols,
            }
        } else {
            ParamRole::Bias {
                layer,
                row: offset - b0,
            }
        })
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least input and output widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Shape(format!("zero width in {widths:?}")));
    }
    Ok(())
}

/// Contiguous trainable parameters plus the layout describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    mode: ActivationMode,
    layout: ParamLayout,
    /// `weights[k-1]` is `w^k`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub slopes: Vec<f64>,
}

impl NetworkParams {
    /// Xavier-uniform weights, zero biases, every slope `1/n`.
    pub fn init(widths: &[usize], mode: ActivationMode, seed: u64) -> Result<Self> {
        let layout = ParamLayout::new(widths, mode.kind)?;
        let mut rng = rng::stream(seed, rng::INIT);
        let mut weights = Vec::with_capacity(layout.depth());
        let mut biases = Vec::with_capacity(layout.depth());
        for k in 1..widths.len() {
            let (fan_in, fan_out) = (widths[k - 1], widths[k]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        let slopes = vec![1.0 / mode.scale; layout.slope_count()];
        Ok(NetworkParams {
            mode,
            layout,
            weights,
            biases,
            slopes,
        })
    }

    pub fn mode(&self) -> ActivationMode {
        self.mode
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn widths(&self) -> &[usize] {
        self.layout.widths()
    }

    pub fn depth(&self) -> usize {
        self.layout.depth()
    }

    pub fn input_dim(&self) -> usize {
        self.widths()[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths().last().expect("validated widths")
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// `n * a` multiplying the pre-activation of neuron `row` in hidden `layer`.
    pub fn slope_factor(&self, layer: usize, row: usize) -> f64 {
        match self.layout.slope_index(layer, row) {
            Some(i) => self.mode.scale * self.slopes[i],
            None => 1.0,
        }
    }

    pub fn flatten(&self) -> FlatParams {
        let mut values = Vec::with_capacity(self.layout.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            values.extend_from_slice(w);
            values.extend_from_slice(b);
        }
        values.extend_from_slice(&self.slopes);
        FlatParams {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.flatten().values
    }

    pub fn unflatten(flat: &FlatParams, mode: ActivationMode) -> Result<Self> {
        if flat.layout.kind != mode.kind {
            return Err(Error::Mode {
                mode: mode.kind.to_string(),
                reason: format!("layout was built for {}", flat.layout.kind),
            });
        }
        let mut params = NetworkParams {
            mode,
            layout: flat.layout.clone(),
            weights: Vec::new(),
            biases: Vec::new(),
            slopes: Vec::new(),
        };
        params.weights = (1..=params.depth())
            .map(|k| vec![0.0; params.widths()[k] * params.widths()[k - 1]])
            .collect();
        params.biases = (1..=params.depth()).map(|k| vec![0.0; params.widths()[k]]).collect();
        params.slopes = vec![0.0; params.layout.slope_count()];
        params.set_flat(&flat.values)?;
        Ok(params)
    }

    /// Overwrite every parameter from a flat vector in layout order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.layout.len() {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: self.layout.len(),
                actual: values.len(),
            });
        }
        let mut rest = values;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (head, tail) = rest.split_at(w.len());
            w.copy_from_slice(head);
            let (head, tail) = tail.split_at(b.len());
            b.copy_from_slice(head);
            rest = tail;
        }
        self.slopes.copy_from_slice(rest);
        Ok(())
    }

    pub fn with_flat(&self, values: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(values)?;
        Ok(p)
    }

    /// Plain evaluation without a tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let depth = self.depth();
        let mut z = input.to_vec();
        for k in 1..=depth {
            let rows = self.widths()[k];
            let cols = self.widths()[k - 1];
            let w = &self.weights[k - 1];
            let mut next = self.biases[k - 1].clone();
            for (r, out) in next.iter_mut().enumerate() {
                *out += w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                if k < depth {
                    *out = self.mode.base.eval(self.slope_factor(k, r) * *out);
                }
            }
            debug_assert_eq!(next.len(), rows);
            z = next;
        }
        Ok(z)
    }

    pub fn lift(&self, tape: &mut Tape) -> Result<TapeParams> {
        let weights = self
            .weights
            .iter()
            .map(|w| tape.lift_all(w))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let biases = self
            .biases
            .iter()
            .map(|b| tape.lift_all(b))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let slopes = tape.lift_all(&self.slopes)?;
        let scale = tape.lift(self.mode.scale)?;
        Ok(TapeParams {
            mode: self.mode,
            layout: self.layout.clone(),
            weights,
            biases,
            slopes,
            scale,
        })
    }

    /// Effective parameters `A a o W` over hidden layers followed by the
    /// output-layer parameters, unscaled.
    pub fn effective_theta(&self) -> Result<Vec<f64>> {
        if !self.mode.kind.is_adaptive() {
            return Err(Error::Mode {
                mode: self.mode.kind.to_string(),
                reason: "effective parameters need trainable slopes".into(),
            });
        }
        let depth = self.depth();
        let mut theta = Vec::with_capacity(self.layout.slope_offset());
        for k in 1..depth {
            let cols = self.widths()[k - 1];
            let w = &self.weights[k - 1];
            for (i, &v) in w.iter().enumerate() {
                theta.push(self.slopes[self.layout.slope_index(k, i / cols).unwrap()] * v);
            }
            for (r, &v) in self.biases[k - 1].iter().enumerate() {
                theta.push(self.slopes[self.layout.slope_index(k, r).unwrap()] * v);
            }
        }
        theta.extend_from_slice(&self.weights[depth - 1]);
        theta.extend_from_slice(&self.biases[depth - 1]);
        Ok(theta)
    }

    /// Fixed-activation network computing the same function: every hidden
    /// weight and bias multiplied by its slope factor `n * a`.
    pub fn to_standard(&self) -> NetworkParams {
        let mut out = NetworkParams {
            mode: ActivationMode::fixed(self.mode.base),
            layout: ParamLayout::new(self.widths(), SlopeKind::Fixed).expect("validated widths"),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            slopes: Vec::new(),
        };
        for k in 1..self.depth() {
            let cols = self.widths()[k - 1];
            for (i, w) in out.weights[k - 1].iter_mut().enumerate() {
                *w *= self.slope_factor(k, i / cols);
            }
            for (r, b) in out.biases[k - 1].iter_mut().enumerate() {
                *b *= self.slope_factor(k, r);
            }
        }
        out
    }

    pub fn slope_stats(&self) -> Option<(f64, f64, f64)> {
        if self.slopes.is_empty() {
            return None;
        }
        let min = self.slopes.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.slopes.iter().sum::<f64>() / self.slopes.len() as f64;
        Some((min, mean, max))
    }
}

/// Network parameters lifted onto a tape as differentiable leaves.
#[derive(Debug, Clone)]
pub struct TapeParams {
    mode: ActivationMode,
    layout: ParamLayout,
    pub weights: Vec<Vec<Var>>,
    pub biases: Vec<Vec<Var>>,
    pub slopes: Vec<Var>,
    scale: Var,
}

impl TapeParams {
    pub fn mode(&self) -> ActivationMode {
        self.mode
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Leaves in flat-layout order.
    pub fn flat_vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layout.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.slopes);
        out
    }

    pub fn forward(&self, tape: &mut Tape, input: &[Var]) -> Result<Vec<Var>> {
        let widths = self.layout.widths();
        if input.len() != widths[0] {
            return Err(Error::Dimension {
                what: "network input",
                expected: widths[0],
                actual: input.len(),
            });
        }
        let depth = self.layout.depth();
        let act = self.mode.base.op();
        // One `n * a` node per distinct slope.
        let factors: Vec<Var> = self.slopes.iter().map(|&a| tape.mul(self.scale, a)).collect();
        let mut z = input.to_vec();
        for k in 1..=depth {
            let cols = widths[k - 1];
            let w = &self.weights[k - 1];
            let mut next = Vec::with_capacity(widths[k]);
            for (r, &b) in self.biases[k - 1].iter().enumerate() {
                let mut h = b;
                for (c, &zc) in z.iter().enumerate() {
                    let t = tape.mul(w[r * cols + c], zc);
                    h = tape.add(h, t);
                }
                if k < depth {
                    if let Some(i) = self.layout.slope_index(k, r) {
                        h = tape.mul(factors[i], h);
                    }
                    h = tape.apply(act, &[h])?;
                }
                next.push(h);
            }
            z = next;
        }
        Ok(z)
    }
}

/// Size of the N-LAAF parameter space relative to the fixed network,
/// `(1 + 2 rho) / (1 + rho)` with `rho = biases / weights`.
pub fn param_count_ratio(widths: &[usize]) -> Result<f64> {
    validate_widths(widths)?;
    if widths.len() < 3 {
        return Err(Error::Shape("need at least one hidden layer".into()));
    }
    let omega: usize = widths.windows(2).map(|p| p[0] * p[1]).sum();
    let beta: usize = widths[1..].iter().sum();
    let rho = beta as f64 / omega as f64;
    Ok((1.0 + 2.0 * rho) / (1.0 + rho))
}

const CHECKPOINT_FORMAT: &str = "laaf-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub mode: SlopeKind,
    pub activation: Activation,
    pub scale: f64,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(params: &NetworkParams, seed: u64) -> Self {
        let mode = params.mode();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            widths: params.widths().to_vec(),
            mode: mode.kind,
            activation: mode.base,
            scale: mode.scale,
            seed,
            params: params.to_flat(),
        }
    }

    pub fn to_params(&self) -> Result<NetworkParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mode = ActivationMode::new(self.mode, self.activation, self.scale)?;
        let layout = ParamLayout::new(&self.widths, mode.kind)?;
        NetworkParams::unflatten(
            &FlatParams {
                values: self.params.clone(),
                layout,
            },
            mode,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
