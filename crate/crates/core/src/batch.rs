//! Batched forward/backward passes for the training hot path.
//!
//! A pass evaluates the network at `B` points at once and, alongside the
//! value, propagates first derivatives `du/dx_i` and pure second derivatives
//! `d2u/dx_i2` with respect to selected inputs (forward mode in the inputs).
//! The backward pass then pulls adjoints of all those channels back to every
//! weight, bias and slope (reverse mode in the parameters). This computes the
//! same numbers as building the PDE residual with
//! [`Tape::derivative_graph`](crate::autodiff::Tape::derivative_graph) point by
//! point, but with dense matrix products instead of one scalar node per
//! multiply-add. The tape remains the reference: tests compare the two.
//!
//! Activations are stored row-major as `neurons x (channels * B)`, with one
//! contiguous block of `B` columns per channel. Channel 0 is the value.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::network::NetworkParams;

// Large activation buffers are recycled per thread: first-touch page faults
// on fresh allocations cost more than the arithmetic on big batches.
const POOL_MIN_LEN: usize = 1 << 12;
const POOL_CAPACITY: usize = 64;

thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A buffer of length `len` with unspecified (but initialized) contents.
fn take_buffer(len: usize) -> Vec<f64> {
    if len < POOL_MIN_LEN {
        return vec![0.0; len];
    }
    let reused = POOL.with(|p| {
        let mut p = p.borrow_mut();
        let best = p
            .iter()
            .enumerate()
            .filter(|(_, b)| b.capacity() >= len)
            .min_by_key(|(_, b)| b.capacity())
            .map(|(i, _)| i);
        best.map(|i| p.swap_remove(i))
    });
    match reused {
        Some(mut b) => {
            if b.len() >= len {
                b.truncate(len);
            } else {
                b.resize(len, 0.0);
            }
            b
        }
        None => vec![0.0; len],
    }
}

fn give_buffer(b: Vec<f64>) {
    if b.capacity() < POOL_MIN_LEN {
        return;
    }
    // Ignore failures during thread teardown.
    let _ = POOL.try_with(|p| {
        let mut p = p.borrow_mut();
        if p.len() < POOL_CAPACITY {
            p.push(b);
        }
    });
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Drop for Mat {
    fn drop(&mut self) {
        give_buffer(std::mem::take(&mut self.data));
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let mut data = take_buffer(rows * cols);
        data.fill(0.0);
        Mat { rows, cols, data }
    }

    /// Matrix whose every entry the caller will overwrite.
    fn scratch(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: take_buffer(rows * cols),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides above describe exactly the row-major buffers of
    // `a`, `b` and `c`, whose lengths were checked against their shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Which input-derivative channels a pass carries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Channels {
    first: Vec<usize>,
    second: Vec<usize>,
}

impl Channels {
    pub fn value_only() -> Self {
        Channels::default()
    }

    /// `first`: inputs with a `du/dx_i` channel. `second`: inputs with a
    /// `d2u/dx_i2` channel; each must also appear in `first`.
    pub fn new(mut first: Vec<usize>, mut second: Vec<usize>) -> Result<Self> {
        first.sort_unstable();
        first.dedup();
        second.sort_unstable();
        second.dedup();
        if let Some(i) = second.iter().find(|i| !first.contains(i)) {
            return Err(Error::InvalidArgument(format!(
                "second-derivative channel for input {i} needs its first-derivative channel"
            )));
        }
        Ok(Channels { first, second })
    }

    pub fn count(&self) -> usize {
        1 + self.first.len() + self.second.len()
    }

    pub fn first(&self) -> &[usize] {
        &self.first
    }

    pub fn second(&self) -> &[usize] {
        &self.second
    }

    pub fn first_channel(&self, input: usize) -> Option<usize> {
        self.first.iter().position(|&i| i == input).map(|p| 1 + p)
    }

    pub fn second_channel(&self, input: usize) -> Option<usize> {
        self.second
            .iter()
            .position(|&i| i == input)
            .map(|p| 1 + self.first.len() + p)
    }

    /// `(second channel, matching first channel)` pairs.
    fn second_pairs(&self) -> Vec<(usize, usize)> {
        self.second
            .iter()
            .map(|&i| {
                (
                    self.second_channel(i).expect("listed"),
                    self.first_channel(i).expect("validated"),
                )
            })
            .collect()
    }
}

#[derive(Debug)]
struct HiddenCache {
    /// Pre-activation before slope scaling, all channels.
    h: Mat,
    /// Slope factor `n * a` per neuron.
    factor: Vec<f64>,
    /// First three activation derivatives at the scaled value channel.
    d1: Mat,
    d2: Mat,
    d3: Mat,
}

/// Result of a batched forward pass; keeps what the backward pass needs.
#[derive(Debug)]
pub struct Forward {
    channels: Channels,
    batch: usize,
    /// `inputs[k]` is the input to affine layer `k + 1`.
    inputs: Vec<Mat>,
    hidden: Vec<HiddenCache>,
    output: Mat,
}

fn weight_mat(params: &NetworkParams, layer: usize) -> Mat {
    let w = params.widths();
    Mat::from_vec(w[layer], w[layer - 1], params.weights[layer - 1].clone())
}

/// Forward pass at `points` (row-major, `B x N_0`).
pub fn forward(params: &NetworkParams, points: &[f64], channels: &Channels) -> Result<Forward> {
    let n0 = params.input_dim();
    if n0 == 0 || !points.len().is_multiple_of(n0) {
        return Err(Error::Dimension {
            what: "batched points",
            expected: n0,
            actual: points.len(),
        });
    }
    if let Some(&bad) = channels.first.iter().find(|&&i| i >= n0) {
        return Err(Error::Dimension {
            what: "derivative input index",
            expected: n0,
            actual: bad + 1,
        });
    }
    let batch = points.len() / n0;
    let nc = channels.count();
    let cols = nc * batch;
    let pairs = channels.second_pairs();

    let mut z0 = Mat::zeros(n0, cols);
    for p in 0..batch {
        for i in 0..n0 {
            z0.data[i * cols + p] = points[p * n0 + i];
        }
    }
    for (slot, &i) in channels.first.iter().enumerate() {
        let ch = 1 + slot;
        z0.row_mut(i)[ch * batch..(ch + 1) * batch].fill(1.0);
    }

    let depth = params.depth();
    let act = params.mode().base;
    let mut inputs = vec![z0];
    let mut hidden = Vec::with_capacity(depth - 1);
    for k in 1..depth {
        let rows = params.widths()[k];
        let w = weight_mat(params, k);
        let mut h = Mat::scratch(rows, cols);
        gemm(1.0, &w, false, inputs.last().expect("input"), false, 0.0, &mut h);
        let mut y = Mat::scratch(rows, cols);
        let mut d1 = Mat::scratch(rows, batch);
        let mut d2 = Mat::scratch(rows, batch);
        let mut d3 = Mat::scratch(rows, batch);
        let mut factor = Vec::with_capacity(rows);
        for r in 0..rows {
            let c = params.slope_factor(k, r);
            factor.push(c);
            let b = params.biases[k - 1][r];
            let hr = h.row_mut(r);
            for v in &mut hr[..batch] {
                *v += b;
            }
            let hr = h.row(r);
            let hc: Vec<&[f64]> = hr.chunks_exact(batch).collect();
            let mut yc: Vec<&mut [f64]> = y.row_mut(r).chunks_exact_mut(batch).collect();
            let d1r = &mut d1.row_mut(r)[..];
            let d2r = &mut d2.row_mut(r)[..];
            let d3r = &mut d3.row_mut(r)[..];
            for ((((y0, a1), a2), a3), &h0) in yc[0]
                .iter_mut()
                .zip(d1r.iter_mut())
                .zip(d2r.iter_mut())
                .zip(d3r.iter_mut())
                .zip(hc[0])
            {
                let j = act.jet(c * h0);
                *y0 = j[0];
                *a1 = j[1];
                *a2 = j[2];
                *a3 = j[3];
            }
            for ch in 1..=channels.first.len() {
                for ((yv, &a1), &hv) in yc[ch].iter_mut().zip(d1r.iter()).zip(hc[ch]) {
                    *yv = a1 * c * hv;
                }
            }
            for &(sc, fc) in &pairs {
                for ((((yv, &a1), &a2), &hf), &hs) in yc[sc]
                    .iter_mut()
                    .zip(d1r.iter())
                    .zip(d2r.iter())
                    .zip(hc[fc])
                    .zip(hc[sc])
                {
                    let si = c * hf;
                    *yv = a2 * si * si + a1 * c * hs;
                }
            }
        }
        hidden.push(HiddenCache { h, factor, d1, d2, d3 });
        inputs.push(y);
    }
    let w = weight_mat(params, depth);
    let mut output = Mat::scratch(params.output_dim(), cols);
    gemm(1.0, &w, false, inputs.last().expect("input"), false, 0.0, &mut output);
    for (r, &b) in params.biases[depth - 1].iter().enumerate() {
        for v in &mut output.row_mut(r)[..batch] {
            *v += b;
        }
    }
    Ok(Forward {
        channels: channels.clone(),
        batch,
        inputs,
        hidden,
        output,
    })
}

impl Forward {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> &Channels {
        &self.channels
    }

    /// Output matrix `N_D x (channels * B)`.
    pub fn output(&self) -> &Mat {
        &self.output
    }

    pub fn value(&self, out: usize, point: usize) -> f64 {
        self.output.at(out, point)
    }

    pub fn channel(&self, out: usize, channel: usize, point: usize) -> f64 {
        self.output.at(out, channel * self.batch + point)
    }

    /// Gradient of `sum(out_adjoint .* output)` with respect to every
    /// parameter, in flat-layout order.
    pub fn backward(&self, params: &NetworkParams, out_adjoint: &Mat) -> Result<Vec<f64>> {
        if (out_adjoint.rows, out_adjoint.cols) != (self.output.rows, self.output.cols) {
            return Err(Error::Dimension {
                what: "output adjoint",
                expected: self.output.rows * self.output.cols,
                actual: out_adjoint.rows * out_adjoint.cols,
            });
        }
        let layout = params.layout();
        let depth = params.depth();
        let batch = self.batch;
        let cols = self.channels.count() * batch;
        let nfirst = self.channels.first.len();
        let pairs = self.channels.second_pairs();
        let mut grad = vec![0.0; layout.len()];
        let scale = params.mode().scale;

        // Output layer.
        let mut hbar = out_adjoint.clone();
        let mut zbar;
        {
            let z = &self.inputs[depth - 1];
            let mut wbar = Mat::zeros(hbar.rows, z.rows);
            gemm(1.0, &hbar, false, z, true, 0.0, &mut wbar);
            let off = layout.weight_offset(depth);
            grad[off..off + wbar.data.len()].copy_from_slice(&wbar.data);
            let boff = layout.bias_offset(depth);
            for r in 0..hbar.rows {
                grad[boff + r] = hbar.row(r)[..batch].iter().sum();
            }
            let w = weight_mat(params, depth);
            zbar = Mat::scratch(z.rows, cols);
            gemm(1.0, &w, true, &hbar, false, 0.0, &mut zbar);
        }

        for k in (1..depth).rev() {
            let cache = &self.hidden[k - 1];
            let rows = params.widths()[k];
            hbar = Mat::scratch(rows, cols);
            for r in 0..rows {
                let c = cache.factor[r];
                let yb = zbar.row(r);
                let hr = cache.h.row(r);
                let d1 = cache.d1.row(r);
                let d2 = cache.d2.row(r);
                let d3 = cache.d3.row(r);
                let yc: Vec<&[f64]> = yb.chunks_exact(batch).collect();
                let hc: Vec<&[f64]> = hr.chunks_exact(batch).collect();
                let sb = hbar.row_mut(r);
                {
                    let mut sc_: Vec<&mut [f64]> = sb.chunks_exact_mut(batch).collect();
                    let (s0, rest) = sc_.split_first_mut().expect("value channel");
                    for ((s, &y), &a1) in s0.iter_mut().zip(yc[0]).zip(d1) {
                        *s = y * a1;
                    }
                    for ch in 1..=nfirst {
                        let sf = &mut rest[ch - 1];
                        for ((((s, f), &y), &a1), (&a2, &h)) in s0
                            .iter_mut()
                            .zip(sf.iter_mut())
                            .zip(yc[ch])
                            .zip(d1)
                            .zip(d2.iter().zip(hc[ch]))
                        {
                            *s += y * a2 * c * h;
                            *f = y * a1;
                        }
                    }
                    for &(scn, fcn) in &pairs {
                        let [sf, ss] = rest.get_disjoint_mut([fcn - 1, scn - 1]).expect("distinct channels");
                        for (((s, f), q), ((&y, &hf), (&hs, (&a1, (&a2, &a3))))) in
                            s0.iter_mut().zip(sf.iter_mut()).zip(ss.iter_mut()).zip(
                                yc[scn]
                                    .iter()
                                    .zip(hc[fcn])
                                    .zip(hc[scn].iter().zip(d1.iter().zip(d2.iter().zip(d3)))),
                            )
                        {
                            let si = c * hf;
                            let sii = c * hs;
                            *s += y * (a3 * si * si + a2 * sii);
                            *f += y * a2 * 2.0 * si;
                            *q = y * a1;
                        }
                    }
                }
                // sb now holds the adjoint of the scaled pre-activation.
                if let Some(si) = layout.slope_index(k, r) {
                    let cbar: f64 = sb.iter().zip(hr).map(|(a, b)| a * b).sum();
                    grad[layout.slope_offset() + si] += scale * cbar;
                }
                if c != 1.0 {
                    for v in sb.iter_mut() {
                        *v *= c;
                    }
                }
            }
            let z = &self.inputs[k - 1];
            let mut wbar = Mat::zeros(rows, z.rows);
            gemm(1.0, &hbar, false, z, true, 0.0, &mut wbar);
            let off = layout.weight_offset(k);
            grad[off..off + wbar.data.len()].copy_from_slice(&wbar.data);
            let boff = layout.bias_offset(k);
            for r in 0..rows {
                grad[boff + r] = hbar.row(r)[..batch].iter().sum();
            }
            if k > 1 {
                let w = weight_mat(params, k);
                zbar = Mat::scratch(z.rows, cols);
                gemm(1.0, &w, true, &hbar, false, 0.0, &mut zbar);
            }
        }
        Ok(grad)
    }
}
