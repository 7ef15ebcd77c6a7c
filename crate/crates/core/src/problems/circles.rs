use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Activation;
use crate::objective::{DataTerm, PointSet};
use crate::rng;

/// Two concentric circles: `n/2` points on the unit circle (label 0) and
/// the rest on the circle of radius `factor` (label 1), at evenly spaced
/// angles, shuffled, plus isotropic Gaussian noise of standard deviation
/// `noise`.
pub fn circles_dataset(n_samples: usize, noise: f64, factor: f64, seed: u64) -> Result<DataTerm> {
    if !(0.0 < factor && factor < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "factor must lie in (0, 1), got {factor}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise must be nonnegative, got {noise}"
        )));
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let n_out = n_samples / 2;
    let n_in = n_samples - n_out;
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n_samples);
    for (count, radius, label) in [(n_out, 1.0, 0), (n_in, factor, 1)] {
        for i in 0..count {
            let angle = TAU * i as f64 / count as f64;
            rows.push(([radius * angle.cos(), radius * angle.sin()], label));
        }
    }
    rows.shuffle(&mut rng::stream(seed, rng::DATA));
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut nr = rng::stream(seed, rng::NOISE);
        for (p, _) in &mut rows {
            p[0] += normal.sample(&mut nr);
            p[1] += normal.sample(&mut nr);
        }
    }
    let coords = rows.iter().flat_map(|(p, _)| *p).collect();
    let labels = rows.iter().map(|(_, l)| *l).collect();
    DataTerm::classification(PointSet::new(2, coords)?, labels, 2)
}

/// Settings for the conditioning experiment on the circles data: one hidden
/// layer, one output logit, mini-batch SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirclesPreset {
    pub width: usize,
    pub activation: Activation,
    pub n_samples: usize,
    pub noise: f64,
    pub factor: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs between Hessian samples.
    pub hessian_every: usize,
    /// The data set is shared by all training seeds.
    pub data_seed: u64,
}

impl CirclesPreset {
    pub fn widths(&self) -> Vec<usize> {
        vec![2, self.width, 1]
    }
}

pub fn circles_preset(width: usize, activation: Activation) -> CirclesPreset {
    CirclesPreset {
        width,
        activation,
        n_samples: 1000,
        noise: 0.01,
        factor: 0.7,
        lr: 0.01,
        epochs: 50,
        batch_size: 64,
        hessian_every: 1,
        data_seed: 0,
    }
}
