//! Run configuration: a TOML file, every key optional, unknown keys rejected.
//! See `configs/example.toml` for an annotated copy of the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, SlopeKind};
use crate::optimize::{OptimizerKind, StopRule};
use crate::problems::{
    burgers_inverse_preset, circles_preset, discontinuous_preset, poisson_inverse_preset, CirclesPreset, PresetName,
    ProblemPreset,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: PresetName,
    pub mode: SlopeKind,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Write dense matrices into dynamics reports.
    pub full: bool,
    /// Multiplicative Gaussian noise on the Poisson targets.
    pub noise: bool,
    pub problem: ProblemParams,
    pub overrides: Overrides,
    /// Defaults to Adam at the preset learning rate.
    pub optimizer: Option<OptimizerKind>,
    pub stop: Option<StopRule>,
    pub circles: CirclesParams,
    pub verify: VerifyParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: PresetName::Discontinuous,
            mode: SlopeKind::Llaaf,
            seeds: vec![0],
            out: PathBuf::from("runs"),
            full: false,
            noise: false,
            problem: ProblemParams::default(),
            overrides: Overrides::default(),
            optimizer: None,
            stop: None,
            circles: CirclesParams::default(),
            verify: VerifyParams::default(),
        }
    }
}

/// Physical constants of the PDE presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemParams {
    pub alpha_true: f64,
    pub nu_true: f64,
    pub nu_init: f64,
    /// Burgers left and right states.
    pub left_state: f64,
    pub right_state: f64,
}

impl Default for ProblemParams {
    fn default() -> Self {
        ProblemParams {
            alpha_true: 0.7,
            nu_true: 0.05,
            nu_init: 0.5,
            left_state: 2.0,
            right_state: 0.0,
        }
    }
}

/// Replacements for preset values; absent keys keep the preset's.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Overrides {
    pub widths: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub scale: Option<f64>,
    pub lr: Option<f64>,
    pub iterations: Option<usize>,
    pub w_f: Option<f64>,
    pub w_u: Option<f64>,
    pub w_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CirclesParams {
    pub width: usize,
    pub activation: Activation,
    pub n_samples: usize,
    pub noise: f64,
    pub factor: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hessian_every: usize,
    pub data_seed: u64,
}

impl Default for CirclesParams {
    fn default() -> Self {
        let p = circles_preset(10, Activation::Sigmoid);
        CirclesParams {
            width: p.width,
            activation: p.activation,
            n_samples: p.n_samples,
            noise: p.noise,
            factor: p.factor,
            lr: p.lr,
            epochs: p.epochs,
            batch_size: p.batch_size,
            hessian_every: p.hessian_every,
            data_seed: p.data_seed,
        }
    }
}

impl CirclesParams {
    pub fn preset(&self) -> CirclesPreset {
        CirclesPreset {
            width: self.width,
            activation: self.activation,
            n_samples: self.n_samples,
            noise: self.noise,
            factor: self.factor,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            hessian_every: self.hessian_every,
            data_seed: self.data_seed,
        }
    }
}

/// Sizes of the `verify` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyParams {
    /// Random tiny networks per mode for the step identity.
    pub nets: usize,
    pub etas: Vec<f64>,
    /// Random parameter points per mode for the homogeneity identities.
    pub euler_points: usize,
    /// Random configurations for the gradient check.
    pub grad_configs: usize,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            nets: 20,
            etas: vec![1e-3, 1e-2],
            euler_points: 100,
            grad_configs: 50,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if let Some(o) = &self.optimizer {
            o.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let o = &self.overrides;
        for (name, v) in [("lr", o.lr), ("scale", o.scale)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("overrides.{name} must be positive, got {v}"));
                }
            }
        }
        for (name, v) in [("w_f", o.w_f), ("w_u", o.w_u), ("w_a", o.w_a)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("overrides.{name} must be nonnegative, got {v}"));
                }
            }
        }
        let c = &self.circles;
        if c.width == 0 || c.batch_size == 0 || c.hessian_every == 0 || c.n_samples < 2 {
            return bad("circles: width, batch_size and hessian_every must be positive, n_samples at least 2".into());
        }
        if !(c.lr > 0.0 && c.lr.is_finite()) {
            return bad(format!("circles.lr must be positive, got {}", c.lr));
        }
        Ok(())
    }

    /// The selected preset for `seed` with overrides applied. The circles
    /// preset has no [`ProblemPreset`] form; use [`CirclesParams::preset`].
    pub fn problem(&self, seed: u64) -> Result<ProblemPreset> {
        let p = &self.problem;
        let mut preset = match self.preset {
            PresetName::Discontinuous => discontinuous_preset(seed)?,
            PresetName::PoissonInverse => poisson_inverse_preset(p.alpha_true, self.noise, seed)?,
            PresetName::BurgersInverse => {
                burgers_inverse_preset(p.nu_true, p.left_state, p.right_state, p.nu_init, seed)?
            }
            PresetName::Circles => {
                return Err(Error::Config(
                    "the circles preset runs through the dynamics command".into(),
                ));
            }
        };
        let o = &self.overrides;
        if let Some(w) = &o.widths {
            preset.widths = w.clone();
        }
        if let Some(a) = o.activation {
            preset.activation = a;
        }
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(v) = o.$f { preset.$f = v; } )*};
        }
        take!(scale, lr, iterations, w_f, w_u, w_a);
        Ok(preset)
    }

    pub fn optimizer_for(&self, preset: &ProblemPreset) -> OptimizerKind {
        self.optimizer.unwrap_or(OptimizerKind::adam(preset.lr))
    }
}
