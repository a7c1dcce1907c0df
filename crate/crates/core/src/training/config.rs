use crate::arlnet::{Descriptor, Mode};
use crate::data::{Dataset, KEY_BITS};
use crate::error::{ArlError, Result};

use super::LrSchedule;

/// Weights of L_rels, L_absc and L_abss. Zero disables a learner.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub const MIN: f64 = 1e-3;
    pub const MAX: f64 = 1.0;

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn zero() -> Self {
        LossWeights::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v == 0.0 || (Self::MIN..=Self::MAX).contains(&v)) {
                return Err(ArlError::Config(format!(
                    "{} = {} must be 0 or lie in [{}, {}]",
                    name,
                    v,
                    Self::MIN,
                    Self::MAX
                )));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// L, Z, Q.
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Augmentations per source image (unsupervised).
    pub m: usize,
    /// Source pairs per unsupervised batch.
    pub pairs: usize,
    pub p: f64,
    pub lr: LrSchedule,
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub abs_feedback: bool,
    pub rel_feedback: bool,
    pub detach_feedback: bool,
    pub channels: usize,
    pub hidden: usize,
    pub rel_bins: usize,
    pub eval_episodes: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Supervised,
            way: 5,
            shot: 1,
            queries: 15,
            m: 4,
            pairs: 4,
            p: 2.0,
            lr: LrSchedule::default(),
            iterations: 20000,
            seed: 0,
            weights: LossWeights {
                alpha: 1.0,
                beta: 1.0,
                gamma: 1.0,
            },
            abs_feedback: true,
            rel_feedback: true,
            detach_feedback: false,
            channels: 64,
            hidden: 8,
            rel_bins: 1,
            eval_episodes: 1000,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Same run with every ArL feature off.
    pub fn as_baseline(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights::zero(),
            abs_feedback: false,
            rel_feedback: false,
            detach_feedback: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("way", self.way),
            ("shot", self.shot),
            ("queries", self.queries),
            ("pairs", self.pairs),
            ("iterations", self.iterations),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("rel_bins", self.rel_bins),
            ("eval_episodes", self.eval_episodes),
            ("log_every", self.log_every),
            ("lr_halve_every", self.lr.halve_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ArlError::Config(format!("{} must be positive", k)));
        }
        if self.mode == Mode::Unsupervised && self.m < 2 {
            return Err(ArlError::Config(format!("m = {} augmentations; need at least 2", self.m)));
        }
        if !(self.p > 0.0) {
            return Err(ArlError::Config(format!("p = {} must be > 0", self.p)));
        }
        if !(self.lr.base > 0.0) {
            return Err(ArlError::Config(format!("lr = {} must be > 0", self.lr.base)));
        }
        self.weights.validate()
    }

    /// Architecture for this configuration on a dataset. Heads are built only
    /// when a loss weight or a feedback path needs them.
    pub fn descriptor(&self, ds: &Dataset) -> Result<Descriptor> {
        let (c, h, w) = ds
            .image_shape()
            .ok_or_else(|| ArlError::Contract("dataset has no images".into()))?;
        if h != w {
            return Err(ArlError::Contract(format!("images must be square, got {}x{}", h, w)));
        }
        let (attr_dim, num_classes) = match self.mode {
            Mode::Supervised => (ds.attribute_dim(), ds.splits().train.len()),
            Mode::Unsupervised => (KEY_BITS, KEY_BITS),
        };
        let w = self.weights;
        let d = Descriptor {
            mode: self.mode,
            in_channels: c,
            side: h,
            enc_channels: self.channels,
            trunk_channels: self.channels,
            hidden: self.hidden,
            attr_dim,
            num_classes,
            rel_bins: self.rel_bins,
            absolute: w.beta > 0.0 || w.gamma > 0.0 || self.abs_feedback,
            semantic: w.alpha > 0.0 || self.rel_feedback,
            abs_feedback: self.abs_feedback,
            rel_feedback: self.rel_feedback,
            detach_feedback: self.detach_feedback,
        };
        d.validate()?;
        Ok(d)
    }
}
