//! Self-supervised training by recursive frame reconstruction.
//!
//! Each clip of `n` frames is reconstructed forward (frame `k` from frame
//! `k - 1`, where the reference is either ground truth or the previous
//! prediction under scheduled sampling) and then backward from the last
//! prediction down to the first frame. Both paths are scored with the
//! cross-entropy between soft-copied palette classes and the quantized
//! ground truth.

mod objective;
mod trainer;

pub use objective::{clip_step, gradient_check, total_loss, Clip, ClipGraph, ClipOutcome, ForwardOutput, Reconstruction};
pub use trainer::{clip_rng, Dataset, Trainer, Video};

use serde::Serialize;

use crate::autodiff::AdamConfig;
use crate::colour::BottleneckConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Frames per clip.
    pub n: usize,
    pub max_disparity: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub ss_start: f64,
    pub ss_end: f64,
    pub total_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub l2_normalize: bool,
    /// Frame gap between consecutive clip frames.
    pub temporal_stride: usize,
    /// Pixels sampled for palette fitting.
    pub palette_sample: usize,
    /// Added inside the logarithm of the cross-entropy.
    pub ce_eps: f64,
    /// Start the backward path from the last forward prediction rather
    /// than the last ground-truth frame.
    pub cycle_from_prediction: bool,
    pub bottleneck: BottleneckConfig,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            n: 3,
            max_disparity: 6,
            alpha1: 1.0,
            alpha2: 0.1,
            ss_start: 0.9,
            ss_end: 0.6,
            total_steps: 1_000_000,
            lr: 2e-4,
            batch_size: 8,
            seed: 0,
            temperature: 1.0,
            l2_normalize: false,
            temporal_stride: 1,
            palette_sample: 100_000,
            ce_eps: 1e-6,
            cycle_from_prediction: true,
            bottleneck: BottleneckConfig::default(),
            encoder: EncoderConfig::paper(),
            adam: AdamConfig::default(),
        }
    }

    /// Desk-scale settings for small synthetic videos. The higher rate
    /// compensates for the short run.
    pub fn tiny() -> Self {
        TrainConfig {
            total_steps: 200,
            lr: 1e-3,
            encoder: EncoderConfig::tiny(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.n < 2 {
            return fail(format!("clip length n = {} must be at least 2", self.n));
        }
        if !(0.0 <= self.ss_end && self.ss_end <= self.ss_start && self.ss_start <= 1.0) {
            return fail(format!(
                "need 0 <= ss_end ({}) <= ss_start ({}) <= 1",
                self.ss_end, self.ss_start
            ));
        }
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return fail(format!("loss weights must be non-negative, got {} and {}", self.alpha1, self.alpha2));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.batch_size > u16::MAX as usize {
            return fail(format!("batch size {} outside 1..=65535", self.batch_size));
        }
        if self.temporal_stride == 0 {
            return fail("temporal stride must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.ce_eps.is_nan() || self.ce_eps < 0.0 {
            return fail(format!("ce_eps must be non-negative, got {}", self.ce_eps));
        }
        if self.palette_sample < crate::NUM_CLASSES {
            return fail(format!("palette sample {} is smaller than the class count", self.palette_sample));
        }
        self.bottleneck.validate()?;
        self.encoder.validate()
    }
}

/// Ground-truth reference probability, linear from `start` at step 0 to
/// `end` at `total`.
pub fn ss_probability(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let t = step.min(total) as f64 / total as f64;
    start + (end - start) * t
}

/// Base rate halved at 40%, 60% and 80% of the run.
pub fn learning_rate(step: usize, total: usize, base: f64) -> f64 {
    // integer comparison in tenths keeps the milestones exact
    let halvings = [4, 6, 8].iter().filter(|&&tenths| step * 10 >= tenths * total).count();
    base / f64::from(1u32 << halvings)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    /// Ground-truth reference probability used.
    pub p: f64,
    pub lr: f64,
    /// Forward losses for frames 2..=n, averaged over the batch.
    pub l1: Vec<f64>,
    /// Backward losses for frames n-1 down to 1, averaged over the batch.
    pub l2: Vec<f64>,
    /// `alpha1 * sum(l1) + alpha2 * sum(l2)`.
    pub total: f64,
}

impl StepReport {
    pub fn weighted_total(l1: &[f64], l2: &[f64], alpha1: f64, alpha2: f64) -> f64 {
        alpha1 * l1.iter().sum::<f64>() + alpha2 * l2.iter().sum::<f64>()
    }
}
