//! Input degradation applied before encoding at training time: random
//! channel dropout plus brightness, contrast and saturation jitter.

use rand::seq::index::sample;
use rand::Rng;

use super::Frame;
use crate::autodiff::{Graph, Pointwise, Scalar, Var};
use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckConfig {
    /// Probability of zeroing 0, 1 or 2 channels.
    pub drop_count_probs: [f64; 3],
    /// Jitter factors are drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub per_clip_dropout: bool,
    pub per_frame_jitter: bool,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            drop_count_probs: [1.0 / 3.0; 3],
            jitter: 0.10,
            per_clip_dropout: true,
            per_frame_jitter: true,
        }
    }
}

impl BottleneckConfig {
    /// No dropout and no jitter.
    pub fn disabled() -> Self {
        BottleneckConfig {
            drop_count_probs: [1.0, 0.0, 0.0],
            jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.drop_count_probs.iter().sum();
        if self.drop_count_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!(
                "drop-count probabilities {:?} must be in [0,1] and sum to 1",
                self.drop_count_probs
            )));
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return Err(Error::config(format!("jitter {} outside [0, 0.5]", self.jitter)));
        }
        Ok(())
    }

    pub fn sample_mask<R: Rng>(&self, rng: &mut R) -> DropMask {
        let u: f64 = rng.random();
        let count = if u < self.drop_count_probs[0] {
            0
        } else if u < self.drop_count_probs[0] + self.drop_count_probs[1] {
            1
        } else {
            2
        };
        let mut dropped = [false; 3];
        for c in sample(rng, 3, count) {
            dropped[c] = true;
        }
        DropMask { dropped }
    }

    pub fn sample_jitter<R: Rng>(&self, rng: &mut R) -> JitterDraw {
        let j = self.jitter;
        let mut draw = || if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
        JitterDraw {
            brightness: draw(),
            contrast: draw(),
            saturation: draw(),
        }
    }
}

/// Channels zeroed by the dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropMask {
    pub dropped: [bool; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl JitterDraw {
    pub fn identity() -> Self {
        JitterDraw {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

/// Records the degradation of an `H x W x 3` RGB value: dropout and
/// brightness (per-channel scale), contrast about the mean grey level,
/// saturation toward per-pixel grey, then a clamp to `[0, 1]`.
pub fn bottleneck_graph<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &DropMask, jitter: &JitterDraw) -> Result<Var> {
    let mut diag = [T::zero(); 9];
    for c in 0..3 {
        let keep = if mask.dropped[c] { 0.0 } else { 1.0 };
        diag[c * 3 + c] = T::lit(keep * jitter.brightness);
    }
    let y = g.channel_linear(x, &diag, &[T::zero(); 3])?;
    let gray = GRAY_WEIGHTS.map(T::lit);
    let y = g.contrast(y, T::lit(jitter.contrast), gray)?;
    let s = jitter.saturation;
    let mut sat = [T::zero(); 9];
    for k in 0..3 {
        for c in 0..3 {
            let eye = if k == c { s } else { 0.0 };
            sat[k * 3 + c] = T::lit(eye + (1.0 - s) * GRAY_WEIGHTS[k]);
        }
    }
    let y = g.channel_linear(y, &sat, &[T::zero(); 3])?;
    Ok(g.pointwise(y, Pointwise::Clamp01))
}

/// Applies the bottleneck to a frame. `clip_mask` supplies the clip's shared
/// dropout mask; without it one is drawn for this frame.
pub fn apply_bottleneck<R: Rng>(frame: &Frame, cfg: &BottleneckConfig, rng: &mut R, clip_mask: Option<DropMask>) -> Result<Frame> {
    let mask = clip_mask.unwrap_or_else(|| cfg.sample_mask(rng));
    let jitter = cfg.sample_jitter(rng);
    apply_draws(frame, &mask, &jitter)
}

pub(crate) fn apply_draws(frame: &Frame, mask: &DropMask, jitter: &JitterDraw) -> Result<Frame> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(vec![frame.height(), frame.width(), 3], frame.rgb().to_vec())?;
    let y = bottleneck_graph(&mut g, x, mask, jitter)?;
    Frame::from_clamped(frame.height(), frame.width(), g.value(y).to_vec())
}
