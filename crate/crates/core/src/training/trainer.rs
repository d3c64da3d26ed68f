use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::objective::{clip_step, frame_targets, Clip, ClipOutcome};
use super::{learning_rate, ss_probability, StepReport, TrainConfig};
use crate::autodiff::{adam_step, AdamState};
use crate::colour::{fit_palette, sample_lab_pixels, Frame, Palette, QuantizedFrame};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::NUM_CLASSES;

/// A named frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone)]
struct PreparedVideo {
    frames: Vec<Frame>,
    targets: Vec<QuantizedFrame>,
    lab: Vec<Vec<[f64; 3]>>,
}

/// Training videos with their palette and precomputed targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    palette: Palette,
    videos: Vec<PreparedVideo>,
    n: usize,
    temporal_stride: usize,
}

/// Stream reserved for palette sampling, away from per-step streams.
const PALETTE_STREAM: u64 = u64::MAX;

impl Dataset {
    /// Fits the palette on a pixel sample of `videos`, then prepares them.
    pub fn prepare(videos: Vec<Video>, cfg: &TrainConfig) -> Result<Self> {
        let palette = Self::fit_palette(&videos, cfg)?;
        Self::with_palette(videos, palette, cfg)
    }

    /// Palette fitted on `cfg.palette_sample` pixels drawn with `cfg.seed`.
    /// Centroids are rounded to single precision so that a checkpointed
    /// palette assigns classes exactly as the fitted one.
    pub fn fit_palette(videos: &[Video], cfg: &TrainConfig) -> Result<Palette> {
        let frames: Vec<&Frame> = videos.iter().flat_map(|v| &v.frames).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(PALETTE_STREAM);
        let sample = sample_lab_pixels(&frames, cfg.palette_sample, &mut rng);
        let fitted = fit_palette(&sample, NUM_CLASSES, cfg.seed)?;
        let rounded = fitted
            .centroids()
            .iter()
            .map(|c| c.map(|v| f64::from(v as f32)))
            .collect();
        let mut palette = Palette::from_centroids(rounded)?;
        palette.seed = fitted.seed;
        palette.iterations = fitted.iterations;
        palette.inertia = fitted.inertia;
        Ok(palette)
    }

    /// Prepares `videos` against an existing palette. Videos too short for
    /// one clip are skipped with a warning.
    pub fn with_palette(videos: Vec<Video>, palette: Palette, cfg: &TrainConfig) -> Result<Self> {
        let span = (cfg.n - 1) * cfg.temporal_stride + 1;
        let mut prepared = Vec::new();
        for v in videos {
            if v.frames.len() < span {
                log::warn!("skipping {}: {} frames, clips need {span}", v.name, v.frames.len());
                continue;
            }
            let mut targets = Vec::with_capacity(v.frames.len());
            let mut lab = Vec::with_capacity(v.frames.len());
            for f in &v.frames {
                let (t, l) = frame_targets(f, &palette)?;
                targets.push(t);
                lab.push(l);
            }
            prepared.push(PreparedVideo {
                frames: v.frames,
                targets,
                lab,
            });
        }
        if prepared.is_empty() {
            return Err(Error::config(format!("no training video has the {span} frames a clip needs")));
        }
        Ok(Dataset {
            palette,
            videos: prepared,
            n: cfg.n,
            temporal_stride: cfg.temporal_stride,
        })
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn video_count(&self) -> usize {
        self.videos.len()
    }

    /// Draws a video uniformly, then a start frame uniformly, then the
    /// clip's dropout mask and jitter.
    pub fn sample_clip<R: Rng>(&self, cfg: &TrainConfig, rng: &mut R) -> Result<Clip> {
        let v = &self.videos[rng.random_range(0..self.videos.len())];
        let span = (self.n - 1) * self.temporal_stride + 1;
        let start = rng.random_range(0..=v.frames.len() - span);
        let idx: Vec<usize> = (0..self.n).map(|k| start + k * self.temporal_stride).collect();
        let mask = cfg.bottleneck.sample_mask(rng);
        let jitter = cfg.bottleneck.sample_jitter(rng);
        Clip::from_parts(
            idx.iter().map(|&i| v.frames[i].clone()).collect(),
            idx.iter().map(|&i| v.targets[i].clone()).collect(),
            idx.iter().map(|&i| v.lab[i].clone()).collect(),
            mask,
            jitter,
        )
    }
}

/// Random stream for one clip of one step.
pub fn clip_rng(seed: u64, step: usize, clip: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 16) | clip as u64);
    rng
}

pub struct Trainer {
    cfg: TrainConfig,
    dataset: Dataset,
    params: EncoderParams<f32>,
    adam: AdamState<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let params = EncoderParams::init(&cfg.encoder, cfg.seed)?;
        let adam = AdamState::new(params.tensors());
        Ok(Trainer {
            cfg,
            dataset,
            params,
            adam,
            step: 0,
        })
    }

    /// Continues from a checkpoint's parameters, optimizer state and step.
    pub fn resume(cfg: TrainConfig, dataset: Dataset, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.encoder.config() != &cfg.encoder {
            return Err(Error::config("checkpoint encoder differs from the configured encoder"));
        }
        let adam = match ck.optimizer {
            Some(a) => a,
            None => AdamState::new(ck.encoder.tensors()),
        };
        Ok(Trainer {
            cfg,
            dataset,
            params: ck.encoder,
            adam,
            step: ck.step as usize,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn params(&self) -> &EncoderParams<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamState<f32> {
        &self.adam
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// One optimizer step over a batch of independently sampled clips.
    /// Clips run in parallel; gradients and running statistics are folded
    /// in clip order so results do not depend on the thread count.
    pub fn step(&mut self) -> Result<StepReport> {
        let cfg = &self.cfg;
        let step = self.step;
        let p = ss_probability(step, cfg.total_steps, cfg.ss_start, cfg.ss_end);
        let lr = learning_rate(step, cfg.total_steps, cfg.lr);
        let batch = cfg.batch_size;
        let scale = 1.0 / batch as f64;
        let (params, dataset) = (&self.params, &self.dataset);
        let outcomes: Vec<ClipOutcome<f32>> = (0..batch)
            .into_par_iter()
            .map(|c| {
                let mut rng = clip_rng(cfg.seed, step, c);
                let clip = dataset.sample_clip(cfg, &mut rng)?;
                clip_step(params, &clip, cfg, p, scale, &mut rng)
            })
            .collect::<Result<_>>()?;

        let mut l1 = vec![0.0; cfg.n - 1];
        let mut l2 = vec![0.0; cfg.n - 1];
        for o in &outcomes {
            for (a, v) in l1.iter_mut().zip(&o.l1) {
                *a += v * scale;
            }
            for (a, v) in l2.iter_mut().zip(&o.l2) {
                *a += v * scale;
            }
        }
        let total = StepReport::weighted_total(&l1, &l2, cfg.alpha1, cfg.alpha2);
        let grads_finite = outcomes
            .iter()
            .flat_map(|o| o.grads.iter().flatten())
            .all(|g| g.iter().all(|v| v.is_finite()));
        if !total.is_finite() || !grads_finite {
            return Err(Error::NonFiniteLoss { step, lr, p });
        }

        self.params.zero_grad();
        for o in &outcomes {
            for (t, g) in self.params.tensors_mut().iter_mut().zip(&o.grads) {
                if let Some(g) = g {
                    t.accumulate_grad(g)?;
                }
            }
        }
        for o in &outcomes {
            self.params.update_running_stats(&o.observed);
        }
        adam_step(self.params.tensors_mut(), &mut self.adam, lr, &self.cfg.adam)?;
        if !self.params.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr, p });
        }
        self.step += 1;
        Ok(StepReport {
            step,
            p,
            lr,
            l1,
            l2,
            total,
        })
    }

    /// Steps until `total_steps`, handing every report to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    /// Snapshot of the current state, including optimizer moments.
    pub fn checkpoint(&self, config: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            config,
            step: self.step as u64,
            palette: self.dataset.palette.clone(),
            encoder: self.params.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }
}
