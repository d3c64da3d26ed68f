//! One clip's recursive reconstruction objective recorded on a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::attention::restricted_affinity_graph;
use crate::autodiff::{finite_diff_check, sample_coords, GradCheckReport, Graph, Scalar, Var};
use crate::colour::{bottleneck_graph, lab_to_rgb_graph, pool_lab, rgb_to_lab, DropMask, Frame, JitterDraw, Palette, QuantizedFrame};
use crate::encoder::{EncoderParams, ObservedStats};
use crate::error::{Error, Result};
use crate::{FEATURE_STRIDE, NUM_CLASSES};

/// A training clip: frames in temporal order with their per-cell targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub targets: Vec<QuantizedFrame>,
    /// Mean Lab colour of every feature cell, per frame.
    pub lab: Vec<Vec<[f64; 3]>>,
    /// Channel dropout shared by every frame of the clip.
    pub mask: DropMask,
    /// Used for every frame when per-frame jitter is off.
    pub jitter: JitterDraw,
}

impl Clip {
    /// Quantizes `frames` against `palette` at feature resolution.
    pub fn new(frames: Vec<Frame>, palette: &Palette, mask: DropMask, jitter: JitterDraw) -> Result<Self> {
        let mut targets = Vec::with_capacity(frames.len());
        let mut lab = Vec::with_capacity(frames.len());
        for f in &frames {
            let (t, l) = frame_targets(f, palette)?;
            targets.push(t);
            lab.push(l);
        }
        Self::from_parts(frames, targets, lab, mask, jitter)
    }

    pub fn from_parts(
        frames: Vec<Frame>,
        targets: Vec<QuantizedFrame>,
        lab: Vec<Vec<[f64; 3]>>,
        mask: DropMask,
        jitter: JitterDraw,
    ) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::config("empty clip"));
        };
        let (h, w) = (first.height(), first.width());
        for extent in [h, w] {
            if extent % FEATURE_STRIDE != 0 {
                return Err(Error::Indivisible {
                    extent,
                    divisor: FEATURE_STRIDE,
                    suggestion: extent.div_ceil(FEATURE_STRIDE) * FEATURE_STRIDE,
                });
            }
        }
        for f in &frames {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::ExtentMismatch {
                    what: "clip frame".into(),
                    want_h: h,
                    want_w: w,
                    found_h: f.height(),
                    found_w: f.width(),
                });
            }
        }
        let cells = (h / FEATURE_STRIDE) * (w / FEATURE_STRIDE);
        if targets.len() != frames.len() || lab.len() != frames.len() {
            return Err(Error::shape("clip targets and frames differ in count"));
        }
        if targets.iter().any(|t| t.ids().len() != cells) || lab.iter().any(|l| l.len() != cells) {
            return Err(Error::shape("clip targets are not at feature resolution"));
        }
        Ok(Clip {
            frames,
            targets,
            lab,
            mask,
            jitter,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Feature-grid extents.
    pub fn cells(&self) -> (usize, usize) {
        (self.targets[0].height(), self.targets[0].width())
    }
}

/// Class ids and pooled Lab colours of a frame at feature resolution.
pub(crate) fn frame_targets(frame: &Frame, palette: &Palette) -> Result<(QuantizedFrame, Vec<[f64; 3]>)> {
    let pooled = pool_lab(&rgb_to_lab(frame), FEATURE_STRIDE)?;
    let ids = pooled.iter().map(|&p| palette.assign(p)).collect();
    let q = QuantizedFrame::new(frame.height() / FEATURE_STRIDE, frame.width() / FEATURE_STRIDE, ids)?;
    Ok((q, pooled))
}

/// A reconstructed frame: class distribution (`h x w x 16`) and soft-copied
/// Lab colour (`h x w x 3`).
#[derive(Debug, Clone, Copy)]
pub struct Reconstruction {
    pub classes: Var,
    pub lab: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Predictions for clip frames `1..n` (0-based).
    pub predictions: Vec<Reconstruction>,
    pub l1: Vec<Var>,
    /// Whether each prediction referenced a ground-truth frame.
    pub used_ground_truth: Vec<bool>,
}

/// What a reconstruction copies from: reference features plus the class
/// and colour maps attached to them.
#[derive(Debug, Clone, Copy)]
struct Source {
    features: Var,
    classes: Var,
    lab: Var,
}

/// Tape state for one clip.
pub struct ClipGraph<'a, T: Scalar> {
    pub g: Graph<T>,
    pub vars: Vec<Var>,
    pub observed: ObservedStats<T>,
    params: &'a EncoderParams<T>,
    cfg: &'a TrainConfig,
    clip: &'a Clip,
    truth: Vec<Source>,
}

impl<'a, T: Scalar> ClipGraph<'a, T> {
    /// Registers the parameters and encodes every ground-truth frame once.
    pub fn new<R: Rng>(params: &'a EncoderParams<T>, clip: &'a Clip, cfg: &'a TrainConfig, rng: &mut R) -> Result<Self> {
        if clip.len() < cfg.n {
            return Err(Error::config(format!("clip has {} frames, n = {}", clip.len(), cfg.n)));
        }
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let mut cg = ClipGraph {
            g,
            vars,
            observed: Vec::new(),
            params,
            cfg,
            clip,
            truth: Vec::new(),
        };
        let (ch, cw) = clip.cells();
        for k in 0..cfg.n {
            let f = &clip.frames[k];
            let data = f.rgb().iter().map(|&v| T::lit(f64::from(v))).collect();
            let x = cg.g.constant(vec![f.height(), f.width(), 3], data)?;
            let features = cg.encode_rgb(x, rng)?;
            let one_hot = clip.targets[k].one_hot(NUM_CLASSES).into_iter().map(T::lit).collect();
            let classes = cg.g.constant(vec![ch, cw, NUM_CLASSES], one_hot)?;
            let lab = clip.lab[k].iter().flatten().map(|&v| T::lit(v)).collect();
            let lab = cg.g.constant(vec![ch, cw, 3], lab)?;
            cg.truth.push(Source { features, classes, lab });
        }
        Ok(cg)
    }

    /// Bottleneck then encoder, in training mode.
    fn encode_rgb<R: Rng>(&mut self, x: Var, rng: &mut R) -> Result<Var> {
        let b = &self.cfg.bottleneck;
        let mask = if b.per_clip_dropout { self.clip.mask } else { b.sample_mask(rng) };
        let jitter = if b.per_frame_jitter { b.sample_jitter(rng) } else { self.clip.jitter };
        let x = bottleneck_graph(&mut self.g, x, &mask, &jitter)?;
        self.params.forward(&mut self.g, x, &self.vars, true, &mut self.observed)
    }

    /// Turns a predicted cell-level Lab map back into an encoder input.
    fn encode_prediction<R: Rng>(&mut self, rec: Reconstruction, rng: &mut R) -> Result<Source> {
        let rgb = lab_to_rgb_graph(&mut self.g, rec.lab)?;
        let rgb = self.g.upsample_nearest(rgb, FEATURE_STRIDE)?;
        let features = self.encode_rgb(rgb, rng)?;
        Ok(Source {
            features,
            classes: rec.classes,
            lab: rec.lab,
        })
    }

    fn reconstruct(&mut self, source: Source, target: Var) -> Result<Reconstruction> {
        let a = restricted_affinity_graph(
            &mut self.g,
            source.features,
            target,
            self.cfg.max_disparity,
            self.cfg.temperature,
            self.cfg.l2_normalize,
        )?;
        let classes = self.g.window_gather(a, source.classes)?;
        let lab = self.g.window_gather(a, source.lab)?;
        Ok(Reconstruction { classes, lab })
    }

    fn loss(&mut self, rec: Reconstruction, frame: usize) -> Result<Var> {
        let eps = T::lit(self.cfg.ce_eps);
        self.g.cross_entropy(rec.classes, self.clip.targets[frame].ids(), eps)
    }

    /// Reconstructs frames `1..n` in order. The reference for frame `k` is
    /// ground truth with probability `p` and otherwise the prediction of
    /// frame `k - 1`; the first step always uses ground truth.
    pub fn forward_pass<R: Rng>(&mut self, p: f64, rng: &mut R) -> Result<ForwardOutput> {
        let mut out = ForwardOutput {
            predictions: Vec::new(),
            l1: Vec::new(),
            used_ground_truth: Vec::new(),
        };
        for k in 1..self.cfg.n {
            let use_truth = k == 1 || rng.random::<f64>() < p;
            let source = if use_truth {
                self.truth[k - 1]
            } else {
                let prev = *out.predictions.last().expect("k > 1 has a prediction");
                self.encode_prediction(prev, rng)?
            };
            let rec = self.reconstruct(source, self.truth[k].features)?;
            let l = self.loss(rec, k)?;
            out.predictions.push(rec);
            out.l1.push(l);
            out.used_ground_truth.push(use_truth);
        }
        Ok(out)
    }

    /// Runs the recursion back from the last frame to the first, scoring
    /// frames `n - 2` down to `0`.
    pub fn cycle_pass<R: Rng>(&mut self, forward: &ForwardOutput, rng: &mut R) -> Result<Vec<Var>> {
        let n = self.cfg.n;
        let mut source = if self.cfg.cycle_from_prediction {
            let last = *forward.predictions.last().ok_or_else(|| Error::config("cycle pass needs a forward prediction"))?;
            self.encode_prediction(last, rng)?
        } else {
            self.truth[n - 1]
        };
        let mut l2 = Vec::with_capacity(n - 1);
        for j in (0..n - 1).rev() {
            let rec = self.reconstruct(source, self.truth[j].features)?;
            l2.push(self.loss(rec, j)?);
            if j > 0 {
                source = self.encode_prediction(rec, rng)?;
            }
        }
        Ok(l2)
    }
}

/// `alpha1 * sum(l1) + alpha2 * sum(l2)`, every term additionally scaled
/// by `scale`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l1: &[Var], l2: &[Var], alpha1: f64, alpha2: f64, scale: f64) -> Result<Var> {
    let terms: Vec<(Var, T)> = l1
        .iter()
        .map(|&v| (v, T::lit(alpha1 * scale)))
        .chain(l2.iter().map(|&v| (v, T::lit(alpha2 * scale))))
        .collect();
    g.weighted_sum(&terms)
}

/// Gradients and statistics of one clip's objective.
#[derive(Debug, Clone)]
pub struct ClipOutcome<T> {
    /// Per parameter tensor, `None` if the tensor did not reach the loss.
    pub grads: Vec<Option<Vec<T>>>,
    pub observed: ObservedStats<T>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    /// Weighted loss as evaluated on the tape, without `scale`.
    pub total: f64,
    pub used_ground_truth: Vec<bool>,
}

/// Records the forward and cycle passes for `clip`, then differentiates
/// `scale` times the weighted loss.
pub fn clip_step<T: Scalar, R: Rng>(
    params: &EncoderParams<T>,
    clip: &Clip,
    cfg: &TrainConfig,
    p: f64,
    scale: f64,
    rng: &mut R,
) -> Result<ClipOutcome<T>> {
    let mut cg = ClipGraph::new(params, clip, cfg, rng)?;
    let fwd = cg.forward_pass(p, rng)?;
    let l2 = cg.cycle_pass(&fwd, rng)?;
    let total = total_loss(&mut cg.g, &fwd.l1, &l2, cfg.alpha1, cfg.alpha2, scale)?;
    let read = |g: &Graph<T>, vs: &[Var]| vs.iter().map(|&v| g.value(v)[0].to_f64()).collect::<Vec<f64>>();
    let l1v = read(&cg.g, &fwd.l1);
    let l2v = read(&cg.g, &l2);
    let tape_total = cg.g.value(total)[0].to_f64() / scale;
    let ClipGraph { g, vars, observed, .. } = cg;
    let grads = g.backward(total)?;
    Ok(ClipOutcome {
        grads: vars.iter().map(|&v| grads.get(v).map(<[T]>::to_vec)).collect(),
        observed,
        total: tape_total,
        l1: l1v,
        l2: l2v,
        used_ground_truth: fwd.used_ground_truth,
    })
}

/// Central-difference check of the whole clip objective at `count`
/// sampled parameter coordinates. Step `1e-6`; the scheduled-sampling and
/// bottleneck draws are replayed identically for every evaluation.
pub fn gradient_check(params: &EncoderParams<f64>, clip: &Clip, cfg: &TrainConfig, count: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample_coords(params.tensors(), count, &mut rng);
    let draws = rng.random::<u64>();
    finite_diff_check(params.tensors(), &coords, 1e-6, |ts| {
        let mut p = params.clone();
        for (dst, src) in p.tensors_mut().iter_mut().zip(ts) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let out = clip_step(&p, clip, cfg, 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(draws))?;
        let grads = out
            .grads
            .into_iter()
            .zip(ts)
            .map(|(g, t)| g.unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((out.total, grads))
    })
}
