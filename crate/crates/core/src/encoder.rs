//! Residual feature encoder with total stride 4.
//!
//! Stem: 7x7 conv (stride 2) + norm + ReLU, then four 3x3 residual blocks
//! with strides 1, 2, 1, 1. Each block is conv-norm-ReLU-conv-norm added to
//! a shortcut (1x1 conv + norm when the shape changes), followed by ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::FeatureMap;
use crate::autodiff::{BatchStats, Graph, Scalar, Tensor, Var};
use crate::colour::Frame;
use crate::error::{Error, Result};
use crate::FEATURE_STRIDE;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const STAGE_STRIDES: [usize; 5] = [2, 1, 2, 1, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics in training, running statistics at evaluation.
    Batch,
    /// Running statistics are never updated; the norm is a learned affine map.
    Frozen,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Batch => "batch",
            NormMode::Frozen => "frozen",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormMode::Batch),
            "frozen" => Ok(NormMode::Frozen),
            other => Err(Error::config(format!("unknown norm mode {other:?} (batch|frozen)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channels of the stem and the four residual blocks.
    pub widths: [usize; 5],
    pub norm: NormMode,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            widths: [64, 64, 128, 256, 256],
            norm: NormMode::Batch,
        }
    }

    pub fn tiny() -> Self {
        EncoderConfig {
            widths: [8, 8, 16, 32, 32],
            norm: NormMode::Batch,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.widths[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("encoder widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvNorm {
    kernel: usize,
    scale: usize,
    shift: usize,
    norm: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    first: ConvNorm,
    second: ConvNorm,
    projection: Option<ConvNorm>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    stem: ConvNorm,
    blocks: Vec<Block>,
    /// Name and shape of every learnable tensor, in storage order.
    params: Vec<(String, Vec<usize>)>,
    /// Name and channel count of every norm layer.
    norms: Vec<(String, usize)>,
}

impl Layout {
    fn new(cfg: &EncoderConfig) -> Self {
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut conv_norm = |name: &str, k: usize, cin: usize, cout: usize, stride: usize| {
            let kernel = params.len();
            params.push((format!("{name}.conv"), vec![k, k, cin, cout]));
            params.push((format!("{name}.norm.scale"), vec![cout]));
            params.push((format!("{name}.norm.shift"), vec![cout]));
            norms.push((format!("{name}.norm"), cout));
            ConvNorm {
                kernel,
                scale: kernel + 1,
                shift: kernel + 2,
                norm: norms.len() - 1,
                stride,
                pad: k / 2,
            }
        };
        let w = cfg.widths;
        let stem = conv_norm("stem", 7, 3, w[0], STAGE_STRIDES[0]);
        let mut blocks = Vec::new();
        for b in 1..5 {
            let (cin, cout, stride) = (w[b - 1], w[b], STAGE_STRIDES[b]);
            let first = conv_norm(&format!("block{b}.a"), 3, cin, cout, stride);
            let second = conv_norm(&format!("block{b}.b"), 3, cout, cout, 1);
            let projection = (cin != cout || stride != 1).then(|| conv_norm(&format!("block{b}.proj"), 1, cin, cout, stride));
            blocks.push(Block {
                first,
                second,
                projection,
            });
        }
        Layout {
            stem,
            blocks,
            params,
            norms,
        }
    }
}

/// Running statistics of one norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Learnable encoder tensors plus norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    config: EncoderConfig,
    layout: Layout,
    tensors: Vec<Tensor<T>>,
    norms: Vec<NormStats<T>>,
}

/// Norm statistics observed during one training-mode encode, tagged with
/// their layer index.
pub type ObservedStats<T> = Vec<(usize, BatchStats<T>)>;

impl<T: Scalar> EncoderParams<T> {
    /// Fan-in scaled normal kernels (std `sqrt(2 / fan_in)`), unit scale,
    /// zero shift, running mean 0 and variance 1.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(layout.params.len());
        for (name, shape) in &layout.params {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".conv") {
                let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            } else if name.ends_with(".scale") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            tensors.push(Tensor::new(shape.clone(), data)?.with_grad());
        }
        let norms = layout
            .norms
            .iter()
            .map(|&(_, c)| NormStats {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            layout,
            tensors,
            norms,
        })
    }

    /// Reassembles parameters from named tensors, validating every name and
    /// extent against the layout implied by `config`.
    pub fn from_parts(config: &EncoderConfig, named: Vec<(String, Tensor<T>)>, norms: Vec<(String, NormStats<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if named.len() != layout.params.len() {
            return Err(Error::CheckpointLayout(format!(
                "expected {} parameter tensors, found {}",
                layout.params.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in layout.params.iter().zip(named) {
            if &name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::CheckpointLayout(format!(
                    "tensor {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            let mut t = t;
            t.set_requires_grad(true);
            tensors.push(t);
        }
        if norms.len() != layout.norms.len() {
            return Err(Error::CheckpointLayout(format!(
                "expected {} norm layers, found {}",
                layout.norms.len(),
                norms.len()
            )));
        }
        let mut stats = Vec::with_capacity(norms.len());
        for ((want, c), (name, s)) in layout.norms.iter().zip(norms) {
            if &name != want || s.mean.len() != *c || s.var.len() != *c {
                return Err(Error::CheckpointLayout(format!("norm layer {name} does not match {want} ({c} channels)")));
            }
            stats.push(s);
        }
        Ok(EncoderParams {
            config: config.clone(),
            layout,
            tensors,
            norms: stats,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn norm_names(&self) -> impl Iterator<Item = &str> {
        self.layout.norms.iter().map(|(n, _)| n.as_str())
    }

    pub fn norm_stats(&self) -> &[NormStats<T>] {
        &self.norms
    }

    pub fn norm_stats_mut(&mut self) -> &mut [NormStats<T>] {
        &mut self.norms
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
            && self
                .norms
                .iter()
                .all(|n| n.mean.iter().chain(&n.var).all(|v| v.is_finite()))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Element-wise precision conversion.
    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            norms: self
                .norms
                .iter()
                .map(|n| NormStats {
                    mean: n.mean.iter().map(|v| U::lit(Scalar::to_f64(*v))).collect(),
                    var: n.var.iter().map(|v| U::lit(Scalar::to_f64(*v))).collect(),
                })
                .collect(),
        }
    }

    /// Records every learnable tensor as a graph leaf.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Folds observed batch statistics into the running statistics with
    /// momentum [`BN_MOMENTUM`], in the order given.
    pub fn update_running_stats(&mut self, observed: &[(usize, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        for (layer, stats) in observed {
            let rs = &mut self.norms[*layer];
            for (r, &b) in rs.mean.iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in rs.var.iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }

    fn conv_norm(
        &self,
        g: &mut Graph<T>,
        x: Var,
        vars: &[Var],
        spec: &ConvNorm,
        batch_stats: bool,
        observed: &mut ObservedStats<T>,
    ) -> Result<Var> {
        let y = g.conv2d(x, vars[spec.kernel], spec.stride, spec.pad)?;
        let rs = &self.norms[spec.norm];
        let running = (!batch_stats).then_some((rs.mean.as_slice(), rs.var.as_slice()));
        let (y, stats) = g.batch_norm(y, vars[spec.scale], vars[spec.shift], running, T::lit(BN_EPS))?;
        if let Some(s) = stats {
            observed.push((spec.norm, s));
        }
        Ok(y)
    }

    /// Records the encoder on `g` for an `H x W x 3` input. With `train`
    /// set and batch norm configured, per-input statistics are used and
    /// appended to `observed`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, vars: &[Var], train: bool, observed: &mut ObservedStats<T>) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        check_input_shape(&shape)?;
        if vars.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "encoder expects {} parameter vars, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        let batch = train && self.config.norm == NormMode::Batch;
        let x = self.conv_norm(g, input, vars, &self.layout.stem, batch, observed)?;
        let mut x = g.relu(x);
        for block in &self.layout.blocks {
            let h = self.conv_norm(g, x, vars, &block.first, batch, observed)?;
            let h = g.relu(h);
            let h = self.conv_norm(g, h, vars, &block.second, batch, observed)?;
            let shortcut = match &block.projection {
                Some(p) => self.conv_norm(g, x, vars, p, batch, observed)?,
                None => x,
            };
            let s = g.add(h, shortcut)?;
            x = g.relu(s);
        }
        Ok(x)
    }

    /// Evaluation-mode encoding of a frame (running statistics, no gradient).
    pub fn encode(&self, frame: &Frame) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let data = frame.rgb().iter().map(|&v| T::lit(v as f64)).collect();
        let x = g.constant(vec![frame.height(), frame.width(), 3], data)?;
        let consts: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| g.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<_>>()?;
        let y = self.forward(&mut g, x, &consts, false, &mut Vec::new())?;
        FeatureMap::from_tensor(g.tensor(y))
    }
}

fn check_input_shape(shape: &[usize]) -> Result<()> {
    let &[h, w, c] = shape else {
        return Err(Error::shape(format!("encoder input must be H x W x 3, got {shape:?}")));
    };
    if c != 3 {
        return Err(Error::shape(format!("encoder input has {c} channels, expected 3")));
    }
    for extent in [h, w] {
        if extent % FEATURE_STRIDE != 0 {
            return Err(Error::Indivisible {
                extent,
                divisor: FEATURE_STRIDE,
                suggestion: extent.div_ceil(FEATURE_STRIDE) * FEATURE_STRIDE,
            });
        }
    }
    Ok(())
}
