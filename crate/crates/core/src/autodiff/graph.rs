use super::kernels::{self, ConvGeom, MatRef, WindowGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Element-wise functions with closed-form derivatives, used by the colour
/// conversion and bottleneck paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    /// `clamp(x, 0, 1)`; derivative 0 outside the open interval.
    Clamp01,
    /// Inverse of the CIELAB companding function.
    LabFInv,
    /// Linear light to sRGB gamma encoding.
    SrgbEncode,
}

const LAB_DELTA: f64 = 6.0 / 29.0;

impl Pointwise {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Pointwise::Clamp01 => x.max(T::zero()).min(T::one()),
            Pointwise::LabFInv => {
                let d = T::lit(LAB_DELTA);
                if x > d {
                    x * x * x
                } else {
                    T::lit(3.0) * d * d * (x - T::lit(4.0 / 29.0))
                }
            }
            Pointwise::SrgbEncode => {
                if x <= T::lit(0.0031308) {
                    T::lit(12.92) * x
                } else {
                    T::lit(1.055) * x.powf(T::lit(1.0 / 2.4)) - T::lit(0.055)
                }
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Pointwise::Clamp01 => {
                if x > T::zero() && x < T::one() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::LabFInv => {
                let d = T::lit(LAB_DELTA);
                if x > d {
                    T::lit(3.0) * x * x
                } else {
                    T::lit(3.0) * d * d
                }
            }
            Pointwise::SrgbEncode => {
                if x <= T::lit(0.0031308) {
                    T::lit(12.92)
                } else {
                    T::lit(1.055 / 2.4) * x.powf(T::lit(1.0 / 2.4 - 1.0))
                }
            }
        }
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
        group: usize,
    },
    Correlation {
        reference: usize,
        target: usize,
        channels: usize,
        geom: WindowGeom,
        scale: T,
    },
    Gather {
        weights: usize,
        source: usize,
        depth: usize,
        geom: WindowGeom,
    },
    CrossEntropy {
        probs: usize,
        targets: Vec<usize>,
        eps: T,
    },
    WeightedSum {
        terms: Vec<(usize, T)>,
    },
    ChannelLinear {
        x: usize,
        weight: Vec<T>,
        cin: usize,
        cout: usize,
    },
    Pointwise {
        x: usize,
        f: Pointwise,
    },
    Contrast {
        x: usize,
        factor: T,
        gray: [T; 3],
    },
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    L2Normalize {
        x: usize,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer operation tape. Values are computed eagerly as operations
/// are recorded; [`Graph::backward`] replays the record in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; `None` for constants and leaves unreachable from
    /// the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn spatial(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(format!("{what} expects HxWxC, got {shape:?}"))),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, delta: Vec<T>) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
        slot @ None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Records a tensor as a leaf. It participates in differentiation iff
    /// the tensor requires gradients.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are well-formed")
    }

    /// Cross-correlation of an `H x W x Cin` input with a
    /// `kh x kw x Cin x Cout` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = spatial(self.shape(x), "conv2d input")?;
        let &[kh, kw, kcin, cout] = self.shape(kernel) else {
            return Err(Error::shape(format!(
                "conv2d kernel must be kh x kw x Cin x Cout, got {:?}",
                self.shape(kernel)
            )));
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d {kh}x{kw} stride {stride} pad {pad} does not fit a {h}x{w} input"
            )));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let value = kernels::conv2d_forward(self.value(x), self.value(kernel), &geom);
        let ng = self.ng(x.0) || self.ng(kernel.0);
        Ok(self.push(
            vec![geom.ho, geom.wo, cout],
            value,
            Op::Conv2d {
                x: x.0,
                k: kernel.0,
                geom,
            },
            ng,
        ))
    }

    /// Per-channel normalization over the spatial extent. With `running`
    /// given, the supplied statistics are used as constants; otherwise the
    /// input's own statistics are used and returned for running updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (h, w, c) = spatial(self.shape(x), "batch_norm input")?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::shape(format!(
                "batch_norm over {c} channels given scale/shift of {}/{}",
                self.value(scale).len(),
                self.value(shift).len()
            )));
        }
        let n = h * w;
        let xs = self.value(x);
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                for px in xs.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(px) {
                        *m = *m + v;
                    }
                }
                let inv_n = T::one() / T::lit(n as f64);
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                let mut var = vec![T::zero(); c];
                for px in xs.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                let biased: Vec<T> = var.iter().map(|&s| s * inv_n).collect();
                let unbiased_div = T::lit(n.saturating_sub(1).max(1) as f64);
                let unbiased = var.iter().map(|&s| s / unbiased_div).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v.max(T::zero()) + eps).sqrt()).collect();
        let (g, b) = (self.value(scale), self.value(shift));
        let mut out = vec![T::zero(); xs.len()];
        for (po, px) in out.chunks_mut(c).zip(xs.chunks(c)) {
            for ch in 0..c {
                po[ch] = (px[ch] - mean[ch]) * inv_std[ch] * g[ch] + b[ch];
            }
        }
        let ng = self.ng(x.0) || self.ng(scale.0) || self.ng(shift.0);
        let var = self.push(
            vec![h, w, c],
            out,
            Op::BatchNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                mean,
                inv_std,
                batch: running.is_none(),
            },
            ng,
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let ng = self.ng(x.0);
        self.push(self.shape(x).to_vec(), value, Op::Relu { x: x.0 }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add operands {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add { a: a.0, b: b.0 }, ng))
    }

    /// Softmax over the trailing `axes` dimensions. Masked entries (false)
    /// are excluded from each group's normalizer and come out exactly 0.
    pub fn softmax_over(&mut self, x: Var, axes: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes == 0 || axes > shape.len() {
            return Err(Error::shape(format!("softmax over {axes} trailing axes of {shape:?}")));
        }
        let group: usize = shape[shape.len() - axes..].iter().product();
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(Error::shape("softmax mask size differs from input"));
            }
        }
        let value = kernels::softmax_groups(self.value(x), group, mask).map_err(|group| Error::EmptyWindow { group })?;
        let ng = self.ng(x.0);
        Ok(self.push(shape, value, Op::Softmax { x: x.0, group }, ng))
    }

    /// Local cost volume: `out(i,j,k,l) = scale * <reference(i+k-m, j+l-m), target(i,j)>`,
    /// zero where the reference cell falls outside the map.
    pub fn local_correlation(&mut self, reference: Var, target: Var, m: usize, scale: T) -> Result<Var> {
        let (h, w, c) = spatial(self.shape(reference), "correlation reference")?;
        if self.shape(target) != self.shape(reference) {
            return Err(Error::shape(format!(
                "correlation maps differ: {:?} vs {:?}",
                self.shape(reference),
                self.shape(target)
            )));
        }
        let geom = WindowGeom { h, w, m };
        let value = kernels::correlation_forward(self.value(reference), self.value(target), c, &geom, scale);
        let side = geom.side();
        let ng = self.ng(reference.0) || self.ng(target.0);
        Ok(self.push(
            vec![h, w, side, side],
            value,
            Op::Correlation {
                reference: reference.0,
                target: target.0,
                channels: c,
                geom,
                scale,
            },
            ng,
        ))
    }

    /// Window-weighted copy of `source` (`H x W x D`) under `weights`
    /// (`H x W x S x S`, S odd).
    pub fn window_gather(&mut self, weights: Var, source: Var) -> Result<Var> {
        let &[h, w, s1, s2] = self.shape(weights) else {
            return Err(Error::shape(format!(
                "window weights must be H x W x S x S, got {:?}",
                self.shape(weights)
            )));
        };
        if s1 != s2 || s1 % 2 == 0 {
            return Err(Error::shape(format!("window side {s1}x{s2} must be square and odd")));
        }
        let (sh, sw, d) = spatial(self.shape(source), "gather source")?;
        if (sh, sw) != (h, w) {
            return Err(Error::ExtentMismatch {
                what: "soft-copy source".into(),
                want_h: h,
                want_w: w,
                found_h: sh,
                found_w: sw,
            });
        }
        let geom = WindowGeom { h, w, m: s1 / 2 };
        let value = kernels::gather_forward(self.value(weights), self.value(source), d, &geom);
        let ng = self.ng(weights.0) || self.ng(source.0);
        Ok(self.push(
            vec![h, w, d],
            value,
            Op::Gather {
                weights: weights.0,
                source: source.0,
                depth: d,
                geom,
            },
            ng,
        ))
    }

    /// Mean over cells of `-ln(p[cell, target] + eps)` for an `H x W x K`
    /// probability map.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], eps: T) -> Result<Var> {
        let (h, w, k) = spatial(self.shape(probs), "cross_entropy input")?;
        if targets.len() != h * w {
            return Err(Error::shape(format!("{} targets for {h}x{w} cells", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape(format!("target class {bad} out of {k}")));
        }
        let p = self.value(probs);
        let total = targets
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (cell, &t)| acc - (p[cell * k + t] + eps).ln());
        let loss = total / T::lit(targets.len() as f64);
        let ng = self.ng(probs.0);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs: probs.0,
                targets: targets.to_vec(),
                eps,
            },
            ng,
        ))
    }

    /// `sum_i w_i * x_i` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::shape("weighted_sum of no terms"));
        };
        let shape = self.shape(first).to_vec();
        let mut value = vec![T::zero(); self.value(first).len()];
        for &(v, wt) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum operands differ in shape"));
            }
            for (o, &x) in value.iter_mut().zip(self.value(v)) {
                *o = *o + wt * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v.0));
        let terms = terms.iter().map(|&(v, w)| (v.0, w)).collect();
        Ok(self.push(shape, value, Op::WeightedSum { terms }, ng))
    }

    /// Fixed per-pixel channel mixing `y = x W + b`, `W` is `Cin x Cout`.
    pub fn channel_linear(&mut self, x: Var, weight: &[T], bias: &[T]) -> Result<Var> {
        let (h, w, cin) = spatial(self.shape(x), "channel_linear input")?;
        let cout = bias.len();
        if weight.len() != cin * cout {
            return Err(Error::shape(format!(
                "channel_linear weight of {} entries for {cin} -> {cout}",
                weight.len()
            )));
        }
        let mut value = vec![T::zero(); h * w * cout];
        for px in value.chunks_mut(cout) {
            px.copy_from_slice(bias);
        }
        kernels::gemm(
            MatRef::row_major(self.value(x), h * w, cin),
            MatRef::row_major(weight, cin, cout),
            T::one(),
            &mut value,
        );
        let ng = self.ng(x.0);
        Ok(self.push(
            vec![h, w, cout],
            value,
            Op::ChannelLinear {
                x: x.0,
                weight: weight.to_vec(),
                cin,
                cout,
            },
            ng,
        ))
    }

    pub fn pointwise(&mut self, x: Var, f: Pointwise) -> Var {
        let value = self.value(x).iter().map(|&v| f.apply(v)).collect();
        let ng = self.ng(x.0);
        self.push(self.shape(x).to_vec(), value, Op::Pointwise { x: x.0, f }, ng)
    }

    /// Scales an RGB image about the mean of its grey image:
    /// `y = factor * x + (1 - factor) * mean(gray(x))`.
    pub fn contrast(&mut self, x: Var, factor: T, gray: [T; 3]) -> Result<Var> {
        let (h, w, c) = spatial(self.shape(x), "contrast input")?;
        if c != 3 {
            return Err(Error::shape(format!("contrast expects 3 channels, got {c}")));
        }
        let xs = self.value(x);
        let mean = xs
            .chunks(3)
            .fold(T::zero(), |acc, px| acc + gray[0] * px[0] + gray[1] * px[1] + gray[2] * px[2])
            / T::lit((h * w) as f64);
        let offset = (T::one() - factor) * mean;
        let value = xs.iter().map(|&v| factor * v + offset).collect();
        let ng = self.ng(x.0);
        Ok(self.push(vec![h, w, c], value, Op::Contrast { x: x.0, factor, gray }, ng))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = spatial(self.shape(x), "upsample input")?;
        if factor == 0 {
            return Err(Error::shape("upsample factor 0"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xs = self.value(x);
        let mut value = vec![T::zero(); oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((oy / factor) * w + ox / factor) * c;
                let dst = (oy * ow + ox) * c;
                value[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
        let ng = self.ng(x.0);
        Ok(self.push(vec![oh, ow, c], value, Op::UpsampleNearest { x: x.0, factor }, ng))
    }

    /// Normalizes every cell's channel vector to unit length.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (h, w, c) = spatial(self.shape(x), "l2_normalize input")?;
        let mut value = self.value(x).to_vec();
        for px in value.chunks_mut(c) {
            let n = (px.iter().fold(T::zero(), |a, &v| a + v * v) + eps).sqrt();
            px.iter_mut().for_each(|v| *v = *v / n);
        }
        let ng = self.ng(x.0);
        Ok(self.push(vec![h, w, c], value, Op::L2Normalize { x: x.0, eps }, ng))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if ln.needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let ng = |p: usize| self.nodes[p].needs_grad;
            let val = |p: usize| self.nodes[p].value.as_slice();
            match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        leaves[idx] = Some(gy);
                    }
                }
                Op::Conv2d { x, k, geom } => {
                    let (dx, dk) = kernels::conv2d_backward(val(*x), val(*k), &gy, geom, ng(*x), ng(*k));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dk) = dk {
                        accumulate(&mut grads, *k, dk);
                    }
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    mean,
                    inv_std,
                    batch,
                } => {
                    let c = mean.len();
                    let n = T::lit((gy.len() / c) as f64);
                    let xs = val(*x);
                    let gamma = val(*scale);
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for (gp, xp) in gy.chunks(c).zip(xs.chunks(c)) {
                        for ch in 0..c {
                            let xhat = (xp[ch] - mean[ch]) * inv_std[ch];
                            sum_dy[ch] = sum_dy[ch] + gp[ch];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gp[ch] * xhat;
                        }
                    }
                    if ng(*x) {
                        let mut dx = vec![T::zero(); xs.len()];
                        for ((dp, gp), xp) in dx.chunks_mut(c).zip(gy.chunks(c)).zip(xs.chunks(c)) {
                            for ch in 0..c {
                                let k = gamma[ch] * inv_std[ch];
                                dp[ch] = if *batch {
                                    let xhat = (xp[ch] - mean[ch]) * inv_std[ch];
                                    k * (gp[ch] - sum_dy[ch] / n - xhat * sum_dy_xhat[ch] / n)
                                } else {
                                    k * gp[ch]
                                };
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if ng(*scale) {
                        accumulate(&mut grads, *scale, sum_dy_xhat);
                    }
                    if ng(*shift) {
                        accumulate(&mut grads, *shift, sum_dy);
                    }
                }
                Op::Relu { x } => {
                    let dx = gy
                        .iter()
                        .zip(val(*x))
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if ng(*a) {
                        accumulate(&mut grads, *a, gy.clone());
                    }
                    if ng(*b) {
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::Softmax { x, group } => {
                    let y = &node.value;
                    let mut dx = vec![T::zero(); y.len()];
                    for ((dg, yg), gg) in dx.chunks_mut(*group).zip(y.chunks(*group)).zip(gy.chunks(*group)) {
                        let dot = yg.iter().zip(gg).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for ((d, &p), &q) in dg.iter_mut().zip(yg).zip(gg) {
                            *d = p * (q - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Correlation {
                    reference,
                    target,
                    channels,
                    geom,
                    scale,
                } => {
                    let (dr, dt) =
                        kernels::correlation_backward(val(*reference), val(*target), &gy, *channels, geom, *scale);
                    if ng(*reference) {
                        accumulate(&mut grads, *reference, dr);
                    }
                    if ng(*target) {
                        accumulate(&mut grads, *target, dt);
                    }
                }
                Op::Gather {
                    weights,
                    source,
                    depth,
                    geom,
                } => {
                    let (dw, ds) = kernels::gather_backward(
                        val(*weights),
                        val(*source),
                        &gy,
                        *depth,
                        geom,
                        ng(*weights),
                        ng(*source),
                    );
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *weights, dw);
                    }
                    if let Some(ds) = ds {
                        accumulate(&mut grads, *source, ds);
                    }
                }
                Op::CrossEntropy { probs, targets, eps } => {
                    let p = val(*probs);
                    let k = p.len() / targets.len();
                    let scale = gy[0] / T::lit(targets.len() as f64);
                    let mut dp = vec![T::zero(); p.len()];
                    for (cell, &t) in targets.iter().enumerate() {
                        dp[cell * k + t] = -scale / (p[cell * k + t] + *eps);
                    }
                    accumulate(&mut grads, *probs, dp);
                }
                Op::WeightedSum { terms } => {
                    for &(v, wt) in terms {
                        if ng(v) {
                            accumulate(&mut grads, v, gy.iter().map(|&g| g * wt).collect());
                        }
                    }
                }
                Op::ChannelLinear { x, weight, cin, cout } => {
                    let cells = gy.len() / cout;
                    let mut dx = vec![T::zero(); cells * cin];
                    kernels::gemm(
                        MatRef::row_major(&gy, cells, *cout),
                        MatRef::row_major(weight, *cin, *cout).t(),
                        T::zero(),
                        &mut dx,
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Pointwise { x, f } => {
                    let dx = gy.iter().zip(val(*x)).map(|(&g, &v)| g * f.derivative(v)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Contrast { x, factor, gray } => {
                    let cells = gy.len() / 3;
                    let total = gy.iter().fold(T::zero(), |a, &g| a + g);
                    let k = (T::one() - *factor) * total / T::lit(cells as f64);
                    let mut dx: Vec<T> = gy.iter().map(|&g| *factor * g).collect();
                    for px in dx.chunks_mut(3) {
                        for ch in 0..3 {
                            px[ch] = px[ch] + k * gray[ch];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::UpsampleNearest { x, factor } => {
                    let xshape = &self.nodes[*x].shape;
                    let (w, c) = (xshape[1], xshape[2]);
                    let ow = w * factor;
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (pix, g) in gy.chunks(c).enumerate() {
                        let (oy, ox) = (pix / ow, pix % ow);
                        let dst = ((oy / factor) * w + ox / factor) * c;
                        for ch in 0..c {
                            dx[dst + ch] = dx[dst + ch] + g[ch];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, eps } => {
                    let c = node.shape[2];
                    let xs = val(*x);
                    let mut dx = vec![T::zero(); xs.len()];
                    for ((d, g), (px, y)) in dx
                        .chunks_mut(c)
                        .zip(gy.chunks(c))
                        .zip(xs.chunks(c).zip(node.value.chunks(c)))
                    {
                        let n = (px.iter().fold(T::zero(), |a, &v| a + v * v) + *eps).sqrt();
                        let dot = g.iter().zip(y).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for ch in 0..c {
                            d[ch] = (g[ch] - y[ch] * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(Gradients { leaves })
    }
}
