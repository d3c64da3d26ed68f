//! Label propagation: carries a first-frame mask or keypoint annotation
//! through a video, one previous frame at a time, by soft-copying label
//! distributions along the restricted affinity.

use rayon::prelude::*;

use crate::attention::{restricted_affinity, soft_copy, FeatureMap};
use crate::colour::Frame;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::FEATURE_STRIDE;

/// Per-pixel object ids, 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskAnnotation {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl MaskAnnotation {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::shape(format!("mask {height}x{width} with {} ids", ids.len())));
        }
        Ok(MaskAnnotation { height, width, ids })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let ids = (0..height * width).map(|p| f(p / width, p % width)).collect();
        MaskAnnotation::new(height, width, ids)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn id(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Distinct non-zero ids in increasing order.
    pub fn object_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        self.ids.iter().for_each(|&i| seen[i as usize] = true);
        (1..=255u8).filter(|&i| seen[i as usize]).collect()
    }

    /// Relabels ids through `table[old] = new`.
    pub fn remap(&self, table: &[u8; 256]) -> MaskAnnotation {
        MaskAnnotation {
            ids: self.ids.iter().map(|&i| table[i as usize]).collect(),
            ..*self
        }
    }
}

/// Maps a set of masks onto contiguous ids `0..=n`, background kept at 0.
/// Returns the relabelled masks and `original[new] = old`.
pub fn compact_ids(masks: &[MaskAnnotation]) -> (Vec<MaskAnnotation>, Vec<u8>) {
    let mut seen = [false; 256];
    for m in masks {
        m.ids.iter().for_each(|&i| seen[i as usize] = true);
    }
    let mut original = vec![0u8];
    original.extend((1..=255u8).filter(|&i| seen[i as usize]));
    let contiguous = original.iter().enumerate().all(|(n, &o)| n == o as usize);
    if !contiguous {
        log::warn!("object ids {:?} are not contiguous; remapping to 0..={}", &original[1..], original.len() - 1);
    }
    let mut table = [0u8; 256];
    for (new, &old) in original.iter().enumerate() {
        table[old as usize] = new as u8;
    }
    (masks.iter().map(|m| m.remap(&table)).collect(), original)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub frame: usize,
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Each cell holds a distribution over object ids.
    Mask,
    /// Each keypoint channel is a distribution over cells.
    Keypoint,
}

/// `h x w x K` label distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: usize,
    dist: Vec<f64>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: usize, dist: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || labels == 0 || dist.len() != height * width * labels {
            return Err(Error::shape(format!(
                "label map {height}x{width}x{labels} with {} values",
                dist.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
            dist,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn dist(&self) -> &[f64] {
        &self.dist
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let s = (i * self.width + j) * self.labels;
        &self.dist[s..s + self.labels]
    }

    fn normalize(&mut self, mode: LabelMode) {
        let k = self.labels;
        match mode {
            LabelMode::Mask => {
                for cell in self.dist.chunks_mut(k) {
                    let s: f64 = cell.iter().sum();
                    if s > 0.0 {
                        cell.iter_mut().for_each(|v| *v /= s);
                    }
                }
            }
            LabelMode::Keypoint => {
                for ch in 0..k {
                    let s: f64 = self.dist.iter().skip(ch).step_by(k).sum();
                    if s > 0.0 {
                        self.dist.iter_mut().skip(ch).step_by(k).for_each(|v| *v /= s);
                    }
                }
            }
        }
    }

    /// Per-cell argmax, ties to the lowest label.
    pub fn argmax_cells(&self) -> Vec<usize> {
        self.dist.chunks(self.labels).map(argmax).collect()
    }

    /// Cell index with the largest mass in `channel`, first in row-major
    /// order on ties.
    pub fn argmax_channel(&self, channel: usize) -> usize {
        let col: Vec<f64> = self.dist.iter().skip(channel).step_by(self.labels).copied().collect();
        argmax(&col)
    }

    /// Bilinear upsampling by `factor` with half-pixel centres and edge
    /// clamping, followed by a per-pixel argmax.
    pub fn upsample_argmax(&self, factor: usize) -> Vec<usize> {
        let (h, w, k) = (self.height, self.width, self.labels);
        let (oh, ow) = (h * factor, w * factor);
        let src = |o: usize, n: usize| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(n - 1), s - lo as f64)
        };
        let mut out = Vec::with_capacity(oh * ow);
        let mut px = vec![0.0; k];
        for y in 0..oh {
            let (y0, y1, fy) = src(y, h);
            for x in 0..ow {
                let (x0, x1, fx) = src(x, w);
                for (c, v) in px.iter_mut().enumerate() {
                    let at = |i: usize, j: usize| self.dist[(i * w + j) * k + c];
                    *v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                }
                out.push(argmax(&px));
            }
        }
        out
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Normalized id histogram of each `stride x stride` footprint.
pub fn mask_to_labelmap(mask: &MaskAnnotation, labels: usize, stride: usize) -> Result<LabelMap> {
    let (h, w) = (mask.height, mask.width);
    for extent in [h, w] {
        if stride == 0 || extent % stride != 0 {
            return Err(Error::Indivisible {
                extent,
                divisor: stride,
                suggestion: extent.div_ceil(stride.max(1)) * stride.max(1),
            });
        }
    }
    if mask.max_id() as usize >= labels {
        return Err(Error::shape(format!("mask id {} with only {labels} labels", mask.max_id())));
    }
    let (ch, cw) = (h / stride, w / stride);
    let mut dist = vec![0.0; ch * cw * labels];
    let unit = 1.0 / (stride * stride) as f64;
    for y in 0..h {
        for x in 0..w {
            let cell = (y / stride) * cw + x / stride;
            dist[cell * labels + mask.id(y, x) as usize] += unit;
        }
    }
    LabelMap::new(ch, cw, labels, dist)
}

/// One-hot spatial distribution per keypoint at its containing cell.
/// Keypoints that are not visible get an empty channel.
pub fn keypoints_to_labelmap(points: &[Keypoint], cells_h: usize, cells_w: usize, stride: usize) -> Result<LabelMap> {
    let k = points.len().max(1);
    let mut dist = vec![0.0; cells_h * cells_w * k];
    for (ch, p) in points.iter().enumerate() {
        if !p.visible {
            continue;
        }
        let (i, j) = ((p.y / stride as f64).floor(), (p.x / stride as f64).floor());
        if i < 0.0 || j < 0.0 || i as usize >= cells_h || j as usize >= cells_w {
            return Err(Error::shape(format!(
                "keypoint {} at ({}, {}) outside the {}x{} frame",
                p.id,
                p.x,
                p.y,
                cells_w * stride,
                cells_h * stride
            )));
        }
        dist[(i as usize * cells_w + j as usize) * k + ch] = 1.0;
    }
    LabelMap::new(cells_h, cells_w, k, dist)
}

/// By default inference compares features by cosine similarity at a low temperature.
/// The raw dot product used in training spreads label mass over the window
/// and lets a neighbour with a larger norm outscore the cell itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    pub max_disparity: usize,
    pub temperature: f64,
    pub l2_normalize: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            max_disparity: 6,
            temperature: 0.03,
            l2_normalize: true,
        }
    }
}

/// Soft-copies `labels` from the previous frame's features to the next.
pub fn propagate_step(
    prev: &FeatureMap<f64>,
    next: &FeatureMap<f64>,
    labels: &LabelMap,
    mode: LabelMode,
    cfg: &PropagationConfig,
) -> Result<LabelMap> {
    if (labels.height, labels.width) != (prev.height(), prev.width()) {
        return Err(Error::ExtentMismatch {
            what: "label map".into(),
            want_h: prev.height(),
            want_w: prev.width(),
            found_h: labels.height,
            found_w: labels.width,
        });
    }
    let aff = if cfg.l2_normalize {
        restricted_affinity(&prev.l2_normalized(), &next.l2_normalized(), cfg.max_disparity, cfg.temperature)?
    } else {
        restricted_affinity(prev, next, cfg.max_disparity, cfg.temperature)?
    };
    let dist = soft_copy(&aff, &labels.dist, labels.labels)?;
    let mut out = LabelMap::new(labels.height, labels.width, labels.labels, dist)?;
    out.normalize(mode);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Mask(MaskAnnotation),
    /// First-frame keypoints; `frame` fields are ignored on input.
    Keypoints(Vec<Keypoint>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Propagated {
    /// One mask per frame, the first being the input annotation.
    Masks(Vec<MaskAnnotation>),
    /// Keypoints of every frame, ordered by frame then input order.
    Keypoints(Vec<Keypoint>),
}

/// Propagates through precomputed per-frame features (`frame / 4` cells).
pub fn propagate_features(
    features: &[FeatureMap<f64>],
    annotation: &Annotation,
    frame_h: usize,
    frame_w: usize,
    cfg: &PropagationConfig,
) -> Result<Propagated> {
    let stride = FEATURE_STRIDE;
    let Some(first) = features.first() else {
        return Err(Error::shape("propagation needs at least one frame"));
    };
    if (first.height() * stride, first.width() * stride) != (frame_h, frame_w) {
        return Err(Error::shape(format!(
            "features {}x{} do not match frames {frame_h}x{frame_w}",
            first.height(),
            first.width()
        )));
    }
    match annotation {
        Annotation::Mask(mask) => {
            if (mask.height, mask.width) != (frame_h, frame_w) {
                return Err(Error::ExtentMismatch {
                    what: "annotation mask".into(),
                    want_h: frame_h,
                    want_w: frame_w,
                    found_h: mask.height,
                    found_w: mask.width,
                });
            }
            let (compact, original) = compact_ids(std::slice::from_ref(mask));
            let labels = original.len();
            let mut current = mask_to_labelmap(&compact[0], labels, stride)?;
            let mut out = vec![mask.clone()];
            for pair in features.windows(2) {
                current = propagate_step(&pair[0], &pair[1], &current, LabelMode::Mask, cfg)?;
                let ids = current.upsample_argmax(stride).into_iter().map(|l| original[l]).collect();
                out.push(MaskAnnotation::new(frame_h, frame_w, ids)?);
            }
            Ok(Propagated::Masks(out))
        }
        Annotation::Keypoints(points) => {
            let mut current = keypoints_to_labelmap(points, first.height(), first.width(), stride)?;
            let mut out: Vec<Keypoint> = points.iter().map(|p| Keypoint { frame: 0, ..*p }).collect();
            let half = stride as f64 / 2.0;
            for (t, pair) in features.windows(2).enumerate() {
                current = propagate_step(&pair[0], &pair[1], &current, LabelMode::Keypoint, cfg)?;
                for (ch, p) in points.iter().enumerate() {
                    let cell = current.argmax_channel(ch);
                    let (i, j) = (cell / current.width, cell % current.width);
                    out.push(Keypoint {
                        frame: t + 1,
                        id: p.id,
                        x: (j * stride) as f64 + half,
                        y: (i * stride) as f64 + half,
                        visible: p.visible,
                    });
                }
            }
            Ok(Propagated::Keypoints(out))
        }
    }
}

/// Encodes every frame (evaluation mode, full colour) and propagates the
/// first-frame annotation through the sequence.
pub fn propagate_video(
    frames: &[Frame],
    annotation: &Annotation,
    params: &EncoderParams<f32>,
    cfg: &PropagationConfig,
) -> Result<Propagated> {
    let Some(first) = frames.first() else {
        return Err(Error::shape("propagation needs at least one frame"));
    };
    let (h, w) = (first.height(), first.width());
    for f in frames {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::ExtentMismatch {
                what: "frame".into(),
                want_h: h,
                want_w: w,
                found_h: f.height(),
                found_w: f.width(),
            });
        }
    }
    if let Annotation::Mask(m) = annotation {
        if (m.height, m.width) != (h, w) {
            return Err(Error::ExtentMismatch {
                what: "annotation mask".into(),
                want_h: h,
                want_w: w,
                found_h: m.height,
                found_w: m.width,
            });
        }
    }
    let features: Vec<FeatureMap<f64>> = frames
        .par_iter()
        .map(|f| {
            let fm = params.encode(f)?;
            FeatureMap::new(
                fm.height(),
                fm.width(),
                fm.channels(),
                fm.values().iter().map(|&v| f64::from(v)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    propagate_features(&features, annotation, h, w, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One-hot features, unique per cell.
    fn unique_features(h: usize, w: usize) -> FeatureMap<f64> {
        let n = h * w;
        let mut v = vec![0.0; n * n];
        for c in 0..n {
            v[c * n + c] = 10.0;
        }
        FeatureMap::new(h, w, n, v).unwrap()
    }

    fn shifted(f: &FeatureMap<f64>, dy: isize, dx: isize) -> FeatureMap<f64> {
        // next(i, j) = prev(i - dy, j - dx): content moves by (dy, dx)
        let (h, w, c) = (f.height(), f.width(), f.channels());
        let mut v = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = (i as isize - dy, j as isize - dx);
                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                    v[(i * w + j) * c..][..c].copy_from_slice(f.cell(si as usize, sj as usize));
                }
            }
        }
        FeatureMap::new(h, w, c, v).unwrap()
    }

    #[test]
    fn labelmap_from_mask() {
        let mask = MaskAnnotation::from_fn(4, 4, |_, x| u8::from(x < 2)).unwrap();
        let lm = mask_to_labelmap(&mask, 3, 4).unwrap();
        assert_eq!(lm.cell(0, 0), &[0.5, 0.5, 0.0]);
        let single = MaskAnnotation::new(8, 8, vec![1; 64]).unwrap();
        let lm = mask_to_labelmap(&single, 2, 4).unwrap();
        assert!(lm.dist().chunks(2).all(|c| c == [0.0, 1.0]));
    }

    #[test]
    fn identical_frames_preserve_labels() {
        let f = unique_features(5, 6);
        let mask = MaskAnnotation::from_fn(20, 24, |y, x| ((y / 4 + x / 8) % 3) as u8).unwrap();
        let lm = mask_to_labelmap(&mask, 3, 4).unwrap();
        let cfg = PropagationConfig {
            max_disparity: 2,
            ..Default::default()
        };
        let out = propagate_step(&f, &f, &lm, LabelMode::Mask, &cfg).unwrap();
        assert_eq!(out.argmax_cells(), lm.argmax_cells());
    }

    #[test]
    fn translated_features_translate_labels() {
        let f = unique_features(8, 8);
        let (dy, dx) = (1isize, -2isize);
        let g = shifted(&f, dy, dx);
        let mask = MaskAnnotation::from_fn(32, 32, |y, x| ((y / 4) * 3 + x / 4) as u8 % 5).unwrap();
        let lm = mask_to_labelmap(&mask, 5, 4).unwrap();
        let cfg = PropagationConfig {
            max_disparity: 2,
            ..Default::default()
        };
        let out = propagate_step(&f, &g, &lm, LabelMode::Mask, &cfg).unwrap();
        let (src, dst) = (lm.argmax_cells(), out.argmax_cells());
        for i in 0..8isize {
            for j in 0..8isize {
                let (si, sj) = (i - dy, j - dx);
                if (0..8).contains(&si) && (0..8).contains(&sj) {
                    assert_eq!(dst[(i * 8 + j) as usize], src[(si * 8 + sj) as usize]);
                }
            }
        }
    }

    #[test]
    fn uniform_labels_stay_uniform() {
        let f = unique_features(4, 4);
        let lm = LabelMap::new(4, 4, 4, vec![0.25; 64]).unwrap();
        let out = propagate_step(&f, &shifted(&f, 1, 1), &lm, LabelMode::Mask, &PropagationConfig::default()).unwrap();
        assert!(out.dist().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn mask_distributions_stay_normalized() {
        let f = unique_features(4, 5);
        let g = shifted(&f, 0, 1);
        let mask = MaskAnnotation::from_fn(16, 20, |y, x| ((x + y) % 3) as u8).unwrap();
        let mut lm = mask_to_labelmap(&mask, 3, 4).unwrap();
        for _ in 0..4 {
            lm = propagate_step(&f, &g, &lm, LabelMode::Mask, &PropagationConfig::default()).unwrap();
            for c in lm.dist().chunks(3) {
                assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(c.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn single_frame_returns_input() {
        let f = unique_features(2, 2);
        let mask = MaskAnnotation::from_fn(8, 8, |y, _| u8::from(y > 3) * 4).unwrap();
        let out = propagate_features(&[f], &Annotation::Mask(mask.clone()), 8, 8, &PropagationConfig::default()).unwrap();
        assert_eq!(out, Propagated::Masks(vec![mask]));
    }

    #[test]
    fn keypoint_follows_translation() {
        let f = unique_features(8, 8);
        let g = shifted(&f, 0, 2);
        let kp = Keypoint {
            frame: 0,
            id: 3,
            x: 10.0,
            y: 14.0,
            visible: true,
        };
        let cfg = PropagationConfig {
            max_disparity: 3,
            ..Default::default()
        };
        let out = propagate_features(&[f, g], &Annotation::Keypoints(vec![kp]), 32, 32, &cfg).unwrap();
        let Propagated::Keypoints(pts) = out else { panic!() };
        let last = pts.last().unwrap();
        assert_eq!((last.frame, last.id), (1, 3));
        assert!((last.x - 18.0).abs() <= 4.0 && (last.y - 14.0).abs() <= 4.0, "{last:?}");
    }

    #[test]
    fn upsample_of_one_hot_map_is_blockwise() {
        let lm = LabelMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = lm.upsample_argmax(4);
        assert_eq!(up[0], 0);
        assert_eq!(up[7], 1);
        assert_eq!(up[8 * 7], 1);
        assert_eq!(up[63], 0);
    }

    #[test]
    fn compaction_maps_back() {
        let m = MaskAnnotation::from_fn(2, 3, |_, x| [0u8, 5, 9][x]).unwrap();
        let (c, original) = compact_ids(std::slice::from_ref(&m));
        assert_eq!(original, vec![0, 5, 9]);
        assert_eq!(c[0].ids(), &[0, 1, 2, 0, 1, 2]);
    }
}
