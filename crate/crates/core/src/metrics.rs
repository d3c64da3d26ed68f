//! Segmentation and keypoint scores: region similarity J, contour
//! accuracy F, and the two PCK variants.

use crate::error::{Error, Result};
use crate::propagation::{Keypoint, MaskAnnotation};

fn same_extent(pred: &MaskAnnotation, gt: &MaskAnnotation) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ExtentMismatch {
            what: "predicted mask".into(),
            want_h: gt.height(),
            want_w: gt.width(),
            found_h: pred.height(),
            found_w: pred.width(),
        });
    }
    Ok(())
}

/// Intersection over union of the object's pixels; 1.0 when both are empty.
pub fn region_j(pred: &MaskAnnotation, gt: &MaskAnnotation, object: u8) -> Result<f64> {
    same_extent(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        let (p, g) = (p == object, g == object);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object pixels with at least one 4-neighbour outside the object; pixels
/// beyond the image border count as outside.
pub fn boundary(mask: &MaskAnnotation, object: u8) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask.id(y as usize, x as usize) == object;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(y + dy, x + dx)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Dilation by a disc of the given radius.
fn dilate(map: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let disc: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !map[y as usize * w + x as usize] {
                continue;
            }
            for &(dy, dx) in &disc {
                let (ty, tx) = (y + dy, x + dx);
                if ty >= 0 && tx >= 0 && ty < h as isize && tx < w as isize {
                    out[ty as usize * w + tx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary tolerance of 0.8% of the image diagonal, rounded up.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Boundary F-measure within `tolerance` pixels.
pub fn contour_f(pred: &MaskAnnotation, gt: &MaskAnnotation, object: u8, tolerance: usize) -> Result<f64> {
    same_extent(pred, gt)?;
    let (h, w) = (gt.height(), gt.width());
    let (pb, gb) = (boundary(pred, object), boundary(gt, object));
    let (np, ng) = (pb.iter().filter(|&&b| b).count(), gb.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let (pd, gd) = (dilate(&pb, h, w, tolerance), dilate(&gb, h, w, tolerance));
    let hits = |a: &[bool], b: &[bool]| a.iter().zip(b).filter(|(&x, &y)| x && y).count() as f64;
    let precision = hits(&pb, &gd) / np as f64;
    let recall = hits(&gb, &pd) / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Per-frame J and F of one object through one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFrames {
    pub sequence: String,
    pub object: u8,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegScore {
    pub objects: Vec<ObjectFrames>,
    pub j_mean: f64,
    pub j_recall: f64,
    pub f_mean: f64,
    pub f_recall: f64,
    pub jf_mean: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn recall(xs: &[f64]) -> f64 {
    xs.iter().filter(|&&v| v > 0.5).count() as f64 / xs.len() as f64
}

/// Averages per-object sequence means, skipping each sequence's first
/// (given) frame.
pub fn davis_aggregate(objects: Vec<ObjectFrames>) -> Result<SegScore> {
    let scored: Vec<&ObjectFrames> = objects.iter().filter(|o| o.j.len() > 1).collect();
    if scored.is_empty() {
        return Err(Error::config("no object has frames beyond the first"));
    }
    let per = |pick: fn(&ObjectFrames) -> &Vec<f64>, agg: fn(&[f64]) -> f64| {
        let vals: Vec<f64> = scored.iter().map(|o| agg(&pick(o)[1..])).collect();
        mean(&vals)
    };
    let j_mean = per(|o| &o.j, mean);
    let f_mean = per(|o| &o.f, mean);
    let j_recall = per(|o| &o.j, recall);
    let f_recall = per(|o| &o.f, recall);
    Ok(SegScore {
        j_mean,
        j_recall,
        f_mean,
        f_recall,
        jf_mean: (j_mean + f_mean) / 2.0,
        objects,
    })
}

/// J and F for every ground-truth object of a sequence, frame by frame.
/// `tolerance` defaults to [`default_tolerance`].
pub fn score_sequence(name: &str, preds: &[MaskAnnotation], gts: &[MaskAnnotation], tolerance: Option<usize>) -> Result<Vec<ObjectFrames>> {
    if preds.len() != gts.len() {
        return Err(Error::config(format!(
            "sequence {name}: {} predicted masks for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let Some(first) = gts.first() else {
        return Ok(Vec::new());
    };
    let tol = tolerance.unwrap_or_else(|| default_tolerance(first.height(), first.width()));
    let mut ids: Vec<u8> = gts.iter().flat_map(MaskAnnotation::object_ids).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|object| {
            let mut j = Vec::with_capacity(gts.len());
            let mut f = Vec::with_capacity(gts.len());
            for (p, g) in preds.iter().zip(gts) {
                j.push(region_j(p, g, object)?);
                f.push(contour_f(p, g, object, tol)?);
            }
            Ok(ObjectFrames {
                sequence: name.to_string(),
                object,
                j,
                f,
            })
        })
        .collect()
}

fn find<'a>(preds: &'a [Keypoint], gt: &Keypoint) -> Option<&'a Keypoint> {
    preds.iter().find(|p| p.frame == gt.frame && p.id == gt.id)
}

fn distance(p: Option<&Keypoint>, g: &Keypoint) -> f64 {
    p.map_or(f64::INFINITY, |p| ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt())
}

/// Bounding box `(w, h)` of the visible ground-truth keypoints of a frame.
pub fn keypoint_bbox(gts: &[Keypoint], frame: usize) -> Option<(f64, f64)> {
    let vis: Vec<&Keypoint> = gts.iter().filter(|g| g.frame == frame && g.visible).collect();
    if vis.is_empty() {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for g in vis {
        x0 = x0.min(g.x);
        x1 = x1.max(g.x);
        y0 = y0.min(g.y);
        y1 = y1.max(g.y);
    }
    Some((x1 - x0, y1 - y0))
}

/// Fraction of visible ground-truth keypoints whose distance, normalized
/// by the diagonal of their frame's keypoint bounding box, is strictly
/// below `alpha`. `None` when no keypoint is visible.
pub fn pck_instance(preds: &[Keypoint], gts: &[Keypoint], alpha: f64) -> Option<f64> {
    let vis: Vec<&Keypoint> = gts.iter().filter(|g| g.visible).collect();
    if vis.is_empty() {
        return None;
    }
    let correct = vis
        .iter()
        .filter(|g| {
            let (bw, bh) = keypoint_bbox(gts, g.frame).expect("frame has a visible keypoint");
            let diag = (bw * bw + bh * bh).sqrt();
            let d = distance(find(preds, g), g);
            let norm = if diag > 0.0 {
                d / diag
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            norm < alpha
        })
        .count();
    Some(correct as f64 / vis.len() as f64)
}

/// Fraction of visible keypoints within `alpha * max(bbox_w, bbox_h)`
/// pixels (inclusive).
pub fn pck_max(preds: &[Keypoint], gts: &[Keypoint], alpha: f64, bbox_w: f64, bbox_h: f64) -> Option<f64> {
    let vis: Vec<&Keypoint> = gts.iter().filter(|g| g.visible).collect();
    if vis.is_empty() {
        return None;
    }
    let limit = alpha * bbox_w.max(bbox_h);
    let correct = vis.iter().filter(|g| distance(find(preds, g), g) <= limit).count();
    Some(correct as f64 / vis.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckScore {
    pub alphas: Vec<f64>,
    pub instance: Vec<Option<f64>>,
    pub max: Vec<Option<f64>>,
}

/// Both PCK variants at each `alpha`. `pck_max` uses each frame's
/// ground-truth keypoint bounding box. With `skip_first`, frame 0 (the given
/// annotation) is excluded.
pub fn pck_table(preds: &[Keypoint], gts: &[Keypoint], alphas: &[f64], skip_first: bool) -> PckScore {
    let gts: Vec<Keypoint> = gts.iter().filter(|g| !(skip_first && g.frame == 0)).copied().collect();
    let mut frames: Vec<usize> = gts.iter().filter(|g| g.visible).map(|g| g.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let max = alphas
        .iter()
        .map(|&a| {
            let (mut hit, mut total) = (0.0, 0usize);
            for &t in &frames {
                let frame_gts: Vec<Keypoint> = gts.iter().filter(|g| g.frame == t).copied().collect();
                let (bw, bh) = keypoint_bbox(&frame_gts, t).expect("visible keypoint");
                let n = frame_gts.iter().filter(|g| g.visible).count();
                hit += pck_max(preds, &frame_gts, a, bw, bh).expect("visible keypoint") * n as f64;
                total += n;
            }
            (total > 0).then(|| hit / total as f64)
        })
        .collect();
    PckScore {
        alphas: alphas.to_vec(),
        instance: alphas.iter().map(|&a| pck_instance(preds, &gts, a)).collect(),
        max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> MaskAnnotation {
        MaskAnnotation::from_fn(h, w, |y, x| u8::from(on.contains(&(y, x)))).unwrap()
    }

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> MaskAnnotation {
        MaskAnnotation::from_fn(h, w, |y, x| u8::from(y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)).unwrap()
    }

    fn kp(frame: usize, id: usize, x: f64, y: f64) -> Keypoint {
        Keypoint {
            frame,
            id,
            x,
            y,
            visible: true,
        }
    }

    #[test]
    fn j_examples() {
        let a = mask(1, 3, &[(0, 0), (0, 1)]);
        let b = mask(1, 3, &[(0, 1), (0, 2)]);
        assert_eq!(region_j(&a, &a, 1).unwrap(), 1.0);
        assert!((region_j(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = mask(1, 3, &[(0, 2)]);
        assert_eq!(region_j(&a, &c, 1).unwrap(), 0.0);
        let empty = mask(1, 3, &[]);
        assert_eq!(region_j(&empty, &empty, 1).unwrap(), 1.0);
    }

    #[test]
    fn f_examples() {
        let gt = rect(40, 40, 10, 10, 15, 12);
        assert_eq!(contour_f(&gt, &gt, 1, 1).unwrap(), 1.0);
        let shifted = rect(40, 40, 10, 11, 15, 12);
        assert_eq!(contour_f(&shifted, &gt, 1, 1).unwrap(), 1.0);
        let far = rect(40, 40, 10, 26, 15, 12);
        assert_eq!(contour_f(&far, &gt, 1, 2).unwrap(), 0.0);
        let empty = rect(40, 40, 0, 0, 0, 0);
        assert_eq!(contour_f(&empty, &empty, 1, 2).unwrap(), 1.0);
        assert_eq!(contour_f(&empty, &gt, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn tolerance_default() {
        // 854x480 diagonal ~ 979.7 px -> 7.84 -> 8
        assert_eq!(default_tolerance(480, 854), 8);
    }

    #[test]
    fn pck_instance_examples() {
        let gts = [kp(0, 0, 0.0, 0.0), kp(0, 1, 30.0, 40.0)];
        assert_eq!(pck_instance(&gts, &gts, 1e-9), Some(1.0));
        // diagonal 50, second prediction off by 7.5 -> 0.15
        let preds = [kp(0, 0, 0.0, 0.0), kp(0, 1, 37.5, 40.0)];
        assert_eq!(pck_instance(&preds, &gts, 0.1), Some(0.5));
        assert_eq!(pck_instance(&preds, &gts, 0.2), Some(1.0));
        assert_eq!(pck_instance(&preds, &gts, 0.15), Some(0.5));
        let hidden = [Keypoint { visible: false, ..gts[0] }];
        assert_eq!(pck_instance(&preds, &hidden, 0.1), None);
    }

    #[test]
    fn pck_max_examples() {
        let gts = [kp(0, 0, 10.0, 10.0)];
        let at = |d: f64| [kp(0, 0, 10.0 + d, 10.0)];
        assert_eq!(pck_max(&at(4.0), &gts, 0.1, 40.0, 40.0), Some(1.0));
        assert_eq!(pck_max(&at(4.01), &gts, 0.1, 40.0, 40.0), Some(0.0));
        assert_eq!(pck_max(&at(0.0), &gts, 0.0, 40.0, 40.0), Some(1.0));
        assert_eq!(pck_max(&at(0.5), &gts, 0.0, 40.0, 40.0), Some(0.0));
    }

    #[test]
    fn aggregation_matches_table_arithmetic() {
        let obj = ObjectFrames {
            sequence: "s".into(),
            object: 1,
            j: vec![1.0, 0.477, 0.477, 0.477],
            f: vec![1.0, 0.513, 0.513, 0.513],
        };
        let s = davis_aggregate(vec![obj]).unwrap();
        assert!((s.j_mean - 0.477).abs() < 1e-12);
        assert!((s.f_mean - 0.513).abs() < 1e-12);
        assert!((s.jf_mean - 0.495).abs() < 1e-12);
        assert_eq!(s.j_recall, 0.0);
        assert_eq!(s.f_recall, 1.0);
    }

    #[test]
    fn pck_table_has_both_alphas() {
        let gts = [kp(0, 0, 0.0, 0.0), kp(0, 1, 30.0, 40.0), kp(1, 0, 0.0, 0.0), kp(1, 1, 30.0, 40.0)];
        let t = pck_table(&gts, &gts, &[0.1, 0.2], true);
        assert_eq!(t.instance, vec![Some(1.0), Some(1.0)]);
        assert_eq!(t.max, vec![Some(1.0), Some(1.0)]);
    }
}
