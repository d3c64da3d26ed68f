use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rgb_to_lab_pixel, Frame, LabFrame};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const SHIFT_TOLERANCE: f64 = 1e-4;

/// K-means centroids in Lab space plus fit metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    centroids: Vec<[f64; 3]>,
    pub seed: u64,
    pub iterations: usize,
    pub inertia: f64,
}

impl Palette {
    pub fn from_centroids(centroids: Vec<[f64; 3]>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::config("palette needs at least one centroid"));
        }
        Ok(Palette {
            centroids,
            seed: 0,
            iterations: 0,
            inertia: 0.0,
        })
    }

    pub fn centroids(&self) -> &[[f64; 3]] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, lab: [f64; 3]) -> usize {
        nearest(&self.centroids, &lab).0
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(centroids: &[[f64; 3]], p: &[f64; 3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn distinct_count(points: &[[f64; 3]], stop_at: usize) -> usize {
    let mut keys: Vec<[u64; 3]> = points.iter().map(|p| p.map(f64::to_bits)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len().min(stop_at)
}

fn kmeans_plus_plus(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // Floating-point slack at the tail can land on a zero-weight point.
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain");
        }
        let c = points[pick];
        for (dv, p) in d2.iter_mut().zip(points) {
            *dv = dv.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations; returns the inertia after every assignment step.
fn lloyd(points: &[[f64; 3]], centroids: &mut [[f64; 3]]) -> (usize, Vec<f64>) {
    let k = centroids.len();
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        let mut inertia = 0.0;
        for p in points {
            let (idx, d) = nearest(centroids, p);
            inertia += d;
            counts[idx] += 1;
            for c in 0..3 {
                sums[idx][c] += p[c];
            }
        }
        history.push(inertia);
        let mut shift: f64 = 0.0;
        for i in 0..k {
            if counts[i] == 0 {
                continue;
            }
            let mean = sums[i].map(|s| s / counts[i] as f64);
            shift = shift.max(dist2(&mean, &centroids[i]).sqrt());
            centroids[i] = mean;
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    let final_inertia = points.iter().map(|p| nearest(centroids, p).1).sum();
    history.push(final_inertia);
    (iterations, history)
}

/// K-means++ seeded from `seed`, then Lloyd iterations until centroids move
/// less than 1e-4 or 100 iterations elapse.
pub fn fit_palette(points: &[[f64; 3]], k: usize, seed: u64) -> Result<Palette> {
    let found = distinct_count(points, k);
    if k == 0 || found < k {
        return Err(Error::TooFewColours { needed: k, found });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let (iterations, history) = lloyd(points, &mut centroids);
    Ok(Palette {
        centroids,
        seed,
        iterations,
        inertia: *history.last().expect("at least one iteration"),
    })
}

/// Draws `count` Lab pixels uniformly (with replacement) from the frames.
pub fn sample_lab_pixels<R: Rng>(frames: &[&Frame], count: usize, rng: &mut R) -> Vec<[f64; 3]> {
    if frames.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let f = frames[rng.random_range(0..frames.len())];
            let (y, x) = (rng.random_range(0..f.height()), rng.random_range(0..f.width()));
            rgb_to_lab_pixel(f.pixel(y, x).map(f64::from))
        })
        .collect()
}

/// Per-cell class ids at feature resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFrame {
    height: usize,
    width: usize,
    ids: Vec<usize>,
}

impl QuantizedFrame {
    pub fn new(height: usize, width: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(format!("{} ids for {height}x{width} cells", ids.len())));
        }
        Ok(QuantizedFrame { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.ids.len() * classes];
        for (cell, &id) in self.ids.iter().enumerate() {
            out[cell * classes + id] = 1.0;
        }
        out
    }
}

/// Average-pools Lab over `stride x stride` blocks.
pub fn pool_lab(lab: &LabFrame, stride: usize) -> Result<Vec<[f64; 3]>> {
    let (h, w) = (lab.height(), lab.width());
    for extent in [h, w] {
        if stride == 0 || extent % stride != 0 {
            return Err(Error::Indivisible {
                extent,
                divisor: stride,
                suggestion: extent.div_ceil(stride.max(1)) * stride.max(1),
            });
        }
    }
    let (ch, cw) = (h / stride, w / stride);
    let norm = (stride * stride) as f64;
    let mut out = vec![[0.0; 3]; ch * cw];
    for y in 0..h {
        for x in 0..w {
            let p = lab.pixel(y, x);
            let cell = &mut out[(y / stride) * cw + x / stride];
            for c in 0..3 {
                cell[c] += p[c] / norm;
            }
        }
    }
    Ok(out)
}

pub fn quantize(lab: &LabFrame, palette: &Palette, stride: usize) -> Result<QuantizedFrame> {
    let pooled = pool_lab(lab, stride)?;
    let ids = pooled.iter().map(|&p| palette.assign(p)).collect();
    QuantizedFrame::new(lab.height() / stride, lab.width() / stride, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn sixteen_colours() -> Vec<[f64; 3]> {
        (0..16)
            .map(|i| [10.0 + 5.0 * i as f64, (i % 4) as f64 * 20.0 - 30.0, (i / 4) as f64 * 15.0 - 20.0])
            .collect()
    }

    #[test]
    fn recovers_separable_colours_exactly() {
        let colours = sixteen_colours();
        let points: Vec<_> = (0..50).flat_map(|_| colours.iter().copied()).collect();
        let pal = fit_palette(&points, 16, 7).unwrap();
        assert_eq!(pal.inertia, 0.0);
        let mut got = pal.centroids().to_vec();
        let mut want = colours.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<[f64; 3]> = (0..2000)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)])
            .collect();
        let a = fit_palette(&points, 16, 11).unwrap();
        let b = fit_palette(&points, 16, 11).unwrap();
        assert_eq!(a, b);
        let mut keys: Vec<_> = a.centroids().iter().map(|c| c.map(f64::to_bits)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 16);
    }

    #[test]
    fn too_few_distinct_points_rejected() {
        let points = vec![[1.0, 2.0, 3.0]; 100];
        match fit_palette(&points, 16, 0) {
            Err(Error::TooFewColours { needed: 16, found: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_gaussian_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let means = [[30.0, 20.0, -10.0], [70.0, -25.0, 40.0]];
        let points: Vec<[f64; 3]> = (0..4000)
            .map(|i| means[i % 2].map(|m| m + noise.sample(&mut rng)))
            .collect();
        // Sampling oracle: the blob means are the empirical means of the
        // points generated around them.
        let empirical: Vec<[f64; 3]> = (0..2)
            .map(|b| {
                let mut s = [0.0; 3];
                for p in points.iter().skip(b).step_by(2) {
                    for c in 0..3 {
                        s[c] += p[c] / 2000.0;
                    }
                }
                s
            })
            .collect();
        let pal = fit_palette(&points, 2, 1).unwrap();
        for e in &empirical {
            let (_, d) = nearest(pal.centroids(), e);
            assert!(d.sqrt() < 0.5, "centroid far from blob mean {e:?}: {:?}", pal.centroids());
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<[f64; 3]> = (0..3000)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)])
            .collect();
        let mut centroids = kmeans_plus_plus(&points, 16, &mut ChaCha8Rng::seed_from_u64(2));
        let (_, history) = lloyd(&points, &mut centroids);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{history:?}");
        }
    }

    #[test]
    fn quantize_painted_frame_and_shape() {
        let pal = Palette::from_centroids(sixteen_colours()).unwrap();
        let c3 = pal.centroids()[3];
        let lab = LabFrame::new(8, 8, (0..64).flat_map(|_| c3).collect()).unwrap();
        let q = quantize(&lab, &pal, 4).unwrap();
        assert_eq!((q.height(), q.width()), (2, 2));
        assert!(q.ids().iter().all(|&id| id == 3));
    }

    #[test]
    fn quantize_recovers_painted_ids() {
        let pal = Palette::from_centroids(sixteen_colours()).unwrap();
        let ids: Vec<usize> = (0..16).map(|i| (i * 7) % 16).collect();
        let mut lab = vec![0.0; 16 * 16 * 3];
        for y in 0..16 {
            for x in 0..16 {
                let c = pal.centroids()[ids[(y / 4) * 4 + x / 4]];
                lab[(y * 16 + x) * 3..][..3].copy_from_slice(&c);
            }
        }
        let q = quantize(&LabFrame::new(16, 16, lab).unwrap(), &pal, 4).unwrap();
        assert_eq!(q.ids(), ids.as_slice());
    }

    #[test]
    fn equidistant_block_takes_lowest_index() {
        let mut cs = sixteen_colours();
        cs[2] = [50.0, 10.0, 0.0];
        cs[7] = [50.0, -10.0, 0.0];
        let pal = Palette::from_centroids(cs).unwrap();
        let lab = LabFrame::new(4, 4, (0..16).flat_map(|_| [50.0, 0.0, 0.0]).collect()).unwrap();
        assert_eq!(quantize(&lab, &pal, 4).unwrap().ids(), &[2]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let lab = LabFrame::new(6, 8, vec![0.0; 6 * 8 * 3]).unwrap();
        assert!(matches!(pool_lab(&lab, 4), Err(Error::Indivisible { extent: 6, .. })));
    }
}
