//! Full and restricted (windowed) attention between feature maps, the
//! soft-copy reconstruction, and memory accounting for both.
//!
//! A restricted affinity stores, for every target cell `(i, j)`, a
//! distribution over the `(2M+1) x (2M+1)` reference cells
//! `(i + k - M, j + l - M)`. Offsets falling outside the map carry weight
//! exactly zero and are excluded from the normalization.

use crate::autodiff::kernels::{self, WindowGeom};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Default guard on the number of cells for [`full_affinity`].
pub const FULL_AFFINITY_MAX_CELLS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || values.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} with {} values",
                values.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        let &[h, w, c] = t.shape() else {
            return Err(Error::shape(format!("feature map tensor must be rank 3, got {:?}", t.shape())));
        };
        FeatureMap::new(h, w, c, t.into_data())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let start = (i * self.width + j) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Copy with every cell scaled to unit length.
    pub fn l2_normalized(&self) -> Self {
        let mut values = self.values.clone();
        for px in values.chunks_mut(self.channels) {
            let n = (px.iter().fold(T::zero(), |a, &v| a + v * v) + T::lit(1e-12)).sqrt();
            px.iter_mut().for_each(|v| *v = *v / n);
        }
        FeatureMap { values, ..*self }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::shape(format!(
                "feature maps differ: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }
}

/// Softmax weights `h x w x (2M+1) x (2M+1)` with window offsets innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityVolume<T> {
    height: usize,
    width: usize,
    m: usize,
    weights: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> AffinityVolume<T> {
    /// Wraps precomputed weights, checking only their size.
    pub fn from_weights(height: usize, width: usize, m: usize, weights: Vec<T>) -> Result<Self> {
        let side = 2 * m + 1;
        if weights.len() != height * width * side * side {
            return Err(Error::shape(format!(
                "affinity {height}x{width} with M={m} needs {} weights, got {}",
                height * width * side * side,
                weights.len()
            )));
        }
        Ok(AffinityVolume {
            height,
            width,
            m,
            weights,
            valid: kernels::window_mask(height, width, m),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_disparity(&self) -> usize {
        self.m
    }

    pub fn side(&self) -> usize {
        2 * self.m + 1
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Weights of the target cell `(i, j)` in `k`-major, `l`-minor order.
    pub fn window(&self, i: usize, j: usize) -> &[T] {
        let o = self.side() * self.side();
        let start = (i * self.width + j) * o;
        &self.weights[start..start + o]
    }

    pub fn window_valid(&self, i: usize, j: usize) -> &[bool] {
        let o = self.side() * self.side();
        let start = (i * self.width + j) * o;
        &self.valid[start..start + o]
    }

    /// Displacement `(k - M, l - M)` of the heaviest valid offset; ties go to
    /// the first offset in row-major order.
    pub fn argmax_offset(&self, i: usize, j: usize) -> (isize, isize) {
        let side = self.side();
        let (w, v) = (self.window(i, j), self.window_valid(i, j));
        let mut best = None;
        for (o, (&x, &ok)) in w.iter().zip(v).enumerate() {
            if ok && best.is_none_or(|(_, b)| x > b) {
                best = Some((o, x));
            }
        }
        let (o, _) = best.expect("every window holds at least its own cell");
        ((o / side) as isize - self.m as isize, (o % side) as isize - self.m as isize)
    }

    fn geom(&self) -> WindowGeom {
        WindowGeom {
            h: self.height,
            w: self.width,
            m: self.m,
        }
    }
}

/// Masked softmax over each target cell's window of scaled dot products
/// `<reference(i+k-M, j+l-M), target(i, j)> / temperature`.
pub fn restricted_affinity<T: Scalar>(
    reference: &FeatureMap<T>,
    target: &FeatureMap<T>,
    m: usize,
    temperature: f64,
) -> Result<AffinityVolume<T>> {
    reference.same_shape(target)?;
    check_temperature(temperature)?;
    let geom = WindowGeom {
        h: target.height,
        w: target.width,
        m,
    };
    let logits = kernels::correlation_forward(
        &reference.values,
        &target.values,
        target.channels,
        &geom,
        T::lit(1.0 / temperature),
    );
    let valid = kernels::window_mask(geom.h, geom.w, m);
    let weights = kernels::softmax_groups(&logits, geom.offsets(), Some(&valid)).map_err(|group| Error::EmptyWindow { group })?;
    Ok(AffinityVolume {
        height: geom.h,
        width: geom.w,
        m,
        weights,
        valid,
    })
}

/// Records the restricted affinity on a graph. Returns an `h x w x S x S`
/// value, `S = 2M + 1`.
pub fn restricted_affinity_graph<T: Scalar>(
    g: &mut Graph<T>,
    reference: Var,
    target: Var,
    m: usize,
    temperature: f64,
    l2_normalize: bool,
) -> Result<Var> {
    check_temperature(temperature)?;
    let (reference, target) = if l2_normalize {
        let eps = T::lit(1e-12);
        (g.l2_normalize(reference, eps)?, g.l2_normalize(target, eps)?)
    } else {
        (reference, target)
    };
    let corr = g.local_correlation(reference, target, m, T::lit(1.0 / temperature))?;
    let &[h, w, ..] = g.shape(corr) else {
        unreachable!("correlation output is rank 4")
    };
    let mask = kernels::window_mask(h, w, m);
    g.softmax_over(corr, 2, Some(&mask))
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Dense `(hw) x (hw)` affinity, entry `[i * hw + j]` is the weight of
/// reference cell `i` for target cell `j`; each column sums to one.
pub fn full_affinity<T: Scalar>(reference: &FeatureMap<T>, target: &FeatureMap<T>, temperature: f64) -> Result<Vec<T>> {
    full_affinity_with_limit(reference, target, temperature, FULL_AFFINITY_MAX_CELLS)
}

pub fn full_affinity_with_limit<T: Scalar>(
    reference: &FeatureMap<T>,
    target: &FeatureMap<T>,
    temperature: f64,
    max_cells: usize,
) -> Result<Vec<T>> {
    reference.same_shape(target)?;
    check_temperature(temperature)?;
    let n = reference.cells();
    if n > max_cells {
        let elements = (n as u64) * (n as u64);
        return Err(Error::AffinityTooLarge {
            cells: n,
            elements,
            bytes: elements * std::mem::size_of::<T>() as u64,
            limit: max_cells,
        });
    }
    let c = reference.channels;
    let scale = T::lit(1.0 / temperature);
    // logits stored target-major so that each softmax group is contiguous
    let mut logits = vec![T::zero(); n * n];
    for (j, row) in logits.chunks_mut(n).enumerate() {
        let t = &target.values[j * c..][..c];
        for (i, v) in row.iter_mut().enumerate() {
            let r = &reference.values[i * c..][..c];
            *v = t.iter().zip(r).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
        }
    }
    let by_target = kernels::softmax_groups(&logits, n, None).expect("unmasked groups are never empty");
    let mut out = vec![T::zero(); n * n];
    for j in 0..n {
        for i in 0..n {
            out[i * n + j] = by_target[j * n + i];
        }
    }
    Ok(out)
}

/// Affinity-weighted copy of an `h x w x D` source map, given row-major
/// with `depth` values per cell.
pub fn soft_copy<T: Scalar>(aff: &AffinityVolume<T>, source: &[T], depth: usize) -> Result<Vec<T>> {
    let cells = aff.height * aff.width;
    if depth == 0 || source.len() != cells * depth {
        return Err(Error::shape(format!(
            "soft-copy source of {} values for {}x{} cells of depth {depth}",
            source.len(),
            aff.height,
            aff.width
        )));
    }
    Ok(kernels::gather_forward(&aff.weights, source, depth, &aff.geom()))
}

/// Element counts for restricted versus dense affinities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceEstimate {
    pub restricted_elements: u64,
    pub full_elements: u64,
    pub ratio: f64,
}

pub fn resource_estimate(h: usize, w: usize, m: usize) -> ResourceEstimate {
    let cells = (h * w) as u64;
    let side = (2 * m + 1) as u64;
    let restricted_elements = cells * side * side;
    let full_elements = cells * cells;
    ResourceEstimate {
        restricted_elements,
        full_elements,
        ratio: restricted_elements as f64 / full_elements as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        let values = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(h, w, c, values).unwrap()
    }

    #[test]
    fn degenerate_window_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (random_map(3, 4, 5, &mut rng), random_map(3, 4, 5, &mut rng));
        let aff = restricted_affinity(&a, &b, 0, 1.0).unwrap();
        assert!(aff.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn two_cell_closed_form() {
        let reference = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let target = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let aff = restricted_affinity(&reference, &target, 1, 1.0).unwrap();
        let e = std::f64::consts::E;
        // Cell (0,0): in-bounds offsets are (k=1,l=1) itself and (1,2) right.
        let win = aff.window(0, 0);
        assert!((win[4] - e / (e + 1.0)).abs() < 1e-12);
        assert!((win[5] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let rest: f64 = win.iter().enumerate().filter(|(o, _)| *o != 4 && *o != 5).map(|(_, w)| w).sum();
        assert_eq!(rest, 0.0);
    }

    #[test]
    fn corner_window_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_map(20, 20, 3, &mut rng), random_map(20, 20, 3, &mut rng));
        let aff = restricted_affinity(&a, &b, 6, 1.0).unwrap();
        let valid = aff.window_valid(0, 0).iter().filter(|&&v| v).count();
        assert_eq!(valid, 49);
        let sum: f64 = aff.window(0, 0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_affinity_of_constant_map_is_uniform() {
        let f = FeatureMap::new(3, 3, 2, vec![0.7f64; 18]).unwrap();
        let a = full_affinity(&f, &f, 1.0).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn full_affinity_orthonormal_is_near_permutation() {
        // One-hot features: cell i matches only itself.
        let n = 6;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        let f = FeatureMap::new(2, 3, n, values).unwrap();
        let a = full_affinity(&f, &f, 0.01).unwrap();
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| a[i * n + j]).collect();
            let arg = col.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
            assert_eq!(arg, j);
            assert!(col[j] > 0.999);
        }
    }

    #[test]
    fn full_affinity_guard() {
        let f = FeatureMap::new(65, 64, 1, vec![0.0f32; 65 * 64]).unwrap();
        match full_affinity(&f, &f, 1.0) {
            Err(Error::AffinityTooLarge { cells: 4160, .. }) => {}
            other => panic!("expected guard, got {other:?}"),
        }
    }

    #[test]
    fn soft_copy_one_hot_shifts_source() {
        let (h, w, m) = (4, 5, 1);
        let side = 2 * m + 1;
        // every target cell copies from offset (k=2, l=1): reference (i+1, j)
        let mut weights = vec![0.0; h * w * side * side];
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * side * side;
                if i + 1 < h {
                    weights[base + 2 * side + 1] = 1.0;
                } else {
                    weights[base + side + 1] = 1.0;
                }
            }
        }
        let aff = AffinityVolume::from_weights(h, w, m, weights).unwrap();
        let source: Vec<f64> = (0..h * w).map(|v| v as f64).collect();
        let out = soft_copy(&aff, &source, 1).unwrap();
        for i in 0..h - 1 {
            for j in 0..w {
                assert_eq!(out[i * w + j], source[(i + 1) * w + j]);
            }
        }
    }

    #[test]
    fn uniform_window_averages_neighbourhood() {
        let f = FeatureMap::new(5, 5, 1, vec![0.0; 25]).unwrap();
        let aff = restricted_affinity(&f, &f, 1, 1.0).unwrap();
        let source: Vec<f64> = (0..25).map(|v| (v * v) as f64).collect();
        let out = soft_copy(&aff, &source, 1).unwrap();
        let (i, j) = (2, 2);
        let mut mean = 0.0;
        for di in 0..3 {
            for dj in 0..3 {
                mean += source[(i + di - 1) * 5 + j + dj - 1] / 9.0;
            }
        }
        assert!((out[i * 5 + j] - mean).abs() < 1e-12);
    }

    #[test]
    fn soft_copy_rejects_extent_mismatch() {
        let f = FeatureMap::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let aff = restricted_affinity(&f, &f, 1, 1.0).unwrap();
        assert!(soft_copy(&aff, &[0.0; 6], 1).is_err());
    }

    #[test]
    fn graph_path_matches_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random_map(5, 6, 4, &mut rng), random_map(5, 6, 4, &mut rng));
        let plain = restricted_affinity(&a, &b, 2, 0.5).unwrap();
        let mut g = Graph::new();
        let ra = g.constant(vec![5, 6, 4], a.values().to_vec()).unwrap();
        let rb = g.constant(vec![5, 6, 4], b.values().to_vec()).unwrap();
        let v = restricted_affinity_graph(&mut g, ra, rb, 2, 0.5, false).unwrap();
        assert_eq!(g.shape(v), &[5, 6, 5, 5]);
        for (x, y) in g.value(v).iter().zip(plain.weights()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn resource_arithmetic() {
        let r = resource_estimate(64, 64, 6);
        assert_eq!(r.restricted_elements, 692_224);
        assert_eq!(r.full_elements, 16_777_216);
        assert!((r.ratio - 169.0 / 4096.0).abs() < 1e-15);
        let r0 = resource_estimate(8, 8, 0);
        assert!((r0.ratio - 1.0 / 64.0).abs() < 1e-15);
    }
}
