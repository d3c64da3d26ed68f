//! Raw slice kernels shared by the graph operations and the plain
//! (non-recording) inference paths.

use super::Scalar;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: views were bounds-checked at construction and the output is a
    // distinct mutable slice of at least m*n elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_cells(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds input patches into a `(ho*wo) x (kh*kw*cin)` matrix whose column
/// order matches a `kh x kw x cin x cout` kernel read as `patch x cout`.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.out_cells() * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds an unfolded gradient back onto the input layout.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        out[dst + c] = out[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_cells() * g.cout];
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        gemm(
            MatRef::row_major(input, g.h * g.w, g.cin),
            MatRef::row_major(kernel, g.cin, g.cout),
            T::zero(),
            &mut out,
        );
        return out;
    }
    let cols = im2col(input, g);
    gemm(
        MatRef::row_major(&cols, g.out_cells(), g.patch()),
        MatRef::row_major(kernel, g.patch(), g.cout),
        T::zero(),
        &mut out,
    );
    out
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let dout = MatRef::row_major(grad_out, g.out_cells(), g.cout);
    let kmat = MatRef::row_major(kernel, g.patch(), g.cout);
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let cols = if pointwise {
        None
    } else if want_kernel {
        Some(im2col(input, g))
    } else {
        None
    };
    let d_kernel = want_kernel.then(|| {
        let mut dk = vec![T::zero(); g.patch() * g.cout];
        let colmat = match &cols {
            Some(c) => MatRef::row_major(c, g.out_cells(), g.patch()),
            None => MatRef::row_major(input, g.out_cells(), g.patch()),
        };
        gemm(colmat.t(), dout, T::zero(), &mut dk);
        dk
    });
    let d_input = want_input.then(|| {
        let mut dcols = vec![T::zero(); g.out_cells() * g.patch()];
        gemm(dout, kmat.t(), T::zero(), &mut dcols);
        if pointwise {
            dcols
        } else {
            let mut din = vec![T::zero(); g.h * g.w * g.cin];
            col2im_add(&dcols, g, &mut din);
            din
        }
    });
    (d_input, d_kernel)
}

/// Validity of each window offset: `h x w x (2m+1)^2`, true where the
/// reference cell `(i+k-m, j+l-m)` lies inside the map.
pub(crate) fn window_mask(h: usize, w: usize, m: usize) -> Vec<bool> {
    let side = 2 * m + 1;
    let mut mask = vec![false; h * w * side * side];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * side * side;
            for k in 0..side {
                let ri = i as isize + k as isize - m as isize;
                if ri < 0 || ri >= h as isize {
                    continue;
                }
                for l in 0..side {
                    let rj = j as isize + l as isize - m as isize;
                    if rj >= 0 && rj < w as isize {
                        mask[base + k * side + l] = true;
                    }
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct WindowGeom {
    pub h: usize,
    pub w: usize,
    pub m: usize,
}

impl WindowGeom {
    pub fn side(&self) -> usize {
        2 * self.m + 1
    }

    pub fn offsets(&self) -> usize {
        self.side() * self.side()
    }

    /// Calls `f(cell, offset_index, ref_cell)` for every in-bounds window
    /// entry, in row-major cell order with offsets innermost.
    #[inline]
    pub fn for_each_valid(&self, mut f: impl FnMut(usize, usize, usize)) {
        let side = self.side();
        let m = self.m as isize;
        for i in 0..self.h {
            for j in 0..self.w {
                let cell = i * self.w + j;
                for k in 0..side {
                    let ri = i as isize + k as isize - m;
                    if ri < 0 || ri >= self.h as isize {
                        continue;
                    }
                    for l in 0..side {
                        let rj = j as isize + l as isize - m;
                        if rj < 0 || rj >= self.w as isize {
                            continue;
                        }
                        f(cell, k * side + l, ri as usize * self.w + rj as usize);
                    }
                }
            }
        }
    }
}

/// Scaled inner products between each target cell and its reference window.
/// Out-of-bounds offsets are left at zero.
pub(crate) fn correlation_forward<T: Scalar>(
    reference: &[T],
    target: &[T],
    c: usize,
    g: &WindowGeom,
    scale: T,
) -> Vec<T> {
    let o = g.offsets();
    let mut out = vec![T::zero(); g.h * g.w * o];
    g.for_each_valid(|cell, off, rcell| {
        let t = &target[cell * c..][..c];
        let r = &reference[rcell * c..][..c];
        let dot = t.iter().zip(r).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        out[cell * o + off] = dot * scale;
    });
    out
}

pub(crate) fn correlation_backward<T: Scalar>(
    reference: &[T],
    target: &[T],
    grad_out: &[T],
    c: usize,
    g: &WindowGeom,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let o = g.offsets();
    let mut d_ref = vec![T::zero(); reference.len()];
    let mut d_tgt = vec![T::zero(); target.len()];
    g.for_each_valid(|cell, off, rcell| {
        let gv = grad_out[cell * o + off] * scale;
        if gv == T::zero() {
            return;
        }
        for ch in 0..c {
            d_tgt[cell * c + ch] = d_tgt[cell * c + ch] + gv * reference[rcell * c + ch];
            d_ref[rcell * c + ch] = d_ref[rcell * c + ch] + gv * target[cell * c + ch];
        }
    });
    (d_ref, d_tgt)
}

/// Window-weighted gather: `out(cell) = sum_o weights(cell, o) * source(ref(cell, o))`.
pub(crate) fn gather_forward<T: Scalar>(weights: &[T], source: &[T], d: usize, g: &WindowGeom) -> Vec<T> {
    let o = g.offsets();
    let mut out = vec![T::zero(); g.h * g.w * d];
    g.for_each_valid(|cell, off, rcell| {
        let wv = weights[cell * o + off];
        if wv == T::zero() {
            return;
        }
        for ch in 0..d {
            out[cell * d + ch] = out[cell * d + ch] + wv * source[rcell * d + ch];
        }
    });
    out
}

pub(crate) fn gather_backward<T: Scalar>(
    weights: &[T],
    source: &[T],
    grad_out: &[T],
    d: usize,
    g: &WindowGeom,
    want_weights: bool,
    want_source: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let o = g.offsets();
    let mut d_w = want_weights.then(|| vec![T::zero(); weights.len()]);
    let mut d_s = want_source.then(|| vec![T::zero(); source.len()]);
    g.for_each_valid(|cell, off, rcell| {
        let go = &grad_out[cell * d..][..d];
        if let Some(dw) = d_w.as_mut() {
            let s = &source[rcell * d..][..d];
            dw[cell * o + off] = go.iter().zip(s).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        }
        if let Some(ds) = d_s.as_mut() {
            let wv = weights[cell * o + off];
            for ch in 0..d {
                ds[rcell * d + ch] = ds[rcell * d + ch] + wv * go[ch];
            }
        }
    });
    (d_w, d_s)
}

/// Max-shifted softmax over consecutive groups; masked entries are exactly
/// zero. Returns the index of the first fully masked group on failure.
pub(crate) fn softmax_groups<T: Scalar>(
    logits: &[T],
    group: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<T>, usize> {
    let mut out = vec![T::zero(); logits.len()];
    for (gi, (xs, ys)) in logits.chunks(group).zip(out.chunks_mut(group)).enumerate() {
        let valid = |idx: usize| mask.is_none_or(|m| m[gi * group + idx]);
        let mut max = T::neg_infinity();
        for (idx, &x) in xs.iter().enumerate() {
            if valid(idx) && x > max {
                max = x;
            }
        }
        if max == T::neg_infinity() {
            return Err(gi);
        }
        let mut sum = T::zero();
        for (idx, (&x, y)) in xs.iter().zip(ys.iter_mut()).enumerate() {
            if valid(idx) {
                *y = (x - max).exp();
                sum = sum + *y;
            }
        }
        let inv = T::one() / sum;
        ys.iter_mut().for_each(|y| *y = *y * inv);
    }
    Ok(out)
}
