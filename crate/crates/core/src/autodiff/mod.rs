//! Dense tensors with a tape-based reverse-mode differentiator.
//!
//! Only the operations the correspondence model needs are provided. Every
//! spatial tensor uses an `H x W x C` row-major layout with channels
//! innermost; there is no batch axis, batches are sets of independent
//! graphs whose gradients are summed by the caller.
//!
//! Precision is a type parameter: `f32` for training and inference, `f64`
//! for finite-difference verification.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, sample_coords, GradCheckReport, ParamCoord};
pub use graph::{BatchStats, Gradients, Graph, Pointwise, Var};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating point element type for tensors and graphs.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn lit(x: f64) -> Self;

    fn to_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe matrices that lie within their
    /// allocations, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn lit(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
