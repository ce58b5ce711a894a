//! Neural cellular automata (NCA) image classifier.
//!
//! A grid of cells carries an RGB image in its first three channels and
//! zeros elsewhere. A learned local rule (two depthwise 3x3 convolutions
//! plus a per-cell MLP) is applied for `k` stochastic steps, features are
//! pooled by channel-wise maximum, and a two-layer head classifies the
//! resulting vector. Training backpropagates through the whole rollout.
//!
//! Modules:
//! - [`grid`]: the cell-state array.
//! - [`tape`]: minimal reverse-mode autodiff over whole-grid operations.
//! - [`model`]: seed, perception, update rule, rollout, classifier head.
//! - [`train`]: cross-entropy, Adam with exponential LR decay, balanced
//!   sampling, augmentation, the fit loop.
//! - [`data`]: manifests, image loading, label harmonization, synthetic data.
//! - [`explain`]: layer-wise relevance propagation over the classifier head.
//! - [`checkpoint`]: binary parameter serialization with checksum.
//! - [`eval`]: accuracy, confusion matrices, cross-domain matrices.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod grid;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use grid::Grid;
pub use model::{NcaConfig, NcaParams};

use num_traits::{Float, FromPrimitive};

/// Strided matrix product `C = alpha * A * B + beta * C`. The dense kernels
/// route through this so both precisions hit tuned SIMD code.
pub trait Gemm: Sized {
    /// # Safety
    /// Pointers must cover `m x k`, `k x n`, and `m x n` elements under the
    /// given strides; regions must not overlap except `c` with itself.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

impl Gemm for f32 {
    unsafe fn gemm(
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

impl Gemm for f64 {
    unsafe fn gemm(
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

/// Scalar type bound for the numeric core. Training and inference run in
/// `f32`; `f64` exists for gradient-check test modes.
pub trait Real:
    Float
    + FromPrimitive
    + Gemm
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn from_usize_c(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
