//! Forward and backward kernels for the handful of operations the
//! architecture needs. The tape records these; inference calls the forward
//! kernels directly, so both paths share one implementation.
//!
//! Boundary handling for 3x3 neighborhoods is zero padding: out-of-grid
//! cells read as zero.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::Real;

/// Depthwise 3x3 convolution: channel `c` of the output convolves channel
/// `c` of the input with kernel slice `c`, no cross-channel mixing, no bias.
/// `kernels` holds `channels * 9` scalars, row-major per 3x3 slice.
pub fn depthwise_conv3x3<F: Real>(x: &Grid<F>, kernels: &[F]) -> Result<Grid<F>> {
    let n = x.channels();
    if kernels.len() != n * 9 {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv3x3",
            detail: format!("input has {n} channels but kernel holds {} slices", kernels.len() / 9),
        });
    }
    let (h, w) = (x.height(), x.width());
    // tap-major copy keeps the channel loop contiguous on both operands
    let kt = transpose_taps(kernels, n);
    let mut out = Grid::zeros(h, w, n);
    for (tap, (di, dj)) in TAPS.iter().enumerate() {
        let kv = &kt[tap * n..(tap + 1) * n];
        // each tap is a whole-plane shifted multiply-add over contiguous
        // row runs; zero padding just trims the runs at the borders
        for i in 0..h {
            let si = i as isize + di;
            if si < 0 || si >= h as isize {
                continue;
            }
            let (j0, j1) = shifted_run(w, *dj);
            let dst_start = (i * w + j0) * n;
            let src_start = ((si as usize) * w + (j0 as isize + dj) as usize) * n;
            let len = (j1 - j0) * n;
            let dst = &mut out.as_mut_slice()[dst_start..dst_start + len];
            let src = &x.as_slice()[src_start..src_start + len];
            for (dc, sc) in dst.chunks_exact_mut(n).zip(src.chunks_exact(n)) {
                for c in 0..n {
                    dc[c] = dc[c] + sc[c] * kv[c];
                }
            }
        }
    }
    Ok(out)
}

/// Valid destination column range `[j0, j1)` for a horizontal shift `dj`.
fn shifted_run(w: usize, dj: isize) -> (usize, usize) {
    if dj < 0 {
        ((-dj) as usize, w)
    } else {
        (0, w - dj as usize)
    }
}

fn transpose_taps<F: Real>(kernels: &[F], n: usize) -> Vec<F> {
    let mut kt = vec![F::zero(); n * 9];
    for c in 0..n {
        for tap in 0..9 {
            kt[tap * n + c] = kernels[c * 9 + tap];
        }
    }
    kt
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Accumulates input and kernel gradients for [`depthwise_conv3x3`].
pub fn depthwise_conv3x3_backward<F: Real>(
    x: &Grid<F>,
    kernels: &[F],
    dy: &Grid<F>,
    dx: &mut Grid<F>,
    dk: &mut [F],
) {
    debug_assert!(dy.same_shape(x) && dx.same_shape(x) && dk.len() == x.channels() * 9);
    conv3x3_backward_input(kernels, dy, dx);
    conv3x3_backward_kernel(x, dy, dk);
}

/// The adjoint of zero-padded correlation is correlation with each tap's
/// shift negated: dx[s] += dy[s - tap] * k[tap].
pub(crate) fn conv3x3_backward_input<F: Real>(kernels: &[F], dy: &Grid<F>, dx: &mut Grid<F>) {
    let n = dy.channels();
    let (h, w) = (dy.height(), dy.width());
    let kt = transpose_taps(kernels, n);
    for (tap, (di, dj)) in TAPS.iter().enumerate() {
        let kv = &kt[tap * n..(tap + 1) * n];
        for i in 0..h {
            let si = i as isize + di;
            if si < 0 || si >= h as isize {
                continue;
            }
            let (j0, j1) = shifted_run(w, *dj);
            let g_start = (i * w + j0) * n;
            let dx_start = ((si as usize) * w + (j0 as isize + dj) as usize) * n;
            let len = (j1 - j0) * n;
            let g = &dy.as_slice()[g_start..g_start + len];
            let dst = &mut dx.as_mut_slice()[dx_start..dx_start + len];
            for (dc, gc) in dst.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                for c in 0..n {
                    dc[c] = dc[c] + gc[c] * kv[c];
                }
            }
        }
    }
}

pub(crate) fn conv3x3_backward_kernel<F: Real>(x: &Grid<F>, dy: &Grid<F>, dk: &mut [F]) {
    let n = x.channels();
    let (h, w) = (x.height(), x.width());
    let mut dkt = vec![F::zero(); n * 9];
    for (tap, (di, dj)) in TAPS.iter().enumerate() {
        let dkv = &mut dkt[tap * n..(tap + 1) * n];
        for i in 0..h {
            let si = i as isize + di;
            if si < 0 || si >= h as isize {
                continue;
            }
            let (j0, j1) = shifted_run(w, *dj);
            let g_start = (i * w + j0) * n;
            let x_start = ((si as usize) * w + (j0 as isize + dj) as usize) * n;
            let len = (j1 - j0) * n;
            let g = &dy.as_slice()[g_start..g_start + len];
            let src = &x.as_slice()[x_start..x_start + len];
            for (gc, sc) in g.chunks_exact(n).zip(src.chunks_exact(n)) {
                for c in 0..n {
                    dkv[c] = dkv[c] + gc[c] * sc[c];
                }
            }
        }
    }
    for c in 0..n {
        for tap in 0..9 {
            dk[c * 9 + tap] = dk[c * 9 + tap] + dkt[tap * n + c];
        }
    }
}

/// Concatenates grids along the channel axis, cell by cell.
pub fn concat_channels<F: Real>(parts: &[&Grid<F>]) -> Result<Grid<F>> {
    let (h, w) = (parts[0].height(), parts[0].width());
    if parts.iter().any(|p| p.height() != h || p.width() != w) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            detail: "spatial dimensions differ".into(),
        });
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Grid::zeros(h, w, total);
    for i in 0..h {
        for j in 0..w {
            let cell = out.cell_mut(i, j);
            let mut off = 0;
            for p in parts {
                let src = p.cell(i, j);
                cell[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
    }
    Ok(out)
}

/// Splits a concatenated gradient back into per-part gradients.
pub fn concat_channels_backward<F: Real>(dy: &Grid<F>, parts: &mut [&mut Grid<F>]) {
    let (h, w) = (dy.height(), dy.width());
    for i in 0..h {
        for j in 0..w {
            let g = dy.cell(i, j);
            let mut off = 0;
            for p in parts.iter_mut() {
                let dst = p.cell_mut(i, j);
                for (d, s) in dst.iter_mut().zip(&g[off..]) {
                    *d = *d + *s;
                }
                off += dst.len();
            }
        }
    }
}

/// Applies `W x + b` to every cell's state vector. `w` is `out_ch x in_ch`
/// row-major, `b` has `out_ch` entries. With channels innermost this is one
/// `cells x in_ch` by `in_ch x out_ch` matrix product.
pub fn cell_linear<F: Real>(x: &Grid<F>, w: &[F], b: &[F], out_ch: usize) -> Result<Grid<F>> {
    let m = x.channels();
    check_linear_dims("cell_linear", w.len(), b.len(), out_ch, m)?;
    let cells = x.height() * x.width();
    let mut out = Grid::zeros(x.height(), x.width(), out_ch);
    unsafe {
        // B is w transposed: element (c, k) lives at w[k * m + c]
        F::gemm(
            cells,
            m,
            out_ch,
            F::one(),
            x.as_slice().as_ptr(),
            m as isize,
            1,
            w.as_ptr(),
            1,
            m as isize,
            F::zero(),
            out.as_mut_slice().as_mut_ptr(),
            out_ch as isize,
            1,
        );
    }
    for cell in out.as_mut_slice().chunks_exact_mut(out_ch) {
        for (v, &bk) in cell.iter_mut().zip(b) {
            *v = *v + bk;
        }
    }
    Ok(out)
}

pub fn cell_linear_backward<F: Real>(
    x: &Grid<F>,
    w: &[F],
    dy: &Grid<F>,
    dx: &mut Grid<F>,
    dw: &mut [F],
    db: &mut [F],
) {
    debug_assert_eq!(w.len(), dy.channels() * x.channels());
    cell_linear_backward_input(w, dy, dx);
    cell_linear_backward_weight(x, dy, dw);
    cell_linear_backward_bias(dy, db);
}

/// dx += dy (cells x o) * w (o x m)
pub(crate) fn cell_linear_backward_input<F: Real>(w: &[F], dy: &Grid<F>, dx: &mut Grid<F>) {
    let o = dy.channels();
    let m = dx.channels();
    let cells = dy.height() * dy.width();
    unsafe {
        F::gemm(
            cells,
            o,
            m,
            F::one(),
            dy.as_slice().as_ptr(),
            o as isize,
            1,
            w.as_ptr(),
            m as isize,
            1,
            F::one(),
            dx.as_mut_slice().as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// dw += dy^T (o x cells) * x (cells x m)
pub(crate) fn cell_linear_backward_weight<F: Real>(x: &Grid<F>, dy: &Grid<F>, dw: &mut [F]) {
    let o = dy.channels();
    let m = x.channels();
    let cells = x.height() * x.width();
    unsafe {
        F::gemm(
            o,
            cells,
            m,
            F::one(),
            dy.as_slice().as_ptr(),
            1,
            o as isize,
            x.as_slice().as_ptr(),
            m as isize,
            1,
            F::one(),
            dw.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// db += per-channel sums of dy
pub(crate) fn cell_linear_backward_bias<F: Real>(dy: &Grid<F>, db: &mut [F]) {
    let o = dy.channels();
    for g in dy.as_slice().chunks_exact(o) {
        for (d, &gk) in db.iter_mut().zip(g) {
            *d = *d + gk;
        }
    }
}

/// Dense layer on a plain vector: `out = W x + b`.
pub fn vec_linear<F: Real>(x: &[F], w: &[F], b: &[F]) -> Result<Vec<F>> {
    let o = b.len();
    check_linear_dims("linear", w.len(), b.len(), o, x.len())?;
    let mut out = vec![F::zero(); o];
    linear_into(x, w, b, &mut out);
    Ok(out)
}

pub fn vec_linear_backward<F: Real>(
    x: &[F],
    w: &[F],
    dy: &[F],
    dx: &mut [F],
    dw: &mut [F],
    db: &mut [F],
) {
    vec_linear_backward_input(w, dy, dx);
    vec_linear_backward_weight(x, dy, dw);
    vec_linear_backward_bias(dy, db);
}

pub(crate) fn vec_linear_backward_input<F: Real>(w: &[F], dy: &[F], dx: &mut [F]) {
    let m = dx.len();
    for (k, &gk) in dy.iter().enumerate() {
        let row = &w[k * m..(k + 1) * m];
        for c in 0..m {
            dx[c] = dx[c] + row[c] * gk;
        }
    }
}

pub(crate) fn vec_linear_backward_weight<F: Real>(x: &[F], dy: &[F], dw: &mut [F]) {
    let m = x.len();
    for (k, &gk) in dy.iter().enumerate() {
        let drow = &mut dw[k * m..(k + 1) * m];
        for c in 0..m {
            drow[c] = drow[c] + x[c] * gk;
        }
    }
}

pub(crate) fn vec_linear_backward_bias<F: Real>(dy: &[F], db: &mut [F]) {
    for (d, &gk) in db.iter_mut().zip(dy) {
        *d = *d + gk;
    }
}

fn check_linear_dims(op: &'static str, wlen: usize, blen: usize, o: usize, m: usize) -> Result<()> {
    if wlen != o * m || blen != o {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("weight {wlen} / bias {blen} incompatible with {o}x{m}"),
        });
    }
    Ok(())
}

#[inline]
fn linear_into<F: Real>(x: &[F], w: &[F], b: &[F], out: &mut [F]) {
    let m = x.len();
    for (k, slot) in out.iter_mut().enumerate() {
        let row = &w[k * m..(k + 1) * m];
        let mut acc = F::zero();
        for c in 0..m {
            acc = acc + row[c] * x[c];
        }
        *slot = acc + b[k];
    }
}

/// Elementwise `max(x, 0)`.
pub fn relu<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect()
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<F: Real>(x: &[F], dy: &[F], dx: &mut [F]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        if v > F::zero() {
            *d = *d + g;
        }
    }
}

/// `state + mask * update`, where the mask holds one bit per spatial cell
/// broadcast across all channels of that cell. Cells with mask 0 keep their
/// previous state bit-identically.
pub fn masked_residual<F: Real>(state: &Grid<F>, update: &Grid<F>, mask: &[u8]) -> Grid<F> {
    debug_assert!(state.same_shape(update));
    debug_assert_eq!(mask.len(), state.height() * state.width());
    let mut out = state.clone();
    let n = state.channels();
    for (cell_idx, &bit) in mask.iter().enumerate() {
        if bit != 0 {
            let (i, j) = (cell_idx / state.width(), cell_idx % state.width());
            let upd = update.cell(i, j);
            let dst = out.cell_mut(i, j);
            for c in 0..n {
                dst[c] = dst[c] + upd[c];
            }
        }
    }
    out
}

/// The mask gates update gradients exactly as it gated the forward residual.
pub fn masked_residual_backward<F: Real>(
    dy: &Grid<F>,
    mask: &[u8],
    dstate: &mut Grid<F>,
    dupdate: &mut Grid<F>,
) {
    let n = dy.channels();
    for cell_idx in 0..mask.len() {
        let (i, j) = (cell_idx / dy.width(), cell_idx % dy.width());
        let g = dy.cell(i, j);
        let ds = dstate.cell_mut(i, j);
        for c in 0..n {
            ds[c] = ds[c] + g[c];
        }
        if mask[cell_idx] != 0 {
            let du = dupdate.cell_mut(i, j);
            for c in 0..n {
                du[c] = du[c] + g[c];
            }
        }
    }
}

/// Spatial maximum per channel plus the winning cell, first in row-major
/// order on ties. The positions route gradients and relevance.
pub fn channel_max<F: Real>(x: &Grid<F>) -> (Vec<F>, Vec<(usize, usize)>) {
    let n = x.channels();
    let mut best = vec![F::neg_infinity(); n];
    let mut pos = vec![(0usize, 0usize); n];
    for i in 0..x.height() {
        for j in 0..x.width() {
            let cell = x.cell(i, j);
            for c in 0..n {
                if cell[c] > best[c] {
                    best[c] = cell[c];
                    pos[c] = (i, j);
                }
            }
        }
    }
    (best, pos)
}

/// Routes each channel's gradient entirely to its recorded argmax cell.
pub fn channel_max_backward<F: Real>(dy: &[F], pos: &[(usize, usize)], dx: &mut Grid<F>) {
    for (c, (&g, &(i, j))) in dy.iter().zip(pos).enumerate() {
        let cell = dx.cell_mut(i, j);
        cell[c] = cell[c] + g;
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: F = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid<F: Real>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}
