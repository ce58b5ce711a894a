//! The cell-state array the automaton operates on.
//!
//! Storage is row-major with channels innermost: index `(i, j, c)` maps to
//! `(i * width + j) * channels + c`, so one cell's state vector is
//! contiguous. That layout makes the per-cell update MLP a sequence of
//! contiguous dot products.

use crate::Real;

/// H x W grid of cells, each holding a `channels`-dimensional state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<F> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<F>,
}

impl<F: Real> Grid<F> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Grid { height, width, channels, data: vec![F::zero(); height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), height * width * channels, "grid data length");
        Grid { height, width, channels, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> F {
        self.data[(i * self.width + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: F) {
        self.data[(i * self.width + j) * self.channels + c] = v;
    }

    /// Contiguous state vector of one cell.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[F] {
        let base = (i * self.width + j) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [F] {
        let base = (i * self.width + j) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Grid<F>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One channel as a dense H x W plane (row-major).
    pub fn channel_plane(&self, c: usize) -> Vec<F> {
        assert!(c < self.channels);
        let mut out = Vec::with_capacity(self.height * self.width);
        for cell in self.data.chunks_exact(self.channels) {
            out.push(cell[c]);
        }
        out
    }

    pub fn map_precision<G: Real>(&self) -> Grid<G> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| G::from_f64_c(v.to_f64().unwrap())).collect(),
        }
    }
}
