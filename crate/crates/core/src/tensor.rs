//! Dense row-major matrices and the handful of kernels the forward pass needs.
//!
//! Storage is `f32`; every dot product accumulates in `f64` and rounds once.
//! Kernels that perform multiply-accumulates report them to a [`MacCounter`]
//! so the analytic cost model can be checked against what actually ran.

use serde::{Deserialize, Serialize};

/// Running count of multiply-accumulate operations issued by matmul kernels.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    pub macs: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, n: usize) {
        self.macs += n as u64;
    }

    /// FLOPs under the usual convention of two per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps `data` as a `rows × cols` matrix. Returns `None` on length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `y = W x`, i.e. `x Wᵀ` for a row vector `x`; one output per row of `W`.
    pub fn matvec(&self, x: &[f32], counter: &mut MacCounter) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.cols);
        counter.add(self.rows * self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `y = Wᵀ c = Σ_i c_i · W[i]`, a weighted sum of rows.
    pub fn weighted_row_sum(&self, coeffs: &[f32], counter: &mut MacCounter) -> Vec<f32> {
        debug_assert_eq!(coeffs.len(), self.rows);
        counter.add(self.rows * self.cols);
        let mut acc = vec![0.0f64; self.cols];
        for (r, &c) in coeffs.iter().enumerate() {
            let c = c as f64;
            for (a, &w) in acc.iter_mut().zip(self.row(r)) {
                *a += c * w as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>() as f32
}

pub fn add_in_place(acc: &mut [f32], x: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_counts_macs() {
        let w = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32);
        let mut counter = MacCounter::new();
        let y = w.matvec(&[1.0, 0.0, 0.0, 1.0], &mut counter);
        assert_eq!(y, vec![3.0, 11.0, 19.0]);
        assert_eq!(counter.macs, 12);
        assert_eq!(counter.flops(), 24);
    }

    #[test]
    fn weighted_row_sum_matches_loop() {
        let w = Matrix::from_fn(2, 3, |r, c| (r + c) as f32);
        let mut counter = MacCounter::new();
        let y = w.weighted_row_sum(&[2.0, -1.0], &mut counter);
        assert_eq!(y, vec![-1.0, 0.0, 1.0]);
        assert_eq!(counter.macs, 6);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
