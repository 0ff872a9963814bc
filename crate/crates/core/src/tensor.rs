//! Dense f32 kernels over row-major rank-2 and rank-3 arrays.

use std::cell::Cell;
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major `rows x cols` matrix. Weight matrices follow the
/// `(C_out, C_in)` convention, so `y = W x` is a dot product per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err!("row {i} has {} values, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            if r >= self.rows {
                return Err(shape_err!("row index {r} out of range {}", self.rows));
            }
            data.extend_from_slice(self.row(r));
        }
        Self::new(idx.len(), self.cols, data)
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&c) = idx.iter().find(|&&c| c >= self.cols) {
            return Err(shape_err!("column index {c} out of range {}", self.cols));
        }
        let mut data = Vec::with_capacity(idx.len() * self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        Self::new(self.rows, idx.len(), data)
    }
}

/// Rank-3 activation tensor `(n, s, d)`: batch, sequence, feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n: usize,
    s: usize,
    d: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(n: usize, s: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || s == 0 || d == 0 {
            return Err(shape_err!("tensor dims must be positive, got ({n},{s},{d})"));
        }
        if data.len() != n * s * d {
            return Err(shape_err!(
                "tensor ({n},{s},{d}) needs {} values, got {}",
                n * s * d,
                data.len()
            ));
        }
        Ok(Self { n, s, d, data })
    }

    pub fn zeros(n: usize, s: usize, d: usize) -> Self {
        assert!(n > 0 && s > 0 && d > 0, "tensor dims must be positive");
        Self { n, s, d, data: vec![0.0; n * s * d] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.s, self.d)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(i * self.s + j) * self.d + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        self.data[(i * self.s + j) * self.d + k] = v;
    }

    /// Feature vector at `(i, j)`.
    pub fn row(&self, i: usize, j: usize) -> &[f32] {
        let at = (i * self.s + j) * self.d;
        &self.data[at..at + self.d]
    }

    pub fn row_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let at = (i * self.s + j) * self.d;
        &mut self.data[at..at + self.d]
    }

    /// Iterates over all `n * s` feature vectors, sample-major.
    pub fn positions(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.d)
    }

    /// Gathers `samples x tokens` positions, preserving the given order.
    pub fn gather(&self, samples: &[usize], tokens: &[usize]) -> Result<Self> {
        if samples.is_empty() || tokens.is_empty() {
            return Err(shape_err!("gather needs at least one sample and one token"));
        }
        if let Some(&i) = samples.iter().find(|&&i| i >= self.n) {
            return Err(shape_err!("sample index {i} out of range {}", self.n));
        }
        if let Some(&j) = tokens.iter().find(|&&j| j >= self.s) {
            return Err(shape_err!("token index {j} out of range {}", self.s));
        }
        let mut data = Vec::with_capacity(samples.len() * tokens.len() * self.d);
        for &i in samples {
            for &j in tokens {
                data.extend_from_slice(self.row(i, j));
            }
        }
        Self::new(samples.len(), tokens.len(), self.d, data)
    }

    /// Keeps the listed feature channels.
    pub fn select_features(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&k) = idx.iter().find(|&&k| k >= self.d) {
            return Err(shape_err!("feature index {k} out of range {}", self.d));
        }
        let mut data = Vec::with_capacity(self.n * self.s * idx.len());
        for row in self.positions() {
            data.extend(idx.iter().map(|&k| row[k]));
        }
        Self::new(self.n, self.s, idx.len(), data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Axis of a [`Tensor3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Batch,
    Sequence,
    Feature,
}

/// A permutation of `0..len`, typically a descending-importance ranking.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexOrder(Vec<usize>);

impl IndexOrder {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The first `k` entries (clamped to the length).
    pub fn prefix(&self, k: usize) -> &[usize] {
        &self.0[..k.min(self.0.len())]
    }
}

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Runs `f` and returns the multiply-accumulates issued by matmul and
/// attention kernels on this thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(Cell::get);
    let r = f();
    let after = MACS.with(Cell::get);
    (r, after.wrapping_sub(before))
}

/// Dot product with eight independent accumulators; the fixed lane
/// assignment keeps results reproducible while letting the loop vectorize.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `result[i, j, :] = w . x[i, j, :]`, i.e. `x W^T` over the feature axis.
pub fn matmul_rhs_transposed(x: &Tensor3, w: &Matrix) -> Result<Tensor3> {
    if x.d != w.cols {
        return Err(shape_err!(
            "matmul: input width {} does not match weight cols {}",
            x.d,
            w.cols
        ));
    }
    if w.rows == 0 {
        return Err(shape_err!("matmul: weight has no rows"));
    }
    let mut out = Vec::with_capacity(x.n * x.s * w.rows);
    for xr in x.positions() {
        out.extend(w.data.chunks_exact(w.cols).map(|wr| dot(xr, wr)));
    }
    record_macs((x.n * x.s * w.rows * w.cols) as u64);
    Tensor3::new(x.n, x.s, w.rows, out)
}

/// Layer normalization over the feature axis with population variance.
///
/// A position whose variance plus `eps` is zero normalizes to zero, so the
/// output there is `bias`.
pub fn layer_norm(x: &Tensor3, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor3> {
    if gain.len() != x.d || bias.len() != x.d {
        return Err(shape_err!(
            "layer_norm: gain/bias lengths {}/{} vs width {}",
            gain.len(),
            bias.len(),
            x.d
        ));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Value(format!("layer_norm: eps must be >= 0, got {eps}")));
    }
    let d = x.d as f64;
    let mut out = Vec::with_capacity(x.data.len());
    for row in x.positions() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
        let denom = var + eps as f64;
        let inv = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        out.extend(
            row.iter()
                .zip(gain.iter().zip(bias))
                .map(|(&v, (&g, &b))| (((v as f64 - mean) * inv) as f32) * g + b),
        );
    }
    Tensor3::new(x.n, x.s, x.d, out)
}

/// L2 norm over the two axes other than `keep_axis`, one entry per slice
/// of the kept axis.
pub fn l2_norm_over_axes(x: &Tensor3, keep_axis: Axis) -> Vec<f32> {
    let len = match keep_axis {
        Axis::Batch => x.n,
        Axis::Sequence => x.s,
        Axis::Feature => x.d,
    };
    let mut acc = vec![0f64; len];
    for i in 0..x.n {
        for j in 0..x.s {
            let row = x.row(i, j);
            match keep_axis {
                Axis::Batch => acc[i] += row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>(),
                Axis::Sequence => acc[j] += row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>(),
                Axis::Feature => {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += (v as f64).powi(2);
                    }
                }
            }
        }
    }
    acc.into_iter().map(|s| s.sqrt() as f32).collect()
}

/// Indices ordered by non-increasing value; ties keep ascending index.
pub fn argsort_desc(v: &[f32]) -> Result<IndexOrder> {
    if let Some(i) = v.iter().position(|x| x.is_nan()) {
        return Err(Error::Value(format!("argsort_desc: NaN at index {i}")));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal));
    Ok(IndexOrder(idx))
}

/// f64 flavour of [`argsort_desc`], same tie rule.
pub fn argsort_desc_f64(v: &[f64]) -> Result<IndexOrder> {
    if let Some(i) = v.iter().position(|x| x.is_nan()) {
        return Err(Error::Value(format!("argsort_desc: NaN at index {i}")));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal));
    Ok(IndexOrder(idx))
}

/// Max-subtracted softmax over a slice, in place. `-inf` entries get zero
/// weight; a slice that is entirely `-inf` is left as zeros.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    if out.cols > 0 {
        out.data.chunks_exact_mut(scores.cols).for_each(softmax_in_place);
    }
    out
}

/// Largest absolute difference divided by the largest reference magnitude.
pub fn max_relative_error(actual: &[f32], reference: &[f32]) -> f32 {
    assert_eq!(actual.len(), reference.len());
    let scale = reference.iter().fold(0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    let diff = actual
        .iter()
        .zip(reference)
        .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}
