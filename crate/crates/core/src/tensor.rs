//! Dense 64-bit kernels shared by every model: row-major matrices, vectors,
//! the two pointwise nonlinearities, per-entry gradient clipping and a
//! seedable random generator.
//!
//! The hot loops in the models work on plain slices through the
//! `*_into` / `*_acc` helpers; the allocating free functions (`matvec`,
//! `sigmoid`, `softmax`, ...) are the checked public surface.

use std::ops::{Deref, DerefMut};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// I.i.d. uniform entries in `[lo, hi)`, filled in row-major order.
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out = self · x`. Dimensions are the caller's responsibility.
    #[inline]
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    /// `out += self · x`.
    #[inline]
    pub fn mul_vec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · x`.
    #[inline]
    pub fn mul_vec_transpose_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            if xi != 0.0 {
                axpy(xi, row, out);
            }
        }
    }

    /// `self += scale · u vᵀ`.
    #[inline]
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (&ui, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, row);
            }
        }
    }

    /// Clamp, then `self -= lr · grad`.
    pub fn sgd_step(&mut self, grad: &Matrix, lr: f64, tau: f64) {
        debug_assert_eq!(self.shape(), grad.shape());
        sgd_step_slice(&mut self.data, &grad.data, lr, tau);
    }
}

impl AsRef<[f64]> for Matrix {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

impl AsMut<[f64]> for Matrix {
    fn as_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsMut<[f64]> for Vector {
    fn as_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
}

/// Turns logits into probabilities in place and returns the log partition
/// `max + ln Σ exp(x - max)`, so that `ln p_i = logit_i - log_z`.
#[inline]
pub fn softmax_in_place(x: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    x.iter_mut().for_each(|v| *v *= inv);
    max + sum.ln()
}

#[inline]
pub(crate) fn sgd_step_slice(param: &mut [f64], grad: &[f64], lr: f64, tau: f64) {
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g.clamp(-tau, tau);
    }
}

pub fn matvec(m: &Matrix, x: &Vector) -> Result<Vector> {
    if m.cols != x.dim() {
        return Err(Error::Shape(format!(
            "{}x{} matrix times {}-vector",
            m.rows,
            m.cols,
            x.dim()
        )));
    }
    let mut out = Vector::zeros(m.rows);
    m.mul_vec_into(x, &mut out);
    Ok(out)
}

pub fn sigmoid(x: &Vector) -> Vector {
    let mut out = x.clone();
    sigmoid_in_place(&mut out);
    out
}

pub fn softmax(x: &Vector) -> Vector {
    let mut out = x.clone();
    softmax_in_place(&mut out);
    out
}

/// Clamps every entry into `[-tau, tau]`.
pub fn clip_elementwise<T: AsMut<[f64]> + Clone>(g: &T, tau: f64) -> Result<T> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("clip bound must be positive, got {tau}")));
    }
    let mut out = g.clone();
    out.as_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(-tau, tau));
    Ok(out)
}

/// Draws an index with probability `p[i]`.
pub fn sample_categorical(p: &[f64], rng: &mut Rng) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::Param("empty probability vector".into()));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Param("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Param(format!("probabilities sum to {total}, not 1")));
    }
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 {
            last_positive = i;
            acc += v;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Sub-stream tags for [`Rng::derive`]. One experiment seed feeds every
/// consumer through its own ChaCha stream.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const SPLIT: u64 = 3;
}

/// Seedable, platform-independent generator.
///
/// Backed by ChaCha with 8 rounds. `Rng::new(seed)` expands the 64-bit seed
/// into the 256-bit key with PCG32 (the `rand_core` `seed_from_u64`
/// routine) and uses stream 0; `Rng::derive(seed, tag)` uses the same key
/// on stream `tag`. Uniform doubles take the top 53 bits of a 64-bit draw:
/// `u = (x >> 11) · 2⁻⁵³`. Bounded integers use rejection sampling on
/// `x mod n`, discarding draws below `2⁶⁴ mod n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn derive(seed: u64, tag: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(tag);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            key: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.key);
        inner.set_stream(state.stream);
        inner.set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
        Rng { inner }
    }
}
