//! Dense 64-bit linear algebra, activations and the seeded random stream
//! every other module draws from.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out = self · x` (overwrites `out`).
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `out += selfᵀ · y`.
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), out);
            }
        }
    }

    /// `self += a ⊗ b` (rank-one update).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                let cols = self.cols;
                axpy(ai, b, &mut self.data[i * cols..(i + 1) * cols]);
            }
        }
    }

    /// `self += aᵀ · b` where `a` is `k × rows` and `b` is `k × cols`.
    pub fn add_at_b(&mut self, a: &Matrix, b: &Matrix) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.cols, self.rows);
        assert_eq!(b.cols, self.cols);
        if a.rows == 0 || self.rows == 0 || self.cols == 0 {
            return;
        }
        // SAFETY: all pointers are valid for the stated extents and strides,
        // and `self` does not alias `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                a.rows,
                self.cols,
                1.0,
                a.data.as_ptr(),
                1,
                a.cols as isize,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                1.0,
                self.data.as_mut_ptr(),
                self.cols as isize,
                1,
            );
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(1.0, &other.data, &mut self.data);
    }
}

/// Dense vector newtype.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn filled(n: usize, v: f64) -> Self {
        Vector(vec![v; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn concat(parts: &[&[f64]]) -> Vector {
        let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            v.extend_from_slice(p);
        }
        Vector(v)
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

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
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

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
/// Summation order is fixed, so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `W·x + b`, rejecting mismatched operands.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vector> {
    if w.cols() != x.len() {
        return Err(Error::shape(
            "affine",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("x len {}", x.len()),
        ));
    }
    if w.rows() != b.len() {
        return Err(Error::shape(
            "affine",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("b len {}", b.len()),
        ));
    }
    let mut out = Vector::zeros(w.rows());
    w.matvec_into(x, &mut out);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate(x: &[f64], kind: Activation) -> Vector {
    match kind {
        Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Tanh => x.iter().map(|v| v.tanh()).collect(),
    }
}

pub fn softmax(x: &[f64]) -> Vector {
    let mut out = Vector::from(x);
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax computed as `x - max - ln Σ exp(x - max)`.
pub fn log_softmax(x: &[f64]) -> Vector {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position in the ChaCha keystream, as a decimal string (u128).
    pub word_pos: String,
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream derived from this stream's seed and `label`.
    /// Does not advance `self`.
    pub fn fork(&self, label: u64) -> RngStream {
        RngStream::new(splitmix64(
            self.seed ^ splitmix64(label.wrapping_add(0x5851_f42d)),
        ))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample an index from a discrete distribution.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("bad rng word position {:?}", state.word_pos)))?;
        let mut s = RngStream::new(state.seed);
        s.rng.set_word_pos(pos);
        Ok(s)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Matrix with entries i.i.d. uniform in `[-bound, bound]`.
pub fn init_uniform(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Result<Matrix> {
    if !(bound > 0.0) {
        return Err(Error::invalid(format!(
            "init bound must be positive, got {bound}"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn init_uniform_vector(len: usize, bound: f64, rng: &mut RngStream) -> Result<Vector> {
    Ok(init_uniform(1, len, bound, rng)?.data.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn affine_examples() {
        let y = affine(&Matrix::identity(2), &[3.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(&*y, &[3.0, -1.0]);
        let y = affine(&Matrix::zeros(2, 2), &[5.0, 7.0], &[1.0, 2.0]).unwrap();
        assert_eq!(&*y, &[1.0, 2.0]);
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let y = affine(&w, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(&*y, &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_operands() {
        let err = affine(&Matrix::zeros(2, 3), &[1.0, 2.0], &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("W 2x3") && msg.contains("x len 2"), "{msg}");
        let err = affine(&Matrix::zeros(2, 2), &[1.0, 2.0], &[0.0]).unwrap_err();
        assert!(err.to_string().contains("b len 1"));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(&*activate(&[0.0, 0.0], Activation::Sigmoid), &[0.5, 0.5]);
        assert_eq!(&*activate(&[0.0], Activation::Tanh), &[0.0]);
        let s = activate(&[3f64.ln()], Activation::Sigmoid);
        assert_abs_diff_eq!(s[0], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(&*softmax(&[0.0; 4]), &[0.25; 4]);
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-15);
        let s = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (got, want) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn init_uniform_is_deterministic() {
        let a = init_uniform(3, 4, 0.08, &mut RngStream::new(1)).unwrap();
        let b = init_uniform(3, 4, 0.08, &mut RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| v.abs() <= 0.08));
    }

    #[test]
    fn init_uniform_mean_near_zero() {
        let m = init_uniform(100, 100, 0.1, &mut RngStream::new(3)).unwrap();
        let mean = m.as_slice().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn init_uniform_degenerate_and_invalid() {
        let mut rng = RngStream::new(9);
        let before = rng.state();
        let m = init_uniform(0, 5, 0.1, &mut rng).unwrap();
        assert_eq!(m.shape(), (0, 5));
        assert_eq!(rng.state(), before);
        assert!(init_uniform(2, 2, 0.0, &mut rng).is_err());
        assert!(init_uniform(2, 2, -1.0, &mut rng).is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = RngStream::new(42);
        for _ in 0..17 {
            a.uniform();
        }
        let mut b = RngStream::from_state(&a.state()).unwrap();
        for _ in 0..10 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn fork_is_independent_of_parent_position() {
        let mut a = RngStream::new(5);
        let f1 = a.fork(1).uniform();
        a.uniform();
        assert_eq!(f1, a.fork(1).uniform());
        assert_ne!(a.fork(1).uniform(), a.fork(2).uniform());
    }

    #[test]
    fn add_at_b_matches_outer_sum() {
        let mut rng = RngStream::new(11);
        let a = init_uniform(5, 3, 1.0, &mut rng).unwrap();
        let b = init_uniform(5, 4, 1.0, &mut rng).unwrap();
        let mut fast = Matrix::zeros(3, 4);
        fast.add_at_b(&a, &b);
        let mut slow = Matrix::zeros(3, 4);
        for k in 0..5 {
            slow.add_outer(a.row(k), b.row(k));
        }
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..12),
            rot in 0usize..12,
        ) {
            let s = softmax(&xs);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let k = rot % xs.len();
            let mut rotated = xs.clone();
            rotated.rotate_left(k);
            let sr = softmax(&rotated);
            let mut expect = s.to_vec();
            expect.rotate_left(k);
            for (a, b) in sr.iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn affine_is_linear(
            seed in 0u64..1000,
            a in -3.0f64..3.0,
        ) {
            let mut rng = RngStream::new(seed);
            let w = init_uniform(4, 6, 1.0, &mut rng).unwrap();
            let x = init_uniform_vector(6, 1.0, &mut rng).unwrap();
            let y = init_uniform_vector(6, 1.0, &mut rng).unwrap();
            let zero = [0.0; 4];
            let combo: Vec<f64> = x.iter().zip(y.iter()).map(|(xi, yi)| a * xi + yi).collect();
            let lhs = affine(&w, &combo, &zero).unwrap();
            let fx = affine(&w, &x, &zero).unwrap();
            let fy = affine(&w, &y, &zero).unwrap();
            for i in 0..4 {
                prop_assert!((lhs[i] - (a * fx[i] + fy[i])).abs() <= 1e-12);
            }
        }
    }
}
