//! Dense linear algebra and seeded randomness shared by the rest of the crate.
//!
//! Everything is `f64`. Self-recall errors are small differences between
//! large accumulated sums, which drift visibly in single precision.
//!
//! Randomness comes from [`SeededRng`], a ChaCha8 stream keyed by a 64-bit
//! seed. ChaCha output is specified independently of platform and word size,
//! so a given seed reproduces the same samples everywhere. Normal deviates
//! use the ziggurat sampler from `rand_distr`.

use std::fmt;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A dense real vector with finite entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Internal constructor for results of finite arithmetic.
    pub(crate) fn from_raw(entries: Vec<f64>) -> Self {
        debug_assert!(entries.iter().all(|x| x.is_finite()));
        Self(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// A dense row-major matrix with finite entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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

    /// Builds a matrix from row-major data.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("matrix"));
        }
        check_dim("matrix data", rows * cols, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput("matrix rows"))?;
        let cols = first.dim();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("matrix row", cols, r.dim())?;
            data.extend_from_slice(r.as_slice());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::from_row_major(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) -> Result<()> {
        check_dim("outer product rows", self.rows, a.len())?;
        check_dim("outer product cols", self.cols, b.len())?;
        for (i, ai) in a.iter().enumerate() {
            if *ai == 0.0 {
                continue;
            }
            for (m, bj) in self.row_mut(i).iter_mut().zip(b) {
                *m += ai * bj;
            }
        }
        Ok(())
    }

    /// Returns `xᵀ M` for a vector `x` of length `rows`.
    pub fn left_mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("vector-matrix product", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += xi * m;
            }
        }
        Ok(out)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_list();
        for r in 0..self.rows {
            list.entry(&self.row(r));
        }
        list.finish()
    }
}

/// Deterministic random stream: ChaCha8 keyed by a 64-bit seed.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a sub-task (trial, experiment cell, ...).
    ///
    /// Uses ChaCha's 64-bit stream id, so children of one seed never overlap.
    pub fn child(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, std_dev: f64) -> f64 {
        std_dev * self.standard_normal()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// `amount` distinct indices from `0..n`, in sampling order.
    pub fn distinct(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, amount).into_vec()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}

pub fn dot(a: &Vector, b: &Vector) -> Result<f64> {
    check_dim("dot", a.dim(), b.dim())?;
    Ok(dot_slices(a.as_slice(), b.as_slice()))
}

#[inline]
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot_slices(a, a).sqrt()
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Returns `m + a bᵀ`.
pub fn outer_accumulate(mut m: Matrix, a: &Vector, b: &Vector) -> Result<Matrix> {
    m.add_outer(a.as_slice(), b.as_slice())?;
    Ok(m)
}

/// Singular values in descending order; `min(rows, cols)` of them.
///
/// Symmetric input goes through a symmetric eigendecomposition (singular
/// values are the absolute eigenvalues), which is several times cheaper than
/// a general SVD for the Gram matrices this crate studies.
pub fn singular_values(g: &Matrix) -> Result<Vec<f64>> {
    if !g.is_finite() {
        return Err(Error::NonFinite("singular_values input"));
    }
    let dm = nalgebra::DMatrix::from_row_slice(g.rows(), g.cols(), g.as_slice());
    let mut values: Vec<f64> = if is_symmetric(g) {
        dm.symmetric_eigenvalues().iter().map(|x| x.abs()).collect()
    } else {
        dm.singular_values().iter().copied().collect()
    };
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

fn is_symmetric(g: &Matrix) -> bool {
    if g.rows() != g.cols() {
        return false;
    }
    (0..g.rows()).all(|i| (0..i).all(|j| g.get(i, j) == g.get(j, i)))
}

/// `n` vectors of dimension `d` with i.i.d. `N(0, scale²)` entries.
///
/// `scale` is the standard deviation.
pub fn gaussian_sample(rng: &mut SeededRng, n: usize, d: usize, scale: f64) -> Result<Vec<Vector>> {
    if n == 0 {
        return Err(Error::InvalidConfig("gaussian_sample needs n >= 1".into()));
    }
    if d == 0 {
        return Err(Error::InvalidConfig("gaussian_sample needs d >= 1".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "gaussian_sample scale must be positive, got {scale}"
        )));
    }
    Ok((0..n)
        .map(|_| Vector::from_raw((0..d).map(|_| rng.normal(scale)).collect()))
        .collect())
}
