//! Singular spectrum of the exponential kernel's Gram matrix
//! `G_ij = exp(x_iᵀx_j)`.
//!
//! A feature map into `R^D` yields `Ĝ_ij = φ(x_i)ᵀφ(x_j)` of rank at most
//! `D`, so by Eckart–Young `‖G − Ĝ‖²_F ≥ Σ_{i>D} σ_i²`. The study samples
//! Gaussian inputs and records that floor for every `D`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{FeatureMapParams, DEFAULT_OVERFLOW_BOUND};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot_slices, gaussian_sample, singular_values, Matrix, SeededRng, Vector};

pub fn gram_matrix(xs: &[Vector]) -> Result<Matrix> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::EmptyInput("gram matrix"));
    }
    let d = xs[0].dim();
    for x in xs {
        check_dim("gram input", d, x.dim())?;
    }
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let a = dot_slices(xs[i].as_slice(), xs[j].as_slice());
            if a.abs() > DEFAULT_OVERFLOW_BOUND {
                return Err(Error::FeatureOverflow {
                    magnitude: a.abs(),
                    bound: DEFAULT_OVERFLOW_BOUND,
                });
            }
            let e = a.exp();
            g.set(i, j, e);
            g.set(j, i, e);
        }
    }
    Ok(g)
}

/// `out[D] = Σ_{i>D} σ_i²` (1-based `i`) for `D = 0..=len`.
pub fn truncated_errors(singular_values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; singular_values.len() + 1];
    for k in (0..singular_values.len()).rev() {
        out[k] = out[k + 1] + singular_values[k] * singular_values[k];
    }
    out
}

/// Standard deviation of the sampled input entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleRule {
    /// `d^{-1/4}`, so `x_iᵀx_j` has unit variance like a `1/√d`-scaled
    /// query-key product.
    InverseFourthRootDim,
    Fixed(f64),
}

impl ScaleRule {
    pub fn std_dev(self, d: usize) -> f64 {
        match self {
            ScaleRule::InverseFourthRootDim => (d as f64).powf(-0.25),
            ScaleRule::Fixed(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramStudyResult {
    pub n: usize,
    pub d: usize,
    pub std_dev: f64,
    pub seed: u64,
    pub singular_values: Vec<f64>,
    /// Indexed by rank `D`; see [`truncated_errors`].
    pub truncated_errors: Vec<f64>,
}

impl GramStudyResult {
    /// Floor at rank `rank`; zero beyond the matrix size.
    pub fn floor(&self, rank: usize) -> f64 {
        self.truncated_errors.get(rank).copied().unwrap_or(0.0)
    }

    /// `self.floor(D) ≥ other.floor(D)` for every `D ≤ max_rank`.
    pub fn dominates(&self, other: &GramStudyResult, max_rank: usize) -> bool {
        (0..=max_rank).all(|r| self.floor(r) >= other.floor(r))
    }
}

/// One `(n, d)` cell. Inputs are the first `n` draws of a stream keyed by
/// `(seed, d)`, so a cell's result does not depend on which other cells are
/// studied, and for fixed `d` a smaller cell's Gram matrix is a principal
/// submatrix of a larger cell's.
pub fn gram_study_cell(n: usize, d: usize, rule: ScaleRule, seed: u64) -> Result<GramStudyResult> {
    let xs = study_inputs(n, d, rule, seed)?;
    let g = gram_matrix(&xs)?;
    let sv = singular_values(&g)?;
    Ok(GramStudyResult {
        n,
        d,
        std_dev: rule.std_dev(d),
        seed,
        truncated_errors: truncated_errors(&sv),
        singular_values: sv,
    })
}

/// The inputs [`gram_study_cell`] samples for `(n, d)`.
pub fn study_inputs(n: usize, d: usize, rule: ScaleRule, seed: u64) -> Result<Vec<Vector>> {
    let mut rng = SeededRng::child(seed, d as u64);
    gaussian_sample(&mut rng, n, d, rule.std_dev(d))
}

/// Every `(n, d)` combination, in `n`-major order.
pub fn rank_study(n_list: &[usize], d_list: &[usize], rule: ScaleRule, seed: u64) -> Result<Vec<GramStudyResult>> {
    if n_list.is_empty() || d_list.is_empty() {
        return Err(Error::EmptyInput("rank study grid"));
    }
    let cells: Vec<(usize, usize)> = n_list
        .iter()
        .flat_map(|&n| d_list.iter().map(move |&d| (n, d)))
        .collect();
    cells
        .into_par_iter()
        .map(|(n, d)| gram_study_cell(n, d, rule, seed))
        .collect()
}

/// `‖G − Ĝ‖²_F` with `Ĝ_ij = φ(x_i)ᵀφ(x_j)`.
pub fn approximation_error(params: &FeatureMapParams, xs: &[Vector]) -> Result<f64> {
    let g = gram_matrix(xs)?;
    let phis = xs
        .iter()
        .map(|x| params.apply(x.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let mut err = 0.0;
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            let approx = dot_slices(phis[i].as_slice(), phis[j].as_slice());
            let diff = g.get(i, j) - approx;
            err += diff * diff;
        }
    }
    Ok(err)
}
