use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AttentionConfig;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot_slices, Matrix, SeededRng, Vector};

/// Largest admissible `|wᵢᵀx|` before exponentiation.
pub const DEFAULT_OVERFLOW_BOUND: f64 = 30.0;

/// Learnable weights of the map
/// `φ(x) = [exp(w₁ᵀx) … exp(w_{D/2}ᵀx), exp(−w₁ᵀx) … exp(−w_{D/2}ᵀx)]`.
///
/// Stored as a `(D/2) × d` matrix, one weight vector per row.
///
/// JSON layout:
///
/// ```text
/// { "head_dim": d, "feature_dim": D, "overflow_bound": 30.0,
///   "weights": [w₁[0], w₁[1], …, w_{D/2}[d-1]] }   // row-major
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapParams {
    weights: Matrix,
    overflow_bound: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMapFile {
    head_dim: usize,
    feature_dim: usize,
    overflow_bound: f64,
    weights: Vec<f64>,
}

impl FeatureMapParams {
    /// Weights drawn i.i.d. from `N(0, 1/d)`.
    pub fn init(rng: &mut SeededRng, config: &AttentionConfig) -> Result<Self> {
        config.validate()?;
        let d = config.head_dim;
        let half = config.feature_dim / 2;
        let std = 1.0 / (d as f64).sqrt();
        let data = (0..half * d).map(|_| rng.normal(std)).collect();
        Self::from_weights(Matrix::from_row_major(half, d, data)?)
    }

    pub fn from_weights(weights: Matrix) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::NonFinite("feature map weights"));
        }
        Ok(Self {
            weights,
            overflow_bound: DEFAULT_OVERFLOW_BOUND,
        })
    }

    pub fn with_overflow_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "overflow bound must be positive, got {bound}"
            )));
        }
        self.overflow_bound = bound;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn overflow_bound(&self) -> f64 {
        self.overflow_bound
    }

    pub fn check_config(&self, config: &AttentionConfig) -> Result<()> {
        check_dim("feature map head_dim", config.head_dim, self.head_dim())?;
        check_dim("feature map feature_dim", config.feature_dim, self.feature_dim())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vector> {
        let mut out = vec![0.0; self.feature_dim()];
        self.apply_into(x, &mut out)?;
        Ok(Vector::from_raw(out))
    }

    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim("feature map input", self.head_dim(), x.len())?;
        let half = self.weights.rows();
        for i in 0..half {
            let a = dot_slices(self.weights.row(i), x);
            if !(a.abs() <= self.overflow_bound) {
                return Err(Error::FeatureOverflow {
                    magnitude: a.abs(),
                    bound: self.overflow_bound,
                });
            }
            out[i] = a.exp();
            out[i + half] = (-a).exp();
        }
        Ok(())
    }

    /// `φ(q)ᵀφ(k)`.
    pub fn kernel(&self, q: &[f64], k: &[f64]) -> Result<f64> {
        let pq = self.apply(q)?;
        let pk = self.apply(k)?;
        Ok(dot_slices(pq.as_slice(), pk.as_slice()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = FeatureMapFile {
            head_dim: self.head_dim(),
            feature_dim: self.feature_dim(),
            overflow_bound: self.overflow_bound,
            weights: self.weights.as_slice().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FeatureMapFile = serde_json::from_str(text)?;
        if !file.feature_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be even, got {}",
                file.feature_dim
            )));
        }
        let weights = Matrix::from_row_major(file.feature_dim / 2, file.head_dim, file.weights)?;
        Self::from_weights(weights)?.with_overflow_bound(file.overflow_bound)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn feature_map_apply(params: &FeatureMapParams, x: &Vector) -> Result<Vector> {
    params.apply(x.as_slice())
}
