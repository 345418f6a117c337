use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot_slices, Matrix, Vector};

/// Recurrent linear attention memory: `H = Σ φ(k) vᵀ` (`D × d`) and the
/// normalizer `s = Σ φ(k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearState {
    h: Matrix,
    s: Vec<f64>,
    count: usize,
}

impl LinearState {
    pub fn new(feature_dim: usize, head_dim: usize) -> Self {
        Self {
            h: Matrix::zeros(feature_dim, head_dim),
            s: vec![0.0; feature_dim],
            count: 0,
        }
    }

    pub(crate) fn from_parts(h: Matrix, s: Vec<f64>, count: usize) -> Result<Self> {
        check_dim("normalizer", h.rows(), s.len())?;
        if !h.is_finite() || s.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("linear state"));
        }
        Ok(Self { h, s, count })
    }

    pub fn hidden(&self) -> &Matrix {
        &self.h
    }

    pub fn normalizer(&self) -> &[f64] {
        &self.s
    }

    /// Number of pairs absorbed so far.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn feature_dim(&self) -> usize {
        self.h.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.h.cols()
    }

    /// `H += φk vᵀ`, `s += φk`.
    pub fn absorb(&mut self, phi_k: &[f64], v: &[f64]) -> Result<()> {
        check_dim("absorbed feature", self.h.rows(), phi_k.len())?;
        check_dim("absorbed value", self.h.cols(), v.len())?;
        self.h.add_outer(phi_k, v)?;
        for (s, p) in self.s.iter_mut().zip(phi_k) {
            *s += p;
        }
        self.count += 1;
        Ok(())
    }

    /// Unnormalized read-out `(φqᵀH, φqᵀs)`.
    pub(crate) fn read(&self, phi_q: &[f64]) -> (Vec<f64>, f64) {
        let num = self.h.left_mul(phi_q).expect("feature dimension checked by caller");
        (num, dot_slices(phi_q, &self.s))
    }

    /// `(φqᵀH / φqᵀs)ᵀ`.
    pub fn forward(&self, phi_q: &[f64]) -> Result<Vec<f64>> {
        check_dim("query feature", self.h.rows(), phi_q.len())?;
        let (mut num, den) = self.read(phi_q);
        if self.count == 0 || !(den > 0.0) {
            return Err(Error::NonPositiveDenominator(den));
        }
        for x in &mut num {
            *x /= den;
        }
        Ok(num)
    }
}

pub fn linear_state_update(mut state: LinearState, phi_k: &Vector, v: &Vector) -> Result<LinearState> {
    state.absorb(phi_k.as_slice(), v.as_slice())?;
    Ok(state)
}

pub fn linear_attention_forward(state: &LinearState, phi_q: &Vector) -> Result<Vector> {
    state.forward(phi_q.as_slice()).map(Vector::from_raw)
}
