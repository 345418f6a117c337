//! Scores that decide which evicted pairs stay in full rank.
//!
//! The self-recall score measures how badly the hidden state predicts a
//! pair's own value. The three alternatives measure kernel approximation
//! error over the queries a key saw while it sat in the sliding window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{FeatureMapParams, LinearState};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot_slices, l2_distance, norm, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    /// `‖φ(k)ᵀH / φ(k)ᵀs − v‖₂`, re-evaluated every step.
    SelfRecall,
    /// `Σ_t (exp(s·q_tᵀk) − φ(q_t)ᵀφ(k))²`
    AttnErrSq,
    /// `Σ_t |exp(s·q_tᵀk) − φ(q_t)ᵀφ(k)|`
    AttnErrAbs,
    /// `Σ_t φ(q_t)ᵀφ(k) / exp(s·q_tᵀk)`
    Overestimate,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [
        Scorer::SelfRecall,
        Scorer::AttnErrSq,
        Scorer::AttnErrAbs,
        Scorer::Overestimate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::SelfRecall => "self-recall",
            Scorer::AttnErrSq => "attn-err-sq",
            Scorer::AttnErrAbs => "attn-err-abs",
            Scorer::Overestimate => "overestimate",
        }
    }

    /// Whether scores depend on the hidden state and must be refreshed after
    /// every absorption. The query-based scores are fixed at eviction time.
    pub fn rescores(self) -> bool {
        matches!(self, Scorer::SelfRecall)
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scorer {s:?}")))
    }
}

/// Self-recall error of `(key, value)` against a linear state.
///
/// An empty state predicts nothing; the score is then `‖v‖₂`.
pub fn self_recall_score(params: &FeatureMapParams, key: &Vector, value: &Vector, linear: &LinearState) -> Result<f64> {
    check_dim("scored value", linear.head_dim(), value.dim())?;
    let phi = params.apply(key.as_slice())?;
    Ok(self_recall_from_phi(phi.as_slice(), value.as_slice(), linear))
}

pub(crate) fn self_recall_from_phi(phi_k: &[f64], value: &[f64], linear: &LinearState) -> f64 {
    if linear.count() == 0 {
        return norm(value);
    }
    let (num, den) = linear.read(phi_k);
    let pred: Vec<f64> = num.iter().map(|x| x / den).collect();
    l2_distance(&pred, value)
}

/// Folds `(exp kernel, feature kernel)` pairs into an alternative score.
pub fn aggregate_alt_score(kind: Scorer, terms: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    terms
        .into_iter()
        .map(|(exact, approx)| match kind {
            Scorer::AttnErrSq => (exact - approx) * (exact - approx),
            Scorer::AttnErrAbs => (exact - approx).abs(),
            Scorer::Overestimate => approx / exact,
            Scorer::SelfRecall => unreachable!("self-recall is not a query-based score"),
        })
        .sum()
}

/// Query-based score of `key` over the queries it co-resided with.
/// No queries gives 0.
pub fn alt_score(kind: Scorer, params: &FeatureMapParams, key: &Vector, queries: &[Vector], scale: f64) -> Result<f64> {
    if kind == Scorer::SelfRecall {
        return Err(Error::InvalidConfig("self-recall needs a linear state".into()));
    }
    let phi_k = params.apply(key.as_slice())?;
    alt_score_with_phi(kind, params, key.as_slice(), phi_k.as_slice(), queries, scale)
}

pub(crate) fn alt_score_with_phi(
    kind: Scorer,
    params: &FeatureMapParams,
    key: &[f64],
    phi_k: &[f64],
    queries: &[Vector],
    scale: f64,
) -> Result<f64> {
    let mut terms = Vec::with_capacity(queries.len());
    for q in queries {
        check_dim("co-resident query", key.len(), q.dim())?;
        let exact = (scale * dot_slices(q.as_slice(), key)).exp();
        let approx = dot_slices(params.apply(q.as_slice())?.as_slice(), phi_k);
        terms.push((exact, approx));
    }
    Ok(aggregate_alt_score(kind, terms))
}

pub fn alt_score_attnerr_sq(params: &FeatureMapParams, key: &Vector, queries: &[Vector], scale: f64) -> Result<f64> {
    alt_score(Scorer::AttnErrSq, params, key, queries, scale)
}

pub fn alt_score_attnerr_abs(params: &FeatureMapParams, key: &Vector, queries: &[Vector], scale: f64) -> Result<f64> {
    alt_score(Scorer::AttnErrAbs, params, key, queries, scale)
}

pub fn alt_score_overestimate(params: &FeatureMapParams, key: &Vector, queries: &[Vector], scale: f64) -> Result<f64> {
    alt_score(Scorer::Overestimate, params, key, queries, scale)
}
