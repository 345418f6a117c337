//! Exact softmax attention, the exponential feature map, linear attention
//! state, and the feature-map distillation trainer.

mod distill;
mod feature_map;
mod linear;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::Vector;

pub use distill::{
    distill_feature_map, distillation_gradient, distillation_loss, refine, synthetic_teacher_corpus, Distilled,
    TeacherSequence,
};
pub use feature_map::{feature_map_apply, FeatureMapParams, DEFAULT_OVERFLOW_BOUND};
pub use linear::{linear_attention_forward, linear_state_update, LinearState};
pub use oracle::softmax_attention_oracle;

/// Head and feature dimensions plus the dot-product scale used by every
/// exponential attention weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub head_dim: usize,
    pub feature_dim: usize,
    pub scale: f64,
}

impl AttentionConfig {
    /// `D = 2d` and `scale = 1/√d`.
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_feature_dim(head_dim, 2 * head_dim)
    }

    pub fn with_feature_dim(head_dim: usize, feature_dim: usize) -> Result<Self> {
        let cfg = Self {
            head_dim,
            feature_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 {
            return Err(Error::InvalidConfig("head_dim must be positive".into()));
        }
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be positive and even, got {}",
                self.feature_dim
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// One key/value pair and its 1-based position in the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KVPair {
    pub key: Vector,
    pub value: Vector,
    pub index: usize,
}

impl KVPair {
    pub fn new(key: Vector, value: Vector, index: usize) -> Result<Self> {
        check_dim("kv pair", key.dim(), value.dim())?;
        if index == 0 {
            return Err(Error::InvalidConfig("pair indices start at 1".into()));
        }
        Ok(Self { key, value, index })
    }
}

/// Builds the pair list for a `(ks, vs)` stream, numbering from 1.
pub fn pairs_from_stream(ks: &[Vector], vs: &[Vector]) -> Result<Vec<KVPair>> {
    check_dim("key/value stream length", ks.len(), vs.len())?;
    ks.iter()
        .zip(vs)
        .enumerate()
        .map(|(i, (k, v))| KVPair::new(k.clone(), v.clone(), i + 1))
        .collect()
}
