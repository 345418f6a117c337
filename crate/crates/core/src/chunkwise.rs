//! Chunked prefill.
//!
//! The sequence is cut into chunks of `C` tokens. Every query in chunk `m`
//! reads, in one fused softmax pass, the causal prefix of its own chunk, all
//! pairs of chunks `m−1` and `m−2`, and the sparse cache residents. The
//! linear term uses the hidden state as it was when the chunk started, so
//! all queries of a chunk share it. Once the chunk's outputs are produced,
//! chunk `m−2` leaves the lookback: its pairs and the sparse residents are
//! scored by self-recall against the current hidden state, the top `λ`
//! stay, and the rest are absorbed.
//!
//! Because the hidden state is frozen per chunk, outputs differ slightly from
//! per-token decoding of the same stream.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, FeatureMapParams, KVPair, LinearState};
use crate::cache::{combine, Resident, SparseCache};
use crate::error::{check_dim, Error, Result};
use crate::numerics::Vector;
use crate::scoring::{self_recall_from_phi, Scorer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub chunk: usize,
    pub sparse: usize,
}

impl ChunkConfig {
    pub fn new(chunk: usize, sparse: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
        }
        Ok(Self { chunk, sparse })
    }
}

/// Full-rank pairs held at peak: two lookback chunks, the current chunk,
/// and the sparse cache, `3C + λ`.
pub fn effective_cache_size(config: &ChunkConfig) -> usize {
    3 * config.chunk + config.sparse
}

/// Size of a full KV cache at length `n` over [`effective_cache_size`].
pub fn compression_rate(n: usize, config: &ChunkConfig) -> f64 {
    n as f64 / effective_cache_size(config) as f64
}

/// Memory left after a prefill: hidden state, sparse cache, and the pairs
/// still inside the two-chunk lookback.
#[derive(Clone, Debug)]
pub struct PrefillState {
    attention: AttentionConfig,
    params: FeatureMapParams,
    config: ChunkConfig,
    linear: LinearState,
    sparse: SparseCache,
    lookback: VecDeque<Resident>,
    processed: usize,
    consumed: usize,
    peak_full_rank: usize,
}

impl PrefillState {
    pub fn new(attention: AttentionConfig, params: FeatureMapParams, config: ChunkConfig) -> Result<Self> {
        attention.validate()?;
        params.check_config(&attention)?;
        ChunkConfig::new(config.chunk, config.sparse)?;
        Ok(Self {
            linear: LinearState::new(attention.feature_dim, attention.head_dim),
            sparse: SparseCache::new(config.sparse),
            lookback: VecDeque::with_capacity(3 * config.chunk),
            attention,
            params,
            config,
            processed: 0,
            consumed: 0,
            peak_full_rank: 0,
        })
    }

    pub fn linear(&self) -> &LinearState {
        &self.linear
    }

    pub fn sparse(&self) -> &SparseCache {
        &self.sparse
    }

    /// Pairs still attended exactly through the lookback, oldest first.
    pub fn lookback(&self) -> impl Iterator<Item = &KVPair> {
        self.lookback.iter().map(|r| &r.pair)
    }

    /// Completed chunks.
    pub fn processed(&self) -> usize {
        self.processed
    }

    /// Tokens consumed.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    /// Largest number of full-rank pairs held at any point.
    pub fn peak_full_rank(&self) -> usize {
        self.peak_full_rank
    }

    pub fn conservation_holds(&self) -> bool {
        self.lookback.len() + self.sparse.len() + self.linear.count() == self.consumed
    }

    /// Runs one chunk. `qs`, `ks`, `vs` must hold at most `C` tokens, and
    /// only the final chunk of a sequence may be short.
    pub fn process_chunk(&mut self, qs: &[Vector], ks: &[Vector], vs: &[Vector]) -> Result<Vec<Vector>> {
        let len = qs.len();
        if len == 0 {
            return Err(Error::EmptyInput("prefill chunk"));
        }
        if len > self.config.chunk {
            return Err(Error::InvalidConfig(format!(
                "chunk of {len} tokens exceeds chunk size {}",
                self.config.chunk
            )));
        }
        if !self.consumed.is_multiple_of(self.config.chunk) {
            return Err(Error::InvalidConfig("a short chunk must be the last one".into()));
        }
        check_dim("chunk keys", len, ks.len())?;
        check_dim("chunk values", len, vs.len())?;
        let d = self.attention.head_dim;
        for ((q, k), v) in qs.iter().zip(ks).zip(vs) {
            check_dim("query", d, q.dim())?;
            check_dim("key", d, k.dim())?;
            check_dim("value", d, v.dim())?;
        }

        let start = self.consumed;
        for (offset, (k, v)) in ks.iter().zip(vs).enumerate() {
            let pair = KVPair::new(k.clone(), v.clone(), start + offset + 1)?;
            let phi_key = self.params.apply(k.as_slice())?.into_inner();
            self.lookback.push_back(Resident { pair, phi_key });
        }
        self.consumed += len;
        self.peak_full_rank = self.peak_full_rank.max(self.lookback.len() + self.sparse.len());
        let budget = effective_cache_size(&self.config);
        if self.peak_full_rank > budget {
            return Err(Error::BudgetExceeded(format!(
                "{} full-rank pairs against a budget of {budget}",
                self.peak_full_rank
            )));
        }

        let mut outputs = Vec::with_capacity(len);
        for (offset, q) in qs.iter().enumerate() {
            let position = start + offset + 1;
            let phi_q = self.params.apply(q.as_slice())?;
            let exact = self
                .sparse
                .entries()
                .iter()
                .map(|e| &e.pair)
                .chain(
                    self.lookback
                        .iter()
                        .map(|r| &r.pair)
                        .take_while(|p| p.index <= position),
                )
                .collect::<Vec<_>>();
            outputs.push(combine(
                &self.attention,
                &self.linear,
                phi_q.as_slice(),
                q.as_slice(),
                &exact,
            )?);
        }
        self.processed += 1;

        // Chunk m-2 leaves the lookback.
        let current = (self.consumed - 1) / self.config.chunk;
        let excess = self
            .lookback
            .iter()
            .take_while(|r| (r.pair.index - 1) / self.config.chunk + 2 <= current)
            .count();
        if excess > 0 {
            let evicted: Vec<(Resident, f64)> = self
                .lookback
                .drain(..excess)
                .map(|r| {
                    let s = self_recall_from_phi(&r.phi_key, r.pair.value.as_slice(), &self.linear);
                    (r, s)
                })
                .collect();
            self.sparse
                .select_and_absorb(evicted, &mut self.linear, Scorer::SelfRecall)?;
        }
        debug_assert!(self.conservation_holds());
        Ok(outputs)
    }

    /// Read-out for a query positioned after every consumed token.
    pub fn attend(&self, q: &Vector) -> Result<Vector> {
        if self.consumed == 0 {
            return Err(Error::EmptyInput("attend before any pair"));
        }
        check_dim("query", self.attention.head_dim, q.dim())?;
        let phi_q = self.params.apply(q.as_slice())?;
        let exact = self
            .sparse
            .entries()
            .iter()
            .map(|e| &e.pair)
            .chain(self.lookback.iter().map(|r| &r.pair))
            .collect::<Vec<_>>();
        combine(&self.attention, &self.linear, phi_q.as_slice(), q.as_slice(), &exact)
    }
}

/// Chunked prefill over a whole sequence.
pub fn prefill(
    qs: &[Vector],
    ks: &[Vector],
    vs: &[Vector],
    config: ChunkConfig,
    attention: AttentionConfig,
    params: FeatureMapParams,
) -> Result<(Vec<Vector>, PrefillState)> {
    if qs.is_empty() {
        return Err(Error::EmptyInput("prefill"));
    }
    check_dim("prefill keys", qs.len(), ks.len())?;
    check_dim("prefill values", qs.len(), vs.len())?;
    let mut state = PrefillState::new(attention, params, config)?;
    let mut outputs = Vec::with_capacity(qs.len());
    let c = config.chunk;
    for start in (0..qs.len()).step_by(c) {
        let end = (start + c).min(qs.len());
        outputs.extend(state.process_chunk(&qs[start..end], &ks[start..end], &vs[start..end])?);
    }
    Ok((outputs, state))
}
