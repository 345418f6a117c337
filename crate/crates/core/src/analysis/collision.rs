//! Memory-collision matrices.
//!
//! Row `i` is the state after consuming pair `i + 1`; column `j` is pair
//! `j + 1`. A cell holds the self-recall error of that pair against the
//! hidden state at that time when the pair has been absorbed, an explicit
//! zero while the pair is still held in full rank (window or sparse cache),
//! and nothing when the pair has not arrived yet (`j > i`).
//!
//! The relative variant subtracts, for each absorbed pair, the error it had
//! in the row where it was absorbed.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, FeatureMapParams, KVPair};
use crate::cache::{CacheConfig, LoLAState};
use crate::error::{Error, Result};
use crate::scoring::{self_recall_from_phi, Scorer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum MemoryPolicy {
    LinearOnly,
    WindowOnly { window: usize },
    Lola { window: usize, sparse: usize },
}

impl MemoryPolicy {
    pub fn cache_config(self) -> CacheConfig {
        match self {
            MemoryPolicy::LinearOnly => CacheConfig::new(0, 0),
            MemoryPolicy::WindowOnly { window } => CacheConfig::new(window, 0),
            MemoryPolicy::Lola { window, sparse } => CacheConfig::new(window, sparse),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MemoryPolicy::LinearOnly => "linear-only",
            MemoryPolicy::WindowOnly { .. } => "window-only",
            MemoryPolicy::Lola { .. } => "lola",
        }
    }
}

impl fmt::Display for MemoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Future,
    Window,
    Sparse,
    Absorbed(f64),
}

impl Cell {
    /// Numeric value as rendered: `None` for pairs not yet seen, zero for
    /// full-rank residents.
    pub fn value(self) -> Option<f64> {
        match self {
            Cell::Future => None,
            Cell::Window | Cell::Sparse => Some(0.0),
            Cell::Absorbed(e) => Some(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionMatrix {
    pub policy: MemoryPolicy,
    pub relative: bool,
    steps: usize,
    cells: Vec<Cell>,
}

impl CollisionMatrix {
    fn new(policy: MemoryPolicy, relative: bool, steps: usize) -> Self {
        Self {
            policy,
            relative,
            steps,
            cells: vec![Cell::Future; steps * steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `row`, `col` are 0-based.
    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.steps + col]
    }

    fn set(&mut self, row: usize, col: usize, cell: Cell) {
        self.cells[row * self.steps + col] = cell;
    }

    /// Mean over absorbed cells; zero when nothing was absorbed.
    pub fn mean_absorbed(&self) -> f64 {
        let (sum, count) = self.cells.iter().fold((0.0, 0usize), |(s, c), cell| match cell {
            Cell::Absorbed(e) => (s + e, c + 1),
            _ => (s, c),
        });
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Mean over every pair seen so far (`j ≤ i`), with window and sparse
    /// residents contributing their zero error.
    pub fn mean_seen(&self) -> f64 {
        let (sum, count) = self
            .cells
            .iter()
            .filter_map(|c| c.value())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Mean of absorbed cells within columns `cols`.
    pub fn mean_absorbed_in_columns(&self, cols: std::ops::Range<usize>) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..self.steps {
            for c in cols.clone() {
                if let Cell::Absorbed(e) = self.cell(r, c) {
                    sum += e;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    pub fn absorbed_cells(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c, Cell::Absorbed(_))).count()
    }

    /// CSV with a `t` column of 1-based times and one column per pair index.
    /// Not-yet-seen cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.steps).map(|j| j.to_string()));
        w.write_record(&header)?;
        for r in 0..self.steps {
            let mut row = vec![(r + 1).to_string()];
            row.extend((0..self.steps).map(|c| match self.cell(r, c).value() {
                Some(v) => v.to_string(),
                None => String::new(),
            }));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `policy` over `pairs` and returns the absolute and relative matrices.
pub fn collision_matrices(
    pairs: &[KVPair],
    policy: MemoryPolicy,
    attention: AttentionConfig,
    params: &FeatureMapParams,
) -> Result<(CollisionMatrix, CollisionMatrix)> {
    let steps = pairs.len();
    if steps == 0 {
        return Err(Error::EmptyInput("collision stream"));
    }
    let mut state = LoLAState::new(attention, params.clone(), policy.cache_config(), Scorer::SelfRecall)?;
    let mut abs = CollisionMatrix::new(policy, false, steps);
    let mut rel = CollisionMatrix::new(policy, true, steps);
    // (column, φ(k), error at absorption)
    let mut absorbed: Vec<(usize, Vec<f64>, Option<f64>)> = Vec::new();

    for (row, pair) in pairs.iter().enumerate() {
        let report = state.step_update(pair.clone())?;
        for (p, _) in &report.selection.absorbed {
            let phi = params.apply(p.key.as_slice())?.into_inner();
            absorbed.push((p.index - 1, phi, None));
        }
        for p in state.window().pairs() {
            abs.set(row, p.index - 1, Cell::Window);
            rel.set(row, p.index - 1, Cell::Window);
        }
        for e in state.sparse().entries() {
            abs.set(row, e.pair.index - 1, Cell::Sparse);
            rel.set(row, e.pair.index - 1, Cell::Sparse);
        }
        for (col, phi, first) in &mut absorbed {
            let err = self_recall_from_phi(phi, pairs[*col].value.as_slice(), state.linear());
            let base = *first.get_or_insert(err);
            abs.set(row, *col, Cell::Absorbed(err));
            rel.set(row, *col, Cell::Absorbed(err - base));
        }
    }
    Ok((abs, rel))
}

pub fn collision_matrix(
    pairs: &[KVPair],
    policy: MemoryPolicy,
    attention: AttentionConfig,
    params: &FeatureMapParams,
) -> Result<CollisionMatrix> {
    collision_matrices(pairs, policy, attention, params).map(|(a, _)| a)
}

pub fn relative_collision_matrix(
    pairs: &[KVPair],
    policy: MemoryPolicy,
    attention: AttentionConfig,
    params: &FeatureMapParams,
) -> Result<CollisionMatrix> {
    collision_matrices(pairs, policy, attention, params).map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::pairs_from_stream;
    use crate::numerics::{gaussian_sample, SeededRng};

    fn stream(n: usize, d: usize, seed: u64) -> (AttentionConfig, FeatureMapParams, Vec<KVPair>) {
        let cfg = AttentionConfig::new(d).unwrap();
        let mut rng = SeededRng::new(seed);
        let p = FeatureMapParams::init(&mut rng, &cfg).unwrap();
        let ks = gaussian_sample(&mut rng, n, d, 1.0).unwrap();
        let vs = gaussian_sample(&mut rng, n, d, 1.0).unwrap();
        (cfg, p, pairs_from_stream(&ks, &vs).unwrap())
    }

    #[test]
    fn window_covering_stream_has_no_absorbed_cells() {
        let (cfg, p, pairs) = stream(10, 3, 1);
        let m = collision_matrix(&pairs, MemoryPolicy::WindowOnly { window: 10 }, cfg, &p).unwrap();
        assert_eq!(m.absorbed_cells(), 0);
        for r in 0..10 {
            for c in 0..10 {
                assert_eq!(m.cell(r, c).value(), if c <= r { Some(0.0) } else { None });
            }
        }
    }

    #[test]
    fn single_pair_linear_only_is_exact() {
        let (cfg, p, pairs) = stream(1, 3, 2);
        let m = collision_matrix(&pairs, MemoryPolicy::LinearOnly, cfg, &p).unwrap();
        match m.cell(0, 0) {
            Cell::Absorbed(e) => assert!(e < 1e-10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relative_diagonal_at_absorption_is_zero() {
        let (cfg, p, pairs) = stream(30, 3, 3);
        let policy = MemoryPolicy::Lola { window: 4, sparse: 3 };
        let (abs, rel) = collision_matrices(&pairs, policy, cfg, &p).unwrap();
        for c in 0..30 {
            if let Some(r) = (0..30).find(|&r| matches!(abs.cell(r, c), Cell::Absorbed(_))) {
                assert_eq!(rel.cell(r, c), Cell::Absorbed(0.0));
            }
        }
    }

    #[test]
    fn csv_layout() {
        let (cfg, p, pairs) = stream(3, 2, 4);
        let m = collision_matrix(&pairs, MemoryPolicy::WindowOnly { window: 1 }, cfg, &p).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,1,2,3");
        assert_eq!(lines[1], "1,0,,");
        assert!(lines[2].starts_with("2,") && lines[2].ends_with(",0,"));
    }
}
