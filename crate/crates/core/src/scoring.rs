//! Base token-scoring policies over a bounded cache.
//!
//! Every policy produces one non-negative score per cached token; the engine
//! retains the top-b and drops the rest. Score vectors always cover exactly
//! the current candidate set, in cache order (which is original-position
//! order), and shrink in lockstep with the cache when tokens are evicted.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionRow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Accumulated attention mass per token across all queries so far.
    H2o,
    /// The most recent query's attention row.
    Tova,
    /// Column sums over a window of recent rows, smoothed by a 1-D max-pool.
    SnapKv,
    /// Positional rule: first `sink_count` original positions plus a recency
    /// window score 1, everything else 0.
    Sink,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::H2o => "h2o",
            PolicyKind::Tova => "tova",
            PolicyKind::SnapKv => "snapkv",
            PolicyKind::Sink => "sink",
        }
    }

    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::H2o,
        PolicyKind::Tova,
        PolicyKind::SnapKv,
        PolicyKind::Sink,
    ];
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "h2o" => Ok(PolicyKind::H2o),
            "tova" => Ok(PolicyKind::Tova),
            "snapkv" => Ok(PolicyKind::SnapKv),
            "sink" => Ok(PolicyKind::Sink),
            other => Err(format!(
                "unknown policy {other:?} (expected h2o, tova, snapkv, or sink)"
            )),
        }
    }
}

/// Knobs for the positional and windowed policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyParams {
    /// Sink policy: original positions below this always score 1.
    pub sink_count: usize,
    /// Sink policy: this many most recent cache slots score 1.
    pub recent_window: usize,
    /// SnapKV: number of recent rows summed.
    pub snap_window: usize,
    /// SnapKV: max-pool kernel width; must be odd.
    pub snap_kernel: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            sink_count: 4,
            recent_window: 60,
            snap_window: 8,
            snap_kernel: 3,
        }
    }
}

impl PolicyParams {
    /// Sink defaults sized to a budget: 4 sink slots, the rest recency.
    pub fn for_budget(budget: usize) -> Self {
        let sink_count = 4.min(budget);
        PolicyParams {
            sink_count,
            recent_window: (budget - sink_count).max(1),
            ..PolicyParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snap_window == 0 {
            return Err(Error::InvalidConfig("snap_window must be at least 1".into()));
        }
        if self.snap_kernel == 0 || self.snap_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "snap_kernel must be odd and at least 1, got {}",
                self.snap_kernel
            )));
        }
        Ok(())
    }
}

/// Running per-head policy state. Only the fields for the active kind are
/// populated; all of them shrink with the cache on eviction.
#[derive(Debug, Clone)]
pub struct PolicyState {
    kind: PolicyKind,
    params: PolicyParams,
    /// H2O: per-token accumulated attention mass, zero-extended as the cache
    /// grows and filtered down when tokens are dropped.
    accumulated: Vec<f64>,
    /// TOVA: the latest row seen.
    last_row: Option<Vec<f64>>,
    /// SnapKV: ring of the last `snap_window` rows.
    window: VecDeque<Vec<f64>>,
}

impl PolicyState {
    pub fn new(kind: PolicyKind, params: PolicyParams) -> Self {
        PolicyState {
            kind,
            params,
            accumulated: Vec::new(),
            last_row: None,
            window: VecDeque::new(),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn params(&self) -> PolicyParams {
        self.params
    }

    /// Folds a block's attention rows into the state, in order. Rows arrive
    /// causally: each covers every token its query could see, so lengths are
    /// non-decreasing and the last row spans the whole candidate set.
    pub fn accumulate_rows(&mut self, rows: &[AttentionRow]) -> Result<()> {
        match self.kind {
            PolicyKind::H2o => {
                for row in rows {
                    let w = row.weights();
                    if w.len() < self.accumulated.len() {
                        return Err(Error::RowLengthMismatch {
                            row: w.len(),
                            state: self.accumulated.len(),
                        });
                    }
                    self.accumulated.resize(w.len(), 0.0);
                    for (acc, &x) in self.accumulated.iter_mut().zip(w) {
                        *acc += x;
                    }
                }
            }
            PolicyKind::Tova => {
                if let Some(row) = rows.last() {
                    self.last_row = Some(row.weights().to_vec());
                }
            }
            PolicyKind::SnapKv => {
                for row in rows {
                    self.window.push_back(row.weights().to_vec());
                    while self.window.len() > self.params.snap_window {
                        self.window.pop_front();
                    }
                }
            }
            PolicyKind::Sink => {}
        }
        Ok(())
    }

    /// Keeps only the entries at `keep` (ascending candidate indices).
    /// Windowed rows shorter than the candidate set are padded with 0 where
    /// a kept index postdates the row.
    pub fn retain(&mut self, keep: &[usize]) {
        match self.kind {
            PolicyKind::H2o => {
                self.accumulated = select_padded(&self.accumulated, keep);
            }
            PolicyKind::Tova => {
                if let Some(row) = &self.last_row {
                    self.last_row = Some(select_padded(row, keep));
                }
            }
            PolicyKind::SnapKv => {
                for row in self.window.iter_mut() {
                    *row = select_padded(row, keep);
                }
            }
            PolicyKind::Sink => {}
        }
    }
}

fn select_padded(row: &[f64], keep: &[usize]) -> Vec<f64> {
    keep.iter()
        .map(|&i| if i < row.len() { row[i] } else { 0.0 })
        .collect()
}

/// A score per cached token. `normalized` records whether the vector is
/// already a distribution (sums to 1), which lets downstream transforms skip
/// a renormalization that would otherwise perturb the values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub normalized: bool,
}

fn expect_kind(state: &PolicyState, want: PolicyKind) -> Result<()> {
    if state.kind() != want {
        return Err(Error::PolicyKindMismatch {
            expected: want.as_str(),
            actual: state.kind().as_str(),
        });
    }
    Ok(())
}

/// H2O scores: the accumulated attention mass per cached token.
pub fn score_h2o(state: &PolicyState) -> Result<ScoreVector> {
    expect_kind(state, PolicyKind::H2o)?;
    Ok(ScoreVector {
        scores: state.accumulated.clone(),
        normalized: false,
    })
}

/// TOVA scores: the most recent query's attention row, which is already a
/// distribution over the candidate set.
pub fn score_tova(state: &PolicyState) -> Result<ScoreVector> {
    expect_kind(state, PolicyKind::Tova)?;
    let row = state.last_row.clone().ok_or(Error::NoRowsObserved)?;
    Ok(ScoreVector {
        scores: row,
        normalized: true,
    })
}

/// SnapKV-style scores: column sums over the recent-row window (shorter rows
/// count as 0 for tokens they predate), then a centered edge-clamped 1-D
/// max-pool of width `snap_kernel`.
pub fn score_snapkv(state: &PolicyState) -> Result<ScoreVector> {
    expect_kind(state, PolicyKind::SnapKv)?;
    state.params.validate()?;
    if state.window.is_empty() {
        return Err(Error::NoRowsObserved);
    }
    let len = state.window.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; len];
    for row in &state.window {
        for (i, &w) in row.iter().enumerate() {
            sums[i] += w;
        }
    }
    Ok(ScoreVector {
        scores: max_pool_1d(&sums, state.params.snap_kernel),
        normalized: false,
    })
}

fn max_pool_1d(xs: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            let mut best = f64::NEG_INFINITY;
            for &x in &xs[lo..hi] {
                if x > best {
                    best = x;
                }
            }
            best
        })
        .collect()
}

/// Sink scores: 1 for tokens whose original position is below `sink_count`
/// and for the last `recent_window` cache slots, 0 for everything else.
pub fn score_sink(positions: &[usize], sink_count: usize, recent_window: usize) -> ScoreVector {
    let n = positions.len();
    let recent_start = n.saturating_sub(recent_window);
    let scores = positions
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            if pos < sink_count || i >= recent_start {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    ScoreVector {
        scores,
        normalized: false,
    }
}

/// Divides by the total so the scores form a distribution. Negative entries
/// are rejected; an all-zero vector has no direction to keep and is an error.
pub fn normalize_scores(scores: &ScoreVector) -> Result<ScoreVector> {
    let mut sum = 0.0;
    for (i, &s) in scores.scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite("scores"));
        }
        if s < 0.0 {
            return Err(Error::NegativeScore { index: i, value: s });
        }
        sum += s;
    }
    if sum == 0.0 {
        return Err(Error::ZeroScoreSum);
    }
    Ok(ScoreVector {
        scores: scores.scores.iter().map(|s| s / sum).collect(),
        normalized: true,
    })
}

/// Indices of the `b` highest-scoring candidates, in their original order.
/// Ties go to the more recent candidate (higher index). With `n <= b` every
/// index is retained.
pub fn top_b_retain(scores: &[f64], b: usize) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::ZeroBudget);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let n = scores.len();
    if n <= b {
        return Ok((0..n).collect());
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Highest score first; equal scores resolve to the higher index.
    order.sort_unstable_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then_with(|| j.cmp(&i))
    });
    let mut kept: Vec<usize> = order[..b].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
