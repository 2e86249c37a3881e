//! Token eviction engine for bounded KV caches.
//!
//! The crate splits into small layers: `numerics` holds the f64 matrix and
//! softmax primitives everything else builds on, `attention` the seeded
//! multi-head model and its cache, `scoring` the base eviction policies,
//! `caote` the attention-aware score transform with its brute-force oracle,
//! and `engine` the block-wise driver that ties them together.

pub mod attention;
pub mod caote;
pub mod engine;
pub mod error;
pub mod numerics;
pub mod scoring;

pub use attention::{
    attend_row, block_prefill, dense_forward, dense_forward_trace, export_weights, generate_step,
    import_weights, init_model, AttentionRow, BlockStep, GenStep, HeadCache, KvCache, LayerWeights,
    ModelConfig, ToyModel,
};
pub use caote::{
    caote_scores, caote_scores_general, eviction_error_oracle, fast_caote_scores,
    fast_caote_scores_general, logit_error_check, renormalize_after_eviction, CaoteMode,
    CaoteScores, LogitDelta, NORMALIZATION_TOL, SOLE_MASS_EPS,
};
pub use engine::{
    deviation_metric, evict_pass, run_sequence, Aggregate, DeviationTrace, DominanceAudit,
    EvictionConfig, EvictionDecision, PassOutcome, RunResult, TraceRow,
};
pub use error::{Error, Result};
pub use numerics::{l2_norm, softmax, Matrix};
pub use scoring::{
    normalize_scores, score_h2o, score_sink, score_snapkv, score_tova, top_b_retain, PolicyKind,
    PolicyParams, PolicyState, ScoreVector,
};

/// Shortest exact decimal for CSV and report output; scientific notation
/// outside [1e-4, 1e16) to keep extreme magnitudes readable.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let a = v.abs();
    if (1e-4..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
