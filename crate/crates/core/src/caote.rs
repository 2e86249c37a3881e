//! Attention-aware eviction scoring.
//!
//! The caote score of cached token j under attention weights alpha and value
//! rows V is
//!
//! ```text
//!     c_j = alpha_j / (1 - alpha_j) * || sum_i alpha_i v_i  -  v_j ||_2
//! ```
//!
//! which equals, exactly, the L2 change in the attention output caused by
//! dropping token j and renormalizing the surviving weights. That identity is
//! what makes the score usable: ranking by c_j ranks by true eviction error
//! without ever recomputing attention. `eviction_error_oracle` measures the
//! error the long way (renormalize, re-sum, subtract) and deliberately shares
//! no code with `caote_scores` beyond the numerics primitives, so tests can
//! hold the two routes against each other.
//!
//! Any non-negative scoring vector can stand in for alpha after normalizing
//! it to a distribution (`caote_scores_general`), which is how column-sum
//! policies like H2O or pooled-window policies get an attention-aware
//! transform. `fast_caote_scores` swaps the attention-weighted mean for the
//! plain mean of the values, trading exactness for one less pass.

use std::fmt;
use std::str::FromStr;

use crate::attention::ToyModel;
use crate::error::{Error, Result};
use crate::numerics::{add, l2_norm, matmul_bt, matvec, softmax, sub, Matrix};
use crate::scoring::{normalize_scores, ScoreVector};

/// Weights at or above 1 - SOLE_MASS_EPS mean the token holds essentially all
/// attention mass: its eviction error is unbounded and removing it leaves the
/// renormalization dividing by ~0.
pub const SOLE_MASS_EPS: f64 = 1e-12;

/// Slack allowed when validating that a weight vector sums to 1.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaoteMode {
    Off,
    Full,
    Fast,
}

impl CaoteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CaoteMode::Off => "off",
            CaoteMode::Full => "full",
            CaoteMode::Fast => "fast",
        }
    }

    pub const ALL: [CaoteMode; 3] = [CaoteMode::Off, CaoteMode::Full, CaoteMode::Fast];
}

impl fmt::Display for CaoteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaoteMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(CaoteMode::Off),
            "full" => Ok(CaoteMode::Full),
            "fast" => Ok(CaoteMode::Fast),
            other => Err(format!(
                "unknown caote mode {other:?} (expected off, full, or fast)"
            )),
        }
    }
}

/// Eviction scores for every cached token. Higher means more expensive to
/// evict. `f64::INFINITY` marks a sole-mass holder that must not be dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CaoteScores {
    pub c: Vec<f64>,
    pub mode: CaoteMode,
}

fn validate_weights(alpha: &[f64]) -> Result<()> {
    if alpha.len() < 2 {
        return Err(Error::TooFewTokens(alpha.len()));
    }
    let mut sum = 0.0;
    for (i, &a) in alpha.iter().enumerate() {
        if !a.is_finite() {
            return Err(Error::NonFinite("alpha"));
        }
        if a < 0.0 {
            return Err(Error::NegativeScore { index: i, value: a });
        }
        sum += a;
    }
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

fn validate_input(alpha: &[f64], values: &Matrix) -> Result<()> {
    if alpha.len() != values.rows() {
        return Err(Error::LengthMismatch {
            what: "alpha",
            expected: values.rows(),
            actual: alpha.len(),
        });
    }
    validate_weights(alpha)
}

/// Exact eviction-error scores from normalized attention weights: the
/// attention output `sum_i alpha_i v_i` is formed once, then each token pays
/// `alpha_j / (1 - alpha_j)` times its value's distance from it.
pub fn caote_scores(alpha: &[f64], values: &Matrix) -> Result<CaoteScores> {
    validate_input(alpha, values)?;
    let mut x_attn = vec![0.0; values.cols()];
    for (i, &a) in alpha.iter().enumerate() {
        let v = values.row(i);
        for (j, x) in x_attn.iter_mut().enumerate() {
            *x += a * v[j];
        }
    }
    let c = alpha
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            if a >= 1.0 - SOLE_MASS_EPS {
                f64::INFINITY
            } else {
                a / (1.0 - a) * l2_norm(&sub(&x_attn, values.row(j)))
            }
        })
        .collect();
    Ok(CaoteScores {
        c,
        mode: CaoteMode::Full,
    })
}

/// Full-mode scores for an arbitrary non-negative base score vector: the base
/// is normalized to a distribution first (skipped bit-for-bit when the input
/// is already flagged normalized), then scored exactly like attention
/// weights.
pub fn caote_scores_general(base: &ScoreVector, values: &Matrix) -> Result<CaoteScores> {
    if base.normalized {
        caote_scores(&base.scores, values)
    } else {
        let normalized = normalize_scores(base)?;
        caote_scores(&normalized.scores, values)
    }
}

/// Fast-mode scores: the unweighted mean of the values replaces the
/// attention output, so the score needs no weighted pass over V.
pub fn fast_caote_scores(alpha: &[f64], values: &Matrix) -> Result<CaoteScores> {
    validate_input(alpha, values)?;
    let n = values.rows();
    let mut mean = vec![0.0; values.cols()];
    for i in 0..n {
        let v = values.row(i);
        for (j, m) in mean.iter_mut().enumerate() {
            *m += v[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let c = alpha
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            if a >= 1.0 - SOLE_MASS_EPS {
                f64::INFINITY
            } else {
                a / (1.0 - a) * l2_norm(&sub(&mean, values.row(j)))
            }
        })
        .collect();
    Ok(CaoteScores {
        c,
        mode: CaoteMode::Fast,
    })
}

/// Fast-mode scores for an arbitrary non-negative base score vector.
pub fn fast_caote_scores_general(base: &ScoreVector, values: &Matrix) -> Result<CaoteScores> {
    if base.normalized {
        fast_caote_scores(&base.scores, values)
    } else {
        let normalized = normalize_scores(base)?;
        fast_caote_scores(&normalized.scores, values)
    }
}

/// Weights over the survivors after dropping token `evict`: each survivor is
/// divided by `1 - alpha_evict`, which reproduces softmax over the surviving
/// logits exactly. Refuses to drop a sole mass holder or the only token.
pub fn renormalize_after_eviction(alpha: &[f64], evict: usize) -> Result<Vec<f64>> {
    if alpha.len() < 2 {
        return Err(Error::TooFewTokens(alpha.len()));
    }
    if evict >= alpha.len() {
        return Err(Error::IndexOutOfRange {
            index: evict,
            len: alpha.len(),
        });
    }
    validate_weights(alpha)?;
    let a_evict = alpha[evict];
    if a_evict >= 1.0 - SOLE_MASS_EPS {
        return Err(Error::SoleMassHolder {
            index: evict,
            weight: a_evict,
        });
    }
    let keep = 1.0 - a_evict;
    Ok(alpha
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != evict)
        .map(|(_, &a)| a / keep)
        .collect())
}

/// Brute-force eviction error: build the attention output, renormalize the
/// survivors, rebuild the output without token `evict`, and measure the L2
/// distance between the two. This is the reference route; it must stay
/// independent of `caote_scores` so the closed form has something honest to
/// be checked against.
pub fn eviction_error_oracle(alpha: &[f64], values: &Matrix, evict: usize) -> Result<f64> {
    validate_input(alpha, values)?;
    if evict >= alpha.len() {
        return Err(Error::IndexOutOfRange {
            index: evict,
            len: alpha.len(),
        });
    }
    let mut before = vec![0.0; values.cols()];
    for (i, &a) in alpha.iter().enumerate() {
        let v = values.row(i);
        for (j, x) in before.iter_mut().enumerate() {
            *x += a * v[j];
        }
    }
    let renorm = renormalize_after_eviction(alpha, evict)?;
    let mut after = vec![0.0; values.cols()];
    let mut k = 0;
    for i in 0..alpha.len() {
        if i == evict {
            continue;
        }
        let a = renorm[k];
        k += 1;
        let v = values.row(i);
        for (j, x) in after.iter_mut().enumerate() {
            *x += a * v[j];
        }
    }
    Ok(l2_norm(&sub(&before, &after)))
}

/// Observed and predicted change in the final token's logits when one cached
/// token is evicted from a single-layer model.
#[derive(Debug, Clone)]
pub struct LogitDelta {
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Compares the true logit change against the linear propagation of the
/// attention-output change through the output projection, feed-forward, and
/// vocab head: `W_H (W_O d + W_FFN W_O d)` for attention delta `d`. The
/// identity only holds layerwise, so models with more than one layer are
/// refused rather than silently compounding.
pub fn logit_error_check(
    model: &ToyModel,
    hidden_all: &Matrix,
    evict: usize,
    scale: bool,
) -> Result<LogitDelta> {
    if model.config.n_layers != 1 {
        return Err(Error::MultiLayerNotModeled(model.config.n_layers));
    }
    let n = hidden_all.rows();
    if n < 2 {
        return Err(Error::TooFewTokens(n));
    }
    if evict >= n {
        return Err(Error::IndexOutOfRange { index: evict, len: n });
    }
    if hidden_all.cols() != model.config.d_model {
        return Err(Error::LengthMismatch {
            what: "hidden width",
            expected: model.config.d_model,
            actual: hidden_all.cols(),
        });
    }
    let layer = &model.layers[0];
    let d_head = model.d_head();
    let q_all = matmul_bt(hidden_all, &layer.w_q)?;
    let k_all = matmul_bt(hidden_all, &layer.w_k)?;
    let v_all = matmul_bt(hidden_all, &layer.w_v)?;
    let inv_scale = if scale {
        1.0 / (d_head as f64).sqrt()
    } else {
        1.0
    };

    let last = n - 1;
    let mut attn_dense = vec![0.0; model.config.d_model];
    let mut attn_evicted = vec![0.0; model.config.d_model];
    for h in 0..model.config.n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        let q = &q_all.row(last)[cols.clone()];
        let mut logits = Vec::with_capacity(n);
        for i in 0..n {
            let k = &k_all.row(i)[cols.clone()];
            let mut acc = 0.0;
            for (a, b) in q.iter().zip(k) {
                acc += a * b;
            }
            logits.push(acc * inv_scale);
        }
        let dense_w = softmax(&logits)?;
        let survivors: Vec<usize> = (0..n).filter(|&i| i != evict).collect();
        let reduced: Vec<f64> = survivors.iter().map(|&i| logits[i]).collect();
        let evicted_w = softmax(&reduced)?;

        for (i, &w) in dense_w.iter().enumerate() {
            let v = &v_all.row(i)[cols.clone()];
            for (j, x) in attn_dense[cols.clone()].iter_mut().enumerate() {
                *x += w * v[j];
            }
        }
        for (k, &i) in survivors.iter().enumerate() {
            let w = evicted_w[k];
            let v = &v_all.row(i)[cols.clone()];
            for (j, x) in attn_evicted[cols.clone()].iter_mut().enumerate() {
                *x += w * v[j];
            }
        }
    }

    let finish = |attn: &[f64]| -> Result<Vec<f64>> {
        let x_half = add(hidden_all.row(last), &matvec(&layer.w_o, attn)?);
        let x_out = add(&x_half, &matvec(&layer.w_ffn, &x_half)?);
        matvec(&model.w_h, &x_out)
    };
    let logits_dense = finish(&attn_dense)?;
    let logits_evicted = finish(&attn_evicted)?;
    let observed = sub(&logits_dense, &logits_evicted);

    let delta = sub(&attn_dense, &attn_evicted);
    let through_o = matvec(&layer.w_o, &delta)?;
    let through_ffn = matvec(&layer.w_ffn, &through_o)?;
    let predicted = matvec(&model.w_h, &add(&through_o, &through_ffn))?;

    Ok(LogitDelta {
        observed,
        predicted,
    })
}
