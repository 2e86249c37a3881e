//! Randomized self-checks of the four exact identities the engine rests
//! on: the closed-form eviction error, post-eviction renormalization,
//! causal mass accumulation, and single-layer logit-delta propagation.
//!
//! Each suite reports its maximum observed error over the requested trial
//! count and passes iff that stays under the pinned tolerance. The
//! `sabotage` switch negates the closed-form score before comparison, so a
//! healthy build must fail it; that guards the checks themselves.

use kv_evict_core::{
    caote_scores, eviction_error_oracle, format_float, init_model, logit_error_check,
    renormalize_after_eviction, score_h2o, softmax, AttentionRow, Matrix, ModelConfig, PolicyKind,
    PolicyParams, PolicyState,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Closed-form score vs brute-force eviction error, relative.
pub const ORACLE_TOL: f64 = 1e-9;
/// Renormalized weights vs softmax over surviving logits, relative, and
/// the survivor sum vs 1, absolute.
pub const RENORM_TOL: f64 = 1e-12;
/// Accumulated causal mass vs token count, absolute.
pub const MASS_TOL: f64 = 1e-9;
/// Observed vs predicted logit delta, vector-norm relative.
pub const LOGIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct TheoremOutcome {
    pub theorem: String,
    pub trials: usize,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl TheoremOutcome {
    pub fn line(&self) -> String {
        format!(
            "{}: {} (trials={}, max_err={}, tol={})",
            self.theorem,
            if self.passed { "PASS" } else { "FAIL" },
            self.trials,
            format_float(self.max_err),
            format_float(self.tolerance)
        )
    }
}

pub fn outcomes_to_csv(outcomes: &[TheoremOutcome]) -> String {
    let mut out = String::from("theorem,trials,max_err,tolerance,passed\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            o.theorem,
            o.trials,
            format_float(o.max_err),
            format_float(o.tolerance),
            o.passed
        ));
    }
    out
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Score-vs-oracle equality over random attention rows and value matrices,
/// n in [2, 64], d in [1, 32], logits uniform(-3, 3).
fn check_oracle(trials: usize, seed: u64, sabotage: bool) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=32);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let alpha = softmax(&logits)?;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let values = Matrix::from_rows(&rows)?;
        let scores = caote_scores(&alpha, &values)?;
        for j in 0..n {
            let reference = eviction_error_oracle(&alpha, &values, j)?;
            let c = if sabotage { -scores.c[j] } else { scores.c[j] };
            max_err = max_err.max(rel_gap(c, reference));
        }
    }
    Ok(max_err)
}

/// Renormalization vs softmax over the surviving logits, n in [2, 64].
fn check_renormalization(trials: usize, seed: u64) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(2..=64);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let alpha = softmax(&logits)?;
        let j = rng.random_range(0..n);
        let renorm = renormalize_after_eviction(&alpha, j)?;
        let mut rest = logits.clone();
        rest.remove(j);
        let direct = softmax(&rest)?;
        for (a, b) in renorm.iter().zip(&direct) {
            max_err = max_err.max(rel_gap(*a, *b));
        }
        max_err = max_err.max((renorm.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(max_err)
}

/// Total accumulated mass of an n-row causal pass vs n, n in [1, 128].
fn check_causal_mass(trials: usize, seed: u64) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=128);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut state = PolicyState::new(PolicyKind::H2o, PolicyParams::default());
        for i in 0..n {
            let row = AttentionRow::new(softmax(&logits[..=i])?)?;
            state.accumulate_rows(&[row])?;
        }
        let total: f64 = score_h2o(&state)?.scores.iter().sum();
        max_err = max_err.max((total - n as f64).abs());
    }
    Ok(max_err)
}

/// Observed vs predicted logit delta on a 1-layer model, with and without
/// the feed-forward path, vector-norm relative.
fn check_logit_delta(trials: usize, seed: u64) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let model = init_model(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab: 16,
            seed: rng.random::<u64>(),
        })?;
        let n = rng.random_range(2..=10);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let hidden = Matrix::from_rows(&rows)?;
        let evict = rng.random_range(0..n);

        let full = logit_error_check(&model, &hidden, evict, true)?;
        max_err = max_err.max(delta_gap(&full.observed, &full.predicted));

        // Same identity with the feed-forward term removed.
        let mut no_ffn = model.clone();
        no_ffn.layers[0].w_ffn = Matrix::zeros(8, 8);
        let reduced = logit_error_check(&no_ffn, &hidden, evict, true)?;
        max_err = max_err.max(delta_gap(&reduced.observed, &reduced.predicted));
    }
    Ok(max_err)
}

fn delta_gap(observed: &[f64], predicted: &[f64]) -> f64 {
    let diff: Vec<f64> = observed
        .iter()
        .zip(predicted)
        .map(|(o, p)| o - p)
        .collect();
    let scale = kv_evict_core::l2_norm(observed).max(f64::MIN_POSITIVE);
    kv_evict_core::l2_norm(&diff) / scale
}

pub fn run_theorems(
    trials: usize,
    seed: u64,
    sabotage: bool,
) -> anyhow::Result<Vec<TheoremOutcome>> {
    let make = |theorem: &str, max_err: f64, tolerance: f64| TheoremOutcome {
        theorem: theorem.to_string(),
        trials,
        max_err,
        tolerance,
        passed: max_err <= tolerance,
    };
    Ok(vec![
        make(
            "caote-matches-oracle",
            check_oracle(trials, seed, sabotage)?,
            ORACLE_TOL,
        ),
        make(
            "renormalization-matches-softmax",
            check_renormalization(trials, seed.wrapping_add(1))?,
            RENORM_TOL,
        ),
        make(
            "h2o-mass-equals-token-count",
            check_causal_mass(trials, seed.wrapping_add(2))?,
            MASS_TOL,
        ),
        make(
            "logit-delta-propagation",
            check_logit_delta(trials, seed.wrapping_add(3))?,
            LOGIT_TOL,
        ),
    ])
}

