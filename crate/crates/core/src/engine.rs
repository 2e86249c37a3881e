//! Eviction engine: drives a sequence through the model block by block,
//! scores cached tokens after each block, and evicts down to budget.
//!
//! A pass runs in a fixed order per (layer, head): fold the block's new
//! attention rows into policy state, compute base scores, optionally apply
//! the caote transform on this head's values, retain the top-b, drop the
//! rest from cache and policy state together. The runner also drives an
//! identical no-eviction twin and records, per layer and step, how far the
//! evicted path's attention output has drifted from it.

use serde::Serialize;

use crate::attention::{block_prefill, generate_step, AttentionRow, KvCache, ToyModel};
use crate::caote::{
    caote_scores_general, eviction_error_oracle, fast_caote_scores_general, CaoteMode,
    SOLE_MASS_EPS,
};
use crate::error::{Error, Result};
use crate::numerics::{matvec, Matrix};
use crate::scoring::{
    score_h2o, score_sink, score_snapkv, score_tova, top_b_retain, PolicyKind, PolicyParams,
    ScoreVector,
};
use std::fmt;
use std::str::FromStr;

/// Whether each head evicts on its own scores or all heads of a layer evict
/// the same slots based on head-averaged scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    PerHead,
    MeanHeads,
}

impl Aggregate {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregate::PerHead => "per-head",
            Aggregate::MeanHeads => "mean-heads",
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per-head" => Ok(Aggregate::PerHead),
            "mean-heads" => Ok(Aggregate::MeanHeads),
            other => Err(format!(
                "unknown aggregation {other:?} (expected per-head or mean-heads)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvictionConfig {
    pub policy: PolicyKind,
    pub caote: CaoteMode,
    /// Cache budget b: every head holds at most this many tokens after a pass.
    pub budget: usize,
    /// Prefill block size m; generation always runs with m = 1.
    pub block_size: usize,
    pub aggregate: Aggregate,
    /// The newest `protect_recent` cache slots are never evicted.
    pub protect_recent: usize,
    /// Scale attention logits by 1/sqrt(d_head).
    pub scale: bool,
    pub params: PolicyParams,
}

impl EvictionConfig {
    pub fn new(policy: PolicyKind, caote: CaoteMode, budget: usize, block_size: usize) -> Self {
        EvictionConfig {
            policy,
            caote,
            budget,
            block_size,
            aggregate: Aggregate::PerHead,
            protect_recent: 0,
            scale: true,
            params: PolicyParams::for_budget(budget),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::ZeroBudget);
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be at least 1".into()));
        }
        self.params.validate()
    }
}

/// Record of one eviction decision. Indices are positions in the candidate
/// set (cache order at scoring time), matching the score vectors entry for
/// entry. `caote_scores` is empty when the transform is off. With mean-heads
/// aggregation one decision is emitted per layer, carrying head 0 and the
/// head-averaged scores that every head of the layer acted on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvictionDecision {
    pub layer: usize,
    pub head: usize,
    pub candidate_count: usize,
    pub base_scores: Vec<f64>,
    pub caote_scores: Vec<f64>,
    pub retained: Vec<usize>,
    pub evicted: Vec<usize>,
}

/// Per-pass cross-check recorded when the evictee is provably optimal: full
/// caote on a true attention row with exactly one token leaving. The chosen
/// token's brute-force eviction error must equal the minimum over all
/// candidates.
#[derive(Debug, Clone)]
pub struct DominanceAudit {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub evictee_error: f64,
    pub min_error: f64,
}

impl DominanceAudit {
    /// Equality up to the closed-form-vs-oracle float tolerance.
    pub fn holds(&self) -> bool {
        self.evictee_error <= self.min_error * (1.0 + 1e-9) + 1e-15
    }
}

#[derive(Debug, Default)]
pub struct PassOutcome {
    pub decisions: Vec<EvictionDecision>,
    pub audits: Vec<DominanceAudit>,
}

fn base_scores(
    head: &crate::attention::HeadCache,
    cfg: &EvictionConfig,
) -> Result<ScoreVector> {
    match cfg.policy {
        PolicyKind::H2o => score_h2o(&head.policy),
        PolicyKind::Tova => score_tova(&head.policy),
        PolicyKind::SnapKv => score_snapkv(&head.policy),
        PolicyKind::Sink => Ok(score_sink(
            &head.positions,
            cfg.params.sink_count,
            cfg.params.recent_window,
        )),
    }
}

fn caote_transform(
    base: &ScoreVector,
    values: &Matrix,
    mode: CaoteMode,
) -> Result<Option<Vec<f64>>> {
    match mode {
        CaoteMode::Off => Ok(None),
        CaoteMode::Full => Ok(Some(caote_scores_general(base, values)?.c)),
        CaoteMode::Fast => Ok(Some(fast_caote_scores_general(base, values)?.c)),
    }
}

/// Selection scores with the newest `protect` slots forced unevictable.
fn protect_recent(scores: &[f64], protect: usize) -> Vec<f64> {
    let mut out = scores.to_vec();
    let start = out.len().saturating_sub(protect);
    for s in &mut out[start..] {
        *s = f64::INFINITY;
    }
    out
}

fn complement(n: usize, retained: &[usize]) -> Vec<usize> {
    let mut keep = vec![false; n];
    for &i in retained {
        keep[i] = true;
    }
    (0..n).filter(|&i| !keep[i]).collect()
}

fn mean_vectors(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let len = vectors[0].len();
    let mut out = vec![0.0; len];
    for v in vectors {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Checks the evictee against the brute-force oracle when the theorem backs
/// it: full caote over a genuine attention row (tova base), single evictee,
/// no protected slots. Sole-mass holders are skipped; they cannot be evicted.
fn dominance_audit(
    alpha: &[f64],
    values: &Matrix,
    evictee: usize,
    step: usize,
    layer: usize,
    head: usize,
) -> Result<DominanceAudit> {
    let mut min_error = f64::INFINITY;
    for j in 0..alpha.len() {
        if alpha[j] >= 1.0 - SOLE_MASS_EPS {
            continue;
        }
        let e = eviction_error_oracle(alpha, values, j)?;
        if e < min_error {
            min_error = e;
        }
    }
    let evictee_error = eviction_error_oracle(alpha, values, evictee)?;
    let audit = DominanceAudit {
        step,
        layer,
        head,
        evictee_error,
        min_error,
    };
    assert!(
        audit.holds(),
        "evictee error {} exceeds candidate minimum {} at step {step} layer {layer} head {head}",
        audit.evictee_error,
        audit.min_error
    );
    Ok(audit)
}

/// One eviction pass over the whole cache. Always folds the block's rows
/// into policy state; slots at or under budget are then left alone (no
/// decision emitted), others are scored and trimmed to exactly `budget`.
pub fn evict_pass(
    cache: &mut KvCache,
    new_rows: &[Vec<Vec<AttentionRow>>],
    cfg: &EvictionConfig,
    step: usize,
) -> Result<PassOutcome> {
    cfg.validate()?;
    if new_rows.len() != cache.heads.len() {
        return Err(Error::LengthMismatch {
            what: "row layers",
            expected: cache.heads.len(),
            actual: new_rows.len(),
        });
    }
    let mut outcome = PassOutcome::default();
    for (l, layer_rows) in new_rows.iter().enumerate() {
        if layer_rows.len() != cache.heads[l].len() {
            return Err(Error::LengthMismatch {
                what: "row heads",
                expected: cache.heads[l].len(),
                actual: layer_rows.len(),
            });
        }
        for (h, rows) in layer_rows.iter().enumerate() {
            cache.heads[l][h].policy.accumulate_rows(rows)?;
        }
        let candidates = cache.heads[l][0].len();
        debug_assert!(
            cache.heads[l].iter().all(|s| s.len() == candidates),
            "head caches out of step in layer {l}"
        );
        if candidates <= cfg.budget {
            continue;
        }

        match cfg.aggregate {
            Aggregate::PerHead => {
                for h in 0..cache.heads[l].len() {
                    let slot = &cache.heads[l][h];
                    let base = base_scores(slot, cfg)?;
                    let caote = caote_transform(&base, &slot.values, cfg.caote)?;
                    let selection = caote.as_deref().unwrap_or(&base.scores);
                    let guarded = protect_recent(selection, cfg.protect_recent);
                    let retained = top_b_retain(&guarded, cfg.budget)?;
                    let evicted = complement(candidates, &retained);

                    if cfg.policy == PolicyKind::Tova
                        && cfg.caote == CaoteMode::Full
                        && cfg.protect_recent == 0
                        && evicted.len() == 1
                    {
                        outcome.audits.push(dominance_audit(
                            &base.scores,
                            &slot.values,
                            evicted[0],
                            step,
                            l,
                            h,
                        )?);
                    }

                    let slot = &mut cache.heads[l][h];
                    slot.retain(&retained)?;
                    assert!(
                        slot.len() <= cfg.budget,
                        "budget exceeded after eviction: {} > {}",
                        slot.len(),
                        cfg.budget
                    );
                    outcome.decisions.push(EvictionDecision {
                        layer: l,
                        head: h,
                        candidate_count: candidates,
                        base_scores: base.scores,
                        caote_scores: caote.unwrap_or_default(),
                        retained,
                        evicted,
                    });
                }
            }
            Aggregate::MeanHeads => {
                let mut bases = Vec::with_capacity(cache.heads[l].len());
                let mut caotes = Vec::with_capacity(cache.heads[l].len());
                for slot in &cache.heads[l] {
                    let base = base_scores(slot, cfg)?;
                    if let Some(c) = caote_transform(&base, &slot.values, cfg.caote)? {
                        caotes.push(c);
                    }
                    bases.push(base.scores);
                }
                let mean_base = mean_vectors(&bases);
                let mean_caote = if caotes.is_empty() {
                    Vec::new()
                } else {
                    mean_vectors(&caotes)
                };
                let selection = if mean_caote.is_empty() {
                    &mean_base
                } else {
                    &mean_caote
                };
                let guarded = protect_recent(selection, cfg.protect_recent);
                let retained = top_b_retain(&guarded, cfg.budget)?;
                let evicted = complement(candidates, &retained);
                for slot in cache.heads[l].iter_mut() {
                    slot.retain(&retained)?;
                    assert!(
                        slot.len() <= cfg.budget,
                        "budget exceeded after eviction: {} > {}",
                        slot.len(),
                        cfg.budget
                    );
                }
                outcome.decisions.push(EvictionDecision {
                    layer: l,
                    head: 0,
                    candidate_count: candidates,
                    base_scores: mean_base,
                    caote_scores: mean_caote,
                    retained,
                    evicted,
                });
            }
        }
    }
    Ok(outcome)
}

/// Normalized squared deviation per (layer, step) between the evicted run's
/// final-token attention output and the no-eviction twin's. `mse` is the
/// same squared distance divided by the vector length instead of the
/// reference norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub layer: usize,
    pub step: usize,
    pub nmse: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DeviationTrace {
    pub rows: Vec<TraceRow>,
}

impl DeviationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,step,nmse\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.layer, r.step, crate::format_float(r.nmse)));
        }
        out
    }

    pub fn layer_mean(&self, layer: usize) -> Option<(f64, f64)> {
        let rows: Vec<&TraceRow> = self.rows.iter().filter(|r| r.layer == layer).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let nmse = rows.iter().map(|r| r.nmse).sum::<f64>() / n;
        let mse = rows.iter().map(|r| r.mse).sum::<f64>() / n;
        Some((nmse, mse))
    }
}

/// Frobenius-normalized deviation between two equally shaped stacks of
/// attention outputs: ||dense - evicted||_F^2 / ||dense||_F^2. Zero iff the
/// runs agree (in particular whenever no eviction occurred).
pub fn deviation_metric(dense: &Matrix, evicted: &Matrix) -> Result<f64> {
    if dense.rows() != evicted.rows() || dense.cols() != evicted.cols() {
        return Err(Error::ShapeMismatch {
            op: "deviation_metric",
            lhs_rows: dense.rows(),
            lhs_cols: dense.cols(),
            rhs_rows: evicted.rows(),
            rhs_cols: evicted.cols(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (d, e) in dense.data().iter().zip(evicted.data()) {
        num += (d - e) * (d - e);
        den += d * d;
    }
    Ok(ratio_or_zero(num, den))
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Everything a driven sequence produced: final-layer hidden states for all
/// processed tokens, per-generated-token logits, the full decision log, the
/// optimality audits, the per-(layer, step) deviation trace against the
/// no-eviction twin, and the final cache shape for survival inspection.
#[derive(Debug)]
pub struct RunResult {
    pub outputs: Matrix,
    pub logits: Vec<Vec<f64>>,
    pub decisions: Vec<EvictionDecision>,
    pub audits: Vec<DominanceAudit>,
    pub trace: DeviationTrace,
    pub final_positions: Vec<Vec<Vec<usize>>>,
    /// Per (layer, head): cache positions visible to the last query and its
    /// attention row, captured before the final eviction pass.
    pub final_rows: Vec<Vec<(Vec<usize>, Vec<f64>)>>,
}

struct DriveOutput {
    outputs: Matrix,
    logits: Vec<Vec<f64>>,
    decisions: Vec<EvictionDecision>,
    audits: Vec<DominanceAudit>,
    /// attn[layer][step]: final-token concatenated attention output.
    attn: Vec<Vec<Vec<f64>>>,
    final_positions: Vec<Vec<Vec<usize>>>,
    final_rows: Vec<Vec<(Vec<usize>, Vec<f64>)>>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn drive(
    model: &ToyModel,
    prompt: &Matrix,
    n_generate: usize,
    cfg: &EvictionConfig,
    evict: bool,
) -> Result<DriveOutput> {
    let n_layers = model.config.n_layers;
    let mut cache = KvCache::new(model, cfg.policy, cfg.params);
    let mut outputs = Matrix::zeros(0, model.config.d_model);
    let mut logits_log = Vec::with_capacity(n_generate);
    let mut decisions = Vec::new();
    let mut audits = Vec::new();
    let mut attn: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_layers];
    let mut final_rows: Vec<Vec<(Vec<usize>, Vec<f64>)>> =
        vec![vec![(Vec::new(), Vec::new()); model.config.n_heads]; n_layers];
    let mut step = 0usize;
    let mut last_hidden = vec![0.0; model.config.d_model];

    let record = |cache: &KvCache,
                      block: &crate::attention::BlockStep,
                      attn: &mut Vec<Vec<Vec<f64>>>,
                      final_rows: &mut Vec<Vec<(Vec<usize>, Vec<f64>)>>| {
        for l in 0..n_layers {
            attn[l].push(block.attn_final[l].clone());
            for (h, slot) in final_rows[l].iter_mut().enumerate() {
                let row = block.rows[l][h]
                    .last()
                    .expect("block produced no rows")
                    .weights()
                    .to_vec();
                *slot = (cache.heads[l][h].positions.clone(), row);
            }
        }
    };

    let mut start = 0;
    while start < prompt.rows() {
        let end = (start + cfg.block_size).min(prompt.rows());
        let rows: Vec<Vec<f64>> = (start..end).map(|r| prompt.row(r).to_vec()).collect();
        let chunk = Matrix::from_rows(&rows)?;
        let block = block_prefill(model, &chunk, &mut cache, cfg.scale)?;
        record(&cache, &block, &mut attn, &mut final_rows);
        if evict {
            let outcome = evict_pass(&mut cache, &block.rows, cfg, step)?;
            decisions.extend(outcome.decisions);
            audits.extend(outcome.audits);
        }
        for r in 0..block.hidden.rows() {
            outputs.push_row(block.hidden.row(r))?;
        }
        last_hidden = block.hidden.row(block.hidden.rows() - 1).to_vec();
        start = end;
        step += 1;
    }

    // The model has no token embeddings, so greedy decoding feeds the vocab
    // head's row for the argmax logit back in as the next hidden state. That
    // keeps generation bounded and fully deterministic.
    if n_generate > 0 {
        let first_logits = matvec(&model.w_h, &last_hidden)?;
        let mut next_hidden = model.w_h.row(argmax(&first_logits)).to_vec();
        for _ in 0..n_generate {
            let gen = generate_step(model, &next_hidden, &mut cache, cfg.scale)?;
            record(&cache, &gen.block, &mut attn, &mut final_rows);
            if evict {
                let outcome = evict_pass(&mut cache, &gen.block.rows, cfg, step)?;
                decisions.extend(outcome.decisions);
                audits.extend(outcome.audits);
            }
            outputs.push_row(&gen.hidden)?;
            next_hidden = model.w_h.row(argmax(&gen.logits)).to_vec();
            logits_log.push(gen.logits);
            step += 1;
        }
    }

    let final_positions = cache
        .heads
        .iter()
        .map(|layer| layer.iter().map(|slot| slot.positions.clone()).collect())
        .collect();
    Ok(DriveOutput {
        outputs,
        logits: logits_log,
        decisions,
        audits,
        attn,
        final_positions,
        final_rows,
    })
}

/// Runs prefill over the prompt in blocks of `cfg.block_size` with an
/// eviction pass after every block, then `n_generate` single-token steps
/// with a pass after each. A no-eviction twin runs the same schedule to fill
/// the deviation trace.
pub fn run_sequence(
    model: &ToyModel,
    prompt: &Matrix,
    n_generate: usize,
    cfg: &EvictionConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if prompt.rows() == 0 {
        return Err(Error::InvalidConfig("empty prompt".into()));
    }
    let evicted = drive(model, prompt, n_generate, cfg, true)?;
    let dense = drive(model, prompt, n_generate, cfg, false)?;

    let mut trace = DeviationTrace::default();
    for l in 0..model.config.n_layers {
        debug_assert_eq!(dense.attn[l].len(), evicted.attn[l].len());
        for s in 0..dense.attn[l].len() {
            let d = &dense.attn[l][s];
            let e = &evicted.attn[l][s];
            let mut num = 0.0;
            let mut den = 0.0;
            for (a, b) in d.iter().zip(e) {
                num += (a - b) * (a - b);
                den += a * a;
            }
            trace.rows.push(TraceRow {
                layer: l,
                step: s,
                nmse: ratio_or_zero(num, den),
                mse: num / d.len() as f64,
            });
        }
    }

    Ok(RunResult {
        outputs: evicted.outputs,
        logits: evicted.logits,
        decisions: evicted.decisions,
        audits: evicted.audits,
        trace,
        final_positions: evicted.final_positions,
        final_rows: evicted.final_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{init_model, AttentionRow, HeadCache, ModelConfig};
    use crate::scoring::PolicyState;

    fn row(weights: &[f64]) -> AttentionRow {
        AttentionRow::new(weights.to_vec()).unwrap()
    }

    /// Cache with one layer, one head, hand-picked values, four tokens.
    fn handmade_cache(values: Vec<Vec<f64>>, kind: PolicyKind) -> KvCache {
        let n = values.len();
        let values = Matrix::from_rows(&values).unwrap();
        let keys = Matrix::zeros(n, values.cols());
        KvCache {
            heads: vec![vec![HeadCache {
                keys,
                values,
                positions: (0..n).collect(),
                policy: PolicyState::new(kind, PolicyParams::default()),
            }]],
            seen: n,
        }
    }

    #[test]
    fn caote_flips_the_evictee_when_an_outlier_value_is_cheap_for_the_base() {
        // Base weights alone would drop token 3 (lowest weight), but its
        // value is a far outlier while token 2's value sits near the
        // attention output: the transform must evict 2 instead.
        let alpha = [0.25, 0.25, 0.26, 0.24];
        let values = vec![
            vec![4.0, 0.0],
            vec![0.0, 4.0],
            vec![1.0, 1.0],
            vec![-6.0, -6.0],
        ];
        let rows = vec![vec![vec![row(&alpha)]]];

        let mut off_cache = handmade_cache(values.clone(), PolicyKind::Tova);
        let cfg_off = EvictionConfig::new(PolicyKind::Tova, CaoteMode::Off, 3, 1);
        let off = evict_pass(&mut off_cache, &rows, &cfg_off, 0).unwrap();
        assert_eq!(off.decisions.len(), 1);
        assert_eq!(off.decisions[0].evicted, vec![3]);
        assert!(off.decisions[0].caote_scores.is_empty());

        let mut full_cache = handmade_cache(values.clone(), PolicyKind::Tova);
        let cfg_full = EvictionConfig::new(PolicyKind::Tova, CaoteMode::Full, 3, 1);
        let full = evict_pass(&mut full_cache, &rows, &cfg_full, 0).unwrap();
        assert_eq!(full.decisions[0].evicted, vec![2]);
        assert_eq!(full_cache.heads[0][0].positions, vec![0, 1, 3]);

        // The flip is the oracle-optimal choice, and the pass audited it.
        let vm = Matrix::from_rows(&values).unwrap();
        let mut best = (0, f64::INFINITY);
        for j in 0..4 {
            let e = eviction_error_oracle(&alpha, &vm, j).unwrap();
            if e < best.1 {
                best = (j, e);
            }
        }
        assert_eq!(best.0, 2);
        assert_eq!(full.audits.len(), 1);
        assert!(full.audits[0].holds());
    }

    #[test]
    fn pass_under_budget_accumulates_but_evicts_nothing() {
        let mut cache = handmade_cache(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            PolicyKind::H2o,
        );
        let rows = vec![vec![vec![row(&[0.5, 0.5])]]];
        let cfg = EvictionConfig::new(PolicyKind::H2o, CaoteMode::Off, 4, 1);
        let outcome = evict_pass(&mut cache, &rows, &cfg, 0).unwrap();
        assert!(outcome.decisions.is_empty());
        assert_eq!(cache.heads[0][0].len(), 2);
        // The block still fed policy state.
        let s = score_h2o(&cache.heads[0][0].policy).unwrap();
        assert_eq!(s.scores, vec![0.5, 0.5]);
    }

    #[test]
    fn run_sequence_evicts_exactly_when_over_budget() {
        let model = init_model(ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            vocab: 8,
            seed: 5,
        })
        .unwrap();
        let prompt = Matrix::from_rows(&[
            vec![0.3, -0.1, 0.5, 0.2],
            vec![-0.4, 0.2, 0.1, -0.3],
            vec![0.1, 0.6, -0.2, 0.4],
            vec![0.5, -0.5, 0.3, 0.1],
        ])
        .unwrap();
        let cfg = EvictionConfig::new(PolicyKind::Tova, CaoteMode::Off, 2, 1);
        let out = run_sequence(&model, &prompt, 0, &cfg).unwrap();
        // Blocks 3 and 4 run over budget; each drops exactly one token.
        assert_eq!(out.decisions.len(), 2);
        for d in &out.decisions {
            assert_eq!(d.evicted.len(), 1);
        }
        assert_eq!(out.final_positions[0][0].len(), 2);
        assert_eq!(out.outputs.rows(), 4);
    }

    #[test]
    fn run_sequence_without_pressure_matches_twin_exactly() {
        let model = init_model(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab: 8,
            seed: 9,
        })
        .unwrap();
        let prompt = Matrix::from_rows(
            &(0..6)
                .map(|r| (0..8).map(|c| ((r * 8 + c) as f64 * 0.23).sin()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let cfg = EvictionConfig::new(PolicyKind::H2o, CaoteMode::Full, 16, 2);
        let out = run_sequence(&model, &prompt, 2, &cfg).unwrap();
        assert!(out.decisions.is_empty());
        assert!(out.trace.rows.iter().all(|r| r.nmse == 0.0 && r.mse == 0.0));
    }

    #[test]
    fn mean_heads_keeps_every_head_aligned() {
        let model = init_model(ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            vocab: 8,
            seed: 13,
        })
        .unwrap();
        let prompt = Matrix::from_rows(
            &(0..12)
                .map(|r| (0..16).map(|c| ((r * 16 + c) as f64 * 0.37).cos()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut cfg = EvictionConfig::new(PolicyKind::H2o, CaoteMode::Full, 4, 3);
        cfg.aggregate = Aggregate::MeanHeads;
        let out = run_sequence(&model, &prompt, 0, &cfg).unwrap();
        for layer in &out.final_positions {
            for head in layer {
                assert_eq!(head, &layer[0]);
            }
        }
        assert!(out.decisions.iter().all(|d| d.head == 0));
        // One decision per layer per evicting pass.
        assert_eq!(out.decisions.len() % model.config.n_layers, 0);
    }

    #[test]
    fn per_head_eviction_can_diverge_across_heads() {
        let model = init_model(ModelConfig {
            n_layers: 1,
            n_heads: 4,
            d_model: 16,
            vocab: 8,
            seed: 23,
        })
        .unwrap();
        let prompt = Matrix::from_rows(
            &(0..24)
                .map(|r| (0..16).map(|c| ((r * 16 + c) as f64 * 0.71).sin()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let cfg = EvictionConfig::new(PolicyKind::Tova, CaoteMode::Off, 6, 4);
        let out = run_sequence(&model, &prompt, 0, &cfg).unwrap();
        let heads = &out.final_positions[0];
        assert!(
            heads.iter().any(|h| h != &heads[0]),
            "expected at least one head to retain different positions: {heads:?}"
        );
    }

    #[test]
    fn protect_recent_pins_newest_slots() {
        let model = init_model(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab: 8,
            seed: 31,
        })
        .unwrap();
        let prompt = Matrix::from_rows(
            &(0..20)
                .map(|r| (0..8).map(|c| ((r * 8 + c) as f64 * 0.53).cos()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut cfg = EvictionConfig::new(PolicyKind::H2o, CaoteMode::Off, 5, 4);
        cfg.protect_recent = 3;
        let out = run_sequence(&model, &prompt, 0, &cfg).unwrap();
        for layer in &out.final_positions {
            for head in layer {
                // Tokens 17, 18, 19 entered in the final block and were
                // protected in the final pass.
                assert!(head.ends_with(&[17, 18, 19]), "{head:?}");
            }
        }
    }

    #[test]
    fn deviation_metric_reference_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(deviation_metric(&a, &a).unwrap(), 0.0);
        let zero = Matrix::zeros(2, 2);
        assert_eq!(deviation_metric(&a, &zero).unwrap(), 1.0);
        assert!(deviation_metric(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn trace_csv_has_fixed_header_and_one_row_per_layer_step() {
        let trace = DeviationTrace {
            rows: vec![
                TraceRow {
                    layer: 0,
                    step: 0,
                    nmse: 0.0,
                    mse: 0.0,
                },
                TraceRow {
                    layer: 0,
                    step: 1,
                    nmse: 0.125,
                    mse: 0.5,
                },
            ],
        };
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "layer,step,nmse");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "0,1,0.125");
    }

    #[test]
    fn run_sequence_is_deterministic() {
        let model = init_model(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab: 16,
            seed: 77,
        })
        .unwrap();
        let prompt = Matrix::from_rows(
            &(0..16)
                .map(|r| (0..8).map(|c| ((r * 8 + c) as f64 * 0.29).sin()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let cfg = EvictionConfig::new(PolicyKind::SnapKv, CaoteMode::Fast, 6, 4);
        let a = run_sequence(&model, &prompt, 3, &cfg).unwrap();
        let b = run_sequence(&model, &prompt, 3, &cfg).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.logits, b.logits);
        assert_eq!(
            a.trace.rows.iter().map(|r| r.nmse).collect::<Vec<_>>(),
            b.trace.rows.iter().map(|r| r.nmse).collect::<Vec<_>>()
        );
    }
}
