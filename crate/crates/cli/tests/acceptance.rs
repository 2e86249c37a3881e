//! Acceptance gate: one test per shipping criterion, each ending in a
//! single `[PASS]` line with the measured quantities. Tolerances are pinned
//! here, next to the checks that use them, so a drift in either the engine
//! or the suite shows up as a diff in this file.

use std::process::Command;
use std::time::{Duration, Instant};

use kv_evict::{run_deviation, Experiment, RunSpec};
use kv_evict_core::{
    caote_scores, dense_forward, eviction_error_oracle, init_model, logit_error_check,
    renormalize_after_eviction, run_sequence, score_h2o, softmax, AttentionRow, CaoteMode,
    EvictionConfig, Matrix, ModelConfig, PolicyKind, PolicyParams, PolicyState,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Closed-form score vs brute-force oracle, relative.
const T2_REL_TOL: f64 = 1e-9;
const T2_TIME_LIMIT: Duration = Duration::from_secs(10);
/// Renormalized weights vs softmax over survivors, relative per component.
const T1_REL_TOL: f64 = 1e-12;
/// Survivor weight sum vs 1, absolute.
const T1_SUM_TOL: f64 = 1e-12;
/// Accumulated causal mass vs row count, absolute.
const MASS_ABS_TOL: f64 = 1e-9;
/// Observed vs predicted logit delta, vector-norm relative.
const LOGIT_REL_TOL: f64 = 1e-9;
/// Block-wise prefill vs single-shot dense outputs, Frobenius relative.
const BLOCK_REL_TOL: f64 = 1e-9;
/// Allowed ratio of transformed to baseline deviation for the empirical
/// (non-theorem-backed) base policies.
const DEVIATION_SLACK: f64 = 1.05;
const DEVIATION_TIME_LIMIT: Duration = Duration::from_secs(120);

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn frobenius_rel(a: &Matrix, b: &Matrix) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        num += (x - y) * (x - y);
        den += x * x;
    }
    (num / den).sqrt()
}

fn uniform_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, lim: f64) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-lim..lim)).collect())
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kv-evict"))
}

#[test]
fn c01_closed_form_score_equals_oracle_error() {
    let trials = 1000;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut max_err = 0.0f64;
    let mut compared = 0usize;
    for _ in 0..trials {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=32);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let alpha = softmax(&logits).unwrap();
        let values = uniform_rows(&mut rng, n, d, 1.0);
        let scores = caote_scores(&alpha, &values).unwrap();
        for j in 0..n {
            let oracle = eviction_error_oracle(&alpha, &values, j).unwrap();
            max_err = max_err.max(rel_gap(scores.c[j], oracle));
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(max_err <= T2_REL_TOL, "max rel err {max_err:e}");
    assert!(elapsed < T2_TIME_LIMIT, "took {elapsed:?}");
    println!(
        "[PASS] closed-form score equals oracle eviction error: max rel err {max_err:.3e} \
         over {trials} instances ({compared} evictions) in {elapsed:?}"
    );
}

#[test]
fn c02_renormalization_matches_softmax_over_survivors() {
    let trials = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut max_rel = 0.0f64;
    let mut max_sum = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(2..=64);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let alpha = softmax(&logits).unwrap();
        let j = rng.random_range(0..n);
        let renorm = renormalize_after_eviction(&alpha, j).unwrap();
        let mut rest = logits.clone();
        rest.remove(j);
        let direct = softmax(&rest).unwrap();
        for (a, b) in renorm.iter().zip(&direct) {
            max_rel = max_rel.max(rel_gap(*a, *b));
        }
        max_sum = max_sum.max((renorm.iter().sum::<f64>() - 1.0).abs());
    }
    assert!(max_rel <= T1_REL_TOL, "max rel err {max_rel:e}");
    assert!(max_sum <= T1_SUM_TOL, "max sum err {max_sum:e}");
    println!(
        "[PASS] renormalization equals softmax over survivors: max rel err {max_rel:.3e}, \
         max sum deviation {max_sum:.3e} over {trials} rows"
    );
}

#[test]
fn c03_causal_mass_totals_row_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for n in 1..=128 {
        for _ in 0..8 {
            let mut state = PolicyState::new(PolicyKind::H2o, PolicyParams::default());
            for i in 0..n {
                let logits: Vec<f64> = (0..=i).map(|_| rng.random_range(-3.0..3.0)).collect();
                let row = AttentionRow::new(softmax(&logits).unwrap()).unwrap();
                state.accumulate_rows(&[row]).unwrap();
            }
            let total: f64 = score_h2o(&state).unwrap().scores.iter().sum();
            max_err = max_err.max((total - n as f64).abs());
            if n >= 2 {
                assert!(total > 1.0, "mass {total} not above 1 for n={n}");
            }
            checked += 1;
        }
    }
    assert!(max_err <= MASS_ABS_TOL, "max abs err {max_err:e}");
    println!(
        "[PASS] causal attention mass totals the row count: max abs err {max_err:.3e} \
         over {checked} matrices, rows 1..=128"
    );
}

#[test]
fn c04_single_layer_logit_delta_identity() {
    let trials = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut max_full = 0.0f64;
    let mut max_reduced = 0.0f64;
    for _ in 0..trials {
        let model = init_model(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab: 16,
            seed: rng.random::<u64>(),
        })
        .unwrap();
        let n = rng.random_range(2..=10);
        let hidden = uniform_rows(&mut rng, n, 8, 1.0);
        let evict = rng.random_range(0..n);

        let full = logit_error_check(&model, &hidden, evict, true).unwrap();
        let diff: Vec<f64> = full
            .observed
            .iter()
            .zip(&full.predicted)
            .map(|(o, p)| o - p)
            .collect();
        max_full = max_full.max(
            kv_evict_core::l2_norm(&diff)
                / kv_evict_core::l2_norm(&full.observed).max(f64::MIN_POSITIVE),
        );

        let mut no_ffn = model.clone();
        no_ffn.layers[0].w_ffn = Matrix::zeros(8, 8);
        let reduced = logit_error_check(&no_ffn, &hidden, evict, true).unwrap();
        let diff: Vec<f64> = reduced
            .observed
            .iter()
            .zip(&reduced.predicted)
            .map(|(o, p)| o - p)
            .collect();
        max_reduced = max_reduced.max(
            kv_evict_core::l2_norm(&diff)
                / kv_evict_core::l2_norm(&reduced.observed).max(f64::MIN_POSITIVE),
        );
    }
    assert!(max_full <= LOGIT_REL_TOL, "max rel err {max_full:e}");
    assert!(
        max_reduced <= LOGIT_REL_TOL,
        "max rel err without ffn {max_reduced:e}"
    );
    println!(
        "[PASS] observed logit delta matches the propagated attention delta: \
         max rel err {max_full:.3e} (with ffn), {max_reduced:.3e} (ffn zeroed), {trials} instances each"
    );
}

#[test]
fn c05_generation_evictions_are_oracle_optimal() {
    let seeds: Vec<u64> = (0..20).collect();
    let n_generate = 32;
    let cfg = EvictionConfig::new(PolicyKind::Tova, CaoteMode::Full, 64, 16);
    let mut audits_total = 0usize;
    let mut max_excess = 0.0f64;
    for &seed in &seeds {
        let model = init_model(ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            vocab: 256,
            seed,
        })
        .unwrap();
        let prompt = kv_evict::random_prompt(64, 256, seed);
        let run = run_sequence(&model, &prompt, n_generate, &cfg).unwrap();
        // Every generation pass evicts exactly one token per head and must
        // have been audited against the brute-force oracle.
        let expected = n_generate * model.config.n_layers * model.config.n_heads;
        assert_eq!(run.audits.len(), expected, "seed {seed}");
        for audit in &run.audits {
            assert!(
                audit.holds(),
                "seed {seed}: evictee err {} vs min {}",
                audit.evictee_error,
                audit.min_error
            );
            max_excess = max_excess
                .max((audit.evictee_error - audit.min_error) / audit.min_error.max(f64::MIN_POSITIVE));
        }
        audits_total += run.audits.len();
    }
    println!(
        "[PASS] single-token evictions attain the oracle minimum: {audits_total} audited \
         evictions across {} seeds, max relative excess {max_excess:.3e}",
        seeds.len()
    );
}

#[test]
fn c06_block_prefill_matches_single_shot() {
    let model = init_model(ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        vocab: 256,
        seed: 77,
    })
    .unwrap();
    let seq_len = 64;
    let prompt = kv_evict::random_prompt(64, seq_len, 77);
    let dense = dense_forward(&model, &prompt, true).unwrap();
    let mut worst = 0.0f64;
    for block in [1, 16, seq_len] {
        let cfg = EvictionConfig::new(PolicyKind::Tova, CaoteMode::Off, seq_len, block);
        let run = run_sequence(&model, &prompt, 0, &cfg).unwrap();
        assert!(run.decisions.is_empty(), "no eviction at full budget");
        let gap = frobenius_rel(&dense, &run.outputs);
        assert!(gap <= BLOCK_REL_TOL, "block {block}: rel gap {gap:e}");
        worst = worst.max(gap);
    }
    println!(
        "[PASS] block-wise prefill reproduces single-shot outputs: worst Frobenius \
         rel gap {worst:.3e} over blocks {{1, 16, {seq_len}}}"
    );
}

#[test]
fn c07_transform_never_hurts_on_the_default_suite() {
    let start = Instant::now();
    let mut spec = RunSpec::defaults(Experiment::Deviation);
    spec.policies = vec![PolicyKind::H2o, PolicyKind::Tova, PolicyKind::SnapKv];
    spec.modes = vec![CaoteMode::Off, CaoteMode::Full];
    let report = run_deviation(&spec).unwrap();
    let agg = |policy: &str, mode: &str| {
        report
            .aggregate(policy, mode)
            .unwrap_or_else(|| panic!("missing aggregate {policy}/{mode}"))
            .mean_nmse
    };
    let (h2o_base, h2o_caote) = (agg("h2o", "off"), agg("h2o", "full"));
    let (tova_base, tova_caote) = (agg("tova", "off"), agg("tova", "full"));
    let (snap_base, snap_caote) = (agg("snapkv", "off"), agg("snapkv", "full"));
    let elapsed = start.elapsed();

    assert!(
        h2o_caote <= h2o_base,
        "h2o transformed {h2o_caote} vs base {h2o_base}"
    );
    assert!(
        tova_caote <= DEVIATION_SLACK * tova_base,
        "tova transformed {tova_caote} vs base {tova_base}"
    );
    assert!(
        snap_caote <= DEVIATION_SLACK * snap_base,
        "snapkv transformed {snap_caote} vs base {snap_base}"
    );
    assert!(elapsed < DEVIATION_TIME_LIMIT, "took {elapsed:?}");
    println!(
        "[PASS] transformed deviation never exceeds its gate on the 20-seed suite in {elapsed:?}: \
         h2o {h2o_caote:.4} <= {h2o_base:.4}, tova {tova_caote:.4} <= {DEVIATION_SLACK}x{tova_base:.4}, \
         snapkv {snap_caote:.4} <= {DEVIATION_SLACK}x{snap_base:.4}"
    );
}

#[test]
fn c08_budget_is_never_exceeded_across_the_matrix() {
    use kv_evict_core::Aggregate;
    let model = init_model(ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        vocab: 32,
        seed: 11,
    })
    .unwrap();
    let prompt = kv_evict::random_prompt(16, 24, 11);
    let mut runs = 0usize;
    let mut passes = 0usize;
    for policy in PolicyKind::ALL {
        for caote in CaoteMode::ALL {
            for aggregate in [Aggregate::PerHead, Aggregate::MeanHeads] {
                for budget in [3, 10] {
                    for block in [2, 7] {
                        for protect in [0, 5] {
                            let mut cfg = EvictionConfig::new(policy, caote, budget, block);
                            cfg.aggregate = aggregate;
                            cfg.protect_recent = protect;
                            let run = run_sequence(&model, &prompt, 2, &cfg).unwrap();
                            for layer in &run.final_positions {
                                for head in layer {
                                    assert!(
                                        head.len() <= budget,
                                        "{policy}/{caote}: {} > {budget}",
                                        head.len()
                                    );
                                }
                            }
                            for d in &run.decisions {
                                assert!(d.retained.len() <= budget);
                                assert_eq!(
                                    d.retained.len() + d.evicted.len(),
                                    d.candidate_count
                                );
                                passes += 1;
                            }
                            runs += 1;
                        }
                    }
                }
            }
        }
    }
    println!(
        "[PASS] cache budget holds everywhere: {passes} eviction passes across {runs} \
         config-matrix runs, zero violations"
    );
}

#[test]
fn c09_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<(&str, Vec<String>)> = vec![
        (
            "deviation.csv",
            vec![
                "deviation", "--policy", "h2o", "--seq-len", "48", "--budget", "12", "--block",
                "8", "--generate", "2", "--layers", "1", "--heads", "2", "--d-model", "16",
                "--vocab", "32", "--seeds", "0,1",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "needle.json",
            vec![
                "needle", "--policy", "tova", "--caote", "full", "--format", "json", "--seq-len",
                "48", "--budget", "12", "--block", "8", "--layers", "1", "--heads", "2",
                "--d-model", "16", "--vocab", "32", "--seeds", "0,1", "--depths", "0,24",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "theorems.csv",
            vec!["theorems", "--trials", "100", "--seeds", "5"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "sweep.csv",
            vec![
                "sweep", "--budgets", "8,12", "--blocks", "4", "--seq-len", "48", "--generate",
                "0", "--layers", "1", "--heads", "2", "--d-model", "16", "--vocab", "32",
                "--seeds", "0",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    let mut compared = 0usize;
    for (name, args) in &cases {
        let mut outputs = Vec::new();
        for round in 0..2 {
            let path = dir.path().join(format!("{round}-{name}"));
            let out = bin()
                .args(args)
                .args(["--out", path.to_str().unwrap()])
                .output()
                .expect("binary runs");
            assert!(out.status.success(), "{name}: {:?}", out);
            outputs.push((std::fs::read(&path).unwrap(), out.stdout));
        }
        assert_eq!(outputs[0], outputs[1], "{name} differs between runs");
        compared += 1;
    }
    println!("[PASS] reports are byte-identical across reruns: {compared} command shapes checked");
}

#[test]
fn c10_sabotaged_self_check_fails_loudly() {
    let healthy = bin()
        .args(["theorems", "--trials", "20"])
        .output()
        .expect("binary runs");
    assert!(healthy.status.success());
    let sabotaged = bin()
        .args(["theorems", "--trials", "20", "--sabotage"])
        .output()
        .expect("binary runs");
    assert_eq!(sabotaged.status.code(), Some(1));
    let text = String::from_utf8(sabotaged.stdout).unwrap();
    assert!(text.contains("FAIL"), "{text}");
    println!(
        "[PASS] sabotaged self-check exits nonzero: healthy exit 0, sabotaged exit {}",
        sabotaged.status.code().unwrap()
    );
}
