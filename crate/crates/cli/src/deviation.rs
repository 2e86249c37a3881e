//! Deviation experiment: how far eviction pushes each layer's attention
//! output away from the no-eviction reference, per policy and caote mode.
//!
//! Every (policy, mode) pair runs on identical seeded prompts, so rows are
//! comparable across the grid. Per (seed, layer) the engine's trace mean is
//! reported; one aggregate row per pair averages over all seeds and layers.

use kv_evict_core::format_float;
use serde::Serialize;

use crate::{random_prompt, RunSpec};

#[derive(Debug, Clone, Serialize)]
pub struct DeviationRow {
    pub policy: String,
    pub caote_mode: String,
    /// Layer index, or "all" for the per-pair aggregate.
    pub layer: String,
    pub mean_nmse: f64,
    /// Seed value, or "all" for the per-pair aggregate.
    pub seed: String,
    /// Unnormalized companion to `mean_nmse` so other normalizations can be
    /// recomputed downstream. CSV output carries it in a sibling file to
    /// keep the main schema fixed.
    pub mean_mse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DeviationReport {
    pub rows: Vec<DeviationRow>,
}

impl DeviationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,caote_mode,layer,mean_nmse,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.policy,
                r.caote_mode,
                r.layer,
                format_float(r.mean_nmse),
                r.seed
            ));
        }
        out
    }

    pub fn to_mse_csv(&self) -> String {
        let mut out = String::from("policy,caote_mode,layer,mean_mse,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.policy,
                r.caote_mode,
                r.layer,
                format_float(r.mean_mse),
                r.seed
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        crate::to_json_pretty(&self.rows)
    }

    /// The layer="all", seed="all" row for one pair.
    pub fn aggregate(&self, policy: &str, mode: &str) -> Option<&DeviationRow> {
        self.rows.iter().find(|r| {
            r.policy == policy && r.caote_mode == mode && r.layer == "all" && r.seed == "all"
        })
    }
}

pub fn run_deviation(spec: &RunSpec) -> anyhow::Result<DeviationReport> {
    spec.validate()?;
    let mut report = DeviationReport::default();
    for &policy in &spec.policies {
        for &mode in &spec.modes {
            let cfg = spec.eviction_config(policy, mode, spec.budget, spec.block);
            let mut pair_nmse = Vec::new();
            let mut pair_mse = Vec::new();
            for &seed in &spec.seeds {
                let model = spec.model.build(seed)?;
                let prompt = random_prompt(model.config.d_model, spec.seq_len, seed);
                let run = kv_evict_core::run_sequence(&model, &prompt, spec.n_generate, &cfg)?;
                for layer in 0..model.config.n_layers {
                    let (nmse, mse) = run
                        .trace
                        .layer_mean(layer)
                        .expect("every layer has trace rows");
                    report.rows.push(DeviationRow {
                        policy: policy.to_string(),
                        caote_mode: mode.to_string(),
                        layer: layer.to_string(),
                        mean_nmse: nmse,
                        seed: seed.to_string(),
                        mean_mse: mse,
                    });
                    pair_nmse.push(nmse);
                    pair_mse.push(mse);
                }
            }
            let n = pair_nmse.len() as f64;
            report.rows.push(DeviationRow {
                policy: policy.to_string(),
                caote_mode: mode.to_string(),
                layer: "all".to_string(),
                mean_nmse: pair_nmse.iter().sum::<f64>() / n,
                seed: "all".to_string(),
                mean_mse: pair_mse.iter().sum::<f64>() / n,
            });
        }
    }
    Ok(report)
}
