//! Needle retention probe: plants one high-norm marker token at chosen
//! depths in an otherwise uniform prompt, runs prefill under eviction
//! pressure, and reports whether the marker's cache slot survived and how
//! much attention the final query still paid it.

use kv_evict_core::format_float;
use serde::Serialize;

use crate::{needle_vector, random_prompt, RunSpec};

#[derive(Debug, Clone, Serialize)]
pub struct NeedleRun {
    pub depth: usize,
    pub seed: u64,
    /// Fraction of (layer, head) caches still holding the needle slot.
    pub survived_fraction: f64,
    /// Final-query attention weight on the needle, averaged over heads that
    /// could still see it (0 where it was gone).
    pub attention_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeedlePair {
    pub policy: String,
    pub caote_mode: String,
    /// Mean of `survived_fraction` over all seeds and depths.
    pub survival_rate: f64,
    pub mean_attention_mass: f64,
    pub runs: Vec<NeedleRun>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeedleReport {
    pub seq_len: usize,
    pub budget: usize,
    pub depths: Vec<usize>,
    pub pairs: Vec<NeedlePair>,
}

impl NeedleReport {
    pub fn to_json(&self) -> String {
        crate::to_json_pretty(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("policy,caote_mode,depth,seed,survived_fraction,attention_mass\n");
        for pair in &self.pairs {
            for r in &pair.runs {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    pair.policy,
                    pair.caote_mode,
                    r.depth,
                    r.seed,
                    format_float(r.survived_fraction),
                    format_float(r.attention_mass)
                ));
            }
            out.push_str(&format!(
                "{},{},all,all,{},{}\n",
                pair.policy,
                pair.caote_mode,
                format_float(pair.survival_rate),
                format_float(pair.mean_attention_mass)
            ));
        }
        out
    }
}

pub fn run_needle(spec: &RunSpec) -> anyhow::Result<NeedleReport> {
    spec.validate()?;
    let depths = if spec.depths.is_empty() {
        crate::default_depths(spec.seq_len)
    } else {
        spec.depths.clone()
    };
    for &d in &depths {
        anyhow::ensure!(
            d < spec.seq_len,
            "needle depth {d} is outside the {}-token prompt",
            spec.seq_len
        );
    }

    let mut report = NeedleReport {
        seq_len: spec.seq_len,
        budget: spec.budget,
        depths: depths.clone(),
        pairs: Vec::new(),
    };
    for &policy in &spec.policies {
        for &mode in &spec.modes {
            let cfg = spec.eviction_config(policy, mode, spec.budget, spec.block);
            let mut runs = Vec::new();
            for &depth in &depths {
                for &seed in &spec.seeds {
                    let model = spec.model.build(seed)?;
                    let mut prompt = random_prompt(model.config.d_model, spec.seq_len, seed);
                    let needle = needle_vector(model.config.d_model, seed);
                    for (c, v) in needle.iter().enumerate() {
                        prompt.set(depth, c, *v);
                    }
                    let run = kv_evict_core::run_sequence(&model, &prompt, 0, &cfg)?;

                    let mut survived = 0usize;
                    let mut slots = 0usize;
                    let mut mass = 0.0;
                    for layer in 0..model.config.n_layers {
                        for head in 0..model.config.n_heads {
                            slots += 1;
                            if run.final_positions[layer][head].contains(&depth) {
                                survived += 1;
                            }
                            let (positions, row) = &run.final_rows[layer][head];
                            if let Some(i) = positions.iter().position(|&p| p == depth) {
                                mass += row[i];
                            }
                        }
                    }
                    runs.push(NeedleRun {
                        depth,
                        seed,
                        survived_fraction: survived as f64 / slots as f64,
                        attention_mass: mass / slots as f64,
                    });
                }
            }
            let n = runs.len() as f64;
            report.pairs.push(NeedlePair {
                policy: policy.to_string(),
                caote_mode: mode.to_string(),
                survival_rate: runs.iter().map(|r| r.survived_fraction).sum::<f64>() / n,
                mean_attention_mass: runs.iter().map(|r| r.attention_mass).sum::<f64>() / n,
                runs,
            });
        }
    }
    Ok(report)
}
