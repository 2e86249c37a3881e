//! Budget and block-size ablation: reruns the deviation experiment over a
//! budget x block grid and keeps only each pair's aggregate, plus a printed
//! monotonicity readout of deviation vs budget (reported, never asserted).

use kv_evict_core::format_float;
use serde::Serialize;

use crate::{run_deviation, RunSpec};

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: String,
    pub caote_mode: String,
    pub budget: usize,
    pub block_size: usize,
    pub mean_nmse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,caote_mode,budget,block_size,mean_nmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.policy,
                r.caote_mode,
                r.budget,
                r.block_size,
                format_float(r.mean_nmse)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        crate::to_json_pretty(&self.rows)
    }

    /// One line per (policy, mode, block) telling whether mean NMSE fell
    /// monotonically as the budget grew.
    pub fn monotonicity_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let mut groups: Vec<(String, String, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.policy.clone(), r.caote_mode.clone(), r.block_size);
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        for (policy, mode, block) in groups {
            let mut series: Vec<(usize, f64)> = self
                .rows
                .iter()
                .filter(|r| r.policy == policy && r.caote_mode == mode && r.block_size == block)
                .map(|r| (r.budget, r.mean_nmse))
                .collect();
            series.sort_by_key(|&(b, _)| b);
            let violation = series
                .windows(2)
                .find(|w| w[1].1 > w[0].1);
            let line = match violation {
                None => format!(
                    "monotonicity {policy}/{mode} block={block}: nmse non-increasing in budget"
                ),
                Some(w) => format!(
                    "monotonicity {policy}/{mode} block={block}: rises at budget {} -> {} ({} -> {})",
                    w[0].0,
                    w[1].0,
                    format_float(w[0].1),
                    format_float(w[1].1)
                ),
            };
            lines.push(line);
        }
        lines
    }
}

pub fn run_sweep(spec: &RunSpec) -> anyhow::Result<SweepReport> {
    spec.validate()?;
    let mut report = SweepReport::default();
    for &budget in &spec.budgets {
        for &block in &spec.blocks {
            let mut point = spec.clone();
            point.budget = budget;
            point.block = block;
            let deviation = run_deviation(&point)?;
            for policy in &spec.policies {
                for mode in &spec.modes {
                    let agg = deviation
                        .aggregate(&policy.to_string(), &mode.to_string())
                        .expect("deviation emits an aggregate per pair");
                    report.rows.push(SweepRow {
                        policy: policy.to_string(),
                        caote_mode: mode.to_string(),
                        budget,
                        block_size: block,
                        mean_nmse: agg.mean_nmse,
                    });
                }
            }
        }
    }
    Ok(report)
}
