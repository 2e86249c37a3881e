//! Experiment harness around the eviction engine.
//!
//! Each command is a pure function from a [`RunSpec`] to a report value so
//! the binary stays a thin argument-parsing shell and tests can drive the
//! experiments in-process. All randomness is seeded; a spec maps to
//! byte-identical output on every run.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Context;
use kv_evict_core::{
    Aggregate, CaoteMode, EvictionConfig, Matrix, ModelConfig, PolicyKind, PolicyParams, ToyModel,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod deviation;
pub mod needle;
pub mod sweep;
pub mod theorems;

pub use deviation::{run_deviation, DeviationReport, DeviationRow};
pub use needle::{run_needle, NeedlePair, NeedleReport, NeedleRun};
pub use sweep::{run_sweep, SweepReport, SweepRow};
pub use theorems::{run_theorems, TheoremOutcome};

/// Keeps prompt draws off the model-weight RNG stream for the same seed.
const PROMPT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const NEEDLE_SALT: u64 = 0x2545_f491_4f6c_dd1d;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Deviation,
    Needle,
    Theorems,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(format!("unknown format {other:?} (expected csv or json)")),
        }
    }
}

/// Where model weights come from: freshly seeded per run, or a fixed
/// weight file shared across runs (prompts still vary by seed).
#[derive(Debug, Clone)]
pub enum ModelSource {
    Seeded {
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab: usize,
    },
    File(PathBuf),
}

impl ModelSource {
    pub fn build(&self, seed: u64) -> anyhow::Result<ToyModel> {
        match self {
            ModelSource::Seeded {
                n_layers,
                n_heads,
                d_model,
                vocab,
            } => Ok(kv_evict_core::init_model(ModelConfig {
                n_layers: *n_layers,
                n_heads: *n_heads,
                d_model: *d_model,
                vocab: *vocab,
                seed,
            })?),
            ModelSource::File(path) => {
                let json = fs::read_to_string(path)
                    .with_context(|| format!("reading weights file {}", path.display()))?;
                kv_evict_core::import_weights(&json)
                    .with_context(|| format!("loading weights file {}", path.display()))
            }
        }
    }
}

/// Policy knobs the user pinned explicitly; everything else follows the
/// budget via `PolicyParams::for_budget`, which matters when a sweep varies
/// the budget.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamOverrides {
    pub sink_count: Option<usize>,
    pub recent_window: Option<usize>,
    pub snap_window: Option<usize>,
    pub snap_kernel: Option<usize>,
}

impl ParamOverrides {
    pub fn materialize(&self, budget: usize) -> PolicyParams {
        let mut p = PolicyParams::for_budget(budget);
        if let Some(v) = self.sink_count {
            p.sink_count = v;
        }
        if let Some(v) = self.recent_window {
            p.recent_window = v;
        }
        if let Some(v) = self.snap_window {
            p.snap_window = v;
        }
        if let Some(v) = self.snap_kernel {
            p.snap_kernel = v;
        }
        p
    }
}

/// One fully resolved experiment request.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub experiment: Experiment,
    pub model: ModelSource,
    pub policies: Vec<PolicyKind>,
    pub modes: Vec<CaoteMode>,
    pub budget: usize,
    pub block: usize,
    pub aggregate: Aggregate,
    pub protect_recent: usize,
    pub scale: bool,
    pub overrides: ParamOverrides,
    pub seq_len: usize,
    pub n_generate: usize,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    /// Needle positions; empty means the default spread over the prompt.
    pub depths: Vec<usize>,
    /// Sweep grid; empty means {32, 64, 128} x {8, 16, 32}.
    pub budgets: Vec<usize>,
    pub blocks: Vec<usize>,
    pub trials: usize,
    pub sabotage: bool,
}

impl RunSpec {
    pub fn defaults(experiment: Experiment) -> Self {
        RunSpec {
            experiment,
            model: ModelSource::Seeded {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                vocab: 256,
            },
            policies: PolicyKind::ALL.to_vec(),
            modes: CaoteMode::ALL.to_vec(),
            budget: 64,
            block: 16,
            aggregate: Aggregate::PerHead,
            protect_recent: 0,
            scale: true,
            overrides: ParamOverrides::default(),
            seq_len: 256,
            n_generate: 16,
            seeds: (0..20).collect(),
            out: None,
            format: OutputFormat::Csv,
            depths: Vec::new(),
            budgets: vec![32, 64, 128],
            blocks: vec![8, 16, 32],
            trials: 1000,
            sabotage: false,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(!self.seeds.is_empty(), "at least one seed is required");
        anyhow::ensure!(self.seq_len >= 1, "seq_len must be at least 1");
        anyhow::ensure!(!self.policies.is_empty(), "at least one policy is required");
        anyhow::ensure!(!self.modes.is_empty(), "at least one caote mode is required");
        self.eviction_config(self.policies[0], self.modes[0], self.budget, self.block)
            .validate()?;
        Ok(())
    }

    pub fn eviction_config(
        &self,
        policy: PolicyKind,
        caote: CaoteMode,
        budget: usize,
        block: usize,
    ) -> EvictionConfig {
        EvictionConfig {
            policy,
            caote,
            budget,
            block_size: block,
            aggregate: self.aggregate,
            protect_recent: self.protect_recent,
            scale: self.scale,
            params: self.overrides.materialize(budget),
        }
    }

}

/// Seeded uniform(-1, 1) hidden-state prompt. The salt keeps the prompt
/// stream independent of the model-weight stream for the same seed.
pub fn random_prompt(d_model: usize, seq_len: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROMPT_SALT);
    let rows: Vec<Vec<f64>> = (0..seq_len)
        .map(|_| (0..d_model).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Matrix::from_rows(&rows).expect("prompt rows are rectangular")
}

/// A high-norm marker token: a seeded direction normalized to unit length
/// and scaled to four times the RMS norm of a uniform(-1, 1) filler row, so
/// it stands out without being tuned toward any policy.
pub fn needle_vector(d_model: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NEEDLE_SALT);
    let mut v: Vec<f64> = (0..d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = kv_evict_core::l2_norm(&v);
    let target = 4.0 * (d_model as f64 / 3.0).sqrt();
    for x in &mut v {
        *x *= target / norm;
    }
    v
}

/// Evenly spread needle depths: 1/8, 1/4, 1/2, 3/4, 7/8 of the prompt.
pub fn default_depths(seq_len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [1, 2, 4, 6, 7]
        .iter()
        .map(|&k| (seq_len * k / 8).min(seq_len - 1))
        .collect();
    out.dedup();
    out
}

/// Writes to the path when given, else to stdout.
pub fn write_report(out: &Option<PathBuf>, content: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, content)
            .with_context(|| format!("writing report to {}", path.display())),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

pub fn to_json_pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}
