//! `kv-evict`: seeded eviction experiments from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure or any failed theorem
//! check, 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kv_evict::theorems::outcomes_to_csv;
use kv_evict::{
    run_deviation, run_needle, run_sweep, run_theorems, to_json_pretty, write_report, Experiment,
    ModelSource, OutputFormat, ParamOverrides, RunSpec,
};
use kv_evict_core::{Aggregate, CaoteMode, PolicyKind};

#[derive(Parser)]
#[command(
    name = "kv-evict",
    version,
    about = "Token eviction experiments on a seeded toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attention deviation from the no-eviction reference, per layer, over
    /// the policy x caote grid.
    Deviation(DeviationArgs),
    /// Retention probe for one planted high-norm token.
    Needle(NeedleArgs),
    /// Randomized self-checks of the exact identities the engine rests on.
    Theorems(TheoremArgs),
    /// Budget x block-size ablation over deviation aggregates.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Base eviction policy; omit to run h2o, tova, snapkv and sink.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Score transform; omit to run off, full and fast.
    #[arg(long)]
    caote: Option<CaoteMode>,
    /// Per-head cache budget.
    #[arg(long, default_value_t = 64)]
    budget: usize,
    /// Prefill block size.
    #[arg(long, default_value_t = 16)]
    block: usize,
    /// Prompt length in tokens.
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    /// Greedy generation steps after prefill.
    #[arg(long, default_value_t = 16)]
    generate: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Comma-separated run seeds; defaults to 0..19.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// JSON weight file; replaces the seeded model (prompts still vary by
    /// seed).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// per-head or mean-heads eviction.
    #[arg(long, default_value = "per-head")]
    aggregate: Aggregate,
    /// Never evict the newest N cache slots.
    #[arg(long, default_value_t = 0)]
    protect_recent: usize,
    /// Disable 1/sqrt(d_head) logit scaling.
    #[arg(long)]
    no_scale: bool,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json; defaults to csv (needle defaults to json).
    #[arg(long)]
    format: Option<OutputFormat>,
    /// Sink policy: number of always-kept initial tokens.
    #[arg(long)]
    sink_count: Option<usize>,
    /// Sink policy: number of always-kept newest tokens.
    #[arg(long)]
    recent_window: Option<usize>,
    /// Snapkv policy: observation window length.
    #[arg(long)]
    snap_window: Option<usize>,
    /// Snapkv policy: pooling kernel width (odd).
    #[arg(long)]
    snap_kernel: Option<usize>,
}

impl CommonArgs {
    fn to_spec(&self, experiment: Experiment) -> RunSpec {
        let mut spec = RunSpec::defaults(experiment);
        if let Some(p) = self.policy {
            spec.policies = vec![p];
        }
        if let Some(c) = self.caote {
            spec.modes = vec![c];
        }
        spec.budget = self.budget;
        spec.block = self.block;
        spec.seq_len = self.seq_len;
        spec.n_generate = self.generate;
        spec.aggregate = self.aggregate;
        spec.protect_recent = self.protect_recent;
        spec.scale = !self.no_scale;
        spec.model = match &self.weights {
            Some(path) => ModelSource::File(path.clone()),
            None => ModelSource::Seeded {
                n_layers: self.layers,
                n_heads: self.heads,
                d_model: self.d_model,
                vocab: self.vocab,
            },
        };
        if let Some(seeds) = &self.seeds {
            spec.seeds = seeds.clone();
        }
        spec.out = self.out.clone();
        if let Some(f) = self.format {
            spec.format = f;
        }
        spec.overrides = ParamOverrides {
            sink_count: self.sink_count,
            recent_window: self.recent_window,
            snap_window: self.snap_window,
            snap_kernel: self.snap_kernel,
        };
        spec
    }
}

#[derive(Args)]
struct DeviationArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct NeedleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated needle positions; defaults to 1/8, 1/4, 1/2, 3/4,
    /// 7/8 of the prompt.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
}

#[derive(Args)]
struct TheoremArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Random instances per theorem check.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Negate the closed-form score before comparison; a healthy build must
    /// then fail.
    #[arg(long)]
    sabotage: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated cache budgets.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    /// Comma-separated prefill block sizes.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
}

fn mse_sibling(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.mse.{ext}"),
        None => format!("{stem}.mse.csv"),
    };
    path.with_file_name(name)
}

fn usage_error(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Deviation(args) => {
            let spec = args.common.to_spec(Experiment::Deviation);
            let report = run_deviation(&spec)?;
            match spec.format {
                OutputFormat::Csv => {
                    write_report(&spec.out, &report.to_csv())?;
                    // The raw-MSE companion only exists alongside a file;
                    // stdout stays a single clean CSV stream.
                    if let Some(path) = &spec.out {
                        let sibling = mse_sibling(path);
                        fs::write(&sibling, report.to_mse_csv()).map_err(|e| {
                            anyhow::anyhow!("writing report to {}: {e}", sibling.display())
                        })?;
                    }
                }
                OutputFormat::Json => write_report(&spec.out, &report.to_json())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Needle(args) => {
            let mut spec = args.common.to_spec(Experiment::Needle);
            if args.common.format.is_none() {
                spec.format = OutputFormat::Json;
            }
            if let Some(depths) = &args.depths {
                for &d in depths {
                    if d >= spec.seq_len {
                        return Ok(usage_error(&format!(
                            "needle depth {d} is outside the {}-token prompt",
                            spec.seq_len
                        )));
                    }
                }
                spec.depths = depths.clone();
            }
            let report = run_needle(&spec)?;
            let content = match spec.format {
                OutputFormat::Csv => report.to_csv(),
                OutputFormat::Json => report.to_json(),
            };
            write_report(&spec.out, &content)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Theorems(args) => {
            let spec = args.common.to_spec(Experiment::Theorems);
            if args.trials == 0 {
                eprintln!("warning: 0 trials requested; every check passes vacuously");
            }
            let outcomes = run_theorems(args.trials, spec.seeds[0], args.sabotage)?;
            for o in &outcomes {
                println!("{}", o.line());
            }
            if let Some(path) = &spec.out {
                let content = match spec.format {
                    OutputFormat::Csv => outcomes_to_csv(&outcomes),
                    OutputFormat::Json => to_json_pretty(&outcomes),
                };
                fs::write(path, content)
                    .map_err(|e| anyhow::anyhow!("writing report to {}: {e}", path.display()))?;
            }
            if outcomes.iter().any(|o| !o.passed) {
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Sweep(args) => {
            let mut spec = args.common.to_spec(Experiment::Sweep);
            // An ablation table reads best one policy at a time; the full
            // grid stays available through explicit flags.
            if args.common.policy.is_none() {
                spec.policies = vec![PolicyKind::H2o];
            }
            if args.common.caote.is_none() {
                spec.modes = vec![CaoteMode::Off, CaoteMode::Full];
            }
            if let Some(budgets) = &args.budgets {
                spec.budgets = budgets.clone();
            }
            if let Some(blocks) = &args.blocks {
                spec.blocks = blocks.clone();
            }
            let report = run_sweep(&spec)?;
            let content = match spec.format {
                OutputFormat::Csv => report.to_csv(),
                OutputFormat::Json => report.to_json(),
            };
            write_report(&spec.out, &content)?;
            for line in report.monotonicity_lines() {
                // Keep piped stdout parseable when the table itself goes to
                // stdout.
                if spec.out.is_some() {
                    println!("{line}");
                } else {
                    eprintln!("{line}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
