use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

/// Sequential preference optimization lab.
#[derive(Debug, Parser)]
#[command(name = "spo", version, about)]
pub struct Cli {
    /// TOML file with per-command defaults; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic preference dataset with its latent rewards.
    #[command(subcommand)]
    GenData(Generator),
    /// Train a policy (SPO or a baseline) and write a run directory.
    Train(TrainArgs),
    /// Re-evaluate the final policy of a run.
    Eval(EvalArgs),
    /// Win rate of one checkpoint over another under the latent judge.
    Compare(CompareArgs),
    /// Run the numerical oracle suite.
    Verify(VerifyArgs),
    /// Round-two α sweep on the conflicting dataset.
    SweepAlpha(SweepArgs),
    /// Rebuild tables and charts from persisted outputs.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum Generator {
    /// One reserved marker token per dimension.
    SpecialToken(SpecialTokenArgs),
    /// Helpful vs harmless with a refusal pattern.
    Conflicting(ConflictingArgs),
    /// Exact Bradley-Terry labels over random reward tables.
    Bt(BtArgs),
}

/// Fills every unset field of `$flags` from `$file`.
macro_rules! merge_from {
    ($flags:expr, $file:expr, $($field:ident),+ $(,)?) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field; } )+
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SpecialTokenArgs {
    /// Base draws; each yields one example per dimension.
    #[arg(long)]
    pub num: Option<usize>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub base_length: Option<usize>,
    #[arg(long)]
    pub eval_prompts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConflictingArgs {
    #[arg(long)]
    pub num: Option<usize>,
    #[arg(long)]
    pub refusal_fraction: Option<f64>,
    #[arg(long)]
    pub sft_refusal_rate: Option<f64>,
    #[arg(long)]
    pub num_sft: Option<usize>,
    #[arg(long)]
    pub eval_prompts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BtArgs {
    #[arg(long)]
    pub prompts: Option<u32>,
    #[arg(long)]
    pub responses: Option<u32>,
    /// Comma-separated dimension names.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<String>>,
    /// Distinct pairs drawn.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Label draws per pair.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Standard deviation of the latent rewards.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// spo | s-dpo | dpo-mix | dpo-single | merge-dpo
    #[arg(long)]
    pub method: Option<String>,
    /// Dimensions in training order (default: dataset order).
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<String>>,
    /// One α for all previous dimensions, or one per dimension.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// tabular | small | base
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Per-round epoch counts, overriding `--epochs`.
    #[arg(long, value_delimiter = ',')]
    pub round_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd | adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub sft_epochs: Option<usize>,
    #[arg(long)]
    pub sft_lr: Option<f64>,
    /// DPO-Mix priority, highest first.
    #[arg(long, value_delimiter = ',')]
    pub priority: Option<Vec<String>>,
    /// Dual α adjustment: reward thresholds of the earlier dimensions.
    #[arg(long, value_delimiter = ',')]
    pub dual_thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub dual_step: Option<f64>,
    #[arg(long)]
    pub dual_alpha_max: Option<f64>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Steps between reward-curve snapshots (0 disables).
    #[arg(long)]
    pub snapshot_interval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Run directory.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Dataset directory (for prompts and latent rewards).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate (default: the run's last).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompareArgs {
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Judge weights as `dim=w` pairs (default: 1 for every dimension).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<String>>,
    /// stochastic | greedy
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct VerifyArgs {
    /// gradients | optimality | kappa | reductions | cache | all
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the optimality table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Number of seeds, `0..N`.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Round-two epochs for the sweep.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also record refusal rates over an extended round two of this many epochs.
    #[arg(long)]
    pub overfit_epochs: Option<usize>,
    #[arg(long)]
    pub num: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ReportArgs {
    /// Run directory to summarise.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Sweep CSV to summarise.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optional per-command tables of a configuration file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub gen_data: GenDataFile,
    pub train: TrainArgs,
    pub eval: EvalArgs,
    pub compare: CompareArgs,
    pub verify: VerifyArgs,
    pub sweep_alpha: SweepArgs,
    pub report: ReportArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenDataFile {
    pub special_token: SpecialTokenArgs,
    pub conflicting: ConflictingArgs,
    pub bt: BtArgs,
}

impl SpecialTokenArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, num, dims, noise, base_length, eval_prompts, seed, out);
    }
}

impl ConflictingArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, num, refusal_fraction, sft_refusal_rate, num_sft, eval_prompts, seed, out);
    }
}

impl BtArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, prompts, responses, dims, pairs, draws, scale, seed, out);
    }
}

impl TrainArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(
            self,
            file,
            data,
            method,
            dims,
            alpha,
            beta,
            model,
            epochs,
            round_epochs,
            batch_size,
            lr,
            optimizer,
            sft_epochs,
            sft_lr,
            priority,
            dual_thresholds,
            dual_step,
            dual_alpha_max,
            eval_samples,
            snapshot_interval,
            seed,
            out,
        );
    }
}

impl EvalArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, run, data, checkpoint, samples, seed);
    }
}

impl CompareArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, a, b, data, weights, mode, seed);
    }
}

impl VerifyArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, suite, seed, csv);
    }
}

impl SweepArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, grid, seeds, epochs, overfit_epochs, num, out);
    }
}

impl ReportArgs {
    pub fn merge(&mut self, file: Self) {
        merge_from!(self, file, run, sweep, out);
    }
}
