//! A complete run from a generated dataset to a populated run directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::eval::{compare_policies, evaluate_policy, track_round_rewards, EvalSettings, SnapshotRecorder};
use super::experiments::sft_initial_policy;
use super::persist::{config_hash, Manifest, RunDir};
use super::{run_method, Method, PipelineConfig};
use crate::cache::LogProbCache;
use crate::datagen::Generated;
use crate::error::{Result, SpoError};
use crate::models::{uniform_tabular, NeuralPolicyConfig, Policy, SampleMode, TrainConfig};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    /// Logit table over the generator's enumerated space; starts uniform.
    Tabular,
    Small,
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seed: u64,
    pub model: ModelChoice,
    pub pipeline: PipelineConfig,
    /// Supervised training of the neural starting policy.
    pub sft: TrainConfig,
    pub eval_samples_per_prompt: usize,
    /// Record latent-reward curves every this many steps (0 disables).
    pub snapshot_interval: usize,
}

impl RunSpec {
    fn derived_train(&self) -> TrainConfig {
        let mut t = self.pipeline.train.clone();
        t.seed = derive_seed(self.seed, "train", 0);
        t
    }

    fn derived_sft(&self) -> TrainConfig {
        let mut t = self.sft.clone();
        t.seed = derive_seed(self.seed, "sft", 0);
        t
    }

    pub fn eval_settings(&self, generated: &Generated) -> EvalSettings {
        EvalSettings::stochastic(
            self.eval_samples_per_prompt.max(1),
            generated.dataset.max_response_len,
            derive_seed(self.seed, "eval", 0),
        )
    }
}

/// `π_0`: a uniform table, or a fresh neural policy after supervised
/// training on the generator's pairs.
pub fn initial_policy(spec: &RunSpec, generated: &Generated) -> Result<Policy> {
    let ds = &generated.dataset;
    let neural = |config: NeuralPolicyConfig| -> Result<Policy> {
        if generated.sidecar.sft_pairs.is_empty() {
            return Err(SpoError::InvalidArgument(
                "a neural policy needs supervised pairs; this dataset has none".into(),
            ));
        }
        Ok(sft_initial_policy(&ds.vocab, &generated.sidecar.sft_pairs, &config, &spec.derived_sft())?.0)
    };
    let context = |ds: &crate::data::PreferenceDataset| {
        let prompt = ds.examples.iter().map(|e| e.prompt.len()).max().unwrap_or(0);
        prompt + ds.max_response_len
    };
    match spec.model {
        ModelChoice::Tabular => {
            let space = generated.sidecar.latent.table_space().ok_or_else(|| {
                SpoError::InvalidArgument("tabular policies need a dataset generated over an enumerated space".into())
            })?;
            uniform_tabular(ds.vocab.clone(), Arc::new(space.clone()))
        }
        ModelChoice::Small => neural(NeuralPolicyConfig::small(context(ds))),
        ModelChoice::Base => neural(NeuralPolicyConfig::base(context(ds))),
    }
}

/// Trains, evaluates and persists one run under `out`. The directory gets
/// `manifest.json`, `checkpoints/round_k.bin` (`k = 0` is the starting
/// policy), `cache/round_k.jsonl`, `metrics/round_k.csv`, optional reward
/// curves and `eval/report.json`.
pub fn execute_run(spec: &RunSpec, generated: &Generated, out: &Path) -> Result<Manifest> {
    let ds = &generated.dataset;
    let side = &generated.sidecar;
    let mut pipeline = spec.pipeline.clone();
    pipeline.train = spec.derived_train();
    pipeline.validate(ds)?;
    let pi0 = initial_policy(spec, generated)?;
    let run_dir = RunDir::create(out)?;

    let mut recorder = SnapshotRecorder::new(spec.snapshot_interval);
    let run = run_method(&pipeline, ds, &pi0, Some(&side.latent), &mut recorder)?;

    let (checkpoints, caches, metrics, schedules) = match &run.sequential {
        Some(seq) => {
            let (c, k, m) = run_dir.write_sequential(seq)?;
            (c, k, m, seq.rounds.iter().map(|r| r.schedule.clone()).collect())
        }
        None => {
            let checkpoints = vec![run_dir.write_checkpoint(0, &pi0)?, run_dir.write_checkpoint(1, &run.policy)?];
            let mut cache = LogProbCache::new(ds)?;
            cache.extend(&pi0, ds)?;
            let caches = vec![run_dir.write_cache_round(0, &cache)?];
            let metrics = run
                .baseline_rounds
                .iter()
                .enumerate()
                .map(|(i, (_, out))| run_dir.write_metrics(i + 1, &out.metrics))
                .collect::<Result<Vec<_>>>()?;
            let schedules = run.baseline_rounds.iter().map(|(_, out)| out.schedule.clone()).collect();
            (checkpoints, caches, metrics, schedules)
        }
    };

    let settings = spec.eval_settings(generated);
    let prompts = &side.eval_prompts;
    let reward_curves = if spec.snapshot_interval > 0 && matches!(pipeline.method, Method::Spo | Method::SDpo) {
        let points = track_round_rewards(&recorder.snapshots, prompts, &side.latent, &settings)?;
        Some(run_dir.write_reward_curves(&side.latent.names(), &points)?)
    } else {
        None
    };

    let mut report = evaluate_policy(
        &run.policy,
        prompts,
        &side.latent,
        &ds.vocab.special_tokens,
        &side.refusal_pattern,
        &settings,
    )?;
    let weights: BTreeMap<String, f64> = side.latent.names().into_iter().map(|d| (d, 1.0)).collect();
    report.win_rates.insert(
        "initial".into(),
        compare_policies(
            &run.policy,
            &pi0,
            prompts,
            &side.latent,
            &weights,
            SampleMode::Stochastic,
            settings.max_len,
            derive_seed(spec.seed, "compare", 0),
        )?,
    );
    let eval = run_dir.write_eval(&report)?;

    let manifest = Manifest {
        method: pipeline.method.name().to_string(),
        config: serde_json::to_value(spec)?,
        config_hash: config_hash(spec)?,
        dataset_fingerprint: ds.fingerprint()?,
        seed: spec.seed,
        dimensions: pipeline.dimensions.clone(),
        schedules,
        checkpoints,
        caches,
        metrics,
        reward_curves,
        eval: Some(eval),
    };
    run_dir.write_manifest(&manifest)?;
    Ok(manifest)
}
