//! Sequential fine-tuning, the baselines it is compared with, evaluation
//! against latent rewards, and run persistence.

mod eval;
pub mod experiments;
mod persist;
pub mod report;
mod runner;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{HistoryLogProbs, LogProbCache};
use crate::data::{Label, PreferenceDataset};
use crate::datagen::LatentRewardSpec;
use crate::error::{Result, SpoError};
use crate::models::{
    merge_parameters, train_round, train_round_observed, EpochControl, Policy, RoundOutput, StepMetrics, TrainConfig,
};
use crate::objectives::{dual_alpha_update, kappa_schedule, KappaSchedule};
use crate::seed::{derive_seed, stream_rng};

pub use eval::{
    compare_policies, evaluate_policy, expected_rewards, sample_responses, track_round_rewards, EvalReport,
    EvalSettings, RewardPoint, SnapshotRecorder,
};
pub use persist::{config_hash, read_metrics_csv, write_metrics_csv, Manifest, RunDir};
pub use runner::{execute_run, initial_policy, ModelChoice, RunSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Spo,
    SDpo,
    DpoMix,
    DpoSingle,
    MergeDpo,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Spo => "spo",
            Method::SDpo => "s-dpo",
            Method::DpoMix => "dpo-mix",
            Method::DpoSingle => "dpo-single",
            Method::MergeDpo => "merge-dpo",
        }
    }
}

/// One multiplier for every previous dimension, or one per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Scalar(f64),
    PerDimension(Vec<f64>),
}

impl AlphaSpec {
    /// `α_1..α_{n−1}` for round `n`.
    pub fn for_round(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            AlphaSpec::Scalar(a) => Ok(vec![*a; n - 1]),
            AlphaSpec::PerDimension(v) if v.len() >= n - 1 => Ok(v[..n - 1].to_vec()),
            AlphaSpec::PerDimension(v) => Err(SpoError::DimensionMismatch(format!(
                "round {n} needs {} alphas, config has {}",
                n - 1,
                v.len()
            ))),
        }
    }
}

/// Projected dual ascent on the multipliers between epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAlphaConfig {
    /// Reward threshold `H_k` for each dimension, in round order.
    pub thresholds: Vec<f64>,
    pub step: f64,
    pub alpha_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dimensions: Vec<String>,
    pub method: Method,
    pub beta: f64,
    pub alpha: AlphaSpec,
    pub train: TrainConfig,
    /// Per-round epoch counts; rounds past the end use `train.epochs`.
    #[serde(default)]
    pub round_epochs: Vec<usize>,
    #[serde(default)]
    pub dual_alpha: Option<DualAlphaConfig>,
    /// DPO-Mix priority, highest first.
    #[serde(default)]
    pub priority: Vec<String>,
    #[serde(default)]
    pub tie_seed: u64,
}

impl PipelineConfig {
    pub fn new(dimensions: Vec<String>, method: Method, train: TrainConfig) -> Self {
        Self {
            dimensions,
            method,
            beta: 0.1,
            alpha: AlphaSpec::Scalar(0.1),
            train,
            round_epochs: Vec::new(),
            dual_alpha: None,
            priority: Vec::new(),
            tie_seed: 0,
        }
    }

    pub fn validate(&self, dataset: &PreferenceDataset) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(SpoError::InvalidArgument("no dimensions to train".into()));
        }
        for d in self.dimensions.iter().chain(&self.priority) {
            if !dataset.has_dimension(d) {
                return Err(SpoError::UnknownDimension(d.clone()));
            }
        }
        if !(self.beta > 0.0) {
            return Err(SpoError::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        if let Some(dual) = &self.dual_alpha {
            if !(dual.step > 0.0) || !(0.0..1.0).contains(&dual.alpha_max) {
                return Err(SpoError::InvalidArgument("dual step must be positive and alpha_max in [0, 1)".into()));
            }
        }
        if self.method == Method::DpoMix {
            let mut sorted = self.priority.clone();
            sorted.sort();
            let mut dims = dataset.dimensions.clone();
            dims.sort();
            if sorted != dims {
                return Err(SpoError::InvalidArgument("DPO-Mix priority must list every dataset dimension once".into()));
            }
        }
        self.train.check()
    }

    /// Multipliers of round `n`; always zero under S-DPO.
    pub fn alphas_for_round(&self, n: usize) -> Result<Vec<f64>> {
        match self.method {
            Method::SDpo => Ok(vec![0.0; n - 1]),
            _ => self.alpha.for_round(n),
        }
    }

    pub fn round_train(&self, n: usize) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(&e) = self.round_epochs.get(n - 1) {
            cfg.epochs = e;
        }
        cfg.seed = derive_seed(self.train.seed, "round", n as u64);
        cfg
    }
}

/// Callbacks during a pipeline run.
pub trait RunObserver {
    fn round_start(&mut self, _round: usize, _dimension: &str, _policy: &Policy) -> Result<()> {
        Ok(())
    }
    fn after_step(&mut self, _round: usize, _metrics: &StepMetrics, _policy: &Policy) -> Result<()> {
        Ok(())
    }
    fn after_epoch(&mut self, _round: usize, _epoch: usize, _policy: &Policy) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Clone, Debug)]
pub struct RoundRecord {
    pub round: usize,
    pub dimension: String,
    /// Schedule in force at the end of the round.
    pub schedule: KappaSchedule,
    pub metrics: Vec<StepMetrics>,
    /// Multipliers after each epoch (changes only under dual adjustment).
    pub alpha_trace: Vec<Vec<f64>>,
}

/// Result of [`run_sequential`]: `π_0..π_N`, one record per round and the
/// cache of rounds `0..N−1`.
#[derive(Clone, Debug)]
pub struct SequentialRun {
    pub policies: Vec<Policy>,
    pub rounds: Vec<RoundRecord>,
    pub cache: LogProbCache,
}

impl SequentialRun {
    pub fn final_policy(&self) -> &Policy {
        self.policies.last().expect("at least the initial policy")
    }
}

struct RoundControl<'a> {
    round: usize,
    observer: &'a mut dyn RunObserver,
    dual: Option<DualControl<'a>>,
    alpha_trace: Vec<Vec<f64>>,
}

struct DualControl<'a> {
    config: &'a DualAlphaConfig,
    dataset: &'a PreferenceDataset,
    cache: &'a LogProbCache,
    dimensions: &'a [String],
}

impl DualControl<'_> {
    /// Implicit reward margin of `policy` on previous dimension `k`
    /// (1-based) relative to `π_{k−1}`, averaged over that dimension's
    /// training pairs.
    fn measure(&self, policy: &Policy, k: usize, beta: f64) -> Result<f64> {
        let dim = &self.dimensions[k - 1];
        let indices = self.dataset.training_indices(dim);
        if indices.is_empty() {
            return Err(SpoError::EmptyBatch);
        }
        let mut total = 0.0;
        for &i in &indices {
            let ex = &self.dataset.examples[i];
            let (w, l) = ex.ordered(dim).ok_or_else(|| SpoError::UnknownDimension(dim.clone()))?;
            let (rw, rl) = self.cache.oriented(k - 1, i, dim, self.dataset)?;
            total += beta * ((policy.logprob(&ex.prompt, w)? - rw) - (policy.logprob(&ex.prompt, l)? - rl));
        }
        Ok(total / indices.len() as f64)
    }
}

impl EpochControl for RoundControl<'_> {
    fn after_step(&mut self, metrics: &StepMetrics, policy: &Policy) -> Result<()> {
        self.observer.after_step(self.round, metrics, policy)
    }

    fn after_epoch(&mut self, epoch: usize, policy: &Policy, schedule: &mut KappaSchedule) -> Result<()> {
        if let Some(dual) = &self.dual {
            let mut alphas = schedule.alphas.clone();
            for (k, alpha) in alphas.iter_mut().enumerate() {
                let threshold = *dual.config.thresholds.get(k).ok_or_else(|| {
                    SpoError::DimensionMismatch(format!("no dual threshold for dimension {}", k + 1))
                })?;
                let measured = dual.measure(policy, k + 1, schedule.beta)?;
                *alpha = dual_alpha_update(*alpha, measured, threshold, dual.config.step, dual.config.alpha_max);
            }
            *schedule = kappa_schedule(schedule.round_n, schedule.beta, &alphas)?;
        }
        self.alpha_trace.push(schedule.alphas.clone());
        self.observer.after_epoch(self.round, epoch, policy)
    }
}

/// Sequential fine-tuning: round 1 is DPO against `π_0`; before round
/// `n ≥ 2` the cache is extended with `π_{n−1}` and the round trains on the
/// `n`-term schedule. Earlier policies are never run during a round.
pub fn run_sequential(
    config: &PipelineConfig,
    dataset: &PreferenceDataset,
    pi0: &Policy,
    observer: &mut dyn RunObserver,
) -> Result<SequentialRun> {
    config.validate(dataset)?;
    if !matches!(config.method, Method::Spo | Method::SDpo) {
        return Err(SpoError::InvalidArgument(format!(
            "{} is not a sequential method",
            config.method.name()
        )));
    }
    let mut cache = LogProbCache::new(dataset)?;
    let mut policies = vec![pi0.clone()];
    let mut rounds = Vec::new();
    for (idx, dim) in config.dimensions.iter().enumerate() {
        let n = idx + 1;
        let current = policies.last().expect("initial policy").clone();
        cache.extend(&current, dataset)?;
        let schedule = kappa_schedule(n, config.beta, &config.alphas_for_round(n)?)?;
        observer.round_start(n, dim, &current)?;
        let dual = match (&config.dual_alpha, config.method.clone()) {
            (Some(d), Method::Spo) if n > 1 => Some(DualControl {
                config: d,
                dataset,
                cache: &cache,
                dimensions: &config.dimensions,
            }),
            _ => None,
        };
        let mut control = RoundControl {
            round: n,
            observer: &mut *observer,
            dual,
            alpha_trace: Vec::new(),
        };
        let out = train_round_observed(
            &current,
            dataset,
            dim,
            &schedule,
            &cache,
            &config.round_train(n),
            &mut control,
        )?;
        let alpha_trace = control.alpha_trace;
        rounds.push(RoundRecord {
            round: n,
            dimension: dim.clone(),
            schedule: out.schedule,
            metrics: out.metrics,
            alpha_trace,
        });
        policies.push(out.policy);
    }
    Ok(SequentialRun {
        policies,
        rounds,
        cache,
    })
}

/// One DPO round on `dimension` against `pi0`.
pub fn run_dpo_single(
    dataset: &PreferenceDataset,
    dimension: &str,
    train: &TrainConfig,
    beta: f64,
    pi0: &Policy,
) -> Result<RoundOutput> {
    let mut cache = LogProbCache::new(dataset)?;
    cache.extend(pi0, dataset)?;
    train_round(pi0, dataset, dimension, &kappa_schedule(1, beta, &[])?, &cache, train)
}

/// One DPO policy per dimension from `pi0`, merged with equal weights in
/// parameter space.
pub fn run_merge_dpo(
    dataset: &PreferenceDataset,
    dimensions: &[String],
    train: &TrainConfig,
    beta: f64,
    pi0: &Policy,
) -> Result<(Policy, Vec<RoundOutput>)> {
    if dimensions.is_empty() {
        return Err(SpoError::InvalidArgument("nothing to merge".into()));
    }
    let mut cache = LogProbCache::new(dataset)?;
    cache.extend(pi0, dataset)?;
    let schedule = kappa_schedule(1, beta, &[])?;
    let outputs = dimensions
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut cfg = train.clone();
            cfg.seed = derive_seed(train.seed, "merge", i as u64);
            train_round(pi0, dataset, d, &schedule, &cache, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Policy> = outputs.iter().map(|o| &o.policy).collect();
    let weights = vec![1.0 / refs.len() as f64; refs.len()];
    let merged = merge_parameters(&refs, &weights)?;
    Ok((merged, outputs))
}

/// Name of the single dimension produced by [`mix_labels`].
pub const MIXED_DIMENSION: &str = "mixed";

/// Collapses every example's labels into one by priority: the first
/// dimension in `priority` on which the two responses differ decides.
/// Differences are judged by the latent scores when `latent` is given
/// (equal scores count as a tie and defer to the next dimension); without
/// it every label is decisive. Examples tied on all dimensions get a coin
/// flip seeded by `tie_seed` and the example index.
pub fn mix_labels(
    dataset: &PreferenceDataset,
    priority: &[String],
    tie_seed: u64,
    latent: Option<&LatentRewardSpec>,
) -> Result<PreferenceDataset> {
    for d in priority {
        if !dataset.has_dimension(d) {
            return Err(SpoError::UnknownDimension(d.clone()));
        }
    }
    let mut examples = Vec::with_capacity(dataset.examples.len());
    for (i, ex) in dataset.examples.iter().enumerate() {
        let mut decided = None;
        for d in priority {
            let label = ex.labels[d];
            let tied = match latent {
                Some(spec) => spec.score(d, &ex.prompt, &ex.response_a)? == spec.score(d, &ex.prompt, &ex.response_b)?,
                None => false,
            };
            if !tied {
                decided = Some(label);
                break;
            }
        }
        let label = decided.unwrap_or_else(|| {
            Label::from_a_preferred(stream_rng(tie_seed, "mix-tie", i as u64).random_bool(0.5))
        });
        let mut out = ex.clone();
        out.labels = BTreeMap::from([(MIXED_DIMENSION.to_string(), label)]);
        out.focus = None;
        examples.push(out);
    }
    Ok(PreferenceDataset {
        dimensions: vec![MIXED_DIMENSION.to_string()],
        vocab: dataset.vocab.clone(),
        examples,
        provenance: dataset.provenance.clone(),
        max_response_len: dataset.max_response_len,
    })
}

/// DPO on the priority-mixed labels.
pub fn run_dpo_mix(
    dataset: &PreferenceDataset,
    priority: &[String],
    tie_seed: u64,
    latent: Option<&LatentRewardSpec>,
    train: &TrainConfig,
    beta: f64,
    pi0: &Policy,
) -> Result<(PreferenceDataset, RoundOutput)> {
    let mixed = mix_labels(dataset, priority, tie_seed, latent)?;
    let out = run_dpo_single(&mixed, MIXED_DIMENSION, train, beta, pi0)?;
    Ok((mixed, out))
}

/// Outcome of [`run_method`]: the final policy plus whatever the method
/// produced along the way.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub policy: Policy,
    pub sequential: Option<SequentialRun>,
    /// Per-dimension (or single mixed) DPO rounds of the baselines.
    pub baseline_rounds: Vec<(String, RoundOutput)>,
}

/// Dispatches on `config.method`. `DpoSingle` trains on the first listed
/// dimension.
pub fn run_method(
    config: &PipelineConfig,
    dataset: &PreferenceDataset,
    pi0: &Policy,
    latent: Option<&LatentRewardSpec>,
    observer: &mut dyn RunObserver,
) -> Result<MethodRun> {
    config.validate(dataset)?;
    let train = config.round_train(1);
    match config.method {
        Method::Spo | Method::SDpo => {
            let run = run_sequential(config, dataset, pi0, observer)?;
            Ok(MethodRun {
                policy: run.final_policy().clone(),
                sequential: Some(run),
                baseline_rounds: Vec::new(),
            })
        }
        Method::DpoSingle => {
            let dim = &config.dimensions[0];
            let out = run_dpo_single(dataset, dim, &train, config.beta, pi0)?;
            Ok(MethodRun {
                policy: out.policy.clone(),
                sequential: None,
                baseline_rounds: vec![(dim.clone(), out)],
            })
        }
        Method::MergeDpo => {
            let (merged, outs) = run_merge_dpo(dataset, &config.dimensions, &train, config.beta, pi0)?;
            Ok(MethodRun {
                policy: merged,
                sequential: None,
                baseline_rounds: config.dimensions.iter().cloned().zip(outs).collect(),
            })
        }
        Method::DpoMix => {
            let (_, out) = run_dpo_mix(dataset, &config.priority, config.tie_seed, latent, &train, config.beta, pi0)?;
            Ok(MethodRun {
                policy: out.policy.clone(),
                sequential: None,
                baseline_rounds: vec![(MIXED_DIMENSION.to_string(), out)],
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::{PreferenceExample, Provenance, TokenId, Vocab};
    use crate::models::{OptimizerKind, Precision, TabularPolicy};
    use crate::tabular::{CategoricalPolicy, EnumeratedSpace};

    pub(super) fn toy() -> (PreferenceDataset, Policy) {
        let vocab = Vocab::new(10, vec![], 9).unwrap();
        let responses: Vec<Vec<TokenId>> = (3..8).map(|t| vec![t, 9]).collect();
        let space = Arc::new(EnumeratedSpace::new(vec![vec![0], vec![1]], responses.clone()).unwrap());
        let mut examples = Vec::new();
        for p in 0..2u32 {
            for i in 0..5 {
                for j in (i + 1)..5 {
                    examples.push(PreferenceExample {
                        prompt: vec![p],
                        response_a: responses[i].clone(),
                        response_b: responses[j].clone(),
                        labels: BTreeMap::from([
                            ("x".to_string(), Label::from_a_preferred(i < 2)),
                            ("y".to_string(), Label::from_a_preferred(j == 4 || (i + p as usize) % 2 == 0)),
                            ("z".to_string(), Label::from_a_preferred((i * j) % 3 == 0)),
                        ]),
                        focus: None,
                    });
                }
            }
        }
        let ds = PreferenceDataset {
            dimensions: vec!["x".into(), "y".into(), "z".into()],
            vocab: vocab.clone(),
            examples,
            provenance: Provenance {
                generator: "toy".into(),
                seed: 0,
            },
            max_response_len: 2,
        };
        let mut rng = stream_rng(4, "toy", 0);
        let pi0 = TabularPolicy::new(vocab, space, CategoricalPolicy::random(2, 5, &mut rng)).unwrap().into();
        (ds, pi0)
    }

    pub(super) fn sgd(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 3.0,
            optimizer: OptimizerKind::Sgd,
            seed: 5,
            precision: Precision::F64,
        }
    }

    fn dims() -> Vec<String> {
        vec!["x".into(), "y".into(), "z".into()]
    }

    #[test]
    fn spo_with_zero_alpha_matches_s_dpo() {
        let (ds, pi0) = toy();
        let mut spo = PipelineConfig::new(dims(), Method::Spo, sgd(3));
        spo.alpha = AlphaSpec::Scalar(0.0);
        let sdpo = PipelineConfig::new(dims(), Method::SDpo, sgd(3));
        let a = run_sequential(&spo, &ds, &pi0, &mut ()).unwrap();
        let b = run_sequential(&sdpo, &ds, &pi0, &mut ()).unwrap();
        for (ra, rb) in a.rounds.iter().zip(&b.rounds) {
            assert_eq!(ra.metrics, rb.metrics);
        }
        assert_eq!(a.final_policy().params(), b.final_policy().params());
    }

    #[test]
    fn cache_covers_all_earlier_rounds() {
        let (ds, pi0) = toy();
        let run = run_sequential(&PipelineConfig::new(dims(), Method::Spo, sgd(2)), &ds, &pi0, &mut ()).unwrap();
        assert_eq!(run.cache.num_rounds(), 3);
        assert_eq!(run.policies.len(), 4);
        assert_eq!(run.rounds[2].schedule.kappas.len(), 3);
    }

    #[test]
    fn alpha_changes_later_rounds_only() {
        let (ds, pi0) = toy();
        let a = run_sequential(&PipelineConfig::new(dims(), Method::Spo, sgd(2)), &ds, &pi0, &mut ()).unwrap();
        let b = run_sequential(&PipelineConfig::new(dims(), Method::SDpo, sgd(2)), &ds, &pi0, &mut ()).unwrap();
        assert_eq!(a.policies[1].params(), b.policies[1].params());
        assert_ne!(a.policies[2].params(), b.policies[2].params());
    }

    #[test]
    fn dual_alpha_moves_within_bounds() {
        let (ds, pi0) = toy();
        let mut cfg = PipelineConfig::new(dims(), Method::Spo, sgd(4));
        cfg.dual_alpha = Some(DualAlphaConfig {
            thresholds: vec![10.0, 10.0],
            step: 0.05,
            alpha_max: 0.5,
        });
        let run = run_sequential(&cfg, &ds, &pi0, &mut ()).unwrap();
        let trace = &run.rounds[2].alpha_trace;
        assert_eq!(trace.len(), 4);
        // An unreachable threshold pushes every multiplier up to the cap.
        for w in trace.windows(2) {
            assert!(w[1].iter().zip(&w[0]).all(|(b, a)| b >= a));
        }
        assert!(trace.iter().flatten().all(|&a| (0.0..=0.5).contains(&a)));
        assert!(run.rounds[0].alpha_trace.iter().all(|a| a.is_empty()));
    }

    #[test]
    fn mixing_follows_priority_and_is_seeded() {
        let (ds, _) = toy();
        let prio = vec!["y".to_string(), "x".to_string(), "z".to_string()];
        let mixed = mix_labels(&ds, &prio, 3, None).unwrap();
        for (m, ex) in mixed.examples.iter().zip(&ds.examples) {
            assert_eq!(m.labels[MIXED_DIMENSION], ex.labels["y"]);
        }
        assert_eq!(mixed, mix_labels(&ds, &prio, 3, None).unwrap());
    }

    #[test]
    fn baselines_run() {
        let (ds, pi0) = toy();
        let (merged, outs) = run_merge_dpo(&ds, &dims(), &sgd(2), 0.1, &pi0).unwrap();
        assert_eq!(outs.len(), 3);
        let manual: Vec<f64> = (0..pi0.num_params())
            .map(|i| outs.iter().map(|o| o.policy.params()[i] / 3.0).sum())
            .collect();
        for (a, b) in merged.params().iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut cfg = PipelineConfig::new(dims(), Method::DpoMix, sgd(2));
        cfg.priority = vec!["z".into(), "x".into(), "y".into()];
        run_method(&cfg, &ds, &pi0, None, &mut ()).unwrap();
        cfg.priority = vec!["z".into()];
        assert!(run_method(&cfg, &ds, &pi0, None, &mut ()).is_err());
    }
}
