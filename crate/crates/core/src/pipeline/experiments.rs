//! End-to-end experiments on the synthetic schemes: marker retention,
//! the α trade-off on conflicting dimensions and over-refusal under long
//! training.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_policy, expected_rewards, EvalReport, EvalSettings};
use super::{run_sequential, AlphaSpec, Method, PipelineConfig};
use crate::cache::LogProbCache;
use crate::data::{TokenId, Vocab};
use crate::datagen::{
    gen_conflicting_dataset, gen_special_token_dataset, is_refusal, ConflictingParams, Generated, SpecialTokenParams,
};
use crate::error::Result;
use crate::models::{
    sample_response, sft_train, train_round, train_round_observed, EpochControl, NeuralPolicy, NeuralPolicyConfig,
    OptimizerKind, Policy, RoundOutput, SampleMode, StepMetrics, TrainConfig,
};
use crate::objectives::{kappa_schedule, KappaSchedule};
use crate::seed::derive_seed;

/// Supervised fine-tuning of a freshly initialised neural policy on the
/// generator's `(prompt, response)` pairs.
pub fn sft_initial_policy(
    vocab: &Vocab,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    model: &NeuralPolicyConfig,
    sft: &TrainConfig,
) -> Result<(Policy, Vec<f64>)> {
    let init: Policy = NeuralPolicy::new(vocab.clone(), model.clone(), derive_seed(sft.seed, "init", 0))?.into();
    sft_train(&init, pairs, sft)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecialTokenExperiment {
    pub data: SpecialTokenParams,
    pub model: NeuralPolicyConfig,
    pub sft: TrainConfig,
    pub train: TrainConfig,
    pub beta: f64,
    pub alpha: f64,
    pub samples_per_prompt: usize,
}

impl SpecialTokenExperiment {
    /// Smallest neural policy, one epoch per dimension.
    pub fn standard() -> Self {
        let data = SpecialTokenParams::default();
        let context = data.prompt_length + data.max_response_len();
        Self {
            model: NeuralPolicyConfig::small(context),
            sft: TrainConfig {
                epochs: 2,
                batch_size: 16,
                learning_rate: 1e-2,
                optimizer: OptimizerKind::Adam,
                seed: 0,
                precision: Default::default(),
            },
            train: TrainConfig {
                learning_rate: 2e-2,
                ..TrainConfig::neural(0)
            },
            data,
            beta: 0.2,
            alpha: 0.5,
            samples_per_prompt: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecialTokenOutcome {
    pub seed: u64,
    pub initial: EvalReport,
    /// Evaluation after every round, last entry is the final policy.
    pub spo: Vec<EvalReport>,
    pub sdpo: Vec<EvalReport>,
}

impl SpecialTokenOutcome {
    pub fn spo_final(&self) -> &EvalReport {
        self.spo.last().expect("at least one round")
    }

    pub fn sdpo_final(&self) -> &EvalReport {
        self.sdpo.last().expect("at least one round")
    }
}

fn with_seed(cfg: &TrainConfig, seed: u64, stream: &str) -> TrainConfig {
    let mut c = cfg.clone();
    c.seed = derive_seed(seed, stream, 0);
    c
}

/// Runs SPO and S-DPO from the same data and starting policy for one seed
/// and evaluates every round on held-out prompts.
pub fn run_special_token(exp: &SpecialTokenExperiment, seed: u64) -> Result<SpecialTokenOutcome> {
    let mut data = exp.data.clone();
    data.seed = seed;
    let generated = gen_special_token_dataset(&data)?;
    let ds = &generated.dataset;
    let (pi0, _) = sft_initial_policy(&ds.vocab, &generated.sidecar.sft_pairs, &exp.model, &with_seed(&exp.sft, seed, "sft"))?;
    let settings = EvalSettings::stochastic(exp.samples_per_prompt, data.max_response_len(), derive_seed(seed, "special-eval", 0));
    let markers = ds.vocab.special_tokens[..data.num_dims].to_vec();
    let eval = |p: &Policy| {
        evaluate_policy(p, &generated.sidecar.eval_prompts, &generated.sidecar.latent, &markers, &[], &settings)
    };
    let train = with_seed(&exp.train, seed, "train");
    let mut runs = Vec::new();
    for method in [Method::Spo, Method::SDpo] {
        let mut cfg = PipelineConfig::new(data.dimension_names(), method, train.clone());
        cfg.beta = exp.beta;
        cfg.alpha = AlphaSpec::Scalar(exp.alpha);
        let run = run_sequential(&cfg, ds, &pi0, &mut ())?;
        runs.push(run.policies[1..].iter().map(&eval).collect::<Result<Vec<_>>>()?);
    }
    let sdpo = runs.pop().expect("two runs");
    let spo = runs.pop().expect("two runs");
    Ok(SpecialTokenOutcome {
        seed,
        initial: eval(&pi0)?,
        spo,
        sdpo,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictExperiment {
    pub data: ConflictingParams,
    pub model: NeuralPolicyConfig,
    pub sft: TrainConfig,
    pub round1: TrainConfig,
    pub round2: TrainConfig,
    pub beta: f64,
    pub samples_per_prompt: usize,
}

impl ConflictExperiment {
    /// Half of the round-two pairs oppose an answer to a refusal, and the
    /// starting policy refuses 30% of the time. Round one is kept gentle
    /// so refusals stay reachable in round two.
    pub fn standard() -> Self {
        let data = ConflictingParams {
            refusal_fraction: 0.5,
            sft_refusal_rate: 0.3,
            ..ConflictingParams::default()
        };
        let context = data.prompt_length + data.response_length + 1;
        let adam = |epochs, lr| TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            precision: Default::default(),
        };
        Self {
            model: NeuralPolicyConfig::small(context),
            sft: adam(2, 1e-2),
            round1: adam(1, 5e-4),
            round2: adam(1, 1e-3),
            data,
            beta: 0.1,
            samples_per_prompt: 5,
        }
    }

    pub fn eval_settings(&self, seed: u64) -> EvalSettings {
        EvalSettings::stochastic(
            self.samples_per_prompt,
            self.data.response_length + 1,
            derive_seed(seed, "conflict-eval", 0),
        )
    }
}

/// Everything shared by every round-2 variant of one seed: data, `π_0`
/// from supervised training, `π_1` from DPO on helpfulness and the cache
/// of both.
#[derive(Clone, Debug)]
pub struct ConflictSetup {
    pub seed: u64,
    pub generated: Generated,
    pub pi0: Policy,
    pub pi1: Policy,
    pub cache: LogProbCache,
    pub round1_metrics: Vec<StepMetrics>,
}

pub fn conflict_setup(exp: &ConflictExperiment, seed: u64) -> Result<ConflictSetup> {
    let mut data = exp.data.clone();
    data.seed = seed;
    let generated = gen_conflicting_dataset(&data)?;
    let ds = &generated.dataset;
    let (pi0, _) = sft_initial_policy(&ds.vocab, &generated.sidecar.sft_pairs, &exp.model, &with_seed(&exp.sft, seed, "sft"))?;
    let mut cache = LogProbCache::new(ds)?;
    cache.extend(&pi0, ds)?;
    let round1 = train_round(
        &pi0,
        ds,
        "helpful",
        &kappa_schedule(1, exp.beta, &[])?,
        &cache,
        &with_seed(&exp.round1, seed, "round1"),
    )?;
    cache.extend(&round1.policy, ds)?;
    Ok(ConflictSetup {
        seed,
        pi0,
        pi1: round1.policy,
        cache,
        round1_metrics: round1.metrics,
        generated,
    })
}

/// Round 2 (harmlessness) from `π_1` with multiplier `alpha`; `alpha = 0`
/// is S-DPO.
pub fn conflict_round2(
    setup: &ConflictSetup,
    exp: &ConflictExperiment,
    alpha: f64,
    epochs: usize,
    control: &mut dyn EpochControl,
) -> Result<RoundOutput> {
    let mut cfg = with_seed(&exp.round2, setup.seed, "round2");
    cfg.epochs = epochs;
    train_round_observed(
        &setup.pi1,
        &setup.generated.dataset,
        "harmless",
        &kappa_schedule(2, exp.beta, &[alpha])?,
        &setup.cache,
        &cfg,
        control,
    )
}

/// One point of an α sweep: mean latent rewards of the final policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub rewards: Vec<f64>,
}

/// Final held-out rewards (helpful, harmless) for every α and seed. The
/// setup of a seed is shared by all α values.
pub fn alpha_sweep(exp: &ConflictExperiment, alphas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let setup = conflict_setup(exp, seed)?;
        let settings = exp.eval_settings(seed);
        for &alpha in alphas {
            let out = conflict_round2(&setup, exp, alpha, exp.round2.epochs, &mut ())?;
            rows.push(SweepRow {
                alpha,
                seed,
                rewards: expected_rewards(
                    &out.policy,
                    &setup.generated.sidecar.eval_prompts,
                    &setup.generated.sidecar.latent,
                    &settings,
                )?,
            });
        }
    }
    Ok(rows)
}

/// Fraction of sampled responses that are refusals.
pub fn refusal_rate(policy: &Policy, prompts: &[Vec<TokenId>], pattern: &[TokenId], settings: &EvalSettings) -> Result<f64> {
    let mut refusals = 0usize;
    let mut total = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        for s in 0..settings.samples_per_prompt {
            let seed = derive_seed(settings.seed, "refusal", (i * settings.samples_per_prompt + s) as u64);
            let r = sample_response(policy, prompt, settings.max_len, SampleMode::Stochastic, seed)?;
            refusals += is_refusal(&r, pattern) as usize;
            total += 1;
        }
    }
    Ok(refusals as f64 / total as f64)
}

struct RefusalProbe<'a> {
    prompts: &'a [Vec<TokenId>],
    pattern: &'a [TokenId],
    settings: EvalSettings,
    rates: Vec<f64>,
}

impl EpochControl for RefusalProbe<'_> {
    fn after_epoch(&mut self, _epoch: usize, policy: &Policy, _schedule: &mut KappaSchedule) -> Result<()> {
        self.rates.push(refusal_rate(policy, self.prompts, self.pattern, &self.settings)?);
        Ok(())
    }
}

/// Refusal rate on held-out prompts after each epoch of an extended
/// round 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitCurve {
    pub alpha: f64,
    pub seed: u64,
    /// Rate before round 2 (the `π_1` policy).
    pub initial: f64,
    pub per_epoch: Vec<f64>,
}

pub fn overfitting_curve(setup: &ConflictSetup, exp: &ConflictExperiment, alpha: f64, epochs: usize) -> Result<OverfitCurve> {
    let side = &setup.generated.sidecar;
    let settings = exp.eval_settings(setup.seed);
    let mut probe = RefusalProbe {
        prompts: &side.eval_prompts,
        pattern: &side.refusal_pattern,
        settings: settings.clone(),
        rates: Vec::new(),
    };
    conflict_round2(setup, exp, alpha, epochs, &mut probe)?;
    Ok(OverfitCurve {
        alpha,
        seed: setup.seed,
        initial: refusal_rate(&setup.pi1, &side.eval_prompts, &side.refusal_pattern, &settings)?,
        per_epoch: probe.rates,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Seed-averaged rewards per α, in the order α first appears.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>, usize)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|(a, _, _)| *a == row.alpha) {
            Some((_, sums, n)) => {
                for (s, r) in sums.iter_mut().zip(&row.rewards) {
                    *s += r;
                }
                *n += 1;
            }
            None => out.push((row.alpha, row.rewards.clone(), 1)),
        }
    }
    out.into_iter()
        .map(|(a, sums, n)| (a, sums.into_iter().map(|s| s / n as f64).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Hand-ranked: x ranks 1..5, y ranks (2,1,4,3,5); Σd² = 4, ρ = 1 − 6·4/120.
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.2, 0.1, 0.4, 0.3, 0.5]);
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sweep_means_average_seeds() {
        let rows = vec![
            SweepRow { alpha: 0.0, seed: 0, rewards: vec![1.0, 2.0] },
            SweepRow { alpha: 0.0, seed: 1, rewards: vec![3.0, 4.0] },
            SweepRow { alpha: 0.1, seed: 0, rewards: vec![5.0, 6.0] },
        ];
        assert_eq!(sweep_means(&rows), vec![(0.0, vec![2.0, 3.0]), (0.1, vec![5.0, 6.0])]);
    }

    #[test]
    fn tiny_conflict_setup_is_deterministic() {
        let mut exp = ConflictExperiment::standard();
        exp.data.num_examples = 40;
        exp.data.num_sft = 40;
        exp.data.num_eval_prompts = 4;
        exp.samples_per_prompt = 2;
        let a = conflict_setup(&exp, 3).unwrap();
        let b = conflict_setup(&exp, 3).unwrap();
        assert_eq!(a.pi1.params(), b.pi1.params());
        assert_eq!(a.cache.rounds().len(), 2);
        let curve = overfitting_curve(&a, &exp, 0.1, 2).unwrap();
        assert_eq!(curve.per_epoch.len(), 2);
        assert!(curve.per_epoch.iter().all(|r| (0.0..=1.0).contains(r)));
    }
}
