use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RunObserver;
use crate::data::TokenId;
use crate::datagen::{is_refusal, LatentRewardSpec};
use crate::error::{Result, SpoError};
use crate::models::{sample_response, Policy, PolicyModel, SampleMode, StepMetrics};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub samples_per_prompt: usize,
    pub max_len: usize,
    pub mode: SampleMode,
    pub seed: u64,
}

impl EvalSettings {
    pub fn stochastic(samples_per_prompt: usize, max_len: usize, seed: u64) -> Self {
        Self {
            samples_per_prompt,
            max_len,
            mode: SampleMode::Stochastic,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub seed: u64,
    pub special_tokens: Vec<TokenId>,
    /// Fraction of responses containing each special token.
    pub token_presence: Vec<f64>,
    /// Fraction containing every special token.
    pub pareto_fraction: f64,
    /// Mean latent score per dimension.
    pub expected_rewards: BTreeMap<String, f64>,
    pub refusal_rate: f64,
    #[serde(default)]
    pub win_rates: BTreeMap<String, f64>,
}

/// `samples_per_prompt` responses for every prompt, prompt-major. Sample
/// `k` overall is drawn with seed `derive_seed(seed, "eval", k)`, so two
/// policies evaluated with the same settings share random numbers.
pub fn sample_responses(policy: &Policy, prompts: &[Vec<TokenId>], settings: &EvalSettings) -> Result<Vec<Vec<TokenId>>> {
    if settings.samples_per_prompt == 0 {
        return Err(SpoError::InvalidArgument("samples_per_prompt must be at least 1".into()));
    }
    let total = prompts.len() * settings.samples_per_prompt;
    (0..total)
        .into_par_iter()
        .map(|k| {
            let prompt = &prompts[k / settings.samples_per_prompt];
            let seed = derive_seed(settings.seed, "eval", k as u64);
            sample_response(policy, prompt, settings.max_len, settings.mode, seed)
        })
        .collect()
}

/// Samples responses and measures marker presence, Pareto fraction, mean
/// latent rewards and the refusal rate.
pub fn evaluate_policy(
    policy: &Policy,
    prompts: &[Vec<TokenId>],
    latent: &LatentRewardSpec,
    special_tokens: &[TokenId],
    refusal_pattern: &[TokenId],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(SpoError::InvalidArgument("no evaluation prompts".into()));
    }
    let responses = sample_responses(policy, prompts, settings)?;
    let n = responses.len() as f64;
    let token_presence = special_tokens
        .iter()
        .map(|t| responses.iter().filter(|r| r.contains(t)).count() as f64 / n)
        .collect();
    let pareto = responses
        .iter()
        .filter(|r| special_tokens.iter().all(|t| r.contains(t)))
        .count() as f64
        / n;
    let refusals = responses.iter().filter(|r| is_refusal(r, refusal_pattern)).count() as f64 / n;
    let mut expected_rewards = BTreeMap::new();
    for d in &latent.dimensions {
        let mut total = 0.0;
        for (k, r) in responses.iter().enumerate() {
            total += d.scorer.score(&prompts[k / settings.samples_per_prompt], r)?;
        }
        expected_rewards.insert(d.dimension.clone(), total / n);
    }
    Ok(EvalReport {
        samples: responses.len(),
        seed: settings.seed,
        special_tokens: special_tokens.to_vec(),
        token_presence,
        pareto_fraction: pareto,
        expected_rewards,
        refusal_rate: refusals,
        win_rates: BTreeMap::new(),
    })
}

fn weighted_score(
    latent: &LatentRewardSpec,
    weights: &BTreeMap<String, f64>,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<f64> {
    let mut s = 0.0;
    for (d, w) in weights {
        s += w * latent.score(d, prompt, response)?;
    }
    Ok(s)
}

/// Win rate of `a` over `b`: one response each per prompt (sharing the
/// sampling seed), judged by the weighted latent score; ties count half.
pub fn compare_policies(
    a: &Policy,
    b: &Policy,
    prompts: &[Vec<TokenId>],
    latent: &LatentRewardSpec,
    weights: &BTreeMap<String, f64>,
    mode: SampleMode,
    max_len: usize,
    seed: u64,
) -> Result<f64> {
    if a.vocab() != b.vocab() {
        return Err(SpoError::VocabMismatch("compared policies use different vocabularies".into()));
    }
    if prompts.is_empty() {
        return Err(SpoError::InvalidArgument("no prompts to compare on".into()));
    }
    let outcomes = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let s = derive_seed(seed, "compare", i as u64);
            let ra = sample_response(a, prompt, max_len, mode, s)?;
            let rb = sample_response(b, prompt, max_len, mode, s)?;
            let (sa, sb) = (
                weighted_score(latent, weights, prompt, &ra)?,
                weighted_score(latent, weights, prompt, &rb)?,
            );
            Ok(if sa > sb {
                1.0
            } else if sa == sb {
                0.5
            } else {
                0.0
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(outcomes.iter().sum::<f64>() / outcomes.len() as f64)
}

/// Expected latent reward per dimension (declaration order), averaged
/// over prompts. Tabular policies are summed exactly over their responses;
/// neural policies are estimated from `settings` samples.
pub fn expected_rewards(
    policy: &Policy,
    prompts: &[Vec<TokenId>],
    latent: &LatentRewardSpec,
    settings: &EvalSettings,
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(SpoError::InvalidArgument("no evaluation prompts".into()));
    }
    let mut totals = vec![0.0; latent.dimensions.len()];
    match policy.model() {
        PolicyModel::Tabular(t) => {
            for prompt in prompts {
                let probs = t.response_probs(prompt)?;
                for (resp, p) in t.space().responses().iter().zip(&probs) {
                    for (acc, s) in totals.iter_mut().zip(latent.score_all(prompt, resp)?) {
                        *acc += p * s;
                    }
                }
            }
            Ok(totals.into_iter().map(|t| t / prompts.len() as f64).collect())
        }
        PolicyModel::Neural(_) => {
            let responses = sample_responses(policy, prompts, settings)?;
            for (k, r) in responses.iter().enumerate() {
                let prompt = &prompts[k / settings.samples_per_prompt];
                for (acc, s) in totals.iter_mut().zip(latent.score_all(prompt, r)?) {
                    *acc += s;
                }
            }
            Ok(totals.into_iter().map(|t| t / responses.len() as f64).collect())
        }
    }
}

/// Ground-truth rewards at one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPoint {
    pub round: usize,
    /// Number of optimizer steps taken in the round.
    pub step: usize,
    pub rewards: Vec<f64>,
}

/// Keeps a copy of the policy at the start of each round and every
/// `interval` steps, for reward curves computed afterwards.
pub struct SnapshotRecorder {
    pub interval: usize,
    pub snapshots: Vec<(usize, usize, Policy)>,
}

impl SnapshotRecorder {
    pub fn new(interval: usize) -> Self {
        Self {
            interval: interval.max(1),
            snapshots: Vec::new(),
        }
    }
}

impl RunObserver for SnapshotRecorder {
    fn round_start(&mut self, round: usize, _dimension: &str, policy: &Policy) -> Result<()> {
        self.snapshots.push((round, 0, policy.clone()));
        Ok(())
    }

    fn after_step(&mut self, round: usize, metrics: &StepMetrics, policy: &Policy) -> Result<()> {
        let taken = metrics.step + 1;
        if taken % self.interval == 0 {
            self.snapshots.push((round, taken, policy.clone()));
        }
        Ok(())
    }
}

/// Latent-reward curve over recorded snapshots; every snapshot is
/// evaluated with the same sampling seeds.
pub fn track_round_rewards(
    snapshots: &[(usize, usize, Policy)],
    prompts: &[Vec<TokenId>],
    latent: &LatentRewardSpec,
    settings: &EvalSettings,
) -> Result<Vec<RewardPoint>> {
    snapshots
        .iter()
        .map(|(round, step, policy)| {
            Ok(RewardPoint {
                round: *round,
                step: *step,
                rewards: expected_rewards(policy, prompts, latent, settings)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::Vocab;
    use crate::datagen::{DimensionScorer, NamedScorer};
    use crate::models::TabularPolicy;
    use crate::tabular::{CategoricalPolicy, EnumeratedSpace, RewardTable};

    fn setup() -> (Vocab, Arc<EnumeratedSpace>, LatentRewardSpec) {
        let vocab = Vocab::new(9, vec![5, 6], 8).unwrap();
        let responses = vec![vec![1, 5, 6, 8], vec![1, 5, 8], vec![2, 8], vec![3, 6, 8]];
        let space = Arc::new(EnumeratedSpace::new(vec![vec![0], vec![4]], responses).unwrap());
        let table = RewardTable::new(2, 4, vec![1.0, 0.5, 0.0, 0.2, 0.3, 0.3, 0.9, 0.1]).unwrap();
        let latent = LatentRewardSpec {
            dimensions: vec![
                NamedScorer {
                    dimension: "t".into(),
                    scorer: DimensionScorer::Table {
                        space: (*space).clone(),
                        rewards: table,
                    },
                },
                NamedScorer {
                    dimension: "m".into(),
                    scorer: DimensionScorer::TokenPresence { token: 5, magnitude: 2.0 },
                },
            ],
        };
        (vocab, space, latent)
    }

    fn policy(logits: Vec<f64>) -> Policy {
        let (vocab, space, _) = setup();
        TabularPolicy::new(vocab, space, CategoricalPolicy::from_logits(2, 4, logits).unwrap())
            .unwrap()
            .into()
    }

    #[test]
    fn all_markers_give_full_presence() {
        let (_, _, latent) = setup();
        let p = policy(vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0, 0.0, 0.0]);
        let r = evaluate_policy(&p, &[vec![0], vec![4]], &latent, &[5, 6], &[], &EvalSettings::stochastic(20, 8, 1))
            .unwrap();
        assert_eq!(r.token_presence, vec![1.0, 1.0]);
        assert_eq!(r.pareto_fraction, 1.0);
        assert_eq!(r.expected_rewards["m"], 2.0);
        assert_eq!(r.refusal_rate, 0.0);
    }

    #[test]
    fn pareto_never_exceeds_presence() {
        let (_, _, latent) = setup();
        for seed in 0..5 {
            let p = policy((0..8).map(|i| ((i * 7 + seed) % 5) as f64 * 0.4).collect());
            let r = evaluate_policy(&p, &[vec![0], vec![4]], &latent, &[5, 6], &[3], &EvalSettings::stochastic(50, 8, seed as u64))
                .unwrap();
            let min = r.token_presence.iter().cloned().fold(1.0, f64::min);
            assert!(r.pareto_fraction <= min);
            assert!((0.0..=1.0).contains(&r.refusal_rate));
        }
    }

    #[test]
    fn self_comparison_is_even_and_greedy_matches_enumeration() {
        let (_, space, latent) = setup();
        let prompts = vec![vec![0], vec![4]];
        let weights = BTreeMap::from([("t".to_string(), 1.0)]);
        let a = policy(vec![0.3, 1.0, -0.2, 0.0, 0.1, 0.0, 2.0, -1.0]);
        assert_eq!(compare_policies(&a, &a, &prompts, &latent, &weights, SampleMode::Greedy, 8, 0).unwrap(), 0.5);
        let b = policy(vec![2.0, 1.0, -0.2, 0.0, 0.1, 3.0, 0.0, -1.0]);
        // Brute force: argmax responses per prompt and their table scores.
        let mut expected = 0.0;
        for prompt in &prompts {
            let argmax = |p: &Policy| {
                let probs = p.as_tabular().unwrap().response_probs(prompt).unwrap();
                (0..4).fold(0, |best, j| if probs[j] > probs[best] { j } else { best })
            };
            let (ya, yb) = (argmax(&a), argmax(&b));
            let sa = latent.score("t", prompt, &space.responses()[ya]).unwrap();
            let sb = latent.score("t", prompt, &space.responses()[yb]).unwrap();
            expected += if sa > sb { 1.0 } else if sa == sb { 0.5 } else { 0.0 };
        }
        expected /= 2.0;
        assert_eq!(compare_policies(&a, &b, &prompts, &latent, &weights, SampleMode::Greedy, 8, 0).unwrap(), expected);
    }

    #[test]
    fn dominant_policy_wins_everything() {
        let (_, _, latent) = setup();
        let weights = BTreeMap::from([("t".to_string(), 1.0)]);
        let best = policy(vec![60.0, 0.0, 0.0, 0.0, 0.0, 0.0, 60.0, 0.0]);
        let worst = policy(vec![0.0, 0.0, 60.0, 0.0, 0.0, 0.0, 0.0, 60.0]);
        let w = compare_policies(&best, &worst, &[vec![0], vec![4]], &latent, &weights, SampleMode::Stochastic, 8, 3)
            .unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn exact_expected_rewards_and_flat_curves() {
        let (_, _, latent) = setup();
        let p = policy(vec![0.0; 8]);
        let r = expected_rewards(&p, &[vec![0]], &latent, &EvalSettings::stochastic(1, 8, 0)).unwrap();
        assert!((r[0] - (1.0 + 0.5 + 0.0 + 0.2) / 4.0).abs() < 1e-15);
        assert!((r[1] - 1.0).abs() < 1e-15);
        let snaps: Vec<_> = (0..3).map(|s| (1, s, p.clone())).collect();
        let curve = track_round_rewards(&snaps, &[vec![0], vec![4]], &latent, &EvalSettings::stochastic(1, 8, 0)).unwrap();
        assert!(curve.windows(2).all(|w| w[0].rewards == w[1].rewards));
    }
}
