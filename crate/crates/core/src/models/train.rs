use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind};
use super::Policy;
use crate::cache::HistoryLogProbs;
use crate::data::{PreferenceDataset, TokenId};
use crate::error::{Result, SpoError};
use crate::numeric::softplus;
use crate::objectives::{current_term, history_offset, pair_loss_slope, KappaSchedule};
use crate::seed::stream_rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    /// Full-batch gradient descent, the setting used for exact checks.
    pub fn tabular(seed: u64) -> Self {
        Self {
            epochs: 200,
            batch_size: usize::MAX,
            learning_rate: 1.0,
            optimizer: OptimizerKind::Sgd,
            seed,
            precision: Precision::F64,
        }
    }

    pub fn neural(seed: u64) -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            seed,
            precision: Precision::F64,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(SpoError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(SpoError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub round: usize,
    pub epoch: usize,
    /// Batch loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean implicit-reward margin `Σ κ_i φ_i` over the batch.
    pub mean_pair_logit: f64,
}

/// Hooks into a training round.
pub trait EpochControl {
    fn after_step(&mut self, _metrics: &StepMetrics, _policy: &Policy) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch; may rewrite the schedule used by the next.
    fn after_epoch(&mut self, _epoch: usize, _policy: &Policy, _schedule: &mut KappaSchedule) -> Result<()> {
        Ok(())
    }
}

impl EpochControl for () {}

#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub policy: Policy,
    pub metrics: Vec<StepMetrics>,
    /// Schedule in force at the end of the round.
    pub schedule: KappaSchedule,
}

/// Trains `initial` on the round-`n` SPO loss for `dimension`, where `n`
/// is `schedule.round_n`. History log-probabilities come only from
/// `history`; the policy being trained is the only model evaluated.
pub fn train_round(
    initial: &Policy,
    dataset: &PreferenceDataset,
    dimension: &str,
    schedule: &KappaSchedule,
    history: &dyn HistoryLogProbs,
    config: &TrainConfig,
) -> Result<RoundOutput> {
    train_round_observed(initial, dataset, dimension, schedule, history, config, &mut ())
}

struct Pair<'a> {
    prompt: &'a [TokenId],
    winner: &'a [TokenId],
    loser: &'a [TokenId],
    history: Vec<(f64, f64)>,
}

fn collect_pairs<'a>(
    dataset: &'a PreferenceDataset,
    dimension: &str,
    n: usize,
    history: &dyn HistoryLogProbs,
) -> Result<Vec<Pair<'a>>> {
    let indices = dataset.training_indices(dimension);
    if indices.is_empty() {
        return Err(SpoError::EmptyBatch);
    }
    let mut pairs = Vec::with_capacity(indices.len());
    for &i in &indices {
        let ex = &dataset.examples[i];
        let (winner, loser) = ex
            .ordered(dimension)
            .ok_or_else(|| SpoError::UnknownDimension(dimension.to_string()))?;
        let hist = (0..n)
            .map(|r| history.oriented(r, i, dimension, dataset))
            .collect::<Result<Vec<_>>>()?;
        pairs.push(Pair {
            prompt: &ex.prompt,
            winner,
            loser,
            history: hist,
        });
    }

    Ok(pairs)
}

/// Mean loss, summed pair logit and mean gradient over `batch`.
fn batch_loss_grad(
    policy: &Policy,
    pairs: &[Pair<'_>],
    offsets: &[f64],
    batch: &[usize],
    schedule: &KappaSchedule,
) -> Result<(f64, f64, Vec<f64>)> {
    let n = schedule.round_n;
    let num_params = policy.num_params();
    let kappa_n = schedule.kappa(n);
    let terms = batch
        .par_iter()
        .map(|&k| {
            let p = &pairs[k];
            let mut gw = vec![0.0; num_params];
            let mut gl = vec![0.0; num_params];
            let lw = policy.logprob_grad(p.prompt, p.winner, &mut gw)?;
            let ll = policy.logprob_grad(p.prompt, p.loser, &mut gl)?;
            let logit = current_term(lw, ll, p.history[n - 1], schedule) + offsets[k];
            let coef = pair_loss_slope(logit) * kappa_n;
            for (a, b) in gw.iter_mut().zip(&gl) {
                *a = coef * (*a - b);
            }
            Ok((logit, gw))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; num_params];
    let (mut loss, mut logit_sum) = (0.0, 0.0);
    for (logit, g) in &terms {
        loss += softplus(-logit);
        logit_sum += logit;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    loss *= scale;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss, logit_sum, grad))
}

/// Loss and gradient of the round objective over the training pairs of
/// `dimension` at the positions `batch` (all of them when `None`),
/// computed exactly as one optimizer step would.
pub fn round_loss_and_grad(
    policy: &Policy,
    dataset: &PreferenceDataset,
    dimension: &str,
    schedule: &KappaSchedule,
    history: &dyn HistoryLogProbs,
    batch: Option<&[usize]>,
) -> Result<(f64, Vec<f64>)> {
    let n = schedule.round_n;
    if history.num_rounds() < n {
        return Err(SpoError::MissingCacheRound {
            round: history.num_rounds(),
        });
    }
    let pairs = collect_pairs(dataset, dimension, n, history)?;
    let offsets = pairs
        .iter()
        .map(|p| history_offset(&p.history, schedule))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..pairs.len()).collect();
    let batch = batch.unwrap_or(&all);
    if batch.is_empty() || batch.iter().any(|&k| k >= pairs.len()) {
        return Err(SpoError::InvalidArgument("batch positions out of range".into()));
    }
    let (loss, _, grad) = batch_loss_grad(policy, &pairs, &offsets, batch, schedule)?;
    Ok((loss, grad))
}

pub fn train_round_observed(
    initial: &Policy,
    dataset: &PreferenceDataset,
    dimension: &str,
    schedule: &KappaSchedule,
    history: &dyn HistoryLogProbs,
    config: &TrainConfig,
    control: &mut dyn EpochControl,
) -> Result<RoundOutput> {
    config.check()?;
    if !dataset.has_dimension(dimension) {
        return Err(SpoError::UnknownDimension(dimension.to_string()));
    }
    if initial.vocab() != &dataset.vocab {
        return Err(SpoError::VocabMismatch("policy and dataset vocabularies differ".into()));
    }
    let n = schedule.round_n;
    if history.num_rounds() < n {
        return Err(SpoError::MissingCacheRound {
            round: history.num_rounds(),
        });
    }
    let pairs = collect_pairs(dataset, dimension, n, history)?;

    let mut schedule = schedule.clone();
    let mut policy = initial.clone();
    let num_params = policy.num_params();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, num_params);
    let batch_size = config.batch_size.min(pairs.len());
    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let offsets = pairs
            .iter()
            .map(|p| history_offset(&p.history, &schedule))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, "batch-order", epoch as u64));
        for batch in order.chunks(batch_size) {
            let (loss, logit_sum, grad) = batch_loss_grad(&policy, &pairs, &offsets, batch, &schedule)?;
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(SpoError::NonFiniteLoss { step });
            }
            optimizer.step(policy.params_mut(), &grad);
            let m = StepMetrics {
                step,
                round: n,
                epoch,
                loss,
                grad_norm,
                mean_pair_logit: logit_sum / batch.len() as f64,
            };
            control.after_step(&m, &policy)?;
            metrics.push(m);
            step += 1;
        }
        control.after_epoch(epoch, &policy, &mut schedule)?;
        if schedule.round_n != n {
            return Err(SpoError::InvalidArgument("epoch control changed the round index".into()));
        }
    }
    Ok(RoundOutput {
        policy,
        metrics,
        schedule,
    })
}

/// Maximum-likelihood fine-tuning on `(prompt, response)` pairs; produces
/// the starting policy `π_0`. Returns the mean negative log-likelihood of
/// every epoch.
pub fn sft_train(
    initial: &Policy,
    sequences: &[(Vec<TokenId>, Vec<TokenId>)],
    config: &TrainConfig,
) -> Result<(Policy, Vec<f64>)> {
    config.check()?;
    if sequences.is_empty() {
        return Err(SpoError::EmptyBatch);
    }
    let mut policy = initial.clone();
    let num_params = policy.num_params();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, num_params);
    let batch_size = config.batch_size.min(sequences.len());
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, "sft-order", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let terms = batch
                .par_iter()
                .map(|&k| {
                    let (prompt, response) = &sequences[k];
                    let mut g = vec![0.0; num_params];
                    let lp = policy.logprob_grad(prompt, response, &mut g)?;
                    Ok((lp, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; num_params];
            for (lp, g) in &terms {
                total -= lp;
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc -= x * scale;
                }
            }
            if !total.is_finite() {
                return Err(SpoError::NonFiniteLoss { step });
            }
            optimizer.step(policy.params_mut(), &grad);
            step += 1;
        }
        epoch_losses.push(total / sequences.len() as f64);
    }
    Ok((policy, epoch_losses))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::cache::{LogProbCache, RecomputedHistory};
    use crate::data::{Label, PreferenceExample, Provenance, Vocab};
    use crate::models::{uniform_tabular, NeuralPolicy, NeuralPolicyConfig, TabularPolicy};
    use crate::objectives::{dpo_pair_logit, kappa_schedule, preference_loss};
    use crate::tabular::{CategoricalPolicy, EnumeratedSpace};

    fn dataset() -> (PreferenceDataset, Arc<EnumeratedSpace>) {
        let vocab = Vocab::new(10, vec![], 9).unwrap();
        let responses: Vec<Vec<TokenId>> = (3..8).map(|t| vec![t, 9]).collect();
        let space = Arc::new(EnumeratedSpace::new(vec![vec![0], vec![1]], responses.clone()).unwrap());
        let mut examples = Vec::new();
        for p in 0..2u32 {
            for i in 0..5 {
                for j in (i + 1)..5 {
                    let mut labels = BTreeMap::new();
                    labels.insert("x".to_string(), Label::from_a_preferred(i < j));
                    labels.insert("y".to_string(), Label::from_a_preferred((i + j + p as usize) % 3 != 0));
                    examples.push(PreferenceExample {
                        prompt: vec![p],
                        response_a: responses[i].clone(),
                        response_b: responses[j].clone(),
                        labels,
                        focus: None,
                    });
                }
            }
        }
        let ds = PreferenceDataset {
            dimensions: vec!["x".into(), "y".into()],
            vocab,
            examples,
            provenance: Provenance {
                generator: "test".into(),
                seed: 0,
            },
            max_response_len: 2,
        };
        (ds, space)
    }

    fn config(epochs: usize, batch_size: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate: 5.0,
            optimizer: OptimizerKind::Sgd,
            seed: 11,
            precision: Precision::F64,
        }
    }

    #[test]
    fn zero_epochs_returns_input() {
        let (ds, space) = dataset();
        let p0 = uniform_tabular(ds.vocab.clone(), space).unwrap();
        let mut cache = LogProbCache::new(&ds).unwrap();
        cache.extend(&p0, &ds).unwrap();
        let s = kappa_schedule(1, 0.1, &[]).unwrap();
        let out = train_round(&p0, &ds, "x", &s, &cache, &config(0, 4)).unwrap();
        assert_eq!(out.policy.params(), p0.params());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn round_one_loss_matches_direct_dpo_and_descends() {
        let (ds, space) = dataset();
        let p0 = uniform_tabular(ds.vocab.clone(), space).unwrap();
        let mut cache = LogProbCache::new(&ds).unwrap();
        cache.extend(&p0, &ds).unwrap();
        let s = kappa_schedule(1, 0.1, &[]).unwrap();
        let out = train_round(&p0, &ds, "x", &s, &cache, &config(30, usize::MAX)).unwrap();
        // First step loss equals DPO loss at initialization, which is ln 2.
        assert!((out.metrics[0].loss - 2f64.ln()).abs() < 1e-15);
        for w in out.metrics.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        let logits: Vec<f64> = ds
            .examples
            .iter()
            .map(|ex| {
                let (w, l) = ex.ordered("x").unwrap();
                dpo_pair_logit(
                    out.policy.logprob(&ex.prompt, w).unwrap(),
                    out.policy.logprob(&ex.prompt, l).unwrap(),
                    p0.logprob(&ex.prompt, w).unwrap(),
                    p0.logprob(&ex.prompt, l).unwrap(),
                    0.1,
                )
            })
            .collect();
        assert!(preference_loss(&logits).unwrap() < out.metrics.last().unwrap().loss);
    }

    #[test]
    fn training_is_deterministic_and_minibatched() {
        let (ds, space) = dataset();
        let mut rng = stream_rng(2, "t", 0);
        let p0: Policy = TabularPolicy::new(ds.vocab.clone(), space, CategoricalPolicy::random(2, 5, &mut rng))
            .unwrap()
            .into();
        let mut cache = LogProbCache::new(&ds).unwrap();
        cache.extend(&p0, &ds).unwrap();
        let s = kappa_schedule(1, 0.1, &[]).unwrap();
        let a = train_round(&p0, &ds, "y", &s, &cache, &config(3, 4)).unwrap();
        let b = train_round(&p0, &ds, "y", &s, &cache, &config(3, 4)).unwrap();
        assert_eq!(a.policy.params(), b.policy.params());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 3 * 5);
    }

    #[test]
    fn missing_history_and_unknown_dimension() {
        let (ds, space) = dataset();
        let p0 = uniform_tabular(ds.vocab.clone(), space).unwrap();
        let mut cache = LogProbCache::new(&ds).unwrap();
        cache.extend(&p0, &ds).unwrap();
        let s2 = kappa_schedule(2, 0.1, &[0.1]).unwrap();
        assert!(matches!(
            train_round(&p0, &ds, "x", &s2, &cache, &config(1, 4)),
            Err(SpoError::MissingCacheRound { round: 1 })
        ));
        let s1 = kappa_schedule(1, 0.1, &[]).unwrap();
        assert!(train_round(&p0, &ds, "z", &s1, &cache, &config(1, 4)).is_err());
    }

    #[test]
    fn cached_and_recomputed_history_agree_without_touching_history() {
        let (ds, space) = dataset();
        let p0 = uniform_tabular(ds.vocab.clone(), space).unwrap();
        let mut cache = LogProbCache::new(&ds).unwrap();
        cache.extend(&p0, &ds).unwrap();
        let s1 = kappa_schedule(1, 0.1, &[]).unwrap();
        let p1 = train_round(&p0, &ds, "x", &s1, &cache, &config(5, 8)).unwrap().policy;
        cache.extend(&p1, &ds).unwrap();

        let h0 = p0.clone();
        let h1 = p1.clone();
        let s2 = kappa_schedule(2, 0.1, &[0.3]).unwrap();
        let cached = train_round(&p1, &ds, "y", &s2, &cache, &config(4, 8)).unwrap();
        assert_eq!((h0.forward_passes(), h1.forward_passes()), (0, 0));
        let recomputed = RecomputedHistory {
            policies: vec![&h0, &h1],
        };
        let direct = train_round(&p1, &ds, "y", &s2, &recomputed, &config(4, 8)).unwrap();
        assert_eq!(cached.metrics, direct.metrics);
        assert_eq!(cached.policy.params(), direct.policy.params());
    }

    #[test]
    fn sft_raises_likelihood_of_targets() {
        let vocab = Vocab::new(6, vec![], 5).unwrap();
        let p: Policy = NeuralPolicy::new(vocab, NeuralPolicyConfig::small(8), 4).unwrap().into();
        let seqs = vec![(vec![0, 1], vec![2, 3, 5]), (vec![1, 0], vec![3, 2, 5])];
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 2,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            precision: Precision::F64,
        };
        let (trained, losses) = sft_train(&p, &seqs, &cfg).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.5));
        assert!(trained.logprob(&[0, 1], &[2, 3, 5]).unwrap() > p.logprob(&[0, 1], &[2, 3, 5]).unwrap());
    }
}
