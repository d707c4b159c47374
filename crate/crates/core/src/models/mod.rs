//! Trainable policies, sampling, training rounds and parameter merging.

mod checkpoint;
mod neural;
mod optim;
mod tabular;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, Vocab};
use crate::error::{Result, SpoError};
use crate::numeric::softmax;
use crate::tabular::EnumeratedSpace;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use neural::{NeuralPolicy, NeuralPolicyConfig};
pub use optim::{Optimizer, OptimizerKind};
pub use tabular::TabularPolicy;
pub use train::{
    round_loss_and_grad, sft_train, train_round, train_round_observed, EpochControl, Precision, RoundOutput, StepMetrics,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Tabular,
    Neural,
}

/// Everything besides the parameter vector that identifies a policy's
/// function class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Tabular { space: EnumeratedSpace },
    Neural { config: NeuralPolicyConfig },
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyModel {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
}

/// An autoregressive (or directly categorical) distribution over responses.
///
/// Every log-probability evaluation bumps a per-instance counter; clones
/// start from zero. Training uses it to prove that earlier policies are
/// never run during a round.
#[derive(Debug)]
pub struct Policy {
    model: PolicyModel,
    forward_passes: AtomicU64,
}

impl Clone for Policy {
    fn clone(&self) -> Self {
        Self::from_model(self.model.clone())
    }
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model
    }
}

impl From<TabularPolicy> for Policy {
    fn from(p: TabularPolicy) -> Self {
        Self::from_model(PolicyModel::Tabular(p))
    }
}

impl From<NeuralPolicy> for Policy {
    fn from(p: NeuralPolicy) -> Self {
        Self::from_model(PolicyModel::Neural(p))
    }
}

impl Policy {
    pub fn from_model(model: PolicyModel) -> Self {
        Self {
            model,
            forward_passes: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn kind(&self) -> PolicyKind {
        match self.model {
            PolicyModel::Tabular(_) => PolicyKind::Tabular,
            PolicyModel::Neural(_) => PolicyKind::Neural,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match &self.model {
            PolicyModel::Tabular(p) => p.vocab(),
            PolicyModel::Neural(p) => p.vocab(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match &self.model {
            PolicyModel::Tabular(p) => Architecture::Tabular {
                space: EnumeratedSpace::clone(p.space()),
            },
            PolicyModel::Neural(p) => Architecture::Neural {
                config: p.config().clone(),
            },
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularPolicy> {
        match &self.model {
            PolicyModel::Tabular(p) => Some(p),
            PolicyModel::Neural(_) => None,
        }
    }

    pub fn params(&self) -> &[f64] {
        match &self.model {
            PolicyModel::Tabular(p) => p.params(),
            PolicyModel::Neural(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.model {
            PolicyModel::Tabular(p) => p.params_mut(),
            PolicyModel::Neural(p) => p.params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.num_params() {
            return Err(SpoError::ArchitectureMismatch(format!(
                "{} parameters for a policy with {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        out.params_mut().copy_from_slice(params);
        Ok(out)
    }

    /// Number of log-probability evaluations made through this instance.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        match &self.model {
            PolicyModel::Tabular(p) => p.logprob(prompt, response),
            PolicyModel::Neural(p) => p.logprob(prompt, response),
        }
    }

    /// Log-probability with its parameter gradient added into `grad`.
    pub fn logprob_grad(&self, prompt: &[TokenId], response: &[TokenId], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.num_params() {
            return Err(SpoError::DimensionMismatch(format!(
                "gradient buffer of {} for {} parameters",
                grad.len(),
                self.num_params()
            )));
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        match &self.model {
            PolicyModel::Tabular(p) => p.logprob_grad(prompt, response, grad),
            PolicyModel::Neural(p) => p.logprob_grad(prompt, response, grad),
        }
    }
}

/// `log π(response | prompt)`.
pub fn policy_logprob(policy: &Policy, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
    policy.logprob(prompt, response)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Greedy,
    Stochastic,
}

/// Index drawn from `probs` with one uniform variate.
fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// First index of the maximum, so ties go to the lowest id.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Generates a response for `prompt`.
///
/// Neural policies decode token by token and stop after emitting eos, after
/// `max_len` tokens, or when the context is full. Tabular policies pick a
/// whole enumerated response (truncated to `max_len`). Stochastic sampling
/// is a pure function of `seed`.
pub fn sample_response(
    policy: &Policy,
    prompt: &[TokenId],
    max_len: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(SpoError::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match policy.model() {
        PolicyModel::Tabular(p) => {
            let probs = p.response_probs(prompt)?;
            let idx = match mode {
                SampleMode::Greedy => argmax(&probs),
                SampleMode::Stochastic => draw(&probs, &mut rng),
            };
            let mut response = p.space().responses()[idx].clone();
            response.truncate(max_len);
            Ok(response)
        }
        PolicyModel::Neural(p) => {
            let eos = p.vocab().eos;
            let mut dec = p.decoder();
            let mut logits = Vec::new();
            for &t in prompt {
                logits = dec.feed(t)?;
            }
            let context_len = p.config().context_len;
            let mut response = Vec::new();
            while response.len() < max_len {
                let probs = softmax(&logits);
                let next = match mode {
                    SampleMode::Greedy => argmax(&probs),
                    SampleMode::Stochastic => draw(&probs, &mut rng),
                } as TokenId;
                response.push(next);
                if next == eos || dec.position() >= context_len {
                    break;
                }
                logits = dec.feed(next)?;
            }
            Ok(response)
        }
    }
}

/// Convex combination of parameter vectors (logits for tabular policies).
pub fn merge_parameters(policies: &[&Policy], weights: &[f64]) -> Result<Policy> {
    let first = policies
        .first()
        .ok_or_else(|| SpoError::InvalidArgument("nothing to merge".into()))?;
    if policies.len() != weights.len() {
        return Err(SpoError::DimensionMismatch(format!(
            "{} policies and {} weights",
            policies.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(SpoError::InvalidArgument("merge weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SpoError::InvalidArgument(format!("merge weights sum to {total}, not 1")));
    }
    let arch = first.architecture();
    for p in &policies[1..] {
        if p.architecture() != arch || p.vocab() != first.vocab() {
            return Err(SpoError::ArchitectureMismatch("policies to merge differ in architecture".into()));
        }
    }
    let mut merged = vec![0.0; first.num_params()];
    for (p, &w) in policies.iter().zip(weights) {
        for (m, x) in merged.iter_mut().zip(p.params()) {
            *m += w * x;
        }
    }
    first.with_params(&merged)
}

/// Tabular policy over `space` with uniform probabilities.
pub fn uniform_tabular(vocab: Vocab, space: Arc<EnumeratedSpace>) -> Result<Policy> {
    Ok(TabularPolicy::uniform(vocab, space)?.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::CategoricalPolicy;

    fn four_response_space() -> (Vocab, Arc<EnumeratedSpace>) {
        let vocab = Vocab::new(8, vec![], 7).unwrap();
        let space = EnumeratedSpace::new(
            vec![vec![0], vec![1]],
            vec![vec![2, 7], vec![3, 7], vec![4, 7], vec![5, 6, 7]],
        )
        .unwrap();
        (vocab, Arc::new(space))
    }

    fn tabular(logits: Vec<f64>) -> Policy {
        let (vocab, space) = four_response_space();
        let table = CategoricalPolicy::from_logits(2, 4, logits).unwrap();
        TabularPolicy::new(vocab, space, table).unwrap().into()
    }

    #[test]
    fn uniform_tabular_logprob() {
        let (vocab, space) = four_response_space();
        let p = uniform_tabular(vocab, space.clone()).unwrap();
        for r in space.responses() {
            assert!((policy_logprob(&p, &[1], r).unwrap() + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn tabular_probabilities_sum_to_one() {
        let p = tabular(vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -3.0, 0.0]);
        let (_, space) = four_response_space();
        for prompt in space.prompts() {
            let s: f64 = space
                .responses()
                .iter()
                .map(|r| p.logprob(prompt, r).unwrap().exp())
                .sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_tabular_returns_argmax_and_breaks_ties_low() {
        let p = tabular(vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -3.0, 0.0]);
        assert_eq!(sample_response(&p, &[0], 8, SampleMode::Greedy, 0).unwrap(), vec![4, 7]);
        assert_eq!(sample_response(&p, &[1], 8, SampleMode::Greedy, 0).unwrap(), vec![2, 7]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = tabular(vec![0.0; 8]);
        for seed in 0..20 {
            let a = sample_response(&p, &[0], 8, SampleMode::Stochastic, seed).unwrap();
            let b = sample_response(&p, &[0], 8, SampleMode::Stochastic, seed).unwrap();
            assert_eq!(a, b);
        }
        let vocab = Vocab::new(6, vec![4], 5).unwrap();
        let n: Policy = NeuralPolicy::new(vocab, NeuralPolicyConfig::small(12), 3).unwrap().into();
        let a = sample_response(&n, &[0, 1], 8, SampleMode::Stochastic, 9).unwrap();
        assert_eq!(a, sample_response(&n, &[0, 1], 8, SampleMode::Stochastic, 9).unwrap());
        assert!(!a.is_empty() && a.len() <= 8);
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        let p = tabular(vec![1.0, 0.0, -0.5, 0.7, 0.0, 0.0, 0.0, 0.0]);
        let probs = p.as_tabular().unwrap().response_probs(&[0]).unwrap();
        let (_, space) = four_response_space();
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for seed in 0..draws {
            let r = sample_response(&p, &[0], 8, SampleMode::Stochastic, seed as u64).unwrap();
            counts[space.response_id(&r).unwrap()] += 1;
        }
        for (c, q) in counts.iter().zip(&probs) {
            let freq = *c as f64 / draws as f64;
            let sd = (q * (1.0 - q) / draws as f64).sqrt();
            assert!((freq - q).abs() <= 3.0 * sd, "{freq} vs {q}");
        }
    }

    #[test]
    fn neural_generation_stops_at_eos_or_max_len() {
        let vocab = Vocab::new(5, vec![], 4).unwrap();
        let n: Policy = NeuralPolicy::new(vocab, NeuralPolicyConfig::small(10), 1).unwrap().into();
        for seed in 0..50 {
            let r = sample_response(&n, &[0, 1], 5, SampleMode::Stochastic, seed).unwrap();
            assert!(r.len() <= 5);
            if let Some(pos) = r.iter().position(|&t| t == 4) {
                assert_eq!(pos, r.len() - 1);
            }
        }
        assert!(sample_response(&n, &[0], 0, SampleMode::Greedy, 0).is_err());
    }

    #[test]
    fn merge_fixed_points_and_cancellation() {
        let a = tabular(vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -3.0, 0.0]);
        let b = tabular(vec![-0.3, 1.0, -2.0, -0.5, -1.0, -1.0, 3.0, -0.0]);
        let self_merge = merge_parameters(&[&a, &a], &[0.5, 0.5]).unwrap();
        assert_eq!(self_merge.params(), a.params());
        let degenerate = merge_parameters(&[&a, &b], &[1.0, 0.0]).unwrap();
        assert_eq!(degenerate.params(), a.params());
        let cancel = merge_parameters(&[&a, &b], &[0.5, 0.5]).unwrap();
        let probs = cancel.as_tabular().unwrap().response_probs(&[0]).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn merge_rejects_bad_inputs() {
        let a = tabular(vec![0.0; 8]);
        assert!(merge_parameters(&[&a, &a], &[0.5, 0.6]).is_err());
        assert!(merge_parameters(&[&a, &a], &[1.5, -0.5]).is_err());
        let vocab = Vocab::new(8, vec![], 7).unwrap();
        let n: Policy = NeuralPolicy::new(vocab, NeuralPolicyConfig::small(8), 0).unwrap().into();
        assert!(matches!(
            merge_parameters(&[&a, &n], &[0.5, 0.5]),
            Err(SpoError::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn clones_get_fresh_counters() {
        let p = tabular(vec![0.0; 8]);
        p.logprob(&[0], &[2, 7]).unwrap();
        assert_eq!(p.forward_passes(), 1);
        assert_eq!(p.clone().forward_passes(), 0);
    }
}
