//! Exact engine over small enumerated response sets.
//!
//! Policies here are full categorical tables, so partition functions, KL
//! divergences and expectations are computed by exact summation. This is
//! what the closed-form optimal policy is checked against.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Result, SpoError};
use crate::numeric::{log_softmax, sigmoid, softmax};

/// Upper bound on `prompts × responses` for exact enumeration.
pub const MAX_ENUMERATED_PAIRS: usize = 10_000;

/// A fixed prompt list and a response list shared by every prompt.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub struct EnumeratedSpace {
    prompts: Vec<Vec<TokenId>>,
    responses: Vec<Vec<TokenId>>,
    prompt_index: HashMap<Vec<TokenId>, usize>,
    response_index: HashMap<Vec<TokenId>, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct SpaceRepr {
    prompts: Vec<Vec<TokenId>>,
    responses: Vec<Vec<TokenId>>,
}

impl TryFrom<SpaceRepr> for EnumeratedSpace {
    type Error = SpoError;
    fn try_from(r: SpaceRepr) -> Result<Self> {
        EnumeratedSpace::new(r.prompts, r.responses)
    }
}

impl From<EnumeratedSpace> for SpaceRepr {
    fn from(s: EnumeratedSpace) -> Self {
        SpaceRepr {
            prompts: s.prompts,
            responses: s.responses,
        }
    }
}

impl PartialEq for EnumeratedSpace {
    fn eq(&self, other: &Self) -> bool {
        self.prompts == other.prompts && self.responses == other.responses
    }
}

impl EnumeratedSpace {
    pub fn new(prompts: Vec<Vec<TokenId>>, responses: Vec<Vec<TokenId>>) -> Result<Self> {
        if prompts.is_empty() || responses.is_empty() {
            return Err(SpoError::InvalidArgument(
                "enumerated space needs at least one prompt and one response".into(),
            ));
        }
        if prompts.len() * responses.len() > MAX_ENUMERATED_PAIRS {
            return Err(SpoError::InvalidArgument(format!(
                "{} x {} pairs exceed the enumeration limit {MAX_ENUMERATED_PAIRS}",
                prompts.len(),
                responses.len()
            )));
        }
        let prompt_index = index_unique(&prompts, "prompt")?;
        let response_index = index_unique(&responses, "response")?;
        Ok(Self {
            prompts,
            responses,
            prompt_index,
            response_index,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn num_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn prompts(&self) -> &[Vec<TokenId>] {
        &self.prompts
    }

    pub fn responses(&self) -> &[Vec<TokenId>] {
        &self.responses
    }

    pub fn prompt_id(&self, prompt: &[TokenId]) -> Option<usize> {
        self.prompt_index.get(prompt).copied()
    }

    pub fn response_id(&self, response: &[TokenId]) -> Option<usize> {
        self.response_index.get(response).copied()
    }

    /// Index pair of `(prompt, response)` or a support error.
    pub fn locate(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<(usize, usize)> {
        let p = self
            .prompt_id(prompt)
            .ok_or_else(|| SpoError::SupportMismatch(format!("prompt {prompt:?} not enumerated")))?;
        let r = self.response_id(response).ok_or_else(|| {
            SpoError::SupportMismatch(format!("response {response:?} not enumerated"))
        })?;
        Ok((p, r))
    }
}

fn index_unique(seqs: &[Vec<TokenId>], what: &str) -> Result<HashMap<Vec<TokenId>, usize>> {
    let mut index = HashMap::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        if index.insert(s.clone(), i).is_some() {
            return Err(SpoError::InvalidArgument(format!("duplicate {what} {s:?}")));
        }
    }
    Ok(index)
}

/// Logit table over `(prompt, response)`; probabilities are a per-prompt
/// softmax and therefore strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    num_prompts: usize,
    num_responses: usize,
    logits: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn from_logits(num_prompts: usize, num_responses: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != num_prompts * num_responses {
            return Err(SpoError::DimensionMismatch(format!(
                "{} logits for a {num_prompts} x {num_responses} table",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(SpoError::NonFinite("policy logits".into()));
        }
        Ok(Self {
            num_prompts,
            num_responses,
            logits,
        })
    }

    pub fn uniform(num_prompts: usize, num_responses: usize) -> Self {
        Self {
            num_prompts,
            num_responses,
            logits: vec![0.0; num_prompts * num_responses],
        }
    }

    /// Logits drawn i.i.d. from a standard normal.
    pub fn random<R: Rng>(num_prompts: usize, num_responses: usize, rng: &mut R) -> Self {
        let logits = (0..num_prompts * num_responses)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            num_prompts,
            num_responses,
            logits,
        }
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn prompt_logits(&self, prompt: usize) -> &[f64] {
        let n = self.num_responses;
        &self.logits[prompt * n..(prompt + 1) * n]
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        softmax(self.prompt_logits(prompt))
    }

    pub fn log_probs(&self, prompt: usize) -> Vec<f64> {
        log_softmax(self.prompt_logits(prompt))
    }

    pub fn log_prob(&self, prompt: usize, response: usize) -> f64 {
        self.log_probs(prompt)[response]
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.num_prompts != other.num_prompts || self.num_responses != other.num_responses {
            return Err(SpoError::SupportMismatch(format!(
                "{}x{} vs {}x{} tables",
                self.num_prompts, self.num_responses, other.num_prompts, other.num_responses
            )));
        }
        Ok(())
    }
}

/// Real-valued table over `(prompt, response)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    num_prompts: usize,
    num_responses: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(num_prompts: usize, num_responses: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_prompts * num_responses {
            return Err(SpoError::DimensionMismatch(format!(
                "{} rewards for a {num_prompts} x {num_responses} table",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpoError::NonFinite("reward table".into()));
        }
        Ok(Self {
            num_prompts,
            num_responses,
            values,
        })
    }

    pub fn zeros(num_prompts: usize, num_responses: usize) -> Self {
        Self {
            num_prompts,
            num_responses,
            values: vec![0.0; num_prompts * num_responses],
        }
    }

    pub fn get(&self, prompt: usize, response: usize) -> f64 {
        self.values[prompt * self.num_responses + response]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    fn matches(&self, policy: &CategoricalPolicy) -> Result<()> {
        if self.num_prompts != policy.num_prompts || self.num_responses != policy.num_responses {
            return Err(SpoError::DimensionMismatch(format!(
                "reward table {}x{} vs policy {}x{}",
                self.num_prompts, self.num_responses, policy.num_prompts, policy.num_responses
            )));
        }
        Ok(())
    }
}

/// Bradley-Terry probability that the first response is preferred.
pub fn bt_preference_prob(r_first: f64, r_second: f64) -> Result<f64> {
    if !r_first.is_finite() || !r_second.is_finite() {
        return Err(SpoError::NonFinite("Bradley-Terry reward".into()));
    }
    Ok(sigmoid(r_first - r_second))
}

/// `KL(p(·|x) ‖ q(·|x))` by exact summation.
pub fn kl_divergence(p: &CategoricalPolicy, q: &CategoricalPolicy, prompt: usize) -> Result<f64> {
    p.same_shape(q)?;
    if prompt >= p.num_prompts {
        return Err(SpoError::SupportMismatch(format!("prompt {prompt} out of range")));
    }
    let lp = p.log_probs(prompt);
    let lq = q.log_probs(prompt);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| if a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum();
    // Rounding can leave a tiny negative value when p == q.
    Ok(kl.max(0.0))
}

/// Closed-form maximizer of the round-two objective:
/// `π₂*(y|x) ∝ π₁(y|x) · exp((α₁ R₁(x,y) + R₂(x,y)) / β)`.
///
/// The tilt is applied in log space and renormalized with a max-shifted
/// log-sum-exp, so large `|R/β|` cannot overflow.
pub fn optimal_policy_round2(
    pi1: &CategoricalPolicy,
    r1: &RewardTable,
    r2: &RewardTable,
    alpha1: f64,
    beta: f64,
) -> Result<CategoricalPolicy> {
    if !(alpha1 >= 0.0) || !(beta > 0.0) {
        return Err(SpoError::InvalidArgument(format!(
            "need alpha1 >= 0 and beta > 0, got {alpha1} and {beta}"
        )));
    }
    r1.matches(pi1)?;
    r2.matches(pi1)?;
    let n = pi1.num_responses;
    let mut logits = Vec::with_capacity(pi1.logits.len());
    for x in 0..pi1.num_prompts {
        let lp = pi1.log_probs(x);
        let tilted: Vec<f64> = (0..n)
            .map(|y| lp[y] + (alpha1 * r1.get(x, y) + r2.get(x, y)) / beta)
            .collect();
        logits.extend(log_softmax(&tilted));
    }
    CategoricalPolicy::from_logits(pi1.num_prompts, n, logits)
        .map_err(|_| SpoError::NonFinite("optimal policy overflowed".into()))
}

/// Uniform-over-prompts Lagrangian objective
/// `E_x E_{y~π}[R_cur + Σ_i α_i R_prev,i] − β E_x KL(π ‖ π_ref)`.
pub fn lagrangian_objective(
    pi: &CategoricalPolicy,
    pi_ref: &CategoricalPolicy,
    r_current: &RewardTable,
    r_previous: &[RewardTable],
    alphas: &[f64],
    beta: f64,
) -> Result<f64> {
    if r_previous.len() != alphas.len() {
        return Err(SpoError::DimensionMismatch(format!(
            "{} previous rewards but {} multipliers",
            r_previous.len(),
            alphas.len()
        )));
    }
    pi.same_shape(pi_ref)?;
    r_current.matches(pi)?;
    for r in r_previous {
        r.matches(pi)?;
    }
    let mut total = 0.0;
    for x in 0..pi.num_prompts {
        let probs = pi.probs(x);
        let reward: f64 = probs
            .iter()
            .enumerate()
            .map(|(y, p)| {
                let shaped = r_current.get(x, y)
                    + r_previous
                        .iter()
                        .zip(alphas)
                        .map(|(r, a)| a * r.get(x, y))
                        .sum::<f64>();
                p * shaped
            })
            .sum();
        total += reward - beta * kl_divergence(pi, pi_ref, x)?;
    }
    Ok(total / pi.num_prompts as f64)
}

/// `β[ln π(y₁|x)/π_ref(y₁|x) − ln π(y₂|x)/π_ref(y₂|x)]`. The `β ln Z(x)`
/// term of the implicit reward is shared by both responses and drops out.
pub fn implicit_reward_delta(
    pi: &CategoricalPolicy,
    pi_ref: &CategoricalPolicy,
    beta: f64,
    prompt: usize,
    y_first: usize,
    y_second: usize,
) -> Result<f64> {
    pi.same_shape(pi_ref)?;
    if prompt >= pi.num_prompts || y_first >= pi.num_responses || y_second >= pi.num_responses {
        return Err(SpoError::SupportMismatch("index outside the enumerated space".into()));
    }
    let lp = pi.log_probs(prompt);
    let lr = pi_ref.log_probs(prompt);
    Ok(beta * ((lp[y_first] - lr[y_first]) - (lp[y_second] - lr[y_second])))
}

/// One random round-two instance for the optimality check.
#[derive(Clone, Debug)]
pub struct Round2Instance {
    pub pi1: CategoricalPolicy,
    pub r1: RewardTable,
    pub r2: RewardTable,
    pub alpha1: f64,
    pub beta: f64,
}

impl Round2Instance {
    /// Random instance with up to `max_prompts` prompts and
    /// `max_responses` responses.
    pub fn random<R: Rng>(rng: &mut R, max_prompts: usize, max_responses: usize) -> Self {
        let p = rng.random_range(1..=max_prompts);
        let n = rng.random_range(2..=max_responses);
        let mut table = |scale: f64| {
            let v = (0..p * n)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            RewardTable::new(p, n, v).expect("finite normal draws")
        };
        let r1 = table(1.0);
        let r2 = table(1.0);
        let pi1 = CategoricalPolicy::random(p, n, rng);
        let alpha1 = rng.random_range(0.0..1.0);
        let beta = rng.random_range(0.05..2.0);
        Self {
            pi1,
            r1,
            r2,
            alpha1,
            beta,
        }
    }

    pub fn objective(&self, pi: &CategoricalPolicy) -> Result<f64> {
        lagrangian_objective(
            pi,
            &self.pi1,
            &self.r2,
            std::slice::from_ref(&self.r1),
            &[self.alpha1],
            self.beta,
        )
    }
}

/// Outcome of searching for a policy that beats the closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalityCheck {
    pub j_star: f64,
    pub best_challenger: f64,
    /// `best_challenger − j_star`; positive means a challenger won.
    pub slack: f64,
    pub challengers: usize,
}

/// Compares the closed-form policy against `num_random` random policies
/// (standard-normal logits) and every `±step` single-logit perturbation of
/// the closed form.
pub fn check_round2_optimality<R: Rng>(
    instance: &Round2Instance,
    num_random: usize,
    step: f64,
    rng: &mut R,
) -> Result<OptimalityCheck> {
    let star = optimal_policy_round2(
        &instance.pi1,
        &instance.r1,
        &instance.r2,
        instance.alpha1,
        instance.beta,
    )?;
    let j_star = instance.objective(&star)?;
    let mut best = f64::NEG_INFINITY;
    let mut challengers = 0;
    let (p, n) = (star.num_prompts, star.num_responses);
    for _ in 0..num_random {
        best = best.max(instance.objective(&CategoricalPolicy::random(p, n, rng))?);
        challengers += 1;
    }
    for i in 0..p * n {
        for sign in [-1.0, 1.0] {
            let mut perturbed = star.clone();
            perturbed.logits[i] += sign * step;
            best = best.max(instance.objective(&perturbed)?);
            challengers += 1;
        }
    }
    Ok(OptimalityCheck {
        j_star,
        best_challenger: best,
        slack: best - j_star,
        challengers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use proptest::prelude::*;

    #[test]
    fn bt_known_values() {
        assert_eq!(bt_preference_prob(0.0, 0.0).unwrap(), 0.5);
        assert!((bt_preference_prob(3f64.ln(), 0.0).unwrap() - 0.75).abs() < 1e-15);
        assert!(bt_preference_prob(f64::NAN, 0.0).is_err());
        assert!(bt_preference_prob(0.0, f64::INFINITY).is_err());
    }

    proptest! {
        #[test]
        fn bt_complementary_and_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, d in 1e-3f64..5.0) {
            let p = bt_preference_prob(a, b).unwrap();
            let q = bt_preference_prob(b, a).unwrap();
            prop_assert!((p + q - 1.0).abs() <= 1e-15);
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!(bt_preference_prob(a + d, b).unwrap() > p);
        }
    }

    #[test]
    fn kl_identity_and_limit() {
        let mut rng = stream_rng(1, "kl", 0);
        let p = CategoricalPolicy::random(3, 5, &mut rng);
        for x in 0..3 {
            assert!(kl_divergence(&p, &p, x).unwrap().abs() < 1e-15);
        }
        let q = CategoricalPolicy::uniform(1, 2);
        let mut last = f64::INFINITY;
        for k in [5.0, 10.0, 20.0, 40.0] {
            // p = (1 − ε, ε) with ε = σ(−k)
            let pk = CategoricalPolicy::from_logits(1, 2, vec![k, 0.0]).unwrap();
            let gap = (kl_divergence(&pk, &q, 0).unwrap() - 2f64.ln()).abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = stream_rng(2, "kl", 0);
        for _ in 0..1000 {
            let p = CategoricalPolicy::random(1, 6, &mut rng);
            let q = CategoricalPolicy::random(1, 6, &mut rng);
            assert!(kl_divergence(&p, &q, 0).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let p = CategoricalPolicy::uniform(1, 2);
        let q = CategoricalPolicy::uniform(1, 3);
        assert!(matches!(kl_divergence(&p, &q, 0), Err(SpoError::SupportMismatch(_))));
    }

    #[test]
    fn optimal_policy_zero_rewards_is_reference() {
        let mut rng = stream_rng(3, "opt", 0);
        let pi1 = CategoricalPolicy::random(2, 4, &mut rng);
        let z = RewardTable::zeros(2, 4);
        let star = optimal_policy_round2(&pi1, &z, &z, 0.3, 0.1).unwrap();
        for x in 0..2 {
            for (a, b) in star.probs(x).iter().zip(pi1.probs(x)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn optimal_policy_hand_value() {
        let beta = 0.1;
        let pi1 = CategoricalPolicy::uniform(1, 2);
        let r2 = RewardTable::new(1, 2, vec![beta * 3f64.ln(), 0.0]).unwrap();
        let star = optimal_policy_round2(&pi1, &RewardTable::zeros(1, 2), &r2, 0.0, beta).unwrap();
        let p = star.probs(0);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn optimal_policy_survives_huge_tilts() {
        let pi1 = CategoricalPolicy::uniform(1, 3);
        let r2 = RewardTable::new(1, 3, vec![70.0, -70.0, 0.0]).unwrap();
        let star = optimal_policy_round2(&pi1, &RewardTable::zeros(1, 3), &r2, 0.0, 0.1).unwrap();
        let p = star.probs(0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn optimal_policy_normalizes(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, "norm", 0);
            let inst = Round2Instance::random(&mut rng, 5, 20);
            let star = optimal_policy_round2(&inst.pi1, &inst.r1, &inst.r2, inst.alpha1, inst.beta).unwrap();
            for x in 0..star.num_prompts() {
                let s: f64 = star.probs(x).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(star.probs(x).iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn objective_vanishes_at_reference_with_zero_rewards() {
        let mut rng = stream_rng(4, "obj", 0);
        let pi = CategoricalPolicy::random(3, 4, &mut rng);
        let z = RewardTable::zeros(3, 4);
        let j = lagrangian_objective(&pi, &pi, &z, std::slice::from_ref(&z), &[0.5], 0.1).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn objective_is_homogeneous() {
        let mut rng = stream_rng(5, "obj", 0);
        let inst = Round2Instance::random(&mut rng, 4, 6);
        let pi = CategoricalPolicy::random(inst.pi1.num_prompts(), inst.pi1.num_responses(), &mut rng);
        let c = 3.7;
        let j = inst.objective(&pi).unwrap();
        let jc = lagrangian_objective(
            &pi,
            &inst.pi1,
            &inst.r2.scaled(c),
            &[inst.r1.scaled(c)],
            &[inst.alpha1],
            inst.beta * c,
        )
        .unwrap();
        assert!((jc - c * j).abs() < 1e-12 * (1.0 + jc.abs()));
    }

    #[test]
    fn objective_rejects_length_mismatch() {
        let pi = CategoricalPolicy::uniform(1, 2);
        let z = RewardTable::zeros(1, 2);
        assert!(matches!(
            lagrangian_objective(&pi, &pi, &z, &[], &[0.1], 0.1),
            Err(SpoError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn closed_form_beats_random_and_perturbed_policies() {
        let mut rng = stream_rng(6, "optimality", 0);
        for _ in 0..10 {
            let inst = Round2Instance::random(&mut rng, 5, 20);
            let check = check_round2_optimality(&inst, 200, 1e-3, &mut rng).unwrap();
            assert!(check.slack <= 1e-9, "{check:?}");
        }
    }

    #[test]
    fn implicit_reward_delta_properties() {
        let mut rng = stream_rng(7, "ird", 0);
        let pi = CategoricalPolicy::random(2, 5, &mut rng);
        let pi_ref = CategoricalPolicy::random(2, 5, &mut rng);
        assert_eq!(implicit_reward_delta(&pi, &pi, 0.1, 1, 0, 3).unwrap(), 0.0);
        let d = implicit_reward_delta(&pi, &pi_ref, 0.1, 1, 0, 3).unwrap();
        let d2 = implicit_reward_delta(&pi, &pi_ref, 0.2, 1, 0, 3).unwrap();
        assert!((d2 - 2.0 * d).abs() < 1e-15);
        let rev = implicit_reward_delta(&pi, &pi_ref, 0.1, 1, 3, 0).unwrap();
        assert_eq!(d, -rev);
    }

    #[test]
    fn space_rejects_duplicates_and_oversize() {
        assert!(EnumeratedSpace::new(vec![vec![1]], vec![vec![2], vec![2]]).is_err());
        let big: Vec<Vec<TokenId>> = (0..101).map(|i| vec![i]).collect();
        assert!(EnumeratedSpace::new(big.clone(), big).is_err());
        let s = EnumeratedSpace::new(vec![vec![0]], vec![vec![1, 2], vec![3]]).unwrap();
        assert_eq!(s.locate(&[0], &[3]).unwrap(), (0, 1));
        assert!(s.locate(&[9], &[3]).is_err());
        let json = serde_json::to_string(&s).unwrap();
        let back: EnumeratedSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back.response_id(&[1, 2]), Some(0));
    }
}
