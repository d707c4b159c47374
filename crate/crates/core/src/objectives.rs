//! The preference-loss family: DPO, two-dimension SPO and its n-dimension
//! generalization, plus gradient checking and the dual multiplier update.
//!
//! Round `n` scores a pair `(y_w, y_l)` with the pairwise difference of the
//! round-`n` reward
//!
//! ```text
//! R_n(x, y) = Σ_{i=1..n} κ_i log π_i(y|x) / π_{i-1}(y|x)
//! ```
//!
//! which, after differencing, is `Σ κ_i φ_i` with
//! `φ_i = log π_i(y_w)/π_{i-1}(y_w) − log π_i(y_l)/π_{i-1}(y_l)`. Every
//! prompt-dependent `log Z(x)` shift is shared by the two responses and
//! cancels, so it is never computed.

use serde::{Deserialize, Serialize};

use crate::cache::HistoryLogProbs;
use crate::data::PreferenceDataset;
use crate::error::{Result, SpoError};
use crate::models::Policy;
use crate::numeric::{sigmoid, softplus};

/// Coefficients `κ_1..κ_n` of the round-`n` reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaSchedule {
    #[serde(rename = "n")]
    pub round_n: usize,
    pub beta: f64,
    pub alphas: Vec<f64>,
    pub kappas: Vec<f64>,
}

impl KappaSchedule {
    /// `κ_i` with 1-based `i`.
    pub fn kappa(&self, i: usize) -> f64 {
        self.kappas[i - 1]
    }
}

/// Builds the schedule for round `n`:
/// `κ_n = β`, and for `i = 1..n−1`
/// `κ_{n−i} = −β α_{n−i} Π_{j=2..i} (1 − α_{n−1−i+j})`
/// (the product is empty, i.e. 1, for `i = 1`).
pub fn kappa_schedule(n: usize, beta: f64, alphas: &[f64]) -> Result<KappaSchedule> {
    if n == 0 {
        return Err(SpoError::InvalidArgument("round index starts at 1".into()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(SpoError::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if alphas.len() != n - 1 {
        return Err(SpoError::DimensionMismatch(format!(
            "round {n} needs {} alphas, got {}",
            n - 1,
            alphas.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(SpoError::InvalidArgument(format!("alpha {a} outside [0, 1)")));
    }
    // alpha(k) is α_k, 1-based.
    let alpha = |k: usize| alphas[k - 1];
    let mut kappas = vec![0.0; n];
    kappas[n - 1] = beta;
    for i in 1..n {
        let product: f64 = (2..=i).map(|j| 1.0 - alpha(n - 1 - i + j)).product();
        kappas[n - i - 1] = -beta * alpha(n - i) * product;
    }
    Ok(KappaSchedule {
        round_n: n,
        beta,
        alphas: alphas.to_vec(),
        kappas,
    })
}

/// Closed form for equally weighted previous dimensions:
/// `κ_{n−i} = −β α (1 − α)^{i−1}`.
pub fn equal_alpha_kappas(n: usize, beta: f64, alpha: f64) -> Vec<f64> {
    let mut kappas = vec![0.0; n];
    kappas[n - 1] = beta;
    for i in 1..n {
        kappas[n - i - 1] = -beta * alpha * (1.0 - alpha).powi(i as i32 - 1);
    }
    kappas
}

/// Log-probabilities of the preferred and dispreferred responses of one
/// pair: under the policy being trained and under `π_0..π_{n−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLogitInputs {
    pub current_w: f64,
    pub current_l: f64,
    /// `(log π_r(y_w), log π_r(y_l))` for `r = 0..n−1`.
    pub history: Vec<(f64, f64)>,
}

fn phi(newer: (f64, f64), older: (f64, f64)) -> f64 {
    (newer.0 - older.0) - (newer.1 - older.1)
}

/// `Σ_{i<n} κ_i φ_i`, the part of the pair logit fixed by earlier rounds.
pub fn history_offset(history: &[(f64, f64)], schedule: &KappaSchedule) -> Result<f64> {
    let n = schedule.round_n;
    if history.len() < n {
        return Err(SpoError::MissingCacheRound { round: history.len() });
    }
    let mut offset = 0.0;
    for i in 1..n {
        offset += schedule.kappa(i) * phi(history[i], history[i - 1]);
    }
    Ok(offset)
}

/// `κ_n φ_n`, the part of the pair logit that depends on the trained policy.
pub fn current_term(current_w: f64, current_l: f64, reference: (f64, f64), schedule: &KappaSchedule) -> f64 {
    schedule.kappa(schedule.round_n) * phi((current_w, current_l), reference)
}

/// `Σ_{i=1..n} κ_i φ_i`.
pub fn spo_pair_logit(inputs: &PairLogitInputs, schedule: &KappaSchedule) -> Result<f64> {
    let n = schedule.round_n;
    let offset = history_offset(&inputs.history, schedule)?;
    Ok(current_term(inputs.current_w, inputs.current_l, inputs.history[n - 1], schedule) + offset)
}

/// Standard DPO pair logit `β[(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))]`.
pub fn dpo_pair_logit(policy_w: f64, policy_l: f64, ref_w: f64, ref_l: f64, beta: f64) -> f64 {
    beta * ((policy_w - ref_w) - (policy_l - ref_l))
}

/// Mean of `−log σ(z)` over the batch.
pub fn preference_loss(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(SpoError::EmptyBatch);
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(SpoError::NonFinite("pair logit".into()));
    }
    let sum: f64 = logits.iter().map(|&z| softplus(-z)).sum();
    Ok(sum / logits.len() as f64)
}

/// `d(−log σ(z))/dz = −σ(−z)`.
pub fn pair_loss_slope(logit: f64) -> f64 {
    -sigmoid(-logit)
}

/// Per-pair weight of the round-two gradient, `σ(−ξ₂φ₂ + ξ₁φ₁)`.
pub fn round2_gradient_weight(phi1: f64, phi2: f64, xi1: f64, xi2: f64) -> f64 {
    sigmoid(-xi2 * phi2 + xi1 * phi1)
}

/// Round-two loss gradient for a tabular policy, written out directly:
///
/// `−ξ₂ · mean[ σ(−ξ₂φ₂ + ξ₁φ₁) (∇log π₂(y_w|x) − ∇log π₂(y_l|x)) ]`
///
/// with `ξ₁ = α₁β`, `ξ₂ = β`. For a logit table the bracketed difference is
/// `e_{x,y_w} − e_{x,y_l}`.
pub fn analytic_gradient_round2(
    dataset: &PreferenceDataset,
    dimension: &str,
    batch: &[usize],
    policy: &Policy,
    history: &dyn HistoryLogProbs,
    schedule: &KappaSchedule,
) -> Result<Vec<f64>> {
    let tab = policy
        .as_tabular()
        .ok_or_else(|| SpoError::InvalidArgument("closed-form gradient needs a tabular policy".into()))?;
    if schedule.round_n != 2 {
        return Err(SpoError::InvalidArgument(format!(
            "round-two gradient with a round-{} schedule",
            schedule.round_n
        )));
    }
    if batch.is_empty() {
        return Err(SpoError::EmptyBatch);
    }
    let xi2 = schedule.kappa(2);
    let xi1 = -schedule.kappa(1);
    let space = tab.space();
    let n = space.num_responses();
    let mut grad = vec![0.0; policy.num_params()];
    let scale = -xi2 / batch.len() as f64;
    for &i in batch {
        let ex = &dataset.examples[i];
        let (w, l) = ex
            .ordered(dimension)
            .ok_or_else(|| SpoError::UnknownDimension(dimension.to_string()))?;
        let (x, yw) = space.locate(&ex.prompt, w)?;
        let (_, yl) = space.locate(&ex.prompt, l)?;
        let lp = tab.table().log_probs(x);
        let h0 = history.oriented(0, i, dimension, dataset)?;
        let h1 = history.oriented(1, i, dimension, dataset)?;
        let phi2 = (lp[yw] - h1.0) - (lp[yl] - h1.1);
        let phi1 = (h1.0 - h0.0) - (h1.1 - h0.1);
        let weight = round2_gradient_weight(phi1, phi2, xi1, xi2);
        grad[x * n + yw] += scale * weight;
        grad[x * n + yl] -= scale * weight;
    }
    Ok(grad)
}

/// Largest relative disagreement between `grad` and central differences of
/// `loss` around `params`: `max_i |g_fd − g| / max(1, |g_fd|)`.
pub fn gradcheck<F>(loss: F, params: &[f64], grad: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return Err(SpoError::InvalidArgument(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }
    if params.len() != grad.len() {
        return Err(SpoError::DimensionMismatch(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            grad.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = loss(&probe)?;
        probe[i] = params[i] - step;
        let minus = loss(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(SpoError::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

/// Projected dual ascent on a previous-dimension multiplier:
/// `clip(α + step·(H − measured), 0, α_max)`.
pub fn dual_alpha_update(alpha: f64, measured_prev_reward: f64, threshold: f64, step: f64, alpha_max: f64) -> f64 {
    (alpha + step * (threshold - measured_prev_reward)).clamp(0.0, alpha_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_one_is_plain_beta() {
        let s = kappa_schedule(1, 0.1, &[]).unwrap();
        assert_eq!(s.kappas, vec![0.1]);
    }

    #[test]
    fn round_two_matches_xi_constants() {
        let s = kappa_schedule(2, 0.1, &[0.1]).unwrap();
        assert_eq!(s.kappas, vec![-0.1 * 0.1, 0.1]);
        assert!((s.kappas[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn round_three_hand_value() {
        let s = kappa_schedule(3, 0.1, &[0.1, 0.1]).unwrap();
        let expected = [-0.009, -0.01, 0.1];
        for (k, e) in s.kappas.iter().zip(expected) {
            assert!((k - e).abs() < 1e-15, "{:?}", s.kappas);
        }
    }

    #[test]
    fn unequal_alphas_use_later_multipliers_in_the_product() {
        // κ_1 = −β α_1 (1 − α_2)(1 − α_3) for n = 4.
        let (b, a) = (0.2, [0.3, 0.1, 0.4]);
        let s = kappa_schedule(4, b, &a).unwrap();
        assert!((s.kappas[0] + b * a[0] * (1.0 - a[1]) * (1.0 - a[2])).abs() < 1e-15);
        assert!((s.kappas[1] + b * a[1] * (1.0 - a[2])).abs() < 1e-15);
        assert!((s.kappas[2] + b * a[2]).abs() < 1e-15);
        assert_eq!(s.kappas[3], b);
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        assert!(kappa_schedule(0, 0.1, &[]).is_err());
        assert!(kappa_schedule(2, 0.1, &[]).is_err());
        assert!(kappa_schedule(2, 0.0, &[0.1]).is_err());
        assert!(kappa_schedule(2, 0.1, &[1.0]).is_err());
        assert!(kappa_schedule(2, 0.1, &[-0.1]).is_err());
    }

    #[test]
    fn recursion_matches_equal_alpha_closed_form() {
        for n in 1..=8 {
            for alpha in [0.05, 0.1, 0.3, 0.5] {
                let s = kappa_schedule(n, 0.1, &vec![alpha; n - 1]).unwrap();
                for (k, c) in s.kappas.iter().zip(equal_alpha_kappas(n, 0.1, alpha)) {
                    assert!((k - c).abs() <= 1e-12);
                }
                assert!(s.kappas[..n - 1].iter().all(|&k| k < 0.0));
            }
        }
    }

    fn inputs(cur: (f64, f64), history: &[(f64, f64)]) -> PairLogitInputs {
        PairLogitInputs {
            current_w: cur.0,
            current_l: cur.1,
            history: history.to_vec(),
        }
    }

    #[test]
    fn pair_logit_hand_value() {
        // φ₁ = 0.5, φ₂ = 1.
        let s = kappa_schedule(2, 0.1, &[0.1]).unwrap();
        let z = spo_pair_logit(&inputs((-1.0, -2.5), &[(-2.0, -2.0), (-1.5, -2.0)]), &s).unwrap();
        assert!((z - 0.095).abs() < 1e-15);
    }

    #[test]
    fn identical_policies_give_zero_logit() {
        let s = kappa_schedule(4, 0.1, &[0.1, 0.2, 0.3]).unwrap();
        let h = vec![(-1.2, -3.4); 4];
        assert_eq!(spo_pair_logit(&inputs((-1.2, -3.4), &h), &s).unwrap(), 0.0);
    }

    #[test]
    fn missing_history_round_is_an_error() {
        let s = kappa_schedule(3, 0.1, &[0.1, 0.1]).unwrap();
        assert!(matches!(
            spo_pair_logit(&inputs((0.0, 0.0), &[(0.0, 0.0); 2]), &s),
            Err(SpoError::MissingCacheRound { round: 2 })
        ));
    }

    proptest! {
        #[test]
        fn swapping_preference_negates_logit(
            cur in (-30.0f64..0.0, -30.0f64..0.0),
            h in prop::collection::vec((-30.0f64..0.0, -30.0f64..0.0), 3),
            a in (0.0f64..0.9, 0.0f64..0.9),
        ) {
            let s = kappa_schedule(3, 0.1, &[a.0, a.1]).unwrap();
            let fwd = spo_pair_logit(&inputs(cur, &h), &s).unwrap();
            let swapped: Vec<_> = h.iter().map(|&(w, l)| (l, w)).collect();
            let back = spo_pair_logit(&inputs((cur.1, cur.0), &swapped), &s).unwrap();
            prop_assert_eq!(fwd, -back);
        }

        #[test]
        fn loss_positive_and_decreasing(zs in prop::collection::vec(-20.0f64..20.0, 1..16), idx in 0usize..16, dz in 1e-3f64..5.0) {
            let base = preference_loss(&zs).unwrap();
            prop_assert!(base > 0.0);
            let mut bumped = zs.clone();
            let i = idx % zs.len();
            bumped[i] += dz;
            prop_assert!(preference_loss(&bumped).unwrap() < base);
        }

        #[test]
        fn round_one_schedule_is_dpo(w in -20.0f64..0.0, l in -20.0f64..0.0, rw in -20.0f64..0.0, rl in -20.0f64..0.0) {
            let s = kappa_schedule(1, 0.1, &[]).unwrap();
            let spo = spo_pair_logit(&inputs((w, l), &[(rw, rl)]), &s).unwrap();
            prop_assert_eq!(spo, dpo_pair_logit(w, l, rw, rl, 0.1));
        }
    }

    #[test]
    fn loss_at_zero_is_ln2() {
        assert!((preference_loss(&[0.0; 5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(preference_loss(&[]), Err(SpoError::EmptyBatch)));
        assert!(preference_loss(&[f64::NAN]).is_err());
        assert!(preference_loss(&[-800.0]).unwrap().is_finite());
    }

    #[test]
    fn weight_is_half_when_nothing_moved_and_tracks_phi1() {
        assert_eq!(round2_gradient_weight(0.0, 0.0, 0.01, 0.1), 0.5);
        let base = round2_gradient_weight(0.0, 2.0, 0.01, 0.1);
        assert!(round2_gradient_weight(3.0, 2.0, 0.01, 0.1) > base);
        assert!(round2_gradient_weight(-3.0, 2.0, 0.01, 0.1) < base);
    }

    #[test]
    fn gradcheck_detects_errors_and_validates_step() {
        let f = |p: &[f64]| Ok(p[0] * p[0] + 3.0 * p[1]);
        let p = [1.5, -2.0];
        assert!(gradcheck(f, &p, &[3.0, 3.0], 1e-5).unwrap() < 1e-9);
        assert!(gradcheck(f, &p, &[3.0, 2.0], 1e-5).unwrap() > 0.1);
        assert!(gradcheck(f, &p, &[3.0, 3.0], 1e-2).is_err());
        let bad = |_: &[f64]| Ok(f64::NAN);
        assert!(gradcheck(bad, &p, &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn dual_update_directions() {
        assert_eq!(dual_alpha_update(0.2, 1.0, 1.0, 0.5, 0.9), 0.2);
        assert!(dual_alpha_update(0.2, 1.5, 1.0, 0.1, 0.9) < 0.2);
        assert_eq!(dual_alpha_update(0.01, 5.0, 1.0, 0.1, 0.9), 0.0);
        let mut a = 0.0;
        for _ in 0..100 {
            a = dual_alpha_update(a, 0.0, 1.0, 0.05, 0.9);
        }
        assert_eq!(a, 0.9);
    }
}
