//! Oracle suite: numerical gradients, optimality of the closed-form
//! round-two policy, κ schedules, reduction identities and cache
//! equivalence. Every check compares the production path with an
//! independent computation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::{LogProbCache, RecomputedHistory};
use crate::data::PreferenceDataset;
use crate::datagen::{gen_bt_dataset, random_table_latent, BtParams};
use crate::error::{Result, SpoError};
use crate::models::{
    round_loss_and_grad, train_round, NeuralPolicy, NeuralPolicyConfig, OptimizerKind, Policy, Precision,
    StepMetrics, TabularPolicy, TrainConfig,
};
use crate::objectives::{analytic_gradient_round2, dpo_pair_logit, equal_alpha_kappas, gradcheck, kappa_schedule};
use crate::seed::stream_rng;
use crate::tabular::{check_round2_optimality, CategoricalPolicy, Round2Instance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradients,
    Optimality,
    Kappa,
    Reductions,
    Cache,
    All,
}

impl FromStr for Suite {
    type Err = SpoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gradients" => Suite::Gradients,
            "optimality" => Suite::Optimality,
            "kappa" => Suite::Kappa,
            "reductions" => Suite::Reductions,
            "cache" => Suite::Cache,
            "all" => Suite::All,
            other => return Err(SpoError::InvalidArgument(format!("unknown suite `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or slack).
    pub value: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<44} {:>12.3e} <= {:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

/// One line of the optimality table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityRow {
    pub instance: usize,
    pub j_star: f64,
    pub best: f64,
    pub slack: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub optimality: Vec<OptimalityRow>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn write_optimality_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.optimality {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const GRADCHECK_TOL: f64 = 1e-6;
pub const CLOSED_FORM_GRAD_TOL: f64 = 1e-10;
pub const OPTIMALITY_SLACK_TOL: f64 = 1e-9;
pub const KAPPA_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;

const DIMS: [&str; 4] = ["d1", "d2", "d3", "d4"];
const BETA: f64 = 0.1;

/// Small tabular world: a BT dataset over an enumerated space and four
/// random earlier policies with their cache.
struct World {
    dataset: PreferenceDataset,
    history: Vec<Policy>,
    current: Policy,
    cache: LogProbCache,
}

fn tabular_world(seed: u64) -> Result<World> {
    let (vocab, space, latent) = random_table_latent(3, 6, &DIMS, 1.0, seed)?;
    let dataset = gen_bt_dataset(
        &latent,
        &space,
        &vocab,
        &BtParams {
            num_examples: 30,
            draws_per_pair: 1,
            seed,
        },
    )?
    .dataset;
    let space = Arc::new(space);
    let mut rng = stream_rng(seed, "verify-policies", 0);
    let mut make = || -> Result<Policy> {
        Ok(TabularPolicy::new(vocab.clone(), space.clone(), CategoricalPolicy::random(3, 6, &mut rng))?.into())
    };
    let history = (0..4).map(|_| make()).collect::<Result<Vec<_>>>()?;
    let current = make()?;
    let mut cache = LogProbCache::new(&dataset)?;
    for p in &history {
        cache.extend(p, &dataset)?;
    }
    Ok(World {
        dataset,
        history,
        current,
        cache,
    })
}

/// The same data with tiny neural policies.
fn neural_world(seed: u64) -> Result<World> {
    let base = tabular_world(seed)?;
    let config = NeuralPolicyConfig {
        d_model: 6,
        n_layers: 1,
        hidden: 8,
        context_len: 4,
    };
    let make = |i: u64| -> Result<Policy> {
        Ok(NeuralPolicy::new(base.dataset.vocab.clone(), config.clone(), seed.wrapping_add(100 + i))?.into())
    };
    let history = (0..4).map(make).collect::<Result<Vec<_>>>()?;
    let mut cache = LogProbCache::new(&base.dataset)?;
    for p in &history {
        cache.extend(p, &base.dataset)?;
    }
    Ok(World {
        current: make(4)?,
        dataset: base.dataset,
        history,
        cache,
    })
}

fn gradient_cases() -> Vec<(&'static str, usize, Vec<f64>)> {
    vec![
        ("dpo", 1, vec![]),
        ("spo n=2", 2, vec![0.1]),
        ("spo n=3 unequal alpha", 3, vec![0.3, 0.05]),
        ("spo n=4 equal alpha", 4, vec![0.2; 3]),
    ]
}

pub fn check_gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (label, world) in [("tabular", tabular_world(seed)?), ("neural", neural_world(seed)?)] {
        for (case, n, alphas) in gradient_cases() {
            let schedule = kappa_schedule(n, BETA, &alphas)?;
            let dim = DIMS[n - 1];
            let (_, grad) = round_loss_and_grad(&world.current, &world.dataset, dim, &schedule, &world.cache, None)?;
            let err = gradcheck(
                |p| {
                    let policy = world.current.with_params(p)?;
                    Ok(round_loss_and_grad(&policy, &world.dataset, dim, &schedule, &world.cache, None)?.0)
                },
                world.current.params(),
                &grad,
                1e-5,
            )?;
            out.push(CheckResult::at_most(format!("gradcheck {label} {case}"), err, GRADCHECK_TOL));
        }
    }
    let world = tabular_world(seed)?;
    let schedule = kappa_schedule(2, BETA, &[0.1])?;
    let indices = world.dataset.training_indices(DIMS[1]);
    let closed = analytic_gradient_round2(&world.dataset, DIMS[1], &indices, &world.current, &world.cache, &schedule)?;
    let (_, trainer) = round_loss_and_grad(&world.current, &world.dataset, DIMS[1], &schedule, &world.cache, None)?;
    let diff = closed.iter().zip(&trainer).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(CheckResult::at_most("round-2 closed-form gradient vs trainer", diff, CLOSED_FORM_GRAD_TOL));
    Ok(out)
}

/// Closed-form round-two policy against random and perturbed challengers.
pub fn check_optimality(seed: u64, instances: usize) -> Result<(CheckResult, Vec<OptimalityRow>)> {
    let mut rng = stream_rng(seed, "verify-optimality", 0);
    let mut rows = Vec::with_capacity(instances);
    for instance in 0..instances {
        let inst = Round2Instance::random(&mut rng, 5, 20);
        let check = check_round2_optimality(&inst, 1000, 1e-3, &mut rng)?;
        rows.push(OptimalityRow {
            instance,
            j_star: check.j_star,
            best: check.best_challenger,
            slack: check.slack,
        });
    }
    let worst = rows.iter().map(|r| r.slack).fold(f64::NEG_INFINITY, f64::max);
    Ok((
        CheckResult::at_most(format!("closed-form optimality ({instances} instances)"), worst, OPTIMALITY_SLACK_TOL),
        rows,
    ))
}

/// Coefficients built one round at a time:
/// `c⁽ⁿ⁾ = [(1 − α_{n−1}) c⁽ⁿ⁻¹⁾ − β e_{n−1}, β]`.
fn kappa_by_recursion(beta: f64, alphas: &[f64]) -> Vec<f64> {
    let mut c = vec![beta];
    for &a in alphas {
        let last = c.len() - 1;
        for x in c.iter_mut() {
            *x *= 1.0 - a;
        }
        c[last] -= beta;
        c.push(beta);
    }
    c
}

pub fn check_kappa(seed: u64) -> Result<Vec<CheckResult>> {
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut equal = 0.0f64;
    let mut unequal = 0.0f64;
    let mut rng = stream_rng(seed, "verify-kappa", 0);
    for n in 1..=8 {
        for alpha in [0.05, 0.1, 0.3, 0.5] {
            let sched = kappa_schedule(n, BETA, &vec![alpha; n - 1])?;
            equal = equal
                .max(max_diff(&sched.kappas, &equal_alpha_kappas(n, BETA, alpha)))
                .max(max_diff(&sched.kappas, &kappa_by_recursion(BETA, &vec![alpha; n - 1])));
        }
        for _ in 0..10 {
            let alphas: Vec<f64> = (1..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..0.9)).collect();
            let beta = rand::Rng::random_range(&mut rng, 0.01..2.0);
            let sched = kappa_schedule(n, beta, &alphas)?;
            unequal = unequal.max(max_diff(&sched.kappas, &kappa_by_recursion(beta, &alphas)));
        }
    }
    let mut two = 0.0f64;
    for alpha in [0.05, 0.1, 0.3, 0.5] {
        two = two.max(max_diff(&kappa_schedule(2, BETA, &[alpha])?.kappas, &[-alpha * BETA, BETA]));
    }
    Ok(vec![
        CheckResult::at_most("kappa equal-alpha closed form, n<=8", equal, KAPPA_TOL),
        CheckResult::at_most("kappa recursion, random alphas, n<=8", unequal, KAPPA_TOL),
        CheckResult::at_most("kappa n=2 is (-alpha beta, beta)", two, KAPPA_TOL),
    ])
}

fn sgd(epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        learning_rate: 0.5,
        optimizer: OptimizerKind::Sgd,
        seed,
        precision: Precision::F64,
    }
}

fn trace_gap(a: &[StepMetrics], b: &[StepMetrics]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            (x.loss - y.loss)
                .abs()
                .max((x.grad_norm - y.grad_norm).abs())
                .max((x.mean_pair_logit - y.mean_pair_logit).abs())
        })
        .fold(0.0, f64::max)
}

fn param_gap(a: &Policy, b: &Policy) -> f64 {
    a.params().iter().zip(b.params()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Plain full-batch DPO on a logit table: the loss and the gradient
/// `−β σ(−z)(e_{x,w} − e_{x,l})` averaged over pairs.
fn reference_dpo_trace(
    world: &World,
    dim: &str,
    reference: &Policy,
    steps: usize,
    lr: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut policy = world.current.as_tabular().expect("tabular world").clone();
    let ref_tab = reference.as_tabular().expect("tabular world");
    let indices = world.dataset.training_indices(dim);
    let n = policy.space().num_responses();
    let mut losses = Vec::new();
    for _ in 0..steps {
        let mut grad = vec![0.0; n * policy.space().num_prompts()];
        let mut loss = 0.0;
        for &i in &indices {
            let ex = &world.dataset.examples[i];
            let (w, l) = ex.ordered(dim).expect("labelled");
            let (x, yw) = policy.space().locate(&ex.prompt, w)?;
            let (_, yl) = policy.space().locate(&ex.prompt, l)?;
            let (lp, lr_) = (policy.table().log_probs(x), ref_tab.table().log_probs(x));
            let z = dpo_pair_logit(lp[yw], lp[yl], lr_[yw], lr_[yl], BETA);
            loss += crate::numeric::softplus(-z);
            let s = -BETA * crate::numeric::sigmoid(-z) / indices.len() as f64;
            grad[x * n + yw] += s;
            grad[x * n + yl] -= s;
        }
        losses.push(loss / indices.len() as f64);
        let mut p = Policy::from(policy.clone());
        for (v, g) in p.params_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        policy = p.as_tabular().expect("tabular").clone();
    }
    Ok((losses, Policy::from(policy).params().to_vec()))
}

pub fn check_reductions(seed: u64) -> Result<Vec<CheckResult>> {
    let world = tabular_world(seed)?;
    let config = sgd(40, 7, seed);

    // Round 2 with α = 0 against DPO from π₁ with a one-round cache.
    let spo = train_round(
        &world.current,
        &world.dataset,
        DIMS[1],
        &kappa_schedule(2, BETA, &[0.0])?,
        &world.cache,
        &config,
    )?;
    let mut only_last = LogProbCache::new(&world.dataset)?;
    only_last.extend(&world.history[1], &world.dataset)?;
    let sdpo = train_round(
        &world.current,
        &world.dataset,
        DIMS[1],
        &kappa_schedule(1, BETA, &[])?,
        &only_last,
        &config,
    )?;
    let gap_sdpo = trace_gap(&spo.metrics, &sdpo.metrics).max(param_gap(&spo.policy, &sdpo.policy));

    // Round 1 against an independent DPO implementation (full batch, SGD).
    let steps = 200;
    let full = sgd(steps, usize::MAX, seed);
    let spo1 = train_round(
        &world.current,
        &world.dataset,
        DIMS[0],
        &kappa_schedule(1, BETA, &[])?,
        &world.cache,
        &full,
    )?;
    let (losses, params) = reference_dpo_trace(&world, DIMS[0], &world.history[0], steps, full.learning_rate)?;
    let mut gap_dpo = spo1
        .metrics
        .iter()
        .zip(&losses)
        .map(|(m, l)| (m.loss - l).abs())
        .fold(0.0, f64::max);
    gap_dpo = gap_dpo.max(
        spo1.policy
            .params()
            .iter()
            .zip(&params)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    );
    if spo1.metrics.len() != losses.len() {
        gap_dpo = f64::INFINITY;
    }
    Ok(vec![
        CheckResult::at_most("SPO(n=2, alpha=0) trace vs S-DPO", gap_sdpo, TRACE_TOL),
        CheckResult::at_most("SPO(n=1) trace vs DPO", gap_dpo, TRACE_TOL),
    ])
}

pub fn check_cache(seed: u64) -> Result<Vec<CheckResult>> {
    let world = neural_world(seed)?;
    let schedule = kappa_schedule(3, BETA, &[0.2, 0.1])?;
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-2,
        optimizer: OptimizerKind::Adam,
        seed,
        precision: Precision::F64,
    };
    let fresh: Vec<Policy> = world.history[..3].to_vec();
    let cached = train_round(&world.current, &world.dataset, DIMS[2], &schedule, &world.cache, &config)?;
    let history_passes: u64 = fresh.iter().map(Policy::forward_passes).sum();
    let recomputed_history = RecomputedHistory {
        policies: fresh.iter().collect(),
    };
    let recomputed = train_round(&world.current, &world.dataset, DIMS[2], &schedule, &recomputed_history, &config)?;
    let gap = trace_gap(&cached.metrics, &recomputed.metrics).max(param_gap(&cached.policy, &recomputed.policy));
    Ok(vec![
        CheckResult::at_most("cached vs recomputed history trace", gap, TRACE_TOL),
        CheckResult::at_most("history forward passes with cache", history_passes as f64, 0.0),
    ])
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let want = |s: Suite| suite == Suite::All || suite == s;
    if want(Suite::Gradients) {
        report.checks.extend(check_gradients(seed)?);
    }
    if want(Suite::Optimality) {
        let (check, rows) = check_optimality(seed, 100)?;
        report.checks.push(check);
        report.optimality = rows;
    }
    if want(Suite::Kappa) {
        report.checks.extend(check_kappa(seed)?);
    }
    if want(Suite::Reductions) {
        report.checks.extend(check_reductions(seed)?);
    }
    if want(Suite::Cache) {
        report.checks.extend(check_cache(seed)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recursion_hand_values() {
        let c = kappa_by_recursion(0.1, &[0.1, 0.1]);
        let expected = [-0.009, -0.01, 0.1];
        for (a, b) in c.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn fast_suites_pass() {
        for suite in [Suite::Kappa, Suite::Reductions, Suite::Cache, Suite::Gradients] {
            let report = run_suite(suite, 11).unwrap();
            for c in &report.checks {
                assert!(c.passed, "{c}");
            }
        }
    }

    #[test]
    fn optimality_rows_are_reported() {
        let (check, rows) = check_optimality(2, 5).unwrap();
        assert!(check.passed, "{check}");
        assert_eq!(rows.len(), 5);
        let mut buf = Vec::new();
        VerifyReport {
            checks: vec![],
            optimality: rows,
        }
        .write_optimality_csv(&mut buf)
        .unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("instance,j_star,best,slack\n"));
    }
}
