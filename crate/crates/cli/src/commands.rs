use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use spo_core::datagen::{
    gen_bt_dataset, gen_conflicting_dataset, gen_special_token_dataset, random_table_latent, BtParams,
    ConflictingParams, Generated, SpecialTokenParams,
};
use spo_core::models::{load_checkpoint, OptimizerKind, SampleMode, TrainConfig};
use spo_core::pipeline::experiments::{
    conflict_round2, conflict_setup, overfitting_curve, spearman, sweep_means, ConflictExperiment, SweepRow,
};
use spo_core::pipeline::report::{generate_run_report, generate_sweep_report};
use spo_core::pipeline::{
    compare_policies, evaluate_policy, execute_run, expected_rewards, AlphaSpec, DualAlphaConfig, Method,
    ModelChoice, PipelineConfig, RunDir, RunSpec,
};
use spo_core::verify::{run_suite, Suite};

use crate::args::{
    BtArgs, CompareArgs, ConflictingArgs, EvalArgs, ReportArgs, SpecialTokenArgs, SweepArgs, TrainArgs, VerifyArgs,
};
use crate::UsageError;

/// Environment variable naming the default output root.
pub const OUTPUT_DIR_ENV: &str = "SPO_OUTPUT_DIR";

fn output_dir(out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("spo-out"))
            .join(name)
    })
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| UsageError(format!("missing required --{flag}")).into())
}

fn existing_dir(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let path = required(path, flag)?;
    if !path.is_dir() {
        bail!(UsageError(format!("--{flag} {} is not a directory", path.display())));
    }
    Ok(path)
}

fn load_data(dir: &Path) -> Result<Generated> {
    Ok(Generated::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))?)
}

fn save_generated(g: &Generated, out: &Path) -> Result<()> {
    g.save(out)?;
    println!(
        "wrote {} examples ({} dimensions) to {}",
        g.dataset.examples.len(),
        g.dataset.dimensions.len(),
        out.display()
    );
    Ok(())
}

pub fn gen_special_token(a: SpecialTokenArgs) -> Result<()> {
    let d = SpecialTokenParams::default();
    let params = SpecialTokenParams {
        num_examples: a.num.unwrap_or(d.num_examples),
        num_dims: a.dims.unwrap_or(d.num_dims),
        noise: a.noise.unwrap_or(d.noise),
        base_length: a.base_length.unwrap_or(d.base_length),
        num_eval_prompts: a.eval_prompts.unwrap_or(d.num_eval_prompts),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    save_generated(&gen_special_token_dataset(&params)?, &output_dir(a.out, "special-token"))
}

pub fn gen_conflicting(a: ConflictingArgs) -> Result<()> {
    let d = ConflictingParams::default();
    let params = ConflictingParams {
        num_examples: a.num.unwrap_or(d.num_examples),
        refusal_fraction: a.refusal_fraction.unwrap_or(d.refusal_fraction),
        sft_refusal_rate: a.sft_refusal_rate.unwrap_or(d.sft_refusal_rate),
        num_sft: a.num_sft.unwrap_or(d.num_sft),
        num_eval_prompts: a.eval_prompts.unwrap_or(d.num_eval_prompts),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    save_generated(&gen_conflicting_dataset(&params)?, &output_dir(a.out, "conflicting"))
}

pub fn gen_bt(a: BtArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let dims = a.dims.unwrap_or_else(|| vec!["d1".into(), "d2".into()]);
    let names: Vec<&str> = dims.iter().map(String::as_str).collect();
    let (vocab, space, latent) = random_table_latent(
        a.prompts.unwrap_or(4),
        a.responses.unwrap_or(8),
        &names,
        a.scale.unwrap_or(1.0),
        seed,
    )?;
    let params = BtParams {
        num_examples: a.pairs.unwrap_or(200),
        draws_per_pair: a.draws.unwrap_or(1),
        seed,
    };
    save_generated(&gen_bt_dataset(&latent, &space, &vocab, &params)?, &output_dir(a.out, "bt"))
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(match s {
        "spo" => Method::Spo,
        "s-dpo" => Method::SDpo,
        "dpo-mix" => Method::DpoMix,
        "dpo-single" => Method::DpoSingle,
        "merge-dpo" => Method::MergeDpo,
        other => bail!(UsageError(format!("unknown method `{other}`"))),
    })
}

fn parse_model(s: &str) -> Result<ModelChoice> {
    Ok(match s {
        "tabular" => ModelChoice::Tabular,
        "small" => ModelChoice::Small,
        "base" => ModelChoice::Base,
        other => bail!(UsageError(format!("unknown model `{other}`"))),
    })
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    Ok(match s {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        other => bail!(UsageError(format!("unknown optimizer `{other}`"))),
    })
}

/// Builds the full run specification from merged arguments.
pub fn train_spec(a: &TrainArgs, generated: &Generated) -> Result<RunSpec> {
    let ds = &generated.dataset;
    let method = parse_method(a.method.as_deref().unwrap_or("spo"))?;
    let model = match a.model.as_deref() {
        Some(m) => parse_model(m)?,
        None if generated.sidecar.latent.table_space().is_some() => ModelChoice::Tabular,
        None => ModelChoice::Small,
    };
    let mut train = match model {
        ModelChoice::Tabular => TrainConfig::tabular(0),
        _ => TrainConfig::neural(0),
    };
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        train.learning_rate = lr;
    }
    if let Some(o) = &a.optimizer {
        train.optimizer = parse_optimizer(o)?;
    }
    let mut sft = TrainConfig {
        epochs: 2,
        batch_size: 16,
        learning_rate: 1e-2,
        optimizer: OptimizerKind::Adam,
        seed: 0,
        precision: Default::default(),
    };
    if let Some(e) = a.sft_epochs {
        sft.epochs = e;
    }
    if let Some(lr) = a.sft_lr {
        sft.learning_rate = lr;
    }
    let dims = a.dims.clone().unwrap_or_else(|| ds.dimensions.clone());
    let mut pipeline = PipelineConfig::new(dims.clone(), method.clone(), train);
    if let Some(b) = a.beta {
        pipeline.beta = b;
    }
    pipeline.alpha = match a.alpha.as_deref() {
        None => AlphaSpec::Scalar(0.1),
        Some([single]) => AlphaSpec::Scalar(*single),
        Some(many) => AlphaSpec::PerDimension(many.to_vec()),
    };
    pipeline.round_epochs = a.round_epochs.clone().unwrap_or_default();
    if let Some(thresholds) = &a.dual_thresholds {
        pipeline.dual_alpha = Some(DualAlphaConfig {
            thresholds: thresholds.clone(),
            step: a.dual_step.unwrap_or(0.05),
            alpha_max: a.dual_alpha_max.unwrap_or(0.9),
        });
    }
    if method == Method::DpoMix {
        pipeline.priority = a.priority.clone().unwrap_or(dims);
    }
    Ok(RunSpec {
        seed: a.seed.unwrap_or(0),
        model,
        pipeline,
        sft,
        eval_samples_per_prompt: a.eval_samples.unwrap_or(4),
        snapshot_interval: a.snapshot_interval.unwrap_or(0),
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = existing_dir(a.data.clone(), "data")?;
    let generated = load_data(&data)?;
    let spec = train_spec(&a, &generated)?;
    let out = output_dir(a.out.clone(), &format!("run-{}", spec.pipeline.method.name()));
    let manifest = execute_run(&spec, &generated, &out)?;
    println!("method {} seed {} -> {}", manifest.method, manifest.seed, out.display());
    print_eval(&RunDir::open(&out)?)?;
    Ok(())
}

fn print_eval(run: &RunDir) -> Result<()> {
    let text = fs::read_to_string(run.path("eval/report.json"))?;
    let report: spo_core::pipeline::EvalReport = serde_json::from_str(&text)?;
    for (d, v) in &report.expected_rewards {
        println!("  reward {d:<12} {v:>10.4}");
    }
    for (t, p) in report.special_tokens.iter().zip(&report.token_presence) {
        println!("  presence token {t:<4} {p:>10.3}");
    }
    println!("  pareto fraction     {:>10.3}", report.pareto_fraction);
    println!("  refusal rate        {:>10.3}", report.refusal_rate);
    for (k, v) in &report.win_rates {
        println!("  win rate vs {k:<8} {v:>10.3}");
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let run_root = existing_dir(a.run, "run")?;
    let run = RunDir::open(&run_root)?;
    let mut manifest = run.read_manifest()?;
    let generated = load_data(&existing_dir(a.data, "data")?)?;
    if generated.dataset.fingerprint()? != manifest.dataset_fingerprint {
        bail!(UsageError("--data is not the dataset this run was trained on".into()));
    }
    let spec: RunSpec = serde_json::from_value(manifest.config.clone()).context("reading run configuration")?;
    let checkpoint = match a.checkpoint {
        Some(p) => p,
        None => run.path(manifest.checkpoints.last().context("run has no checkpoints")?),
    };
    let (policy, _) = load_checkpoint(&checkpoint)?;
    let mut settings = spec.eval_settings(&generated);
    if let Some(s) = a.samples {
        settings.samples_per_prompt = s;
    }
    if let Some(seed) = a.seed {
        settings.seed = seed;
    }
    let side = &generated.sidecar;
    let report = evaluate_policy(
        &policy,
        &side.eval_prompts,
        &side.latent,
        &generated.dataset.vocab.special_tokens,
        &side.refusal_pattern,
        &settings,
    )?;
    manifest.eval = Some(run.write_eval(&report)?);
    run.write_manifest(&manifest)?;
    print_eval(&run)
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let path_a = required(a.a, "a")?;
    let path_b = required(a.b, "b")?;
    let generated = load_data(&existing_dir(a.data, "data")?)?;
    let (pa, _) = load_checkpoint(&path_a)?;
    let (pb, _) = load_checkpoint(&path_b)?;
    let latent = &generated.sidecar.latent;
    let weights: BTreeMap<String, f64> = match a.weights {
        None => latent.names().into_iter().map(|d| (d, 1.0)).collect(),
        Some(items) => items
            .iter()
            .map(|item| {
                let (d, w) = item
                    .split_once('=')
                    .ok_or_else(|| UsageError(format!("weight `{item}` is not dim=value")))?;
                let w: f64 = w.parse().map_err(|_| UsageError(format!("weight `{item}` is not a number")))?;
                Ok((d.to_string(), w))
            })
            .collect::<Result<_>>()?,
    };
    let mode = match a.mode.as_deref().unwrap_or("stochastic") {
        "stochastic" => SampleMode::Stochastic,
        "greedy" => SampleMode::Greedy,
        other => bail!(UsageError(format!("unknown sampling mode `{other}`"))),
    };
    let rate = compare_policies(
        &pa,
        &pb,
        &generated.sidecar.eval_prompts,
        latent,
        &weights,
        mode,
        generated.dataset.max_response_len,
        a.seed.unwrap_or(0),
    )?;
    println!("win rate of {} over {}: {rate:.4}", path_a.display(), path_b.display());
    Ok(())
}

/// Runs the oracle suite; returns whether every check passed.
pub fn verify(a: VerifyArgs) -> Result<bool> {
    let suite: Suite = a
        .suite
        .as_deref()
        .unwrap_or("all")
        .parse()
        .map_err(|e: spo_core::SpoError| UsageError(e.to_string()))?;
    let report = run_suite(suite, a.seed.unwrap_or(0))?;
    println!("{:<4} {:<44} {:>12}    tolerance", "", "check", "value");
    for c in &report.checks {
        println!("{c}");
    }
    if !report.optimality.is_empty() {
        let path = a.csv.unwrap_or_else(|| output_dir(None, "verify").join("optimality.csv"));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        report.write_optimality_csv(fs::File::create(&path)?)?;
        println!("optimality table: {}", path.display());
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} checks passed", report.checks.len());
    Ok(report.all_passed())
}

pub fn sweep_alpha(a: SweepArgs) -> Result<()> {
    let grid = a.grid.unwrap_or_else(|| vec![0.0, 0.05, 0.1, 0.3, 0.5]);
    if grid.iter().any(|x| !(0.0..1.0).contains(x)) {
        bail!(UsageError("every α must lie in [0, 1)".into()));
    }
    let seeds = a.seeds.unwrap_or(3);
    if seeds == 0 {
        bail!(UsageError("--seeds must be at least 1".into()));
    }
    let mut exp = ConflictExperiment::standard();
    if let Some(n) = a.num {
        exp.data.num_examples = n;
    }
    if let Some(e) = a.epochs {
        exp.round2.epochs = e;
    }
    let out = output_dir(a.out, "sweep-alpha");
    fs::create_dir_all(&out)?;

    let mut rows = Vec::new();
    let mut names = Vec::new();
    let mut overfit = csv::Writer::from_path(out.join("overfit.csv"))?;
    overfit.write_record(["alpha", "seed", "epoch", "refusal_rate"])?;
    for seed in 0..seeds {
        let setup = conflict_setup(&exp, seed)?;
        let settings = exp.eval_settings(seed);
        let side = &setup.generated.sidecar;
        names = side.latent.names();
        for &alpha in &grid {
            let round = conflict_round2(&setup, &exp, alpha, exp.round2.epochs, &mut ())?;
            rows.push(SweepRow {
                alpha,
                seed,
                rewards: expected_rewards(&round.policy, &side.eval_prompts, &side.latent, &settings)?,
            });
            if let Some(epochs) = a.overfit_epochs {
                let curve = overfitting_curve(&setup, &exp, alpha, epochs)?;
                overfit.write_record([alpha.to_string(), seed.to_string(), "0".into(), curve.initial.to_string()])?;
                for (e, r) in curve.per_epoch.iter().enumerate() {
                    overfit.write_record([alpha.to_string(), seed.to_string(), (e + 1).to_string(), r.to_string()])?;
                }
            }
        }
    }
    overfit.flush()?;
    if a.overfit_epochs.is_none() {
        fs::remove_file(out.join("overfit.csv"))?;
    }

    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    let mut header = vec!["alpha".to_string(), "seed".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.alpha.to_string(), r.seed.to_string()];
        rec.extend(r.rewards.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let means = sweep_means(&rows);
    let alphas: Vec<f64> = means.iter().map(|(a, _)| *a).collect();
    println!("{:>8} {}", "alpha", names.iter().map(|n| format!("{n:>12}")).collect::<String>());
    for (alpha, m) in &means {
        println!("{alpha:>8} {}", m.iter().map(|x| format!("{x:>12.4}")).collect::<String>());
    }
    if alphas.len() > 1 {
        for (d, name) in names.iter().enumerate() {
            let ys: Vec<f64> = means.iter().map(|(_, m)| m[d]).collect();
            match spearman(&alphas, &ys) {
                rho if rho.is_nan() => println!("spearman(alpha, {name}) undefined: constant rewards"),
                rho => println!("spearman(alpha, {name}) = {rho:.3}"),
            }
        }
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let written = match (a.run, a.sweep) {
        (Some(run), None) => generate_run_report(&RunDir::open(&run)?)?,
        (None, Some(sweep)) => {
            if !sweep.is_file() {
                bail!(UsageError(format!("--sweep {} is not a file", sweep.display())));
            }
            let out = a
                .out
                .unwrap_or_else(|| sweep.parent().unwrap_or(Path::new(".")).join("report"));
            generate_sweep_report(&sweep, &out)?
        }
        _ => bail!(UsageError("give exactly one of --run or --sweep".into())),
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
