use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spo"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPO_OUTPUT_DIR")
        .output()
        .expect("spawn spo")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&spo(dir.path(), &["--help"])), 0);
    assert_eq!(code(&spo(dir.path(), &["train", "--help"])), 0);
    assert_eq!(code(&spo(dir.path(), &["--version"])), 0);
}

#[test]
fn malformed_invocations_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&spo(d, &[])), 1);
    assert_eq!(code(&spo(d, &["frobnicate"])), 1);
    assert_eq!(code(&spo(d, &["gen-data", "bt", "--pairs", "many"])), 1);
    assert_eq!(code(&spo(d, &["train", "--data", "missing"])), 1);
    assert_eq!(code(&spo(d, &["verify", "--suite", "nonsense"])), 1);
    assert_eq!(code(&spo(d, &["gen-data", "conflicting", "--refusal-fraction", "1.5", "--out", "x"])), 1);
    fs::write(d.join("bad.toml"), "[train]\nunknown-key = 3\n").unwrap();
    assert_eq!(code(&spo(d, &["--config", "bad.toml", "verify", "--suite", "kappa"])), 1);
    assert_eq!(code(&spo(d, &["--config", "absent.toml", "verify", "--suite", "kappa"])), 1);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = spo(d, &["gen-data", "special-token", "--num", "30", "--seed", "4", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(fs::read(d.join("a").join(&name)).unwrap(), fs::read(d.join("b").join(&name)).unwrap());
    }
}

#[test]
fn config_file_fills_unset_flags_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("spo.toml"),
        "[gen-data.bt]\nprompts = 2\nresponses = 3\npairs = 7\nout = \"from-file\"\n",
    )
    .unwrap();
    let o = spo(d, &["--config", "spo.toml", "gen-data", "bt", "--pairs", "11"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("wrote 11 examples"), "{text}");
    assert!(d.join("from-file").is_dir());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_spo"))
        .args(["gen-data", "bt", "--pairs", "5"])
        .current_dir(dir.path())
        .env("SPO_OUTPUT_DIR", "elsewhere")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("elsewhere/bt").is_dir());
}

#[test]
fn verify_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = spo(dir.path(), &["verify", "--suite", "kappa"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 3, "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_optimality_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = spo(dir.path(), &["verify", "--suite", "optimality", "--csv", "opt.csv"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = fs::read_to_string(dir.path().join("opt.csv")).unwrap();
    assert!(csv.starts_with("instance,j_star,best,slack"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn train_eval_compare_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = spo(d, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(&["gen-data", "bt", "--prompts", "3", "--responses", "4", "--pairs", "30", "--draws", "2", "--out", "data"]);
    ok(&["train", "--data", "data", "--epochs", "5", "--snapshot-interval", "3", "--out", "run"]);
    for rel in ["manifest.json", "checkpoints/round_2.bin", "cache/round_1.jsonl", "metrics/round_2.csv", "eval/report.json"] {
        assert!(d.join("run").join(rel).is_file(), "{rel}");
    }
    let eval = ok(&["eval", "--run", "run", "--data", "data"]);
    assert!(eval.contains("reward d1"));
    let cmp = ok(&["compare", "--a", "run/checkpoints/round_2.bin", "--b", "run/checkpoints/round_0.bin", "--data", "data"]);
    assert!(cmp.contains("win rate"));
    ok(&["report", "--run", "run"]);
    assert!(d.join("run/report/loss.svg").is_file());
    assert!(d.join("run/report/rewards.svg").is_file());

    ok(&["gen-data", "bt", "--prompts", "3", "--responses", "4", "--pairs", "30", "--seed", "1", "--out", "other"]);
    assert_eq!(code(&spo(d, &["eval", "--run", "run", "--data", "other"])), 1);
}

#[test]
fn repeated_training_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&spo(d, &["gen-data", "bt", "--pairs", "20", "--out", "data"])), 0);
    for out in ["r1", "r2"] {
        assert_eq!(code(&spo(d, &["train", "--data", "data", "--epochs", "3", "--seed", "5", "--out", out])), 0);
    }
    for rel in ["manifest.json", "checkpoints/round_2.bin", "metrics/round_1.csv", "eval/report.json"] {
        assert_eq!(fs::read(d.join("r1").join(rel)).unwrap(), fs::read(d.join("r2").join(rel)).unwrap(), "{rel}");
    }
}
