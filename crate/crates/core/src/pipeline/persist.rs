use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::{EvalReport, RewardPoint};
use super::SequentialRun;
use crate::cache::LogProbCache;
use crate::error::{Result, SpoError};
use crate::models::{save_checkpoint, Policy, StepMetrics};
use crate::objectives::KappaSchedule;

/// SHA-256 of the compact JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

/// Everything needed to find and re-read a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub dimensions: Vec<String>,
    pub schedules: Vec<KappaSchedule>,
    /// Paths relative to the run directory.
    pub checkpoints: Vec<String>,
    pub caches: Vec<String>,
    pub metrics: Vec<String>,
    #[serde(default)]
    pub reward_curves: Option<String>,
    #[serde(default)]
    pub eval: Option<String>,
}

/// The on-disk layout of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "cache", "metrics", "eval"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("manifest.json").is_file() {
            return Err(SpoError::Format(format!("{} has no manifest.json", root.display())));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoint_rel(round: usize) -> String {
        format!("checkpoints/round_{round}.bin")
    }

    pub fn cache_rel(round: usize) -> String {
        format!("cache/round_{round}.jsonl")
    }

    pub fn metrics_rel(round: usize) -> String {
        format!("metrics/round_{round}.csv")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_checkpoint(&self, round: usize, policy: &Policy) -> Result<String> {
        let rel = Self::checkpoint_rel(round);
        save_checkpoint(policy, round, &self.path(&rel))?;
        Ok(rel)
    }

    pub fn write_cache_round(&self, round: usize, cache: &LogProbCache) -> Result<String> {
        let rel = Self::cache_rel(round);
        cache.write_round(round, &self.path(&rel))?;
        Ok(rel)
    }

    pub fn write_metrics(&self, round: usize, metrics: &[StepMetrics]) -> Result<String> {
        let rel = Self::metrics_rel(round);
        write_metrics_csv(&self.path(&rel), metrics)?;
        Ok(rel)
    }

    pub fn write_eval(&self, report: &EvalReport) -> Result<String> {
        let rel = "eval/report.json".to_string();
        let mut s = serde_json::to_string_pretty(report)?;
        s.push('\n');
        fs::write(self.path(&rel), s)?;
        Ok(rel)
    }

    pub fn write_reward_curves(&self, dimensions: &[String], points: &[RewardPoint]) -> Result<String> {
        let rel = "metrics/rewards.csv".to_string();
        let mut w = csv::Writer::from_path(self.path(&rel))?;
        let mut header = vec!["round".to_string(), "step".to_string()];
        header.extend(dimensions.iter().cloned());
        w.write_record(&header)?;
        for p in points {
            let mut row = vec![p.round.to_string(), p.step.to_string()];
            row.extend(p.rewards.iter().map(|r| r.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(rel)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let mut s = serde_json::to_string_pretty(manifest)?;
        s.push('\n');
        fs::write(self.root.join("manifest.json"), s)?;
        Ok(())
    }

    pub fn read_manifest(&self) -> Result<Manifest> {
        Ok(serde_json::from_str(&fs::read_to_string(self.root.join("manifest.json"))?)?)
    }

    /// Writes `π_0..π_N`, cache rounds `0..N−1` and per-round metrics of a
    /// sequential run; returns the relative paths in manifest order.
    pub fn write_sequential(&self, run: &SequentialRun) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
        let checkpoints = run
            .policies
            .iter()
            .enumerate()
            .map(|(k, p)| self.write_checkpoint(k, p))
            .collect::<Result<Vec<_>>>()?;
        let caches = (0..run.cache.rounds().len())
            .map(|k| self.write_cache_round(k, &run.cache))
            .collect::<Result<Vec<_>>>()?;
        let metrics = run
            .rounds
            .iter()
            .map(|r| self.write_metrics(r.round, &r.metrics))
            .collect::<Result<Vec<_>>>()?;
        Ok((checkpoints, caches, metrics))
    }
}

/// CSV with columns `step,round,epoch,loss,grad_norm,mean_pair_logit`.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(m)?;
    }
    if metrics.is_empty() {
        w.write_record(["step", "round", "epoch", "loss", "grad_norm", "mean_pair_logit"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(SpoError::from)).collect()
}
