//! Frozen log-probabilities of earlier policies.
//!
//! After round `r` the trained policy `π_r` is evaluated once on both
//! responses of every example and the numbers are stored here. Round `n`
//! then reads `π_0..π_{n−1}` from the cache and only ever runs the policy it
//! is training.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Label, PreferenceDataset};
use crate::error::{Result, SpoError};
use crate::models::Policy;

/// `(log π_r(response_a), log π_r(response_b))` for every example.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheRound {
    pub round: usize,
    pub entries: Vec<(f64, f64)>,
}

/// Evaluates `policy` on every example of `dataset` and labels the result
/// as round `round`. Examples are evaluated in parallel; each value is a
/// pure function of the policy and the example.
pub fn build_logprob_cache(policy: &Policy, dataset: &PreferenceDataset, round: usize) -> Result<CacheRound> {
    if policy.vocab() != &dataset.vocab {
        return Err(SpoError::VocabMismatch(format!(
            "policy vocabulary {} vs dataset vocabulary {}",
            policy.vocab().fingerprint(),
            dataset.vocab.fingerprint()
        )));
    }
    let entries = dataset
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let a = policy.logprob(&ex.prompt, &ex.response_a)?;
            let b = policy.logprob(&ex.prompt, &ex.response_b)?;
            if !a.is_finite() || !b.is_finite() {
                return Err(SpoError::NonFinite(format!("round {round} log-probability of example {i}")));
            }
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CacheRound { round, entries })
}

/// Read access to the log-probabilities of earlier policies.
pub trait HistoryLogProbs: Sync {
    fn num_rounds(&self) -> usize;

    /// `(log π_round(response_a), log π_round(response_b))`.
    fn logprobs(&self, round: usize, example: usize, dataset: &PreferenceDataset) -> Result<(f64, f64)>;

    /// Same values reordered to `(preferred, dispreferred)` on `dimension`.
    fn oriented(&self, round: usize, example: usize, dimension: &str, dataset: &PreferenceDataset) -> Result<(f64, f64)> {
        let (a, b) = self.logprobs(round, example, dataset)?;
        match dataset.examples[example].labels.get(dimension) {
            Some(Label::AFirst) => Ok((a, b)),
            Some(Label::BFirst) => Ok((b, a)),
            None => Err(SpoError::UnknownDimension(dimension.to_string())),
        }
    }
}

/// Rounds `0..k` of cached log-probabilities for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbCache {
    fingerprint: String,
    num_examples: usize,
    rounds: Vec<CacheRound>,
}

impl LogProbCache {
    pub fn new(dataset: &PreferenceDataset) -> Result<Self> {
        Ok(Self {
            fingerprint: dataset.fingerprint()?,
            num_examples: dataset.examples.len(),
            rounds: Vec::new(),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn rounds(&self) -> &[CacheRound] {
        &self.rounds
    }

    /// Appends the next round; rounds must arrive in order and be complete.
    pub fn push(&mut self, round: CacheRound) -> Result<()> {
        if round.round != self.rounds.len() {
            return Err(SpoError::InvalidArgument(format!(
                "cache holds {} rounds, cannot append round {}",
                self.rounds.len(),
                round.round
            )));
        }
        if round.entries.len() != self.num_examples {
            return Err(SpoError::DimensionMismatch(format!(
                "cache round with {} entries for {} examples",
                round.entries.len(),
                self.num_examples
            )));
        }
        if round.entries.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(SpoError::NonFinite(format!("cache round {}", round.round)));
        }
        self.rounds.push(round);
        Ok(())
    }

    /// Evaluates `policy` on the dataset and appends it as the next round.
    pub fn extend(&mut self, policy: &Policy, dataset: &PreferenceDataset) -> Result<()> {
        self.check_dataset(dataset)?;
        let round = build_logprob_cache(policy, dataset, self.rounds.len())?;
        self.push(round)
    }

    pub fn check_dataset(&self, dataset: &PreferenceDataset) -> Result<()> {
        let found = dataset.fingerprint()?;
        if found != self.fingerprint {
            return Err(SpoError::FingerprintMismatch {
                expected: found,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Writes round `round` as JSON Lines: a header line with the dataset
    /// fingerprint, then one `{round, example, logp_a, logp_b}` per example.
    pub fn write_round(&self, round: usize, path: &Path) -> Result<()> {
        let r = self.rounds.get(round).ok_or(SpoError::MissingCacheRound { round })?;
        let mut out = Vec::new();
        let header = CacheFileHeader {
            fingerprint: self.fingerprint.clone(),
            round,
            num_examples: self.num_examples,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (example, &(logp_a, logp_b)) in r.entries.iter().enumerate() {
            serde_json::to_writer(
                &mut out,
                &CacheLine {
                    round,
                    example,
                    logp_a,
                    logp_b,
                },
            )?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    /// Reads the rounds `0..paths.len()` written by [`write_round`](Self::write_round),
    /// rejecting files built from a different dataset.
    pub fn read_rounds(dataset: &PreferenceDataset, paths: &[impl AsRef<Path>]) -> Result<Self> {
        let mut cache = Self::new(dataset)?;
        for (expected_round, path) in paths.iter().enumerate() {
            let mut lines = BufReader::new(fs::File::open(path.as_ref())?).lines();
            let first = lines
                .next()
                .ok_or_else(|| SpoError::Format(format!("{} is empty", path.as_ref().display())))??;
            let header: CacheFileHeader = serde_json::from_str(&first)?;
            if header.fingerprint != cache.fingerprint {
                return Err(SpoError::FingerprintMismatch {
                    expected: cache.fingerprint.clone(),
                    found: header.fingerprint,
                });
            }
            if header.round != expected_round {
                return Err(SpoError::MissingCacheRound { round: expected_round });
            }
            let mut entries = Vec::with_capacity(header.num_examples);
            for line in lines {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: CacheLine = serde_json::from_str(&line)?;
                if l.round != expected_round || l.example != entries.len() {
                    return Err(SpoError::Format(format!(
                        "cache line for round {} example {} out of order",
                        l.round, l.example
                    )));
                }
                entries.push((l.logp_a, l.logp_b));
            }
            cache.push(CacheRound {
                round: expected_round,
                entries,
            })?;
        }
        Ok(cache)
    }
}

impl HistoryLogProbs for LogProbCache {
    fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    fn logprobs(&self, round: usize, example: usize, _dataset: &PreferenceDataset) -> Result<(f64, f64)> {
        let r = self.rounds.get(round).ok_or(SpoError::MissingCacheRound { round })?;
        r.entries
            .get(example)
            .copied()
            .ok_or_else(|| SpoError::InvalidArgument(format!("example {example} not in cache")))
    }
}

/// History served by re-running stored policies instead of a cache.
pub struct RecomputedHistory<'a> {
    pub policies: Vec<&'a Policy>,
}

impl HistoryLogProbs for RecomputedHistory<'_> {
    fn num_rounds(&self) -> usize {
        self.policies.len()
    }

    fn logprobs(&self, round: usize, example: usize, dataset: &PreferenceDataset) -> Result<(f64, f64)> {
        let policy = self.policies.get(round).ok_or(SpoError::MissingCacheRound { round })?;
        let ex = &dataset.examples[example];
        Ok((policy.logprob(&ex.prompt, &ex.response_a)?, policy.logprob(&ex.prompt, &ex.response_b)?))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFileHeader {
    fingerprint: String,
    round: usize,
    num_examples: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    round: usize,
    example: usize,
    logp_a: f64,
    logp_b: f64,
}
