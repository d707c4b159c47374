//! Binary checkpoints: an 8-byte magic, a little-endian `u32` header
//! length, a JSON header, then the parameters as little-endian `f64`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Architecture, NeuralPolicy, Policy, PolicyKind, TabularPolicy};
use crate::data::Vocab;
use crate::error::{Result, SpoError};
use crate::tabular::CategoricalPolicy;

const MAGIC: &[u8; 8] = b"SPOCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: PolicyKind,
    pub architecture: Architecture,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub round: usize,
    pub num_params: usize,
}

pub fn save_checkpoint(policy: &Policy, round: usize, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: policy.kind(),
        architecture: policy.architecture(),
        vocab: policy.vocab().clone(),
        vocab_hash: policy.vocab().fingerprint(),
        round,
        num_params: policy.num_params(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * header.num_params);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in policy.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Policy, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| SpoError::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..body_start])?;
    let body = &bytes[body_start..];
    if body.len() != 8 * header.num_params {
        return Err(bad("parameter count does not match header"));
    }
    if header.vocab.fingerprint() != header.vocab_hash {
        return Err(bad("vocabulary hash mismatch"));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let policy: Policy = match &header.architecture {
        Architecture::Tabular { space } => {
            let table = CategoricalPolicy::from_logits(space.num_prompts(), space.num_responses(), params)?;
            TabularPolicy::new(header.vocab.clone(), Arc::new(space.clone()), table)?.into()
        }
        Architecture::Neural { config } => {
            NeuralPolicy::from_params(header.vocab.clone(), config.clone(), params)?.into()
        }
    };
    if policy.kind() != header.kind {
        return Err(bad("kind does not match architecture"));
    }
    Ok((policy, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NeuralPolicyConfig;
    use crate::tabular::EnumeratedSpace;

    #[test]
    fn round_trips_are_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocab::new(7, vec![4], 6).unwrap();
        let neural: Policy = NeuralPolicy::new(vocab.clone(), NeuralPolicyConfig::small(10), 5).unwrap().into();
        let space = Arc::new(EnumeratedSpace::new(vec![vec![0]], vec![vec![1, 6], vec![2, 6]]).unwrap());
        let table = CategoricalPolicy::from_logits(1, 2, vec![0.1 + 0.2, -1.0 / 3.0]).unwrap();
        let tab: Policy = TabularPolicy::new(vocab, space, table).unwrap().into();
        for (i, p) in [neural, tab].iter().enumerate() {
            let path = dir.path().join(format!("p{i}.bin"));
            save_checkpoint(p, 3, &path).unwrap();
            let (back, header) = load_checkpoint(&path).unwrap();
            assert_eq!(&back, p);
            assert_eq!(header.round, 3);
            let path2 = dir.path().join(format!("q{i}.bin"));
            save_checkpoint(&back, 3, &path2).unwrap();
            assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"nonsense").unwrap();
        assert!(load_checkpoint(&path).is_err());
        let vocab = Vocab::new(7, vec![], 6).unwrap();
        let p: Policy = NeuralPolicy::new(vocab, NeuralPolicyConfig::small(6), 1).unwrap().into();
        save_checkpoint(&p, 0, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(SpoError::Format(_))));
    }
}
