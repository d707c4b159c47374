use std::sync::Arc;

use crate::data::{TokenId, Vocab};
use crate::error::{Result, SpoError};
use crate::tabular::{CategoricalPolicy, EnumeratedSpace};

/// Trainable categorical policy over an enumerated space; the parameters
/// are the logit table.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    space: Arc<EnumeratedSpace>,
    table: CategoricalPolicy,
}

impl TabularPolicy {
    pub fn new(vocab: Vocab, space: Arc<EnumeratedSpace>, table: CategoricalPolicy) -> Result<Self> {
        if table.num_prompts() != space.num_prompts()
            || table.num_responses() != space.num_responses()
        {
            return Err(SpoError::DimensionMismatch(format!(
                "table {}x{} for space {}x{}",
                table.num_prompts(),
                table.num_responses(),
                space.num_prompts(),
                space.num_responses()
            )));
        }
        let out_of_vocab = space
            .prompts()
            .iter()
            .chain(space.responses())
            .flatten()
            .any(|&t| !vocab.contains(t));
        if out_of_vocab {
            return Err(SpoError::VocabMismatch("enumerated space uses ids outside the vocabulary".into()));
        }
        Ok(Self { vocab, space, table })
    }

    pub fn uniform(vocab: Vocab, space: Arc<EnumeratedSpace>) -> Result<Self> {
        let table = CategoricalPolicy::uniform(space.num_prompts(), space.num_responses());
        Self::new(vocab, space, table)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn space(&self) -> &Arc<EnumeratedSpace> {
        &self.space
    }

    pub fn table(&self) -> &CategoricalPolicy {
        &self.table
    }

    pub(crate) fn params(&self) -> &[f64] {
        self.table.logits()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        self.table.logits_mut()
    }

    pub fn logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        let (p, r) = self.space.locate(prompt, response)?;
        Ok(self.table.log_prob(p, r))
    }

    /// Adds `∇ log π(response|prompt)` into `grad`:
    /// `∂/∂logit[p][j] = 1[j = r] − π(j|p)` on the prompt's row, zero elsewhere.
    pub fn logprob_grad(&self, prompt: &[TokenId], response: &[TokenId], grad: &mut [f64]) -> Result<f64> {
        let (p, r) = self.space.locate(prompt, response)?;
        let n = self.table.num_responses();
        let probs = self.table.probs(p);
        let row = &mut grad[p * n..(p + 1) * n];
        for (g, q) in row.iter_mut().zip(&probs) {
            *g -= q;
        }
        row[r] += 1.0;
        Ok(self.table.log_prob(p, r))
    }

    pub fn response_probs(&self, prompt: &[TokenId]) -> Result<Vec<f64>> {
        let p = self
            .space
            .prompt_id(prompt)
            .ok_or_else(|| SpoError::SupportMismatch(format!("prompt {prompt:?} not enumerated")))?;
        Ok(self.table.probs(p))
    }
}
