//! Synthetic multi-dimensional preference data with known latent rewards.
//!
//! Three generators:
//!
//! * **special-token**: every dimension is marked by one reserved token that
//!   is appended to the preferred response; the other markers are sprinkled
//!   at random as noise.
//! * **conflicting**: `helpful` and `harmless` dimensions over responses made
//!   of helpful, harmful and neutral tokens, plus a fixed refusal pattern that
//!   is always harmless-preferred and helpful-dispreferred.
//! * **bt**: pairs drawn from an enumerated space with labels sampled from
//!   the Bradley-Terry probability of latent reward tables.
//!
//! Each generator also returns a [`Sidecar`]: the latent scorer, generator
//! parameters, supervised pairs for the starting policy and held-out
//! evaluation prompts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetFiles, Label, PreferenceDataset, PreferenceExample, Provenance, TokenId, Vocab};
use crate::error::{Result, SpoError};
use crate::seed::stream_rng;
use crate::tabular::{bt_preference_prob, EnumeratedSpace, RewardTable};

/// Ground-truth scorer of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimensionScorer {
    /// Reward table over an enumerated space.
    Table { space: EnumeratedSpace, rewards: RewardTable },
    /// `magnitude` if the response contains `token`, else 0.
    TokenPresence { token: TokenId, magnitude: f64 },
    /// `refusal_score` for responses starting with `refusal`; otherwise
    /// `(#positive − #negative) / body length`, eos excluded.
    TokenCounts {
        positive: Vec<TokenId>,
        negative: Vec<TokenId>,
        refusal: Vec<TokenId>,
        refusal_score: f64,
        eos: TokenId,
    },
}

impl DimensionScorer {
    pub fn score(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        match self {
            DimensionScorer::Table { space, rewards } => {
                let (p, r) = space.locate(prompt, response)?;
                Ok(rewards.get(p, r))
            }
            DimensionScorer::TokenPresence { token, magnitude } => {
                Ok(if response.contains(token) { *magnitude } else { 0.0 })
            }
            DimensionScorer::TokenCounts {
                positive,
                negative,
                refusal,
                refusal_score,
                eos,
            } => {
                if is_refusal(response, refusal) {
                    return Ok(*refusal_score);
                }
                let body: Vec<TokenId> = response.iter().copied().filter(|t| t != eos).collect();
                let pos = body.iter().filter(|t| positive.contains(t)).count() as f64;
                let neg = body.iter().filter(|t| negative.contains(t)).count() as f64;
                Ok((pos - neg) / body.len().max(1) as f64)
            }
        }
    }
}

/// Whether `response` starts with the (non-empty) refusal pattern.
pub fn is_refusal(response: &[TokenId], pattern: &[TokenId]) -> bool {
    !pattern.is_empty() && response.starts_with(pattern)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedScorer {
    pub dimension: String,
    pub scorer: DimensionScorer,
}

/// Known latent reward of every dataset dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRewardSpec {
    pub dimensions: Vec<NamedScorer>,
}

impl LatentRewardSpec {
    pub fn names(&self) -> Vec<String> {
        self.dimensions.iter().map(|d| d.dimension.clone()).collect()
    }

    pub fn scorer(&self, dimension: &str) -> Result<&DimensionScorer> {
        self.dimensions
            .iter()
            .find(|d| d.dimension == dimension)
            .map(|d| &d.scorer)
            .ok_or_else(|| SpoError::UnknownDimension(dimension.to_string()))
    }

    pub fn score(&self, dimension: &str, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        self.scorer(dimension)?.score(prompt, response)
    }

    /// Scores on every dimension, in declaration order.
    /// The enumerated space shared by table scorers, if every dimension is one.
    pub fn table_space(&self) -> Option<&EnumeratedSpace> {
        let mut spaces = self.dimensions.iter().map(|d| match &d.scorer {
            DimensionScorer::Table { space, .. } => Some(space),
            _ => None,
        });
        let first = spaces.next()??;
        spaces.all(|s| s == Some(first)).then_some(first)
    }

    pub fn score_all(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        self.dimensions.iter().map(|d| d.scorer.score(prompt, response)).collect()
    }
}

/// Everything a generator knows beyond the dataset itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub generator: String,
    pub parameters: serde_json::Value,
    pub latent: LatentRewardSpec,
    #[serde(default)]
    pub refusal_pattern: Vec<TokenId>,
    /// `(prompt, response)` pairs for supervised training of the starting policy.
    pub sft_pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    /// Prompts disjoint from the training draws, for evaluation.
    pub eval_prompts: Vec<Vec<TokenId>>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Sidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: PreferenceDataset,
    pub sidecar: Sidecar,
}

impl Generated {
    pub fn sidecar_path(dir: &Path) -> PathBuf {
        dir.join("sidecar.json")
    }

    /// Writes the dataset files and `sidecar.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.dataset.save(&DatasetFiles::in_dir(dir))?;
        self.sidecar.save(&Self::sidecar_path(dir))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            dataset: PreferenceDataset::load(&DatasetFiles::in_dir(dir))?,
            sidecar: Sidecar::load(&Self::sidecar_path(dir))?,
        })
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, pool: &[TokenId], len: usize) -> Vec<TokenId> {
    (0..len).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
}

fn labels_from(pairs: impl IntoIterator<Item = (String, Label)>) -> BTreeMap<String, Label> {
    pairs.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecialTokenParams {
    pub num_examples: usize,
    pub num_dims: usize,
    pub noise: f64,
    pub base_length: usize,
    pub prompt_length: usize,
    pub num_regular: u32,
    pub num_reserved: u32,
    pub num_eval_prompts: usize,
    pub seed: u64,
}

impl Default for SpecialTokenParams {
    fn default() -> Self {
        Self {
            num_examples: 2000,
            num_dims: 4,
            noise: 0.1,
            base_length: 6,
            prompt_length: 4,
            num_regular: 16,
            num_reserved: 4,
            num_eval_prompts: 100,
            seed: 0,
        }
    }
}

impl SpecialTokenParams {
    /// Regular tokens `0..num_regular`, then the reserved markers, then eos.
    pub fn vocab(&self) -> Result<Vocab> {
        let specials = (self.num_regular..self.num_regular + self.num_reserved).collect();
        Vocab::new(self.num_regular + self.num_reserved + 1, specials, self.num_regular + self.num_reserved)
    }

    pub fn dimension_names(&self) -> Vec<String> {
        (1..=self.num_dims).map(|d| format!("token{d}")).collect()
    }

    pub fn max_response_len(&self) -> usize {
        self.base_length + self.num_dims + 1
    }
}

/// Special-token scheme. Every base draw (prompt, body) produces one
/// example per dimension `d`, restricted to rounds on `d`: the preferred
/// response is `body ++ markers ++ [eos]` with marker `d` always present,
/// the dispreferred one lacks it, and each other marker is added to each
/// response independently with probability `noise`. Markers are appended
/// in id order. On the non-focus dimensions `e` the label follows marker
/// `e` when exactly one response has it and the focus label otherwise.
pub fn gen_special_token_dataset(params: &SpecialTokenParams) -> Result<Generated> {
    if params.num_dims == 0 || params.num_dims as u32 > params.num_reserved {
        return Err(SpoError::InvalidArgument(format!(
            "{} dimensions need as many reserved tokens, have {}",
            params.num_dims, params.num_reserved
        )));
    }
    if !(0.0..1.0).contains(&params.noise) {
        return Err(SpoError::InvalidArgument(format!("noise {} outside [0, 1)", params.noise)));
    }
    if params.num_regular < 2 || params.base_length == 0 || params.prompt_length == 0 {
        return Err(SpoError::InvalidArgument("vocabulary too small for the requested lengths".into()));
    }
    let vocab = params.vocab()?;
    let regular = vocab.regular_tokens();
    let eos = vocab.eos;
    let names = params.dimension_names();
    let markers: Vec<TokenId> = vocab.special_tokens[..params.num_dims].to_vec();

    let per_base: Vec<(Vec<PreferenceExample>, (Vec<TokenId>, Vec<TokenId>))> = (0..params.num_examples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(params.seed, "special-token", i as u64);
            let prompt = random_tokens(&mut rng, &regular, params.prompt_length);
            let body = random_tokens(&mut rng, &regular, params.base_length);
            let mut examples = Vec::with_capacity(params.num_dims);
            for (d, name) in names.iter().enumerate() {
                let mut win_has = vec![false; params.num_dims];
                let mut lose_has = vec![false; params.num_dims];
                win_has[d] = true;
                for e in (0..params.num_dims).filter(|&e| e != d) {
                    win_has[e] = rng.random_bool(params.noise);
                    lose_has[e] = rng.random_bool(params.noise);
                }
                let build = |has: &[bool]| {
                    let mut r = body.clone();
                    r.extend(markers.iter().zip(has).filter(|(_, &h)| h).map(|(&t, _)| t));
                    r.push(eos);
                    r
                };
                let (winner, loser) = (build(&win_has), build(&lose_has));
                let winner_first = rng.random_bool(0.5);
                let labels = labels_from(names.iter().enumerate().map(|(e, n)| {
                    let winner_preferred = win_has[e] || !lose_has[e];
                    (n.clone(), Label::from_a_preferred(winner_preferred == winner_first))
                }));
                let (a, b) = if winner_first { (winner, loser) } else { (loser, winner) };
                examples.push(PreferenceExample {
                    prompt: prompt.clone(),
                    response_a: a,
                    response_b: b,
                    labels,
                    focus: Some(name.clone()),
                });
            }
            let mut sft_response = body;
            sft_response.push(eos);
            (examples, (prompt, sft_response))
        })
        .collect();

    let mut examples = Vec::with_capacity(params.num_examples * params.num_dims);
    let mut sft_pairs = Vec::with_capacity(params.num_examples);
    for (ex, sft) in per_base {
        examples.extend(ex);
        sft_pairs.push(sft);
    }
    let mut eval_rng = stream_rng(params.seed, "special-token-eval", 0);
    let eval_prompts = (0..params.num_eval_prompts)
        .map(|_| random_tokens(&mut eval_rng, &regular, params.prompt_length))
        .collect();
    let latent = LatentRewardSpec {
        dimensions: names
            .iter()
            .zip(&markers)
            .map(|(n, &t)| NamedScorer {
                dimension: n.clone(),
                scorer: DimensionScorer::TokenPresence { token: t, magnitude: 1.0 },
            })
            .collect(),
    };
    let dataset = PreferenceDataset {
        dimensions: names,
        vocab,
        examples,
        provenance: Provenance {
            generator: "special-token".into(),
            seed: params.seed,
        },
        max_response_len: params.max_response_len(),
    };
    Ok(Generated {
        dataset,
        sidecar: Sidecar {
            generator: "special-token".into(),
            parameters: serde_json::to_value(params)?,
            latent,
            refusal_pattern: Vec::new(),
            sft_pairs,
            eval_prompts,
            notes: vec![
                "noise markers are drawn independently for each response and never duplicate the focus marker".into(),
                "markers are appended after the body in id order, followed by eos".into(),
            ],
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictingParams {
    pub num_examples: usize,
    pub refusal_fraction: f64,
    /// Fraction of refusals among the supervised pairs for the starting policy.
    pub sft_refusal_rate: f64,
    pub num_sft: usize,
    pub response_length: usize,
    pub prompt_length: usize,
    pub num_eval_prompts: usize,
    pub seed: u64,
}

impl Default for ConflictingParams {
    fn default() -> Self {
        Self {
            num_examples: 1000,
            refusal_fraction: 0.3,
            sft_refusal_rate: 0.1,
            num_sft: 1000,
            response_length: 6,
            prompt_length: 4,
            num_eval_prompts: 100,
            seed: 0,
        }
    }
}

/// Token layout of the conflicting scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct ConflictingVocab {
    pub neutral: Vec<TokenId>,
    pub helpful: Vec<TokenId>,
    pub harmful: Vec<TokenId>,
    pub refusal: Vec<TokenId>,
    pub vocab: Vocab,
}

impl ConflictingVocab {
    pub fn standard() -> Self {
        let neutral = (0..8).collect();
        let helpful = (8..14).collect();
        let harmful = (14..20).collect();
        let refusal = vec![20, 21];
        let vocab = Vocab::new(23, vec![20, 21], 22).expect("static vocabulary");
        Self {
            neutral,
            helpful,
            harmful,
            refusal,
            vocab,
        }
    }

    fn answer_pool(&self) -> Vec<TokenId> {
        let mut pool = self.neutral.clone();
        pool.extend(&self.helpful);
        pool.extend(&self.harmful);
        pool
    }

    pub fn refusal_response(&self) -> Vec<TokenId> {
        let mut r = self.refusal.clone();
        r.push(self.vocab.eos);
        r
    }

    pub fn latent(&self) -> LatentRewardSpec {
        let counts = |positive: &[TokenId], negative: &[TokenId], refusal_score| DimensionScorer::TokenCounts {
            positive: positive.to_vec(),
            negative: negative.to_vec(),
            refusal: self.refusal.clone(),
            refusal_score,
            eos: self.vocab.eos,
        };
        LatentRewardSpec {
            dimensions: vec![
                NamedScorer {
                    dimension: "helpful".into(),
                    scorer: counts(&self.helpful, &[], 0.0),
                },
                NamedScorer {
                    dimension: "harmless".into(),
                    scorer: counts(&[], &self.harmful, 1.0),
                },
            ],
        }
    }
}

/// Conflicting two-dimension scheme. A `refusal_fraction` of the pairs
/// oppose an answer with at least one helpful token to the refusal
/// pattern; refusals score 0 on helpful and 1 on harmless, above any
/// answer, so those pairs carry opposite labels. Every other pair is drawn
/// until one answer has strictly more helpful and strictly fewer harmful
/// tokens than the other, so both dimensions agree with the latent argmax.
pub fn gen_conflicting_dataset(params: &ConflictingParams) -> Result<Generated> {
    if !(params.refusal_fraction > 0.0 && params.refusal_fraction < 1.0) {
        return Err(SpoError::InvalidArgument(format!(
            "refusal fraction {} outside (0, 1)",
            params.refusal_fraction
        )));
    }
    if !(0.0..1.0).contains(&params.sft_refusal_rate) {
        return Err(SpoError::InvalidArgument("sft refusal rate outside [0, 1)".into()));
    }
    if params.response_length < 2 || params.prompt_length == 0 {
        return Err(SpoError::InvalidArgument("responses need at least two tokens".into()));
    }
    let cv = ConflictingVocab::standard();
    let latent = cv.latent();
    let pool = cv.answer_pool();
    let eos = cv.vocab.eos;
    let count = |r: &[TokenId], set: &[TokenId]| r.iter().filter(|t| set.contains(t)).count();
    let answer = |rng: &mut ChaCha8Rng| {
        let mut r = random_tokens(rng, &pool, params.response_length);
        r.push(eos);
        r
    };

    let examples: Vec<PreferenceExample> = (0..params.num_examples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(params.seed, "conflicting", i as u64);
            let prompt = random_tokens(&mut rng, &cv.neutral, params.prompt_length);
            let refusal_pair = rng.random_bool(params.refusal_fraction);
            let (first, second, helpful_first) = if refusal_pair {
                let ans = loop {
                    let a = answer(&mut rng);
                    if count(&a, &cv.helpful) > 0 {
                        break a;
                    }
                };
                (ans, cv.refusal_response(), true)
            } else {
                loop {
                    let a = answer(&mut rng);
                    let b = answer(&mut rng);
                    let (ha, hb) = (count(&a, &cv.helpful), count(&b, &cv.helpful));
                    let (ka, kb) = (count(&a, &cv.harmful), count(&b, &cv.harmful));
                    if ha > hb && ka < kb {
                        break (a, b, true);
                    }
                    if hb > ha && kb < ka {
                        break (a, b, false);
                    }
                }
            };
            let swap = rng.random_bool(0.5);
            let (a, b) = if swap { (second, first) } else { (first, second) };
            let helpful_a = helpful_first != swap;
            let harmless_a = if refusal_pair { !helpful_a } else { helpful_a };
            PreferenceExample {
                prompt,
                response_a: a,
                response_b: b,
                labels: labels_from([
                    ("helpful".to_string(), Label::from_a_preferred(helpful_a)),
                    ("harmless".to_string(), Label::from_a_preferred(harmless_a)),
                ]),
                focus: None,
            }
        })
        .collect();

    let mut sft_rng = stream_rng(params.seed, "conflicting-sft", 0);
    let sft_pairs = (0..params.num_sft)
        .map(|_| {
            let prompt = random_tokens(&mut sft_rng, &cv.neutral, params.prompt_length);
            let response = if sft_rng.random_bool(params.sft_refusal_rate) {
                cv.refusal_response()
            } else {
                answer(&mut sft_rng)
            };
            (prompt, response)
        })
        .collect();
    let mut eval_rng = stream_rng(params.seed, "conflicting-eval", 0);
    let eval_prompts = (0..params.num_eval_prompts)
        .map(|_| random_tokens(&mut eval_rng, &cv.neutral, params.prompt_length))
        .collect();

    let dataset = PreferenceDataset {
        dimensions: vec!["helpful".into(), "harmless".into()],
        vocab: cv.vocab.clone(),
        examples,
        provenance: Provenance {
            generator: "conflicting".into(),
            seed: params.seed,
        },
        max_response_len: params.response_length + 1,
    };
    Ok(Generated {
        dataset,
        sidecar: Sidecar {
            generator: "conflicting".into(),
            parameters: serde_json::to_value(params)?,
            latent,
            refusal_pattern: cv.refusal.clone(),
            sft_pairs,
            eval_prompts,
            notes: vec!["evaluation prompts are fresh draws, none of which is paired with a refusal".into()],
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtParams {
    pub num_examples: usize,
    pub draws_per_pair: usize,
    pub seed: u64,
}

/// Bradley-Terry sampling over an enumerated space. `num_examples` pairs
/// of distinct responses are drawn uniformly; each is written
/// `draws_per_pair` times with independent label draws per dimension.
/// Every latent scorer must be a table over `space`.
pub fn gen_bt_dataset(
    latent: &LatentRewardSpec,
    space: &EnumeratedSpace,
    vocab: &Vocab,
    params: &BtParams,
) -> Result<Generated> {
    if params.draws_per_pair == 0 {
        return Err(SpoError::InvalidArgument("draws_per_pair must be at least 1".into()));
    }
    if space.num_responses() < 2 {
        return Err(SpoError::InvalidArgument("need two responses to form a pair".into()));
    }
    for d in &latent.dimensions {
        match &d.scorer {
            DimensionScorer::Table { space: s, .. } if s == space => {}
            _ => {
                return Err(SpoError::InvalidArgument(format!(
                    "dimension `{}` is not a table over the sampling space",
                    d.dimension
                )))
            }
        }
    }
    let names = latent.names();
    let per_pair: Vec<Vec<PreferenceExample>> = (0..params.num_examples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(params.seed, "bt", i as u64);
            let x = rng.random_range(0..space.num_prompts());
            let a = rng.random_range(0..space.num_responses());
            let b = loop {
                let b = rng.random_range(0..space.num_responses());
                if b != a {
                    break b;
                }
            };
            let prompt = &space.prompts()[x];
            let (ra, rb) = (&space.responses()[a], &space.responses()[b]);
            let probs = latent
                .dimensions
                .iter()
                .map(|d| bt_preference_prob(d.scorer.score(prompt, ra)?, d.scorer.score(prompt, rb)?))
                .collect::<Result<Vec<_>>>()?;
            Ok((0..params.draws_per_pair)
                .map(|_| PreferenceExample {
                    prompt: prompt.clone(),
                    response_a: ra.clone(),
                    response_b: rb.clone(),
                    labels: labels_from(
                        names
                            .iter()
                            .zip(&probs)
                            .map(|(n, &p)| (n.clone(), Label::from_a_preferred(rng.random_bool(p)))),
                    ),
                    focus: None,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let max_response_len = space.responses().iter().map(Vec::len).max().unwrap_or(0);
    let dataset = PreferenceDataset {
        dimensions: names,
        vocab: vocab.clone(),
        examples: per_pair.into_iter().flatten().collect(),
        provenance: Provenance {
            generator: "bt".into(),
            seed: params.seed,
        },
        max_response_len,
    };
    Ok(Generated {
        dataset,
        sidecar: Sidecar {
            generator: "bt".into(),
            parameters: serde_json::to_value(params)?,
            latent: latent.clone(),
            refusal_pattern: Vec::new(),
            sft_pairs: Vec::new(),
            eval_prompts: space.prompts().to_vec(),
            notes: Vec::new(),
        },
    })
}

/// A random latent table space: `num_prompts` one-token prompts and
/// `num_responses` two-token responses (a distinct token then eos), with
/// rewards drawn from `N(0, scale²)`.
pub fn random_table_latent(
    num_prompts: u32,
    num_responses: u32,
    dimensions: &[&str],
    scale: f64,
    seed: u64,
) -> Result<(Vocab, EnumeratedSpace, LatentRewardSpec)> {
    use rand_distr::StandardNormal;
    let eos = num_prompts + num_responses;
    let vocab = Vocab::new(eos + 1, Vec::new(), eos)?;
    let prompts = (0..num_prompts).map(|p| vec![p]).collect();
    let responses = (0..num_responses).map(|r| vec![num_prompts + r, eos]).collect();
    let space = EnumeratedSpace::new(prompts, responses)?;
    let mut rng = stream_rng(seed, "latent-table", 0);
    let dims = dimensions
        .iter()
        .map(|&d| {
            let values = (0..num_prompts * num_responses)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(NamedScorer {
                dimension: d.to_string(),
                scorer: DimensionScorer::Table {
                    space: space.clone(),
                    rewards: RewardTable::new(num_prompts as usize, num_responses as usize, values)?,
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok((vocab, space, LatentRewardSpec { dimensions: dims }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_dataset;

    fn small_special(noise: f64, n: usize) -> Generated {
        gen_special_token_dataset(&SpecialTokenParams {
            num_examples: n,
            noise,
            seed: 7,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn special_tokens_without_noise() {
        let g = small_special(0.0, 200);
        assert!(validate_dataset(&g.dataset).is_ok());
        let specials = &g.dataset.vocab.special_tokens;
        for ex in &g.dataset.examples {
            let focus = ex.focus.clone().unwrap();
            let d: usize = focus.trim_start_matches("token").parse::<usize>().unwrap() - 1;
            let (w, l) = ex.ordered(&focus).unwrap();
            let in_w: Vec<_> = w.iter().filter(|t| specials.contains(t)).collect();
            assert_eq!(in_w, vec![&specials[d]]);
            assert!(!l.iter().any(|t| specials.contains(t)));
            assert_eq!(*w.last().unwrap(), g.dataset.vocab.eos);
        }
    }

    #[test]
    fn special_token_noise_rate() {
        let g = small_special(0.1, 2500);
        let specials = &g.dataset.vocab.special_tokens;
        // Each example offers 3 off-focus markers per response.
        let (mut hits, mut trials) = (0usize, 0usize);
        for ex in &g.dataset.examples {
            let focus = ex.focus.clone().unwrap();
            let d: usize = focus.trim_start_matches("token").parse::<usize>().unwrap() - 1;
            for r in [&ex.response_a, &ex.response_b] {
                for (e, t) in specials.iter().enumerate() {
                    if e != d {
                        trials += 1;
                        hits += r.contains(t) as usize;
                    }
                }
            }
        }
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.1).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn generators_are_deterministic() {
        let a = small_special(0.1, 50);
        let b = small_special(0.1, 50);
        assert_eq!(a.dataset.canonical_bytes().unwrap(), b.dataset.canonical_bytes().unwrap());
        assert_eq!(a.sidecar, b.sidecar);
        let p = ConflictingParams {
            num_examples: 100,
            seed: 3,
            ..Default::default()
        };
        assert_eq!(
            gen_conflicting_dataset(&p).unwrap().dataset.fingerprint().unwrap(),
            gen_conflicting_dataset(&p).unwrap().dataset.fingerprint().unwrap()
        );
    }

    #[test]
    fn conflicting_labels() {
        let g = gen_conflicting_dataset(&ConflictingParams {
            num_examples: 10_000,
            refusal_fraction: 0.5,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert!(validate_dataset(&g.dataset).is_ok());
        let pattern = &g.sidecar.refusal_pattern;
        let mut conflicts = 0;
        for ex in &g.dataset.examples {
            let has_refusal = is_refusal(&ex.response_a, pattern) || is_refusal(&ex.response_b, pattern);
            let agree = ex.labels["helpful"] == ex.labels["harmless"];
            assert_eq!(has_refusal, !agree);
            conflicts += !agree as usize;
            for dim in ["helpful", "harmless"] {
                let (w, l) = ex.ordered(dim).unwrap();
                let sw = g.sidecar.latent.score(dim, &ex.prompt, w).unwrap();
                let sl = g.sidecar.latent.score(dim, &ex.prompt, l).unwrap();
                assert!(sw > sl, "{dim}: {sw} vs {sl}");
            }
        }
        let rate = conflicts as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.015, "{rate}");
    }

    #[test]
    fn bt_label_frequencies() {
        let (vocab, space, _) = random_table_latent(1, 3, &["d"], 1.0, 0).unwrap();
        let values = vec![3f64.ln(), 0.0, 0.0];
        let latent = LatentRewardSpec {
            dimensions: vec![NamedScorer {
                dimension: "d".into(),
                scorer: DimensionScorer::Table {
                    space: space.clone(),
                    rewards: RewardTable::new(1, 3, values).unwrap(),
                },
            }],
        };
        let g = gen_bt_dataset(
            &latent,
            &space,
            &vocab,
            &BtParams {
                num_examples: 600,
                draws_per_pair: 50,
                seed: 2,
            },
        )
        .unwrap();
        assert!(validate_dataset(&g.dataset).is_ok());
        let mut tally: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for ex in &g.dataset.examples {
            let a = space.response_id(&ex.response_a).unwrap();
            let b = space.response_id(&ex.response_b).unwrap();
            let e = tally.entry((a, b)).or_default();
            e.0 += (ex.labels["d"] == Label::AFirst) as usize;
            e.1 += 1;
        }
        for ((a, b), (wins, n)) in tally {
            let p = bt_preference_prob(latent.score("d", &[0], &space.responses()[a]).unwrap(), latent.score("d", &[0], &space.responses()[b]).unwrap()).unwrap();
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((wins as f64 / n as f64 - p).abs() <= 3.0 * sd, "pair {a},{b}");
        }
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(gen_special_token_dataset(&SpecialTokenParams {
            num_dims: 5,
            ..Default::default()
        })
        .is_err());
        assert!(gen_conflicting_dataset(&ConflictingParams {
            refusal_fraction: 1.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn token_count_scorer() {
        let latent = ConflictingVocab::standard().latent();
        assert_eq!(latent.score("helpful", &[0], &[20, 21, 22]).unwrap(), 0.0);
        assert_eq!(latent.score("harmless", &[0], &[20, 21, 22]).unwrap(), 1.0);
        assert_eq!(latent.score("helpful", &[0], &[8, 9, 0, 14, 22]).unwrap(), 0.5);
        assert_eq!(latent.score("harmless", &[0], &[8, 9, 0, 14, 22]).unwrap(), -0.25);
    }
}
