//! Autoregressive decoding: the whole sequence is re-fed every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadType, Model};
use crate::style::{StyleMode, StyleSpec};
use crate::tensor::{no_grad, Float};
use crate::text::{decode, encode, TokenId, Vocab, EOS, LINE_LEN, SOS};
use crate::training::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            mode: SamplingMode::Temperature,
            temperature: 0.8,
            k: 40,
            seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn greedy() -> Self {
        SamplingPolicy {
            mode: SamplingMode::Greedy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Param(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.k == 0 {
            return Err(Error::Param("k must be at least 1".into()));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(candidates: &[(usize, Float)], temperature: f64, rng: &mut R) -> usize {
    let max = candidates
        .iter()
        .map(|&(_, l)| l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&(_, l)| ((l as f64 - max) / temperature).exp())
        .collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (&(id, _), w) in candidates.iter().zip(&weights) {
        if u < *w {
            return id;
        }
        u -= w;
    }
    // Only reachable through rounding in the final subtraction.
    candidates[weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)].0
}

/// Picks the next token id from one row of logits.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[Float],
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<TokenId> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "sample_next" });
    }
    let id = match policy.mode {
        SamplingMode::Greedy => argmax(logits),
        SamplingMode::Temperature => {
            let all: Vec<(usize, Float)> = logits.iter().copied().enumerate().collect();
            draw(&all, policy.temperature, rng)
        }
        SamplingMode::TopK => {
            let mut ranked: Vec<(usize, Float)> = logits.iter().copied().enumerate().collect();
            // Stable sort keeps lower ids first among equal logits.
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            ranked.truncate(policy.k.min(logits.len()));
            draw(&ranked, policy.temperature, rng)
        }
    };
    Ok(id as TokenId)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// The prompt followed by the decoded continuation.
    pub text: String,
    /// Every token fed or produced, starting with `[SOS]`; a final `[EOS]`
    /// is not included.
    pub ids: Vec<TokenId>,
    pub new_tokens: usize,
    pub hit_eos: bool,
}

/// Longest sequence generation may reach for this model.
pub fn token_limit(model: &Model) -> usize {
    LINE_LEN.min(model.config.max_seq)
}

/// Extends `ids` one sampled token at a time until `[EOS]` or the limit.
/// Returns whether `[EOS]` was produced.
pub fn continue_ids<R: Rng + ?Sized>(
    model: &Model,
    ids: &mut Vec<TokenId>,
    style: &StyleSpec,
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<bool> {
    if model.config.head_type != HeadType::Lm {
        return Err(Error::HeadType {
            expected: "lm",
            found: model.config.head_type.name(),
        });
    }
    policy.validate()?;
    let limit = token_limit(model);
    if ids.len() > limit {
        return Err(Error::Length {
            len: ids.len(),
            max: limit,
        });
    }
    let style = (model.config.style_mode != StyleMode::None).then_some(style);
    let v = model.config.vocab_size;
    let _g = no_grad();
    while ids.len() < limit {
        let logits = model.lm_forward(ids, style)?;
        let data = logits.data();
        let next = sample_next(&data[data.len() - v..], policy, rng)?;
        if next == EOS {
            return Ok(true);
        }
        ids.push(next);
    }
    Ok(false)
}

/// Generates a continuation of `prompt` in the given style.
pub fn generate(
    model: &Model,
    vocab: &Vocab,
    prompt: &str,
    style: &StyleSpec,
    policy: &SamplingPolicy,
) -> Result<Generated> {
    let limit = token_limit(model);
    let n = prompt.chars().count();
    if n >= limit {
        return Err(Error::Length { len: n, max: limit - 1 });
    }
    let mut ids = vec![SOS];
    ids.extend(encode(prompt, vocab, limit, false));
    let start = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let hit_eos = continue_ids(model, &mut ids, style, policy, &mut rng)?;
    let mut text = prompt.to_string();
    text.push_str(&decode(&ids[start..], vocab)?);
    Ok(Generated {
        text,
        new_tokens: ids.len() - start,
        ids,
        hit_eos,
    })
}
