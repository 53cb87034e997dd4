//! Section/time metadata turned into a per-token style vector and appended to
//! the token embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::text::Article;

/// Width of the learned style vector.
pub const LEARNED_STYLE_DIM: usize = 10;
pub const DEFAULT_STYLE_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StyleSpec {
    pub section_id: usize,
    /// Unix seconds.
    pub timestamp: i64,
}

impl StyleSpec {
    pub fn new(section_id: usize, timestamp: i64) -> Self {
        Self {
            section_id,
            timestamp,
        }
    }

    pub fn of(a: &Article) -> Self {
        Self::new(a.label, a.release_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StyleMode {
    /// Two-layer learned map to a 10-d vector.
    #[default]
    Learned10,
    /// `[section/(S-1), min-max time]`.
    Minmax2,
    None,
}

impl StyleMode {
    pub fn style_dim(self) -> usize {
        match self {
            StyleMode::Learned10 => LEARNED_STYLE_DIM,
            StyleMode::Minmax2 => 2,
            StyleMode::None => 0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "learned10" => Some(StyleMode::Learned10),
            "minmax2" => Some(StyleMode::Minmax2),
            "none" => Some(StyleMode::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sections: usize,
    pub t_min: i64,
    pub t_max: i64,
}

impl CorpusStats {
    pub fn from_articles(articles: &[Article], n_sections: usize) -> Self {
        let t_min = articles.iter().map(|a| a.release_time).min().unwrap_or(0);
        let t_max = articles.iter().map(|a| a.release_time).max().unwrap_or(0);
        Self {
            n_sections,
            t_min,
            t_max,
        }
    }

    /// Release time scaled to `[0, 1]`, clamped; 0 when the range is empty.
    pub fn time_fraction(&self, t: i64) -> f64 {
        if self.t_max <= self.t_min {
            return 0.0;
        }
        ((t - self.t_min) as f64 / (self.t_max - self.t_min) as f64).clamp(0.0, 1.0)
    }
}

/// `[section / (S-1), (t - t_min) / (t_max - t_min)]`, both clamped to `[0, 1]`.
pub fn minmax_style(spec: &StyleSpec, stats: &CorpusStats) -> Result<[Float; 2]> {
    if stats.n_sections < 2 {
        return Err(Error::DegenerateStats(format!(
            "need at least 2 sections, have {}",
            stats.n_sections
        )));
    }
    if stats.t_min >= stats.t_max {
        return Err(Error::DegenerateStats(format!(
            "time range [{}, {}] is empty",
            stats.t_min, stats.t_max
        )));
    }
    let s = (spec.section_id as f64 / (stats.n_sections - 1) as f64).clamp(0.0, 1.0);
    Ok([s as Float, stats.time_fraction(spec.timestamp) as Float])
}

/// Trainable `(S+1) → hidden → 10` map with GELU in between. The input is a
/// one-hot section followed by the min-max time scalar.
#[derive(Debug, Clone)]
pub struct StyleParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl StyleParams {
    pub fn new<R: Rng + ?Sized>(n_sections: usize, hidden: usize, rng: &mut R) -> Self {
        let init = |n: usize, rng: &mut R| crate::model::init::trunc_normal(n, 0.02, rng);
        StyleParams {
            w1: Tensor::param(init((n_sections + 1) * hidden, rng), &[n_sections + 1, hidden])
                .expect("shape"),
            b1: Tensor::param(vec![0.0; hidden], &[hidden]).expect("shape"),
            w2: Tensor::param(init(hidden * LEARNED_STYLE_DIM, rng), &[hidden, LEARNED_STYLE_DIM])
                .expect("shape"),
            b2: Tensor::param(vec![0.0; LEARNED_STYLE_DIM], &[LEARNED_STYLE_DIM]).expect("shape"),
        }
    }

    pub fn zeros(n_sections: usize, hidden: usize) -> Self {
        let z = |shape: &[usize]| {
            Tensor::param(vec![0.0; shape.iter().product()], shape).expect("shape")
        };
        StyleParams {
            w1: z(&[n_sections + 1, hidden]),
            b1: z(&[hidden]),
            w2: z(&[hidden, LEARNED_STYLE_DIM]),
            b2: z(&[LEARNED_STYLE_DIM]),
        }
    }

    pub fn n_sections(&self) -> usize {
        self.w1.shape()[0] - 1
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("style.w1", &self.w1),
            ("style.b1", &self.b1),
            ("style.w2", &self.w2),
            ("style.b2", &self.b2),
        ]
    }
}

/// Learned style vectors, one `[10]` row per spec.
pub fn learned_style(specs: &[StyleSpec], stats: &CorpusStats, params: &StyleParams) -> Result<Tensor> {
    let s = params.n_sections();
    let mut input = vec![0.0; specs.len() * (s + 1)];
    for (row, spec) in input.chunks_exact_mut(s + 1).zip(specs) {
        if spec.section_id >= s {
            return Err(Error::Index {
                what: "style section",
                index: spec.section_id,
                limit: s,
            });
        }
        row[spec.section_id] = 1.0;
        row[s] = stats.time_fraction(spec.timestamp) as Float;
    }
    let x = Tensor::new(input, &[specs.len(), s + 1])?;
    x.matmul(&params.w1)?
        .add_row(&params.b1)?
        .gelu()
        .matmul(&params.w2)?
        .add_row(&params.b2)
}

/// Constant min-max style rows, one per spec.
pub fn minmax_rows(specs: &[StyleSpec], stats: &CorpusStats) -> Result<Tensor> {
    let mut data = Vec::with_capacity(specs.len() * 2);
    for spec in specs {
        data.extend(minmax_style(spec, stats)?);
    }
    Tensor::new(data, &[specs.len(), 2])
}

/// Appends style row `r / seq_len` to token row `r`. With no style the token
/// embeddings pass through unchanged and must already be `d_model` wide.
pub fn fuse_embedding(
    token_embeds: &Tensor,
    style: Option<&Tensor>,
    seq_len: usize,
    d_model: usize,
) -> Result<Tensor> {
    let (rows, token_dim) = token_embeds.dims2();
    let style_dim = style.map_or(0, |s| s.dims2().1);
    if token_dim + style_dim != d_model {
        return Err(Error::contract(format!(
            "token width {token_dim} + style width {style_dim} != d_model {d_model}"
        )));
    }
    let Some(style) = style else {
        return Ok(token_embeds.clone());
    };
    if seq_len == 0 || rows % seq_len != 0 || rows / seq_len != style.dims2().0 {
        return Err(Error::contract(format!(
            "{rows} token rows do not split into {} sequences of {seq_len}",
            style.dims2().0
        )));
    }
    let index: Vec<usize> = (0..rows).map(|r| r / seq_len).collect();
    token_embeds.concat_cols(&style.gather_rows(&index)?)
}
