//! Encoder-block transformer shared by the generator (causal, vocab-wide head)
//! and the classifier (bidirectional, section-wide head read at the last
//! non-pad token).

pub mod checkpoint;
pub mod init;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style::{
    fuse_embedding, learned_style, minmax_rows, CorpusStats, StyleMode, StyleParams, StyleSpec,
    DEFAULT_STYLE_HIDDEN,
};
use crate::tensor::{AttentionLayout, Float, Tensor};
use crate::text::{TokenId, LINE_LEN, PAD, TITLE_LEN};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CheckpointMeta};
use init::trunc_normal;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadType {
    Lm,
    Classifier,
}

impl HeadType {
    pub fn name(self) -> &'static str {
        match self {
            HeadType::Lm => "lm",
            HeadType::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub n_sections: usize,
    pub style_mode: StyleMode,
    pub style_hidden: usize,
    pub head_type: HeadType,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    /// Release-time range of the training corpus, for style normalization.
    pub t_min: i64,
    pub t_max: i64,
}

impl ModelConfig {
    /// 12 layers, 12 heads, width 768.
    pub fn full(vocab_size: usize, n_sections: usize, head_type: HeadType) -> Self {
        let (max_seq, style_mode) = match head_type {
            HeadType::Lm => (LINE_LEN, StyleMode::Learned10),
            HeadType::Classifier => (TITLE_LEN, StyleMode::None),
        };
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 4 * 768,
            max_seq,
            vocab_size,
            n_sections,
            style_mode,
            style_hidden: DEFAULT_STYLE_HIDDEN,
            head_type,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-5,
            t_min: 0,
            t_max: 0,
        }
    }

    /// 2 layers, 4 heads, width 64; small enough to train on a laptop CPU.
    pub fn desk(vocab_size: usize, n_sections: usize, head_type: HeadType) -> Self {
        let max_seq = match head_type {
            HeadType::Lm => 64,
            HeadType::Classifier => TITLE_LEN,
        };
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq,
            ..Self::full(vocab_size, n_sections, head_type)
        }
    }

    pub fn with_time_range(mut self, t_min: i64, t_max: i64) -> Self {
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }

    pub fn token_dim(&self) -> usize {
        self.d_model - self.style_mode.style_dim()
    }

    pub fn head_width(&self) -> usize {
        self.head_width_for(self.head_type)
    }

    pub fn head_width_for(&self, head: HeadType) -> usize {
        match head {
            HeadType::Lm => self.vocab_size,
            HeadType::Classifier => self.n_sections,
        }
    }

    pub fn corpus_stats(&self) -> CorpusStats {
        CorpusStats {
            n_sections: self.n_sections,
            t_min: self.t_min,
            t_max: self.t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_layers == 0 {
            bad.push("n_layers must be positive".to_string());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bad.push(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model <= self.style_mode.style_dim() {
            bad.push(format!("d_model {} leaves no room for token features", self.d_model));
        }
        if self.d_ff == 0 || self.max_seq == 0 || self.vocab_size == 0 {
            bad.push("d_ff, max_seq and vocab_size must be positive".to_string());
        }
        if self.n_sections == 0 {
            bad.push("n_sections must be positive".to_string());
        }
        if self.head_type == HeadType::Classifier && self.style_mode != StyleMode::None {
            bad.push("classifier runs without style conditioning".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bad.push(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate));
        }
        if self.layer_norm_eps <= 0.0 {
            bad.push("layer_norm_eps must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    fn new<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        let w = |r: usize, c: usize, rng: &mut R| param(trunc_normal(r * c, INIT_STD, rng), &[r, c]);
        LayerParams {
            ln1_g: param(vec![1.0; d], &[d]),
            ln1_b: zeros(&[d]),
            wq: w(d, d, rng),
            bq: zeros(&[d]),
            wk: w(d, d, rng),
            bk: zeros(&[d]),
            wv: w(d, d, rng),
            bv: zeros(&[d]),
            wo: w(d, d, rng),
            bo: zeros(&[d]),
            ln2_g: param(vec![1.0; d], &[d]),
            ln2_b: zeros(&[d]),
            w1: w(d, d_ff, rng),
            b1: zeros(&[d_ff]),
            w2: w(d_ff, d, rng),
            b2: zeros(&[d]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub style: Option<StyleParams>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn param(data: Vec<Float>, shape: &[usize]) -> Tensor {
    Tensor::param(data, shape).expect("parameter shape")
}

fn zeros(shape: &[usize]) -> Tensor {
    param(vec![0.0; shape.iter().product()], shape)
}

impl ModelParams {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, td) = (cfg.d_model, cfg.token_dim());
        let tok_emb = param(trunc_normal(cfg.vocab_size * td, INIT_STD, rng), &[cfg.vocab_size, td]);
        let pos_emb = param(trunc_normal(cfg.max_seq * td, INIT_STD, rng), &[cfg.max_seq, td]);
        let style = (cfg.style_mode == StyleMode::Learned10)
            .then(|| StyleParams::new(cfg.n_sections, cfg.style_hidden, rng));
        let layers = (0..cfg.n_layers).map(|_| LayerParams::new(d, cfg.d_ff, rng)).collect();
        let hw = cfg.head_width();
        ModelParams {
            tok_emb,
            pos_emb,
            style,
            layers,
            lnf_g: param(vec![1.0; d], &[d]),
            lnf_b: zeros(&[d]),
            head_w: zeros(&[d, hw]),
            head_b: zeros(&[hw]),
        }
    }

    /// Every tensor with its checkpoint name, in declaration order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        if let Some(s) = &self.style {
            v.extend(s.tensors().iter().map(|(n, t)| (n.to_string(), (*t).clone())));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            v.extend(
                layer
                    .named()
                    .iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), (*t).clone())),
            );
        }
        v.push(("ln_f.g".to_string(), self.lnf_g.clone()));
        v.push(("ln_f.b".to_string(), self.lnf_b.clone()));
        v.push((HEAD_W.to_string(), self.head_w.clone()));
        v.push(("head.b".to_string(), self.head_b.clone()));
        v
    }
}

pub(crate) const HEAD_W: &str = "head.w";

/// Which keys each query may attend to, row-major `n × n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// `0` where allowed, `-inf` where blocked, for adding to raw scores.
    pub fn additive(&self) -> Vec<Float> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { Float::NEG_INFINITY })
            .collect()
    }
}

/// Position `i` may attend to `j` iff `j <= i`.
pub fn causal_mask(n: usize) -> Mask {
    Mask {
        n,
        allowed: (0..n * n).map(|e| e % n <= e / n).collect(),
    }
}

/// Single attention head: `softmax(q kᵀ / √d_head + mask) v`.
pub fn attention_head(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let (t, _) = x.dims2();
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    let v = x.matmul(wv)?;
    let d_head = q.dims2().1;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d_head as Float).sqrt());
    let weights = match mask {
        Some(m) if m.n != t => {
            return Err(Error::contract(format!("mask is {}x{0}, sequence is {t}", m.n)))
        }
        Some(m) => scores.masked_softmax(&m.allowed)?,
        None => scores.softmax()?,
    };
    weights.matmul(&v)
}

/// Pre-norm block: `x + attn(LN(x))`, then `+ FFN(LN(·))`.
pub fn encoder_block<R: RngCore + ?Sized>(
    x: &Tensor,
    p: &LayerParams,
    layout: &AttentionLayout,
    eps: Float,
    mut dropout: Option<(Float, &mut R)>,
) -> Result<Tensor> {
    let mut drop = |t: Tensor| match dropout.as_mut() {
        Some((rate, rng)) => t.dropout(*rate, *rng),
        None => t,
    };
    let h = x.layer_norm(&p.ln1_g, &p.ln1_b, eps)?;
    let q = h.matmul(&p.wq)?.add_row(&p.bq)?;
    let k = h.matmul(&p.wk)?.add_row(&p.bk)?;
    let v = h.matmul(&p.wv)?.add_row(&p.bv)?;
    let a = Tensor::attention(&q, &k, &v, layout)?;
    let a = a.matmul(&p.wo)?.add_row(&p.bo)?;
    let x = x.add(&drop(a))?;

    let h = x.layer_norm(&p.ln2_g, &p.ln2_b, eps)?;
    let f = h.matmul(&p.w1)?.add_row(&p.b1)?.gelu();
    let f = f.matmul(&p.w2)?.add_row(&p.b2)?;
    x.add(&drop(f))
}

/// Index of the last non-pad token, the position the classifier reads.
pub fn loaded_position(ids: &[TokenId]) -> Result<usize> {
    ids.iter().rposition(|&t| t != PAD).ok_or(Error::EmptyInput)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::new(&config, &mut rng);
        Ok(Model { config, params })
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.params.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn head_parameters(&self) -> Vec<Tensor> {
        vec![self.params.head_w.clone(), self.params.head_b.clone()]
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    /// Copies of every parameter value, for restoring a best checkpoint.
    pub fn snapshot(&self) -> Vec<Vec<Float>> {
        self.parameters().iter().map(Tensor::to_vec).collect()
    }

    pub fn restore(&self, snap: &[Vec<Float>]) -> Result<()> {
        let params = self.parameters();
        if params.len() != snap.len() {
            return Err(Error::contract("snapshot does not match model"));
        }
        for (p, s) in params.iter().zip(snap) {
            p.set_data(s.clone())?;
        }
        Ok(())
    }

    /// Replaces the output layer with a blank (zero) one for `head`.
    pub fn swap_head(&mut self, head: HeadType, n_sections: usize) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.head_type = head;
        cfg.n_sections = n_sections;
        if head == HeadType::Classifier {
            cfg.max_seq = cfg.max_seq.min(TITLE_LEN);
        }
        cfg.validate()?;
        let w = cfg.head_width();
        self.params.head_w = zeros(&[cfg.d_model, w]);
        self.params.head_b = zeros(&[w]);
        if cfg.max_seq < self.config.max_seq {
            let td = cfg.token_dim();
            let keep = self.params.pos_emb.data()[..cfg.max_seq * td].to_vec();
            self.params.pos_emb = param(keep, &[cfg.max_seq, td]);
        }
        self.config = cfg;
        Ok(())
    }

    fn check_ids(&self, seq: &[TokenId]) -> Result<()> {
        if seq.len() > self.config.max_seq {
            return Err(Error::Length {
                len: seq.len(),
                max: self.config.max_seq,
            });
        }
        if seq.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn style_rows(&self, styles: Option<&[StyleSpec]>, batch: usize) -> Result<Option<Tensor>> {
        let mode = self.config.style_mode;
        if mode == StyleMode::None {
            return Ok(None);
        }
        let styles = styles.ok_or_else(|| {
            Error::contract(format!("a {mode:?} generator needs a style for every sequence"))
        })?;
        if styles.len() != batch {
            return Err(Error::contract(format!(
                "{} styles for {batch} sequences",
                styles.len()
            )));
        }
        let stats = self.config.corpus_stats();
        match mode {
            StyleMode::Learned10 => {
                let p = self.params.style.as_ref().expect("learned style params");
                learned_style(styles, &stats, p).map(Some)
            }
            StyleMode::Minmax2 => minmax_rows(styles, &stats).map(Some),
            StyleMode::None => unreachable!(),
        }
    }

    /// Final-layer hidden states `[B*T, d_model]` for equal-length sequences.
    pub fn hidden_states(
        &self,
        seqs: &[&[TokenId]],
        styles: Option<&[StyleSpec]>,
        causal: bool,
        key_lens: Option<Vec<usize>>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let batch = seqs.len();
        let t = seqs.first().map_or(0, |s| s.len());
        for s in seqs {
            self.check_ids(s)?;
            if s.len() != t {
                return Err(Error::contract("sequences in a batch must share one length"));
            }
        }
        let rate = cfg.dropout_rate as Float;
        let dropout = |x: Tensor, rng: &mut Option<&mut dyn RngCore>| match rng {
            Some(r) if rate > 0.0 => x.dropout(rate, *r),
            _ => x,
        };

        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let tok = self.params.tok_emb.gather_rows(&ids)?;
        let tok = tok.add(&self.params.pos_emb.gather_rows(&pos)?)?;
        let style = self.style_rows(styles, batch)?;
        let x = fuse_embedding(&tok, style.as_ref(), t, cfg.d_model)?;
        let mut x = dropout(x, &mut rng);

        let layout = AttentionLayout {
            batch,
            seq: t,
            n_heads: cfg.n_heads,
            causal,
            key_lens,
        };
        let eps = cfg.layer_norm_eps as Float;
        for layer in &self.params.layers {
            let drop = match rng.as_mut() {
                Some(r) if rate > 0.0 => Some((rate, &mut **r)),
                _ => None,
            };
            x = encoder_block(&x, layer, &layout, eps, drop)?;
        }
        x.layer_norm(&self.params.lnf_g, &self.params.lnf_b, eps)
    }

    fn require_head(&self, head: HeadType) -> Result<()> {
        if self.config.head_type != head {
            return Err(Error::HeadType {
                expected: head.name(),
                found: self.config.head_type.name(),
            });
        }
        Ok(())
    }

    /// Causal LM logits `[B*T, vocab_size]`; dropout is active when `rng` is
    /// given.
    pub fn lm_logits(
        &self,
        seqs: &[&[TokenId]],
        styles: Option<&[StyleSpec]>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        self.require_head(HeadType::Lm)?;
        let h = self.hidden_states(seqs, styles, true, None, rng)?;
        h.matmul(&self.params.head_w)?.add_row(&self.params.head_b)
    }

    /// Pre-softmax logits `[T, vocab_size]` for one sequence, dropout off.
    pub fn lm_forward(&self, ids: &[TokenId], style: Option<&StyleSpec>) -> Result<Tensor> {
        let styles = style.map(std::slice::from_ref);
        self.lm_logits(&[ids], styles, None)
    }

    /// Hidden states at each sequence's loaded position, `[B, d_model]`.
    /// Trailing pads are trimmed and masked out as keys.
    pub fn latents(&self, seqs: &[&[TokenId]], rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let lens = seqs
            .iter()
            .map(|s| loaded_position(s).map(|p| p + 1))
            .collect::<Result<Vec<_>>>()?;
        let t = lens.iter().copied().max().unwrap_or(0);
        let trimmed: Vec<Vec<TokenId>> = seqs
            .iter()
            .map(|s| {
                let mut v: Vec<TokenId> = s.iter().copied().take(t).collect();
                v.resize(t, PAD);
                v
            })
            .collect();
        let refs: Vec<&[TokenId]> = trimmed.iter().map(Vec::as_slice).collect();
        let h = self.hidden_states(&refs, None, false, Some(lens.clone()), rng)?;
        let rows: Vec<usize> = lens.iter().enumerate().map(|(b, &l)| b * t + l - 1).collect();
        h.gather_rows(&rows)
    }

    /// Section logits `[B, n_sections]`.
    pub fn clf_logits(&self, seqs: &[&[TokenId]], rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        self.require_head(HeadType::Classifier)?;
        self.latents(seqs, rng)?
            .matmul(&self.params.head_w)?
            .add_row(&self.params.head_b)
    }

    /// Section logits for one title, dropout off.
    pub fn clf_forward(&self, ids: &[TokenId]) -> Result<Vec<Float>> {
        let _g = crate::tensor::no_grad();
        Ok(self.clf_logits(&[ids], None)?.to_vec())
    }

    /// Final-layer hidden state at the loaded token, before the head.
    pub fn extract_latent(&self, ids: &[TokenId]) -> Result<Vec<Float>> {
        let _g = crate::tensor::no_grad();
        Ok(self.latents(&[ids], None)?.to_vec())
    }
}
