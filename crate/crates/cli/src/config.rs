//! Flat JSON run configuration: parsing, defaults, and range checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use stylelab::generation::{SamplingMode, SamplingPolicy};
use stylelab::model::{HeadType, ModelConfig};
use stylelab::projection::LayoutParams;
use stylelab::style::StyleMode;
use stylelab::text::{LINE_LEN, TITLE_LEN};
use stylelab::training::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub vocab: Option<PathBuf>,
    pub gen_checkpoint: Option<PathBuf>,
    pub clf_checkpoint: Option<PathBuf>,
    /// Generator checkpoint whose encoder seeds the classifier.
    pub init_checkpoint: Option<PathBuf>,
    pub section_names: Vec<String>,

    pub scale: Scale,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq: Option<usize>,
    pub style_mode: StyleMode,
    pub style_hidden: usize,
    pub dropout: f64,

    pub optimizer: OptimizerKind,
    pub learning_rate: Option<f64>,
    pub clf_learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub clf_epochs: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub patience: Option<usize>,
    pub max_steps: Option<usize>,
    pub freeze_backbone: bool,

    pub sampling: SamplingMode,
    pub temperature: f64,
    pub top_k: usize,
    pub sample_seed: u64,

    pub umap_k: usize,
    pub umap_epochs: usize,
    pub umap_seed: u64,
    pub negative_samples: usize,
    pub curve_a: f64,
    pub curve_b: f64,
    pub project_max_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let layout = LayoutParams::default();
        let policy = SamplingPolicy::default();
        RunConfig {
            corpus: None,
            out_dir: PathBuf::from("runs"),
            vocab: None,
            gen_checkpoint: None,
            clf_checkpoint: None,
            init_checkpoint: None,
            section_names: (0..11).map(|i| format!("section_{i}")).collect(),
            scale: Scale::Desk,
            n_layers: None,
            n_heads: None,
            d_model: None,
            d_ff: None,
            max_seq: None,
            style_mode: StyleMode::Learned10,
            style_hidden: stylelab::style::DEFAULT_STYLE_HIDDEN,
            dropout: 0.1,
            optimizer: OptimizerKind::Adamw,
            learning_rate: None,
            clf_learning_rate: None,
            batch_size: None,
            epochs: 20,
            clf_epochs: 3,
            split_ratio: 0.9,
            seed: 0,
            weight_decay: 0.01,
            grad_clip_norm: Some(1.0),
            patience: Some(3),
            max_steps: None,
            freeze_backbone: false,
            sampling: policy.mode,
            temperature: policy.temperature,
            top_k: policy.k,
            sample_seed: policy.seed,
            umap_k: layout.k,
            umap_epochs: layout.epochs,
            umap_seed: layout.seed,
            negative_samples: layout.negative_samples,
            curve_a: layout.a,
            curve_b: layout.b,
            project_max_points: 2000,
        }
    }
}

/// Every problem found in a config document, one per line when displayed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration:\n  {}", .0.join("\n  "))]
pub struct ConfigErrors(pub Vec<String>);

fn known_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

/// Parses `--set key=value`; the value is read as JSON when it parses,
/// otherwise as a plain string.
pub fn parse_override(s: &str) -> Option<(String, Value)> {
    let (k, v) = s.split_once('=')?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Some((k.trim().to_string(), v))
}

pub fn validate_config(raw: &str) -> Result<RunConfig, ConfigErrors> {
    validate_with_overrides(raw, &[])
}

pub fn validate_with_overrides(raw: &str, overrides: &[(String, Value)]) -> Result<RunConfig, ConfigErrors> {
    let mut obj: Map<String, Value> = match serde_json::from_str(raw) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(ConfigErrors(vec!["config must be a JSON object".into()])),
        Err(e) => return Err(ConfigErrors(vec![format!("not valid JSON: {e}")])),
    };
    for (k, v) in overrides {
        obj.insert(k.clone(), v.clone());
    }

    let known = known_keys();
    let mut errors = Vec::new();
    let mut kept = Map::new();
    for (k, v) in obj {
        if !known.contains(&k) {
            errors.push(format!("unknown key `{k}`"));
            continue;
        }
        let single = Value::Object(Map::from_iter([(k.clone(), v.clone())]));
        match serde_json::from_value::<RunConfig>(single) {
            Ok(_) => {
                kept.insert(k, v);
            }
            Err(e) => errors.push(format!("`{k}`: {e}")),
        }
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(kept))
        .map_err(|e| ConfigErrors(vec![e.to_string()]))?;
    errors.extend(cfg.range_errors());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(errors))
    }
}

impl RunConfig {
    fn range_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.section_names.len() < 2 {
            e.push("`section_names` needs at least two sections".to_string());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            e.push(format!("`split_ratio` = {} must lie in (0, 1)", self.split_ratio));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("clf_learning_rate", self.clf_learning_rate)] {
            if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                e.push(format!("`{name}` must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            e.push(format!("`dropout` = {} must lie in [0, 1)", self.dropout));
        }
        if !(self.temperature > 0.0) {
            e.push(format!("`temperature` = {} must be positive", self.temperature));
        }
        if self.weight_decay < 0.0 {
            e.push("`weight_decay` must be non-negative".to_string());
        }
        if self.grad_clip_norm.is_some_and(|c| c <= 0.0) {
            e.push("`grad_clip_norm` must be positive".to_string());
        }
        for (name, v) in [
            ("batch_size", self.batch_size.unwrap_or(1)),
            ("epochs", self.epochs),
            ("clf_epochs", self.clf_epochs),
            ("top_k", self.top_k),
            ("umap_epochs", self.umap_epochs),
            ("style_hidden", self.style_hidden),
            ("project_max_points", self.project_max_points),
            ("n_layers", self.n_layers.unwrap_or(1)),
            ("n_heads", self.n_heads.unwrap_or(1)),
            ("d_ff", self.d_ff.unwrap_or(1)),
            ("max_seq", self.max_seq.unwrap_or(1)),
        ] {
            if v == 0 {
                e.push(format!("`{name}` must be positive"));
            }
        }
        if self.umap_k < 2 {
            e.push(format!("`umap_k` = {} must be at least 2", self.umap_k));
        }
        if self.max_seq.is_some_and(|m| m > LINE_LEN) {
            e.push(format!("`max_seq` must not exceed {LINE_LEN}"));
        }
        let base = self.model_preset(HeadType::Lm);
        if base.n_heads > 0 && !base.d_model.is_multiple_of(base.n_heads) {
            e.push(format!(
                "`d_model` = {} must be a multiple of `n_heads` = {}",
                base.d_model, base.n_heads
            ));
        }
        if base.d_model <= self.style_mode.style_dim() {
            e.push(format!("`d_model` = {} leaves no room for token features", base.d_model));
        }
        if !(self.curve_a > 0.0 && self.curve_b > 0.0) {
            e.push("`curve_a` and `curve_b` must be positive".to_string());
        }
        e
    }

    pub fn n_sections(&self) -> usize {
        self.section_names.len()
    }

    fn model_preset(&self, head: HeadType) -> ModelConfig {
        // Vocabulary size is fixed later from the vocab file.
        let mut m = match self.scale {
            Scale::Desk => ModelConfig::desk(1, self.n_sections(), head),
            Scale::Full => ModelConfig::full(1, self.n_sections(), head),
        };
        m.n_layers = self.n_layers.unwrap_or(m.n_layers);
        m.n_heads = self.n_heads.unwrap_or(m.n_heads);
        m.d_model = self.d_model.unwrap_or(m.d_model);
        m.d_ff = self.d_ff.unwrap_or(m.d_ff);
        m.dropout_rate = self.dropout;
        m.style_hidden = self.style_hidden;
        match head {
            HeadType::Lm => {
                m.max_seq = self.max_seq.unwrap_or(m.max_seq);
                m.style_mode = self.style_mode;
            }
            HeadType::Classifier => {
                m.max_seq = TITLE_LEN;
                m.style_mode = StyleMode::None;
            }
        }
        m
    }

    pub fn model_config(&self, head: HeadType, vocab_size: usize, t_min: i64, t_max: i64) -> ModelConfig {
        let mut m = self.model_preset(head).with_time_range(t_min, t_max);
        m.vocab_size = vocab_size;
        m
    }

    pub fn train_config(&self, head: HeadType) -> TrainConfig {
        let default_lr = self.optimizer.default_learning_rate();
        let lr = self.learning_rate.unwrap_or(default_lr);
        let (epochs, lr) = match head {
            HeadType::Lm => (self.epochs, lr),
            HeadType::Classifier => (self.clf_epochs, self.clf_learning_rate.unwrap_or(lr)),
        };
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: lr,
            batch_size: self.batch_size.unwrap_or(match self.scale {
                Scale::Desk => 32,
                Scale::Full => 16,
            }),
            epochs,
            split_ratio: self.split_ratio,
            seed: self.seed,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip_norm,
            patience: self.patience,
            max_steps: self.max_steps,
            freeze_backbone: self.freeze_backbone,
        }
    }

    pub fn sampling_policy(&self) -> SamplingPolicy {
        SamplingPolicy {
            mode: self.sampling,
            temperature: self.temperature,
            k: self.top_k,
            seed: self.sample_seed,
        }
    }

    pub fn layout_params(&self) -> LayoutParams {
        LayoutParams {
            k: self.umap_k,
            a: self.curve_a,
            b: self.curve_b,
            negative_samples: self.negative_samples,
            epochs: self.umap_epochs,
            seed: self.umap_seed,
        }
    }

    fn out(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.out(&self.vocab, "vocab.tsv")
    }

    pub fn gen_checkpoint_path(&self) -> PathBuf {
        self.out(&self.gen_checkpoint, "generator.ckpt")
    }

    pub fn clf_checkpoint_path(&self) -> PathBuf {
        self.out(&self.clf_checkpoint, "classifier.ckpt")
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Section id from a name in the table or a plain integer.
    pub fn section_id(&self, s: &str) -> Option<usize> {
        self.section_names
            .iter()
            .position(|n| n == s)
            .or_else(|| s.parse().ok().filter(|&i: &usize| i < self.n_sections()))
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), String> {
    if path.is_file() {
        Ok(())
    } else {
        Err(format!("{what} not found: {}", path.display()))
    }
}
