use std::path::Path;

use log::{info, warn};
use serde_json::json;

use stylelab::generation::{generate, SamplingMode};
use stylelab::model::{load_checkpoint_as, save_checkpoint, HeadType, Model};
use stylelab::projection::{cast_overlay, emit_scatter_svg, knn_label_purity, write_latents, Projection};
use stylelab::style::{CorpusStats, StyleSpec};
use stylelab::tensor::{no_grad, Float};
use stylelab::text::{
    build_vocab, encode_title, format_article, load_jsonl, split_indices, Article, TokenId, Vocab,
    LINE_LEN, TITLE_LEN,
};
use stylelab::training::{
    argmax, evaluate_accuracy, evaluate_lm, fine_tune_classifier, perplexity, train_lm, ClfExample,
    LmExample,
};

use crate::config::{parse_override, require_file, validate_with_overrides, RunConfig};
use crate::{CliError, Command, Common};

type Result<T> = std::result::Result<T, CliError>;

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(c) => ingest(&load_config(&c)?),
        Command::TrainGen(c) => train_gen(&load_config(&c)?),
        Command::TrainClf(c) => train_clf(&load_config(&c)?),
        Command::Generate {
            common,
            prompt,
            section,
            time,
            seed,
            greedy,
            count,
        } => {
            let cfg = load_config(&common)?;
            let opts = GenerateOpts {
                prompt: &prompt,
                section: &section,
                time: &time,
                seed,
                greedy,
                count,
            };
            generate_cmd(&cfg, &opts)
        }
        Command::Classify { common, titles } => classify(&load_config(&common)?, &titles),
        Command::Project { common, overlays } => project(&load_config(&common)?, &overlays),
        Command::Eval(c) => eval(&load_config(&c)?),
    }
}

pub fn load_config(c: &Common) -> Result<RunConfig> {
    let raw = std::fs::read_to_string(&c.config)
        .map_err(|e| data(format!("cannot read config {}: {e}", c.config.display())))?;
    let overrides = c
        .set
        .iter()
        .map(|s| parse_override(s).ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    validate_with_overrides(&raw, &overrides).map_err(data)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))
}

fn load_articles(cfg: &RunConfig) -> Result<Vec<Article>> {
    let path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| data("config does not set `corpus`"))?;
    require_file(path, "corpus").map_err(data)?;
    let ingested = load_jsonl(path, cfg.n_sections()).map_err(data)?;
    for issue in &ingested.skipped {
        warn!("{}:{}: skipped: {}", path.display(), issue.line, issue.message);
    }
    if ingested.articles.is_empty() {
        return Err(data(format!("{}: no usable articles", path.display())));
    }
    Ok(ingested.articles)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    let path = cfg.vocab_path();
    require_file(&path, "vocabulary").map_err(data)?;
    Vocab::load(&path).map_err(data)
}

fn load_model(path: &Path, head: HeadType, what: &str) -> Result<Model> {
    require_file(path, what).map_err(data)?;
    Ok(load_checkpoint_as(path, head).map_err(data)?.0)
}

fn ingest(cfg: &RunConfig) -> Result<()> {
    let articles = load_articles(cfg)?;
    let vocab = build_vocab(&articles);
    ensure_out_dir(cfg)?;
    vocab.save(&cfg.vocab_path())?;
    let stats = CorpusStats::from_articles(&articles, cfg.n_sections());
    println!(
        "{}",
        json!({
            "articles": articles.len(),
            "vocab_size": vocab.size(),
            "vocab": cfg.vocab_path(),
            "t_min": stats.t_min,
            "t_max": stats.t_max,
        })
    );
    Ok(())
}

fn lm_examples(articles: &[Article], vocab: &Vocab, model: &Model) -> Vec<LmExample> {
    let len = LINE_LEN.min(model.config.max_seq);
    articles
        .iter()
        .map(|a| LmExample {
            ids: format_article(a, vocab, len),
            style: StyleSpec::of(a),
        })
        .collect()
}

fn clf_examples(articles: &[Article], vocab: &Vocab) -> Vec<ClfExample> {
    articles
        .iter()
        .map(|a| ClfExample {
            ids: encode_title(&a.main_title, vocab, TITLE_LEN),
            label: a.label,
        })
        .collect()
}

fn train_gen(cfg: &RunConfig) -> Result<()> {
    let articles = load_articles(cfg)?;
    let vocab = load_vocab(cfg)?;
    let stats = CorpusStats::from_articles(&articles, cfg.n_sections());
    let mcfg = cfg.model_config(HeadType::Lm, vocab.size(), stats.t_min, stats.t_max);
    let mut model = Model::new(mcfg, cfg.seed).map_err(data)?;
    info!("generator with {} parameters", model.num_parameters());
    let lines = lm_examples(&articles, &vocab, &model);
    let out = train_lm(&lines, &mut model, &cfg.train_config(HeadType::Lm))?;

    ensure_out_dir(cfg)?;
    let hash = cfg.hash();
    save_checkpoint(&model, Some(&hash), &cfg.gen_checkpoint_path())?;
    let mut log = out.log;
    log.config_hash = Some(hash);
    log.save(&cfg.output("gen_metrics.csv"))?;
    println!(
        "{}",
        json!({
            "checkpoint": cfg.gen_checkpoint_path(),
            "steps": out.steps,
            "best_epoch": out.best_epoch,
            "val_loss": out.best_value,
            "val_perplexity": perplexity(out.best_value),
        })
    );
    Ok(())
}

fn train_clf(cfg: &RunConfig) -> Result<()> {
    let articles = load_articles(cfg)?;
    let vocab = load_vocab(cfg)?;
    let n = cfg.n_sections();
    let mut model = match &cfg.init_checkpoint {
        Some(p) => {
            let mut m = load_model(p, HeadType::Lm, "initial checkpoint")?;
            m.swap_head(HeadType::Classifier, n).map_err(data)?;
            m
        }
        None => Model::new(cfg.model_config(HeadType::Classifier, vocab.size(), 0, 0), cfg.seed).map_err(data)?,
    };
    if model.config.vocab_size != vocab.size() {
        return Err(data(format!(
            "checkpoint vocabulary has {} entries, vocab file has {}",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    let titles = clf_examples(&articles, &vocab);
    let out = fine_tune_classifier(&titles, &mut model, &cfg.train_config(HeadType::Classifier))?;

    ensure_out_dir(cfg)?;
    let hash = cfg.hash();
    save_checkpoint(&model, Some(&hash), &cfg.clf_checkpoint_path())?;
    let mut log = out.log;
    log.config_hash = Some(hash);
    log.save(&cfg.output("clf_metrics.csv"))?;
    println!(
        "{}",
        json!({
            "checkpoint": cfg.clf_checkpoint_path(),
            "steps": out.steps,
            "best_epoch": out.best_epoch,
            "val_accuracy": out.best_value,
        })
    );
    Ok(())
}

struct GenerateOpts<'a> {
    prompt: &'a str,
    section: &'a str,
    time: &'a str,
    seed: Option<u64>,
    greedy: bool,
    count: usize,
}

/// RFC 3339 timestamps or bare unix seconds.
pub fn parse_time(s: &str) -> Option<i64> {
    s.parse::<i64>()
        .ok()
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|t| t.timestamp()))
}

fn generate_cmd(cfg: &RunConfig, o: &GenerateOpts) -> Result<()> {
    let section = cfg
        .section_id(o.section)
        .ok_or_else(|| data(format!("unknown section `{}`", o.section)))?;
    let time = parse_time(o.time).ok_or_else(|| data(format!("cannot parse time `{}`", o.time)))?;
    let vocab = load_vocab(cfg)?;
    let model = load_model(&cfg.gen_checkpoint_path(), HeadType::Lm, "generator checkpoint")?;
    let mut policy = cfg.sampling_policy();
    if o.greedy {
        policy.mode = SamplingMode::Greedy;
    }
    if let Some(s) = o.seed {
        policy.seed = s;
    }
    let style = StyleSpec::new(section, time);
    for i in 0..o.count {
        let p = stylelab::generation::SamplingPolicy {
            seed: policy.seed.wrapping_add(i as u64),
            ..policy
        };
        let g = generate(&model, &vocab, o.prompt, &style, &p)?;
        println!("{}", g.text);
    }
    Ok(())
}

fn softmax(v: &[Float]) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = v.iter().map(|&x| (x as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn classify(cfg: &RunConfig, titles: &[String]) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let model = load_model(&cfg.clf_checkpoint_path(), HeadType::Classifier, "classifier checkpoint")?;
    for t in titles {
        let ids = encode_title(t, &vocab, model.config.max_seq);
        let logits = model.clf_forward(&ids)?;
        let probs = softmax(&logits);
        let best = argmax(&logits);
        let name = cfg.section_names.get(best).cloned().unwrap_or_else(|| best.to_string());
        println!("{t}\t{name}\t{:.4}", probs[best]);
    }
    Ok(())
}

fn project(cfg: &RunConfig, overlays: &[String]) -> Result<()> {
    let articles = load_articles(cfg)?;
    let vocab = load_vocab(cfg)?;
    let model = load_model(&cfg.clf_checkpoint_path(), HeadType::Classifier, "classifier checkpoint")?;
    let mut titles = clf_examples(&articles, &vocab);
    if titles.len() > cfg.project_max_points {
        let (keep, _) = split_indices(titles.len(), cfg.project_max_points as f64 / titles.len() as f64, cfg.seed)?;
        titles = keep.into_iter().map(|i| titles[i].clone()).collect();
    }
    let mut latents = Vec::with_capacity(titles.len());
    {
        let _g = no_grad();
        for chunk in titles.chunks(64) {
            let refs: Vec<&[TokenId]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
            let lat = model.latents(&refs, None)?;
            let d = model.config.d_model;
            latents.extend(lat.to_vec().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<f64>>()));
        }
    }
    ensure_out_dir(cfg)?;
    write_latents(&cfg.output("latents.bin"), &latents)?;
    let labels: Vec<usize> = titles.iter().map(|e| e.label).collect();
    let proj = Projection::fit(latents, labels.clone(), cfg.layout_params())?;
    let mut points = proj.points();
    for phrase in overlays {
        let ids = encode_title(phrase, &vocab, model.config.max_seq);
        let label = argmax(&model.clf_forward(&ids)?);
        points.push(cast_overlay(phrase, label, &model, &vocab, &proj)?);
    }
    let svg = cfg.output("projection.svg");
    emit_scatter_svg(&points, &cfg.section_names, &svg)?;
    println!(
        "{}",
        json!({
            "points": labels.len(),
            "overlays": overlays.len(),
            "purity_k10": knn_label_purity(&proj.coords, &labels, 10.min(labels.len().saturating_sub(1)).max(1)),
            "svg": svg,
        })
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let articles = load_articles(cfg)?;
    let vocab = load_vocab(cfg)?;
    let (_, val_idx) = split_indices(articles.len(), cfg.split_ratio, cfg.seed)?;
    let val: Vec<Article> = val_idx.iter().map(|&i| articles[i].clone()).collect();
    let mut report = serde_json::Map::new();
    let gen_path = cfg.gen_checkpoint_path();
    if gen_path.is_file() {
        let model = load_model(&gen_path, HeadType::Lm, "generator checkpoint")?;
        let lines = lm_examples(&val, &vocab, &model);
        let loss = evaluate_lm(&model, &lines, 16)?;
        report.insert("val_loss".into(), json!(loss));
        report.insert("val_perplexity".into(), json!(perplexity(loss)));
    }
    let clf_path = cfg.clf_checkpoint_path();
    if clf_path.is_file() {
        let model = load_model(&clf_path, HeadType::Classifier, "classifier checkpoint")?;
        let acc = evaluate_accuracy(&model, &clf_examples(&val, &vocab), 32)?;
        report.insert("val_accuracy".into(), json!(acc.accuracy));
        report.insert("confusion".into(), json!(acc.confusion));
    }
    if report.is_empty() {
        return Err(data(format!(
            "no checkpoint found at {} or {}",
            gen_path.display(),
            clf_path.display()
        )));
    }
    println!("{}", serde_json::Value::Object(report));
    Ok(())
}
