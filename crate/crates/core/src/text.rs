//! Character tokenization, corpus ingestion, and train/validation splitting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP1: TokenId = 3;
pub const SEP2: TokenId = 4;
pub const UNK: TokenId = 5;
pub const NUM_SPECIALS: usize = 6;

/// Full generator line length.
pub const LINE_LEN: usize = 512;
/// Classifier title budget, including the `[SOS]`/`[EOS]` wrappers.
pub const TITLE_LEN: usize = 50;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[SOS]", "[EOS]", "[SEP1]", "[SEP2]", "[UNK]"];

pub fn special_name(id: TokenId) -> Option<&'static str> {
    SPECIAL_NAMES.get(id as usize).copied()
}

/// One news item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub main_title: String,
    pub sub_title: String,
    pub body: String,
    /// News section id in `0..n_sections`.
    pub label: usize,
    pub author: String,
    /// Unix seconds.
    pub release_time: i64,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineIssue {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub articles: Vec<Article>,
    pub skipped: Vec<LineIssue>,
}

/// Parses a JSONL corpus. Bad records are skipped and listed in `skipped`;
/// only an unreadable file is fatal.
pub fn load_jsonl(path: &Path, n_sections: usize) -> Result<Ingested> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_jsonl(&text, n_sections))
}

pub fn parse_jsonl(text: &str, n_sections: usize) -> Ingested {
    let mut out = Ingested::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let issue = |message: String| LineIssue {
            line: line_no,
            message,
        };
        match serde_json::from_str::<Article>(line) {
            Err(e) => out.skipped.push(issue(e.to_string())),
            Ok(a) if a.label >= n_sections => out.skipped.push(issue(format!(
                "label {} out of range for {n_sections} sections",
                a.label
            ))),
            Ok(a) if a.main_title.is_empty() => {
                out.skipped.push(issue("main_title is empty".to_string()))
            }
            Ok(a) => out.articles.push(a),
        }
    }
    out
}

/// Bijective char ↔ id map; ids below [`NUM_SPECIALS`] are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Vocab {
            chars: Vec::new(),
            index: HashMap::new(),
        };
        for c in chars {
            v.insert(c);
        }
        v
    }

    fn insert(&mut self, c: char) {
        if !self.index.contains_key(&c) {
            let id = (self.chars.len() + NUM_SPECIALS) as TokenId;
            self.chars.push(c);
            self.index.insert(c, id);
        }
    }

    /// Total ids including the specials.
    pub fn size(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        (id as usize)
            .checked_sub(NUM_SPECIALS)
            .and_then(|i| self.chars.get(i).copied())
    }

    /// `id<TAB>codepoint-hex` per line; specials are written by name.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, name) in SPECIAL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{id}\t{name}");
        }
        for (i, c) in self.chars.iter().enumerate() {
            let _ = writeln!(s, "{}\t{:04X}", i + NUM_SPECIALS, *c as u32);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut v = Vocab::from_chars([]);
        for (i, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::Data(format!("vocab line {}: {m}", i + 1));
            let (id, val) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id < NUM_SPECIALS {
                if SPECIAL_NAMES[id] != val {
                    return Err(bad("reserved id does not match its special token"));
                }
                continue;
            }
            if id != v.size() {
                return Err(bad("ids must be consecutive"));
            }
            let cp = u32::from_str_radix(val, 16).map_err(|_| bad("bad codepoint"))?;
            let c = char::from_u32(cp).ok_or_else(|| bad("invalid codepoint"))?;
            if v.index.contains_key(&c) {
                return Err(bad("duplicate character"));
            }
            v.insert(c);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Every character of every title, sub title, and body, in order of first
/// occurrence.
pub fn build_vocab(articles: &[Article]) -> Vocab {
    Vocab::from_chars(
        articles
            .iter()
            .flat_map(|a| a.main_title.chars().chain(a.sub_title.chars()).chain(a.body.chars())),
    )
}

fn push_chars(out: &mut Vec<TokenId>, text: &str, vocab: &Vocab) {
    out.extend(text.chars().map(|c| vocab.id(c).unwrap_or(UNK)));
}

/// `[SOS] title [SEP1] sub [SEP2] body [EOS]` padded with `[PAD]` to `len`.
/// Over-long content is cut so that `[EOS]` lands on the last position.
pub fn format_article(a: &Article, vocab: &Vocab, len: usize) -> Vec<TokenId> {
    let mut ids = vec![SOS];
    push_chars(&mut ids, &a.main_title, vocab);
    ids.push(SEP1);
    push_chars(&mut ids, &a.sub_title, vocab);
    ids.push(SEP2);
    push_chars(&mut ids, &a.body, vocab);
    ids.truncate(len.saturating_sub(1));
    ids.push(EOS);
    ids.resize(len, PAD);
    ids
}

/// Characters to ids; unknown characters become `[UNK]`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize, pad: bool) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = text
        .chars()
        .take(max_len)
        .map(|c| vocab.id(c).unwrap_or(UNK))
        .collect();
    if pad {
        ids.resize(max_len, PAD);
    }
    ids
}

/// Classifier input: `[SOS] title [EOS]` within `max_len`, then padding.
pub fn encode_title(title: &str, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    let mut ids = vec![SOS];
    ids.extend(encode(title, vocab, max_len.saturating_sub(2), false));
    ids.push(EOS);
    ids.truncate(max_len);
    ids.resize(max_len, PAD);
    ids
}

/// Ids back to text. `[PAD]` is dropped; other specials render as markers.
pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<String> {
    let mut s = String::new();
    for &id in ids {
        match id {
            PAD => {}
            _ if (id as usize) < NUM_SPECIALS => s.push_str(SPECIAL_NAMES[id as usize]),
            _ => s.push(vocab.char_of(id).ok_or(Error::Index {
                what: "token id",
                index: id as usize,
                limit: vocab.size(),
            })?),
        }
    }
    Ok(s)
}

/// Index permutation split: the first `round(ratio * n)` shuffled indices
/// train, the rest validate. Both sides are kept non-empty.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 items, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio {ratio} must lie in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub fn split_shuffled<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, va) = split_indices(items.len(), ratio, seed)?;
    Ok((
        tr.into_iter().map(|i| items[i].clone()).collect(),
        va.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn article(title: &str, sub: &str, body: &str) -> Article {
        Article {
            main_title: title.into(),
            sub_title: sub.into(),
            body: body.into(),
            label: 0,
            author: "a".into(),
            release_time: 0,
            tags: vec![],
        }
    }

    const LINE: &str = r#"{"main_title":"t","sub_title":"s","body":"b","label":1,"author":"x","release_time":5}"#;

    #[test]
    fn loads_valid_lines() {
        let text = [LINE, LINE, LINE].join("\n");
        let got = parse_jsonl(&text, 11);
        assert_eq!(got.articles.len(), 3);
        assert!(got.skipped.is_empty());
        assert!(got.articles[0].tags.is_empty());
    }

    #[test]
    fn missing_field_is_reported_with_line() {
        let bad = r#"{"sub_title":"s","body":"b","label":1,"author":"x","release_time":5}"#;
        let got = parse_jsonl(&[LINE, bad, LINE].join("\n"), 11);
        assert_eq!(got.articles.len(), 2);
        assert_eq!(got.skipped.len(), 1);
        assert_eq!(got.skipped[0].line, 2);
        assert!(got.skipped[0].message.contains("main_title"));
    }

    #[test]
    fn label_range_is_checked() {
        let got = parse_jsonl(LINE, 1);
        assert!(got.articles.is_empty());
        assert!(got.skipped[0].message.contains("out of range"));
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(matches!(
            load_jsonl(Path::new("/no/such/corpus.jsonl"), 11),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn vocab_ids_start_after_specials() {
        let v = build_vocab(&[article("ab", "", "")]);
        assert_eq!(v.id('a'), Some(6));
        assert_eq!(v.id('b'), Some(7));
        assert_eq!(v.size(), 8);
    }

    #[test]
    fn vocab_is_deterministic_and_counts() {
        let body: String = (0..5000u32).map(|i| char::from_u32(0x4E00 + i).unwrap()).collect();
        let corpus = vec![article("x", "y", &body)];
        let a = build_vocab(&corpus);
        assert_eq!(a, build_vocab(&corpus));
        let only = vec![article(&body, "", "")];
        assert_eq!(build_vocab(&only).size(), 5006);
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = build_vocab(&[article("hé", "שלום", "z\t")]);
        let text = v.to_tsv();
        assert!(text.starts_with("0\t[PAD]\n1\t[SOS]\n"));
        assert!(text.contains("6\t0068\n"));
        assert_eq!(Vocab::from_tsv(&text).unwrap(), v);
        assert!(Vocab::from_tsv("0\t[SOS]\n").is_err());
    }

    #[test]
    fn format_template() {
        let v = build_vocab(&[article("ab", "c", "de")]);
        let ids = format_article(&article("ab", "c", "de"), &v, LINE_LEN);
        let (a, b, c, d, e) = (6, 7, 8, 9, 10);
        assert_eq!(&ids[..9], &[SOS, a, b, SEP1, c, SEP2, d, e, EOS]);
        assert!(ids[9..].iter().all(|&t| t == PAD));
        assert_eq!(ids.len(), 512);
    }

    #[test]
    fn format_truncates_long_body() {
        let body = "x".repeat(10_000);
        let v = build_vocab(&[article("t", "", &body)]);
        let ids = format_article(&article("t", "", &body), &v, LINE_LEN);
        assert_eq!(ids.len(), 512);
        assert_eq!(ids[511], EOS);
        assert_eq!(ids.iter().filter(|&&t| t == EOS).count(), 1);
    }

    #[test]
    fn format_empty_sub_title() {
        let v = build_vocab(&[article("t", "", "b")]);
        let ids = format_article(&article("t", "", "b"), &v, LINE_LEN);
        assert_eq!(&ids[2..4], &[SEP1, SEP2]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::from_chars("ab".chars());
        assert_eq!(encode("ab", &v, 4, true), vec![6, 7, PAD, PAD]);
        assert_eq!(encode("azb", &v, 4, false), vec![6, UNK, 7]);
        let long = "a".repeat(80);
        assert_eq!(encode(&long, &v, TITLE_LEN, true).len(), 50);
    }

    #[test]
    fn title_encoding_wraps_within_budget() {
        let v = Vocab::from_chars("ab".chars());
        let ids = encode_title(&"ab".repeat(40), &v, TITLE_LEN);
        assert_eq!(ids.len(), 50);
        assert_eq!(ids[0], SOS);
        assert_eq!(ids[49], EOS);
        assert_eq!(encode_title("ab", &v, 6), vec![SOS, 6, 7, EOS, PAD, PAD]);
    }

    #[test]
    fn decode_examples() {
        let v = Vocab::from_chars("abc".chars());
        assert_eq!(decode(&encode("abc", &v, 10, true), &v).unwrap(), "abc");
        assert_eq!(decode(&[SOS, 6, EOS, PAD, PAD], &v).unwrap(), "[SOS]a[EOS]");
        assert!(matches!(
            decode(&[v.size() as TokenId], &v),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn split_examples() {
        let items: Vec<usize> = (0..100).collect();
        let (tr, va) = split_shuffled(&items, 0.9, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        let (tr2, va2) = split_shuffled(&items, 0.9, 7).unwrap();
        assert_eq!((&tr, &va), (&tr2, &va2));
        let (a, _) = split_indices(100, 0.9, 1).unwrap();
        let (b, _) = split_indices(100, 0.9, 2).unwrap();
        assert_ne!(a, b);
        assert!(split_indices(1, 0.9, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..300, ratio in 0.01f64..0.99, seed in any::<u64>()) {
            let (mut tr, va) = split_indices(n, ratio, seed).unwrap();
            prop_assert!(!tr.is_empty() && !va.is_empty());
            tr.extend(va);
            tr.sort_unstable();
            prop_assert_eq!(tr, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn formatted_lines_have_one_sos_and_eos(t in "[a-z]{1,200}", s in "[a-z]{0,200}", b in "[a-z]{0,800}") {
            let a = article(&t, &s, &b);
            let v = build_vocab(std::slice::from_ref(&a));
            let ids = format_article(&a, &v, LINE_LEN);
            prop_assert_eq!(ids.len(), 512);
            prop_assert_eq!(ids.iter().filter(|&&x| x == SOS).count(), 1);
            prop_assert_eq!(ids.iter().filter(|&&x| x == EOS).count(), 1);
        }
    }
}
