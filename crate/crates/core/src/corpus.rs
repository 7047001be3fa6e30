//! Tokenization, sequence layout and the synthetic style-transfer corpora.
//!
//! A training instance is laid out as `condition ++ <sep> ++ target`, with
//! the target right-padded to a fixed length. Only the target region is ever
//! noised.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::verifier::WordVecTable;
use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const SEP: TokenId = 2;
pub const UNK: TokenId = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";
pub const SEP_TOKEN: &str = "<sep>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD_TOKEN, MASK_TOKEN, SEP_TOKEN, UNK_TOKEN];

/// True for ids that never surface in detokenized text.
pub fn is_special(id: TokenId) -> bool {
    id == PAD || id == MASK || id == SEP
}

/// Dense token vocabulary. Ids 0..4 are `<pad>`, `<mask>`, `<sep>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from words in the given order, skipping duplicates
    /// and reserved tokens.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            vocab.push(r);
        }
        for w in words {
            let w = w.as_ref();
            if !vocab.index.contains_key(w) {
                vocab.push(w);
            }
        }
        vocab
    }

    /// Vocabulary over every word in a corpus, sorted for stable ids.
    pub fn from_examples(examples: &[PairExample]) -> Self {
        let words: BTreeSet<&str> = examples
            .iter()
            .flat_map(|e| e.source.iter().chain(e.target.iter()))
            .map(String::as_str)
            .collect();
        Self::from_words(words)
    }

    fn push(&mut self, w: &str) {
        let id = self.tokens.len() as TokenId;
        self.tokens.push(w.to_string());
        self.index.insert(w.to_string(), id);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Reads a vocabulary file: one token per line, id = line index.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for line in reader.lines() {
            tokens.push(line?);
        }
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for (id, r) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*r) {
                return Err(parse_err(id + 1, format!("expected reserved token {r}")));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(parse_err(i + 1, format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(parse_err(i + 1, format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        crate::cli::write_atomic(path, out.as_bytes())
    }
}

/// Whitespace tokenization. Out-of-vocabulary words map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect()
}

/// Joins the non-special tokens of `ids` with single spaces.
pub fn detokenize(ids: &[TokenId], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::domain(format!("token id {id} outside vocabulary of {}", vocab.len())))?;
        if !is_special(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

/// A source sentence (condition) and its restyled target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl PairExample {
    pub fn new(source: &str, target: &str) -> Self {
        PairExample {
            source: source.split_whitespace().map(str::to_string).collect(),
            target: target.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn source_text(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target.join(" ")
    }
}

/// `condition ++ <sep> ++ target ++ <pad>*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSeq {
    pub tokens: Vec<TokenId>,
    /// Source length plus the separator.
    pub condition_len: usize,
    pub target_len: usize,
}

impl LayoutSeq {
    pub fn condition(&self) -> &[TokenId] {
        &self.tokens[..self.condition_len]
    }

    pub fn target(&self) -> &[TokenId] {
        &self.tokens[self.condition_len..]
    }
}

/// Condition region for a bare source sentence: its tokens followed by `<sep>`.
pub fn condition_tokens(source: &[TokenId]) -> Vec<TokenId> {
    let mut c = source.to_vec();
    c.push(SEP);
    c
}

pub fn layout(
    pair: &PairExample,
    vocab: &Vocab,
    max_source_len: usize,
    max_target_len: usize,
) -> Result<LayoutSeq> {
    if pair.source.is_empty() {
        return Err(Error::Empty("source"));
    }
    if pair.target.is_empty() {
        return Err(Error::Empty("target"));
    }
    if pair.source.len() > max_source_len {
        return Err(Error::TooLong {
            what: "source",
            len: pair.source.len(),
            max: max_source_len,
        });
    }
    if pair.target.len() > max_target_len {
        return Err(Error::TooLong {
            what: "target",
            len: pair.target.len(),
            max: max_target_len,
        });
    }
    let lookup = |w: &String| vocab.id(w).unwrap_or(UNK);
    let mut tokens: Vec<TokenId> = pair.source.iter().map(lookup).collect();
    tokens.push(SEP);
    let condition_len = tokens.len();
    tokens.extend(pair.target.iter().map(lookup));
    tokens.resize(condition_len + max_target_len, PAD);
    Ok(LayoutSeq {
        tokens,
        condition_len,
        target_len: max_target_len,
    })
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PairExample>> {
    #[derive(Deserialize)]
    struct Line {
        source: String,
        target: String,
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(PairExample::new(&parsed.source, &parsed.target));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[PairExample]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    for e in examples {
        let obj = serde_json::json!({ "source": e.source_text(), "target": e.target_text() });
        serde_json::to_writer(&mut buf, &obj)?;
        buf.write_all(b"\n")?;
    }
    let bytes = buf.into_inner().map_err(|e| e.into_error())?;
    crate::cli::write_atomic(path, &bytes)
}

/// Rule-based style-transfer tasks whose targets are a known function of the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Substitute words through a fixed bijective dictionary.
    LexiconSwap,
    /// Delete marked modifier words.
    DropModifiers,
    /// Map lowercase words onto their uppercase counterparts.
    CaseStyle,
}

const SWAP_PAIRS: [(&str, &str); 16] = [
    ("big", "large"),
    ("small", "little"),
    ("quick", "fast"),
    ("happy", "glad"),
    ("begin", "start"),
    ("finish", "end"),
    ("buy", "purchase"),
    ("help", "assist"),
    ("show", "display"),
    ("smart", "clever"),
    ("angry", "mad"),
    ("easy", "simple"),
    ("near", "close"),
    ("rich", "wealthy"),
    ("sick", "ill"),
    ("shut", "close_up"),
];

const NEUTRAL: [&str; 12] = [
    "cat", "dog", "house", "tree", "car", "river", "city", "bird", "man", "woman", "child", "book",
];

const MODIFIERS: [&str; 6] = ["very", "quite", "really", "rather", "so", "too"];

const MIN_WORDS: usize = 3;
const MAX_WORDS: usize = 6;

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 3] = [
        SyntheticTask::LexiconSwap,
        SyntheticTask::DropModifiers,
        SyntheticTask::CaseStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::LexiconSwap => "lexicon_swap",
            SyntheticTask::DropModifiers => "drop_modifiers",
            SyntheticTask::CaseStyle => "case_style",
        }
    }

    /// Longest source sentence the generator emits.
    pub fn max_source_len(self) -> usize {
        MAX_WORDS
    }

    /// Longest target sentence the generator emits.
    pub fn max_target_len(self) -> usize {
        MAX_WORDS
    }

    fn source_words(self) -> Vec<String> {
        match self {
            SyntheticTask::LexiconSwap => SWAP_PAIRS
                .iter()
                .map(|p| p.0)
                .chain(NEUTRAL)
                .map(str::to_string)
                .collect(),
            SyntheticTask::DropModifiers => SWAP_PAIRS
                .iter()
                .map(|p| p.0)
                .chain(NEUTRAL)
                .chain(MODIFIERS)
                .map(str::to_string)
                .collect(),
            SyntheticTask::CaseStyle => SWAP_PAIRS
                .iter()
                .map(|p| p.0)
                .chain(NEUTRAL)
                .map(str::to_string)
                .collect(),
        }
    }

    /// Every word either side of the task can produce.
    pub fn vocab(self) -> Vocab {
        let mut words = self.source_words();
        let targets: Vec<String> = words.iter().filter_map(|w| self.map_word(w)).collect();
        words.extend(targets);
        Vocab::from_words(words)
    }

    /// Image of one source word under the rule; `None` means deleted.
    pub fn map_word(self, word: &str) -> Option<String> {
        match self {
            SyntheticTask::LexiconSwap => Some(
                SWAP_PAIRS
                    .iter()
                    .find(|p| p.0 == word)
                    .map_or(word, |p| p.1)
                    .to_string(),
            ),
            SyntheticTask::DropModifiers => {
                if MODIFIERS.contains(&word) {
                    None
                } else {
                    Some(word.to_string())
                }
            }
            SyntheticTask::CaseStyle => Some(word.to_uppercase()),
        }
    }

    pub fn apply(self, source: &[String]) -> Vec<String> {
        source.iter().filter_map(|w| self.map_word(w)).collect()
    }

    /// Draws one source sentence.
    fn sample_source<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<String> {
        let len = rng.random_range(MIN_WORDS..=MAX_WORDS);
        let swaps: Vec<&str> = SWAP_PAIRS.iter().map(|p| p.0).collect();
        let mut words: Vec<String> = (0..len)
            .map(|_| {
                let pool: &[&str] = if rng.random_bool(0.5) { &swaps } else { &NEUTRAL };
                pool.choose(rng).unwrap().to_string()
            })
            .collect();
        if self == SyntheticTask::DropModifiers {
            // Overwrite a few positions with modifiers but keep one content word.
            let keep = rng.random_range(0..len);
            for (i, w) in words.iter_mut().enumerate() {
                if i != keep && rng.random_bool(0.3) {
                    *w = MODIFIERS.choose(rng).unwrap().to_string();
                }
            }
        }
        words
    }

    /// Word vectors in which a word and its rule image share a direction,
    /// playing the part of semantic embeddings for the verifier.
    pub fn wordvec_table<R: Rng + ?Sized>(self, dim: usize, noise: f64, rng: &mut R) -> WordVecTable {
        use rand_distr::{Distribution, StandardNormal};
        let mut table = WordVecTable::new(dim);
        for w in self.source_words() {
            let base: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let mut jitter = |v: &[f64]| -> Vec<f64> {
                v.iter()
                    .map(|x| {
                        let z: f64 = StandardNormal.sample(rng);
                        x + noise * z
                    })
                    .collect()
            };
            let src = jitter(&base);
            table.insert(&w, src);
            if let Some(img) = self.map_word(&w) {
                if img != w {
                    let tgt = jitter(&base);
                    table.insert(&img, tgt);
                }
            }
        }
        table
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

/// Deterministic-given-seed corpus of `size` pairs for the named task.
pub fn gen_synthetic_task<R: Rng + ?Sized>(
    task_name: &str,
    size: usize,
    rng: &mut R,
) -> Result<Vec<PairExample>> {
    let task: SyntheticTask = task_name.parse()?;
    if size == 0 {
        return Err(Error::Empty("synthetic corpus"));
    }
    Ok((0..size)
        .map(|_| {
            let source = task.sample_source(rng);
            let target = task.apply(&source);
            PairExample { source, target }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn ab_vocab() -> Vocab {
        Vocab::from_words(["a", "b"])
    }

    #[test]
    fn tokenize_looks_up_words() {
        let v = ab_vocab();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(tokenize("a b a", &v), vec![4, 5, 4]);
        assert_eq!(tokenize("", &v), Vec::<TokenId>::new());
        assert_eq!(tokenize("a zzz", &v), vec![4, UNK]);
    }

    #[test]
    fn detokenize_drops_specials() {
        let v = ab_vocab();
        assert_eq!(detokenize(&[4, 5, PAD], &v).unwrap(), "a b");
        assert_eq!(detokenize(&[PAD, PAD, PAD], &v).unwrap(), "");
        assert_eq!(detokenize(&[4, MASK, 5], &v).unwrap(), "a b");
        assert!(matches!(detokenize(&[4, 99], &v), Err(Error::Domain(_))));
    }

    #[test]
    fn layout_places_condition_first() {
        let v = Vocab::from_words(["w4", "w5", "w6", "w7", "w8", "w9"]);
        let pair = PairExample::new("w7", "w9");
        let l = layout(&pair, &v, 4, 3).unwrap();
        assert_eq!(l.tokens, vec![7, SEP, 9, PAD, PAD]);
        assert_eq!(l.condition_len, 2);
        assert_eq!(l.target_len, 3);

        let long = PairExample::new("w4 w5 w6", "w9");
        assert_eq!(layout(&long, &v, 4, 3).unwrap().condition_len, 4);
    }

    #[test]
    fn layout_rejects_bad_lengths() {
        let v = ab_vocab();
        let empty_target = PairExample {
            source: vec!["a".into()],
            target: vec![],
        };
        assert!(matches!(layout(&empty_target, &v, 4, 3), Err(Error::Empty("target"))));
        let long = PairExample::new("a", "a b a b");
        assert!(matches!(layout(&long, &v, 4, 3), Err(Error::TooLong { .. })));
    }

    #[test]
    fn synthetic_rules() {
        let t = SyntheticTask::LexiconSwap;
        let src: Vec<String> = vec!["big".into(), "cat".into()];
        assert_eq!(t.apply(&src), vec!["large", "cat"]);

        let t = SyntheticTask::DropModifiers;
        let src: Vec<String> = vec!["very".into(), "big".into(), "cat".into()];
        assert_eq!(t.apply(&src), vec!["big", "cat"]);

        assert_eq!(SyntheticTask::CaseStyle.map_word("cat").as_deref(), Some("CAT"));
        assert!(matches!("nope".parse::<SyntheticTask>(), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn synthetic_corpus_is_seeded_and_functional() {
        for task in SyntheticTask::ALL {
            let a = gen_synthetic_task(task.name(), 200, &mut seeded_rng(3)).unwrap();
            let b = gen_synthetic_task(task.name(), 200, &mut seeded_rng(3)).unwrap();
            assert_eq!(a, b);
            let vocab = task.vocab();
            for e in &a {
                assert!(!e.target.is_empty());
                assert!(e.source.len() <= task.max_source_len());
                assert!(e.target.len() <= task.max_target_len());
                assert_eq!(task.apply(&e.source), e.target);
                assert!(e.source.iter().chain(&e.target).all(|w| vocab.id(w).is_some()));
            }
        }
        assert!(gen_synthetic_task("lexicon_swap", 0, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = vec![PairExample::new("big cat", "large cat"), PairExample::new("a", "b c")];
        write_jsonl(&path, &data).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), data);

        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl(&path).unwrap().is_empty());

        std::fs::write(&path, "{\"source\":\"a\",\"target\":\"b\"}\n{\"source\":\"a\"}\n").unwrap();
        match read_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = SyntheticTask::LexiconSwap.vocab();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    proptest::proptest! {
        #[test]
        fn tokenize_inverts_detokenize(ids in proptest::collection::vec(4u32..20, 0..12)) {
            let v = Vocab::from_words((4..20).map(|i| format!("w{i}")));
            let text = detokenize(&ids, &v).unwrap();
            proptest::prop_assert_eq!(tokenize(&text, &v), ids);
        }
    }
}
