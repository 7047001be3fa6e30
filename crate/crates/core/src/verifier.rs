//! Sentence embedding providers and the cosine reward used to score
//! candidates against the input sentence.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Cosine similarity; 0 when either vector has (near) zero norm.
pub fn cosine_reward(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Static word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVecTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVecTable {
    pub fn new(dim: usize) -> Self {
        WordVecTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// Panics if `vector` has the wrong dimension.
    pub fn insert(&mut self, word: &str, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "word vector dimension");
        self.vectors.insert(word.to_string(), vector);
    }

    /// Writes the `word v1 ... vd` text format, words sorted.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut words: Vec<&String> = self.vectors.keys().collect();
        words.sort();
        let mut out = String::new();
        for w in words {
            out.push_str(w);
            for v in &self.vectors[w] {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        crate::cli::write_atomic(path, out.as_bytes())
    }
}

/// Parses `word v1 v2 ... vd` lines. The first line fixes `d`.
pub fn load_wordvec_table(path: &Path) -> Result<WordVecTable> {
    let reader = BufReader::new(File::open(path)?);
    let mut table: Option<WordVecTable> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let table = table.get_or_insert_with(|| WordVecTable::new(values.len()));
        if values.is_empty() || values.len() != table.dim {
            return Err(err(format!("expected {} values, found {}", table.dim, values.len())));
        }
        if table.vectors.contains_key(word) {
            log::warn!("{}:{}: duplicate word {word:?}, keeping the later vector", path.display(), i + 1);
        }
        table.insert(word, values);
    }
    table.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "empty word-vector file; dimension undeterminable".into(),
    })
}

/// Mean of the vectors of covered words; zero vector if none are covered.
pub fn avg_wordvec_embed(sentence: &str, table: &WordVecTable) -> EmbeddingVector {
    let mut acc = vec![0.0; table.dim];
    let mut n = 0usize;
    for w in sentence.split_whitespace() {
        if let Some(v) = table.get(w) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            n += 1;
        }
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    EmbeddingVector(acc)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hashed_word_vector(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ seed.rotate_left(17));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Bag of pseudo-random unit vectors keyed by token text.
pub fn hashed_embed(sentence: &str, dim: usize, seed: u64) -> EmbeddingVector {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for w in sentence.split_whitespace() {
        for (a, x) in acc.iter_mut().zip(hashed_word_vector(w, dim, seed)) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    EmbeddingVector(acc)
}

/// A sentence embedding provider.
pub trait Embedder: Sync {
    /// Embeddings in input order.
    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, sentence: &str) -> Result<EmbeddingVector> {
        let mut v = self.embed_batch(&[sentence.to_string()])?;
        v.pop().ok_or_else(|| Error::Protocol("no embedding returned".into()))
    }
}

pub struct WordVecEmbedder(pub WordVecTable);

impl Embedder for WordVecEmbedder {
    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(sentences.iter().map(|s| avg_wordvec_embed(s, &self.0)).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for HashedEmbedder {
    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(sentences.iter().map(|s| hashed_embed(s, self.dim, self.seed)).collect())
    }
}

/// Embeds every sentence to the same vector.
#[derive(Debug, Clone)]
pub struct ConstantEmbedder(pub EmbeddingVector);

impl Embedder for ConstantEmbedder {
    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(vec![self.0.clone(); sentences.len()])
    }
}

/// Client for `POST <endpoint>/embed` with body `{"sentences": [...]}`,
/// answered by `{"embeddings": [[...], ...]}`.
///
/// Connection failures and 5xx responses are retried with exponential
/// backoff; 4xx responses fail immediately.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    pub max_retries: usize,
    pub backoff: Duration,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    sentences: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

enum Attempt {
    Transient(String),
    Fatal(Error),
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str) -> Self {
        RemoteEmbedder {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            max_retries: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/embed", self.endpoint)
    }

    fn attempt(&self, agent: &ureq::Agent, sentences: &[String]) -> std::result::Result<Vec<Vec<f64>>, Attempt> {
        let mut resp = agent
            .post(&self.url())
            .send_json(EmbedRequest { sentences })
            .map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Attempt::Transient(format!("HTTP {status}")));
        }
        if status != 200 {
            return Err(Attempt::Fatal(Error::Remote {
                attempts: 1,
                msg: format!("HTTP {status}"),
            }));
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("bad response body: {e}"))))?;
        Ok(body.embeddings)
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut delay = self.backoff;
        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            match self.attempt(&agent, sentences) {
                Ok(v) => break v,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => {
                    if attempts > self.max_retries {
                        return Err(Error::Remote { attempts, msg });
                    }
                    log::warn!("embedding request failed ({msg}); retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        };
        if raw.len() != sentences.len() {
            return Err(Error::Protocol(format!(
                "{} embeddings for {} sentences",
                raw.len(),
                sentences.len()
            )));
        }
        if let Some(first) = raw.first() {
            let d = first.len();
            if d == 0 || raw.iter().any(|v| v.len() != d) {
                return Err(Error::Protocol("embeddings have inconsistent dimensions".into()));
            }
        }
        Ok(raw.into_iter().map(EmbeddingVector).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector(v.to_vec())
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_reward(&ev(&[0.3, -2.0]), &ev(&[0.3, -2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_reward(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let r = cosine_reward(&ev(&[1.0, 0.0]), &ev(&[1.0, 1.0])).unwrap();
        assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(cosine_reward(&ev(&[0.0, 0.0]), &ev(&[1.0, 1.0])).unwrap(), 0.0);
        assert!(cosine_reward(&ev(&[1.0]), &ev(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn averaging() {
        let mut t = WordVecTable::new(2);
        t.insert("a", vec![1.0, 0.0]);
        t.insert("b", vec![0.0, 1.0]);
        assert_eq!(avg_wordvec_embed("a", &t), ev(&[1.0, 0.0]));
        assert_eq!(avg_wordvec_embed("a b", &t), ev(&[0.5, 0.5]));
        assert_eq!(avg_wordvec_embed("a zz b", &t), ev(&[0.5, 0.5]));
        assert_eq!(avg_wordvec_embed("x y", &t), ev(&[0.0, 0.0]));
        assert_eq!(avg_wordvec_embed("b a", &t), avg_wordvec_embed("a b a b", &t));
    }

    #[test]
    fn hashed_is_a_deterministic_bag() {
        let a = hashed_embed("the big cat", 16, 7);
        assert_eq!(a, hashed_embed("the big cat", 16, 7));
        let b = hashed_embed("cat the big", 16, 7);
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(hashed_embed("", 16, 7), EmbeddingVector::zeros(16));
        assert_ne!(a, hashed_embed("the big cat", 16, 8));
    }

    #[test]
    fn wordvec_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "a 1 0\nb 0 1\n").unwrap();
        let t = load_wordvec_table(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("b"), Some(&[0.0, 1.0][..]));

        std::fs::write(&p, "a 1 0\nb 0\n").unwrap();
        match load_wordvec_table(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        std::fs::write(&p, "").unwrap();
        assert!(load_wordvec_table(&p).is_err());

        std::fs::write(&p, "a 1 0\na 0 1\n").unwrap();
        assert_eq!(load_wordvec_table(&p).unwrap().get("a"), Some(&[0.0, 1.0][..]));

        let mut t = WordVecTable::new(3);
        t.insert("x", vec![0.1, -2.5, 1e-300]);
        t.save(&p).unwrap();
        assert_eq!(load_wordvec_table(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_free(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            lambda in 0.01f64..100.0,
        ) {
            let (a, b) = (ev(&a), ev(&b));
            let r = cosine_reward(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - cosine_reward(&b, &a).unwrap()).abs() < 1e-12);
            let scaled = EmbeddingVector(a.0.iter().map(|x| x * lambda).collect());
            if a.norm() > 1e-6 {
                prop_assert!((r - cosine_reward(&scaled, &b).unwrap()).abs() < 1e-9);
            }
        }
    }
}
