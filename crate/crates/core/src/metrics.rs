//! Reference-based text metrics over token sequences, all on a 0..=100 scale.
//!
//! Scores are computed on whitespace tokens as produced by the tokenizer; no
//! detokenization or case folding happens here.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BLEU_MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
const SARI_MAX_N: usize = 4;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU with clipped n-gram precisions and no smoothing.
///
/// The maximum order is `max_n` clamped to the shortest candidate length.
/// The reference length for each candidate is the closest reference length,
/// shorter on ties.
pub fn bleu<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Empty("reference set"));
    }
    let shortest = candidates.iter().map(Vec::len).min().unwrap_or(0);
    let n_max = max_n.min(shortest).max(1);
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=n_max {
            let cc = ngram_counts(cand, n);
            let mut max_ref: HashMap<&Vec<T>, usize> = HashMap::new();
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for rc in &ref_counts {
                for (g, &k) in rc {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, &k) in &cc {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n_max as f64;
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    Ok(100.0 * bp * log_p.exp())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure against the best-scoring reference, times 100.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let best = references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rc = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max);
    Ok(100.0 * best)
}

/// Mean sentence ROUGE-L over a corpus.
pub fn corpus_rouge_l<T: Eq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// SARI components for one n-gram order, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SariComponents {
    pub keep_f1: f64,
    pub delete_precision: f64,
    pub add_f1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: f64, den: usize) -> f64 {
    if den > 0 {
        num / den as f64
    } else {
        0.0
    }
}

/// SARI statistics at order `n`.
///
/// Source and candidate counts are replicated once per reference so that
/// duplicate references leave the score unchanged. Empty categories score 0,
/// except that keep scores 1 when source, candidate and every reference are
/// the same sequence and it has no n-grams of this order.
pub fn sari_order<T: Eq + Hash + Clone>(source: &[T], candidate: &[T], references: &[Vec<T>], n: usize) -> SariComponents {
    let k = references.len();
    let s: HashMap<Vec<T>, usize> = ngram_counts(source, n).into_iter().map(|(g, c)| (g, c * k)).collect();
    let c: HashMap<Vec<T>, usize> = ngram_counts(candidate, n).into_iter().map(|(g, x)| (g, x * k)).collect();
    let mut r: HashMap<Vec<T>, usize> = HashMap::new();
    for rf in references {
        for (g, x) in ngram_counts(rf, n) {
            *r.entry(g).or_insert(0) += x;
        }
    }
    let identical = source == candidate && references.iter().all(|r| r.as_slice() == source);
    if identical && s.is_empty() {
        return SariComponents {
            keep_f1: 1.0,
            delete_precision: 0.0,
            add_f1: 0.0,
        };
    }
    let get = |m: &HashMap<Vec<T>, usize>, g: &Vec<T>| m.get(g).copied().unwrap_or(0);

    // keep
    let mut keep_p = 0.0;
    let mut keep_n = 0;
    let mut keep_r = 0.0;
    let mut keep_all_n = 0;
    for (g, &sc) in &s {
        let rc = get(&r, g);
        let all = sc.min(rc);
        let kept = sc.min(get(&c, g));
        if kept > 0 {
            keep_n += 1;
            let good = kept.min(rc) as f64;
            keep_p += good / kept as f64;
            if all > 0 {
                keep_r += good / all as f64;
            }
        }
        if all > 0 {
            keep_all_n += 1;
        }
    }
    let keep_f1 = f1(ratio(keep_p, keep_n), ratio(keep_r, keep_all_n));

    // delete
    let mut del_p = 0.0;
    let mut del_n = 0;
    for (g, &sc) in &s {
        let deleted = sc.saturating_sub(get(&c, g));
        if deleted > 0 {
            del_n += 1;
            let good = deleted.saturating_sub(get(&r, g));
            del_p += good as f64 / deleted as f64;
        }
    }
    let delete_precision = ratio(del_p, del_n);

    // add, on n-gram sets
    let added: HashSet<&Vec<T>> = c.keys().filter(|g| !s.contains_key(*g)).collect();
    let addable: HashSet<&Vec<T>> = r.keys().filter(|g| !s.contains_key(*g)).collect();
    let good = added.intersection(&addable).count() as f64;
    let add_f1 = f1(ratio(good, added.len()), ratio(good, addable.len()));

    SariComponents {
        keep_f1,
        delete_precision,
        add_f1,
    }
}

/// Sentence SARI times 100.
pub fn sari_sentence<T: Eq + Hash + Clone>(source: &[T], candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let (mut keep, mut del, mut add) = (0.0, 0.0, 0.0);
    for n in 1..=SARI_MAX_N {
        let c = sari_order(source, candidate, references, n);
        keep += c.keep_f1;
        del += c.delete_precision;
        add += c.add_f1;
    }
    let m = SARI_MAX_N as f64;
    Ok(100.0 * (keep / m + del / m + add / m) / 3.0)
}

/// Mean sentence SARI over aligned triples.
pub fn sari<T: Eq + Hash + Clone>(sources: &[Vec<T>], candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if sources.len() != candidates.len() {
        return Err(Error::shape(sources.len(), candidates.len()));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let mut sum = 0.0;
    for ((s, c), r) in sources.iter().zip(candidates).zip(references) {
        sum += sari_sentence(s, c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// Percentage of candidates equal to at least one of their references.
pub fn exact_match<T: Eq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let hits = candidates
        .iter()
        .zip(references)
        .filter(|(c, rs)| rs.iter().any(|r| r == *c))
        .count();
    Ok(100.0 * hits as f64 / candidates.len() as f64)
}

/// All metrics for one run. SARI is included only when sources are given.
pub fn evaluate_run(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    sources: Option<&[Vec<String>]>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    out.insert("bleu".to_string(), bleu(candidates, references, BLEU_MAX_N)?);
    out.insert("rouge_l".to_string(), corpus_rouge_l(candidates, references)?);
    out.insert("exact_match".to_string(), exact_match(candidates, references)?);
    if let Some(src) = sources {
        out.insert("sari".to_string(), sari(src, candidates, references)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

/// Mean and sample standard deviation; a single run has std 0.
pub fn aggregate_runs(runs: &[f64]) -> Result<MetricSummary> {
    if runs.is_empty() {
        return Err(Error::Empty("run list"));
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let std = if runs.len() > 1 {
        (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(MetricSummary {
        mean,
        std,
        runs: runs.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl EvalReport {
    /// Aggregates per-run metric maps; every run must report the same metrics.
    pub fn from_runs(runs: &[BTreeMap<String, f64>]) -> Result<Self> {
        let first = runs.first().ok_or(Error::Empty("run list"))?;
        let mut metrics = BTreeMap::new();
        for name in first.keys() {
            let values = runs
                .iter()
                .map(|r| {
                    r.get(name)
                        .copied()
                        .ok_or_else(|| Error::contract(format!("metric `{name}` missing from a run")))
                })
                .collect::<Result<Vec<_>>>()?;
            metrics.insert(name.clone(), aggregate_runs(&values)?);
        }
        Ok(EvalReport { metrics })
    }

    pub fn run_count(&self) -> usize {
        self.metrics.values().next().map_or(0, |m| m.runs.len())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "# scores on tokenized text, {} run(s)", self.run_count());
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}", "metric", "mean", "std");
        for (name, m) in &self.metrics {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>9.4}", name, m.mean, m.std);
        }
        s
    }
}
