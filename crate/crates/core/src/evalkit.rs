//! Quality and diversity metrics for generated corpora.
//!
//! BLEU conventions: uniform weights over orders `1..=max_n`, counts clipped
//! by the largest count in any single reference sentence, brevity penalty
//! from the closest reference length (ties to the shorter), and a `1e-16`
//! floor on each precision inside the log. An order with no candidate
//! n-grams has precision 0. Scores are on a 0–100 scale.
//!
//! Uniqueness is over n-gram types. Against a reference corpus it is the
//! share of generated types absent from the reference; against the
//! generations themselves it is the share of types that occur exactly once.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_N: usize = 4;
pub const PRECISION_FLOOR: f64 = 1e-16;
pub const UNIQUENESS_ORDERS: [usize; 3] = [2, 3, 4];
pub const SELF_KEY: &str = "self";

fn ngram_counts<T: Hash + Eq>(sentence: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && sentence.len() >= n {
        for g in sentence.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Closest reference length to `c`; ties go to the shorter.
fn closest_length<'a>(c: usize, lengths: impl Iterator<Item = &'a usize>) -> usize {
    lengths
        .copied()
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Sufficient statistics of BLEU.
#[derive(Debug, Clone, PartialEq)]
struct BleuStats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            cand_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    fn score(&self) -> f64 {
        let max_n = self.matches.len() as f64;
        let log_precision: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| {
                let p = if t == 0 { 0.0 } else { m as f64 / t as f64 };
                p.max(PRECISION_FLOOR).ln() / max_n
            })
            .sum();
        let bp = if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len.max(1) as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * log_precision.exp()
    }
}

fn candidate_stats<T: Hash + Eq>(
    candidate: &[T],
    max_n: usize,
    ref_len: usize,
    clip: impl Fn(usize, &[T]) -> usize,
) -> BleuStats {
    let mut stats = BleuStats::new(max_n);
    for n in 1..=max_n {
        for (g, count) in ngram_counts(candidate, n) {
            stats.matches[n - 1] += count.min(clip(n, g));
            stats.totals[n - 1] += count;
        }
    }
    stats.cand_len = candidate.len();
    stats.ref_len = ref_len;
    stats
}

/// Per-order maximum count of every n-gram over a set of sentences.
fn max_counts<T: Hash + Eq>(sentences: &[Vec<T>], max_n: usize) -> Vec<HashMap<&[T], usize>> {
    (1..=max_n)
        .map(|n| {
            let mut best: HashMap<&[T], usize> = HashMap::new();
            for s in sentences {
                for (g, c) in ngram_counts(s, n) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            best
        })
        .collect()
}

/// Corpus-level BLEU of `candidates`, each scored against the whole
/// reference set.
pub fn corpus_bleu<T: Hash + Eq + Sync>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    if candidates.is_empty() || references.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max_n = max_n.max(1);
    let best = max_counts(references, max_n);
    let lengths: Vec<usize> = references.iter().map(Vec::len).collect::<HashSet<_>>().into_iter().collect();
    let parts: Vec<BleuStats> = candidates
        .par_iter()
        .map(|c| {
            let r = closest_length(c.len(), lengths.iter());
            candidate_stats(c, max_n, r, |n, g| best[n - 1].get(g).copied().unwrap_or(0))
        })
        .collect();
    let mut total = BleuStats::new(max_n);
    for p in &parts {
        total.add(p);
    }
    Ok(total.score())
}

/// BLEU of a single sentence against a set of references.
pub fn sentence_bleu<T: Hash + Eq>(candidate: &[T], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max_n = max_n.max(1);
    let best = max_counts(references, max_n);
    let lengths: Vec<usize> = references.iter().map(Vec::len).collect();
    let r = closest_length(candidate.len(), lengths.iter());
    Ok(candidate_stats(candidate, max_n, r, |n, g| best[n - 1].get(g).copied().unwrap_or(0)).score())
}

/// Top two `(count, sentence)` pairs for one n-gram.
#[derive(Clone, Copy, Default)]
struct TopTwo {
    first: (usize, usize),
    second: usize,
}

impl TopTwo {
    fn push(&mut self, count: usize, sentence: usize) {
        if count > self.first.0 {
            self.second = self.first.0;
            self.first = (count, sentence);
        } else if count > self.second {
            self.second = count;
        }
    }

    fn excluding(&self, sentence: usize) -> usize {
        if self.first.1 == sentence {
            self.second
        } else {
            self.first.0
        }
    }
}

/// Mean sentence-level BLEU of each sentence against all the others.
pub fn self_bleu<T: Hash + Eq + Sync>(corpus: &[Vec<T>], max_n: usize) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::TooFewSentences {
            needed: 2,
            found: corpus.len(),
        });
    }
    let max_n = max_n.max(1);
    let tops: Vec<HashMap<&[T], TopTwo>> = (1..=max_n)
        .map(|n| {
            let mut tops: HashMap<&[T], TopTwo> = HashMap::new();
            for (i, s) in corpus.iter().enumerate() {
                for (g, c) in ngram_counts(s, n) {
                    tops.entry(g).or_default().push(c, i);
                }
            }
            tops
        })
        .collect();
    let mut length_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in corpus {
        *length_counts.entry(s.len()).or_default() += 1;
    }
    let scores: Vec<f64> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let others = length_counts
                .iter()
                .filter(|&(&len, &count)| count > usize::from(len == s.len()))
                .map(|(len, _)| len);
            let r = closest_length(s.len(), others);
            candidate_stats(s, max_n, r, |n, g| tops[n - 1][g].excluding(i)).score()
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// What generated n-grams are compared against.
#[derive(Debug, Clone, Copy)]
pub enum NgramReference<'a, T> {
    /// Frequency-1 types within the generations.
    Generations,
    Corpus(&'a [Vec<T>]),
}

fn ngram_types<T: Hash + Eq>(corpus: &[Vec<T>], n: usize) -> HashMap<&[T], usize> {
    let mut types = HashMap::new();
    for s in corpus {
        for (g, c) in ngram_counts(s, n) {
            *types.entry(g).or_insert(0) += c;
        }
    }
    types
}

/// Percentage of generated n-gram types that are unique.
pub fn unique_ngram_pct<T: Hash + Eq>(
    generated: &[Vec<T>],
    reference: NgramReference<'_, T>,
    n: usize,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if n == 0 {
        return Err(Error::NoNgrams(0));
    }
    let types = ngram_types(generated, n);
    if types.is_empty() {
        return Err(Error::NoNgrams(n));
    }
    let unique = match reference {
        NgramReference::Generations => types.values().filter(|&&c| c == 1).count(),
        NgramReference::Corpus(refs) => {
            let seen = ngram_types(refs, n);
            types.keys().filter(|g| !seen.contains_key(*g)).count()
        }
    };
    Ok(100.0 * unique as f64 / types.len() as f64)
}

/// Mean over sentences of `exp(−mean per-token log-probability)`.
pub fn perplexity_from_logprobs(per_sentence: &[Vec<f64>]) -> Result<f64> {
    let scored: Vec<f64> = per_sentence
        .iter()
        .filter(|lp| !lp.is_empty())
        .map(|lp| (-lp.iter().sum::<f64>() / lp.len() as f64).exp())
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCount {
    pub sentences: usize,
    pub tokens: usize,
}

impl CorpusCount {
    fn of<T>(corpus: &[Vec<T>]) -> Self {
        Self {
            sentences: corpus.len(),
            tokens: corpus.iter().map(Vec::len).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub generations: CorpusCount,
    pub references: BTreeMap<String, CorpusCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub bleu_max_n: usize,
    pub bleu_weights: String,
    pub bleu_clipping: String,
    pub brevity_penalty: String,
    pub smoothing: String,
    pub uniqueness: String,
    pub tokenization: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            bleu_max_n: DEFAULT_MAX_N,
            bleu_weights: "uniform".into(),
            bleu_clipping: "max count over reference sentences".into(),
            brevity_penalty: "closest reference length, ties to shorter".into(),
            smoothing: format!("precision floor {PRECISION_FLOOR:e} inside log"),
            uniqueness: "n-gram types; self = frequency-1 types".into(),
            tokenization: "whitespace".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_bleu: BTreeMap<String, f64>,
    pub self_bleu: f64,
    /// Keyed by reference name or `"self"`, then by n.
    pub unique_ngrams: BTreeMap<String, BTreeMap<usize, f64>>,
    pub counts: ReportCounts,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perplexity: Option<f64>,
    pub conventions: Conventions,
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["self_bleu".to_string()];
        cols.extend(self.corpus_bleu.keys().map(|k| format!("bleu_{k}")));
        for (name, by_n) in &self.unique_ngrams {
            cols.extend(by_n.keys().map(|n| format!("unique_{name}_{n}")));
        }
        if self.perplexity.is_some() {
            cols.push("ppl".into());
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![format!("{:.4}", self.self_bleu)];
        vals.extend(self.corpus_bleu.values().map(|v| format!("{v:.4}")));
        for by_n in self.unique_ngrams.values() {
            vals.extend(by_n.values().map(|v| format!("{v:.4}")));
        }
        if let Some(p) = self.perplexity {
            vals.push(format!("{p:.4}"));
        }
        vals.join(",")
    }
}

/// Every metric for `generations` against each named reference corpus.
pub fn build_report<T: Hash + Eq + Sync>(
    generations: &[Vec<T>],
    references: &BTreeMap<String, Vec<Vec<T>>>,
) -> Result<EvalReport> {
    if references.contains_key(SELF_KEY) {
        return Err(Error::InvalidConfig(vec![format!(
            "reference name {SELF_KEY:?} is reserved"
        )]));
    }
    let mut corpus_bleu_scores = BTreeMap::new();
    let mut unique = BTreeMap::new();
    let mut own = BTreeMap::new();
    for n in UNIQUENESS_ORDERS {
        own.insert(n, unique_ngram_pct(generations, NgramReference::Generations, n)?);
    }
    unique.insert(SELF_KEY.to_string(), own);
    let mut ref_counts = BTreeMap::new();
    for (name, refs) in references {
        corpus_bleu_scores.insert(name.clone(), corpus_bleu(generations, refs, DEFAULT_MAX_N)?);
        let mut by_n = BTreeMap::new();
        for n in UNIQUENESS_ORDERS {
            by_n.insert(n, unique_ngram_pct(generations, NgramReference::Corpus(refs), n)?);
        }
        unique.insert(name.clone(), by_n);
        ref_counts.insert(name.clone(), CorpusCount::of(refs));
    }
    Ok(EvalReport {
        corpus_bleu: corpus_bleu_scores,
        self_bleu: self_bleu(generations, DEFAULT_MAX_N)?,
        unique_ngrams: unique,
        counts: ReportCounts {
            generations: CorpusCount::of(generations),
            references: ref_counts,
        },
        perplexity: None,
        conventions: Conventions::default(),
    })
}

/// Whitespace-tokenizes lines, optionally lowercasing.
pub fn tokenize_lines<S: AsRef<str>>(lines: &[S], lowercase: bool) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| {
            l.as_ref()
                .split_whitespace()
                .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
                .collect()
        })
        .filter(|s: &Vec<String>| !s.is_empty())
        .collect()
}
