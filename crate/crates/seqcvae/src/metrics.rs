//! Accuracy and diversity metrics: BLEU-1..4, CIDEr, oracle best-1,
//! distinct fraction, novel-sentence count, mBleu-4, Div-n and unique
//! n-grams by position.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BLEU_EPS: f64 = 1e-9;

/// Shared tokenizer: lowercase, punctuation stripped, whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

/// Canonical string form used for distinctness and novelty checks.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU with modified n-gram precision, add-epsilon smoothing on zero
/// precisions and brevity penalty against the closest reference length.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &cand {
            let max_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        let p = if total == 0 || clipped == 0 {
            BLEU_EPS
        } else {
            clipped as f64 / total as f64
        };
        log_precision_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| {
            let d = (len as i64 - candidate.len() as i64).abs();
            (d, len)
        })
        .unwrap() as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_precision_sum / max_n as f64).exp())
}

/// Document-frequency statistics over a reference corpus. One "document"
/// is the reference set of one condition.
#[derive(Debug, Clone, Default)]
pub struct NgramStats {
    /// per n (1..=4): n-gram → number of documents containing it
    df: Vec<HashMap<Vec<String>, usize>>,
    pub num_documents: usize,
}

impl NgramStats {
    pub fn from_documents<D: AsRef<[Vec<String>]>>(documents: &[D]) -> Self {
        let mut df = vec![HashMap::new(); 4];
        for doc in documents {
            for n in 1..=4usize {
                let mut seen: HashSet<Vec<String>> = HashSet::new();
                for caption in doc.as_ref() {
                    if caption.len() >= n {
                        for w in caption.windows(n) {
                            seen.insert(w.to_vec());
                        }
                    }
                }
                for g in seen {
                    *df[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        NgramStats { df, num_documents: documents.len() }
    }

    pub fn is_empty(&self) -> bool {
        self.num_documents == 0
    }

    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1) as f64;
        (self.num_documents as f64 / df).ln()
    }

    fn tfidf_vector(&self, tokens: &[String], n: usize) -> HashMap<Vec<String>, f64> {
        let mut v = HashMap::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                *v.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        for (gram, val) in v.iter_mut() {
            *val *= self.idf(n, gram);
        }
        v
    }
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, x)| b.get(g).map(|y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: per-n TF-IDF cosine between candidate and each reference,
/// averaged over references and over n = 1..4, times 10.
pub fn cider(candidate: &[String], references: &[Vec<String>], stats: &NgramStats) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::EmptyStats);
    }
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for n in 1..=4usize {
        let cv = stats.tfidf_vector(candidate, n);
        let mut per_ref = 0.0;
        for r in references {
            let rv = stats.tfidf_vector(r, n);
            per_ref += cosine(&cv, &rv);
        }
        total += per_ref / references.len() as f64;
    }
    Ok(10.0 * total / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMetric {
    Bleu4,
    Cider,
}

/// Best-of-K selection against ground-truth references: returns the index
/// of the argmax candidate and its score.
pub fn oracle_best1(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    metric: OracleMetric,
    stats: &NgramStats,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::SetTooSmall { need: 1, got: 0 });
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, cand) in candidates.iter().enumerate() {
        let score = match metric {
            OracleMetric::Bleu4 => bleu(cand, references, 4)?,
            OracleMetric::Cider => cider(cand, references, stats)?,
        };
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best)
}

/// |unique normalized captions| / K.
pub fn distinct_fraction(captions: &[String]) -> f64 {
    assert!(!captions.is_empty());
    let unique: HashSet<String> = captions.iter().map(|c| normalize(c)).collect();
    unique.len() as f64 / captions.len() as f64
}

/// Deduplicated set of normalized training captions.
#[derive(Debug, Clone, Default)]
pub struct TrainingSentenceIndex {
    set: HashSet<String>,
}

impl TrainingSentenceIndex {
    pub fn build<'a>(captions: impl Iterator<Item = &'a str>) -> Self {
        TrainingSentenceIndex { set: captions.map(normalize).collect() }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn contains(&self, caption: &str) -> bool {
        self.set.contains(&normalize(caption))
    }
}

/// Count of captions never seen during training.
pub fn novel_count<'a>(
    captions: impl Iterator<Item = &'a str>,
    index: &TrainingSentenceIndex,
) -> usize {
    captions.filter(|c| !index.contains(c)).count()
}

/// Mean BLEU-4 of each caption against its K−1 siblings; lower means more
/// mutually diverse.
pub fn mbleu4(captions: &[Vec<String>]) -> Result<f64> {
    if captions.len() < 2 {
        return Err(Error::SetTooSmall { need: 2, got: captions.len() });
    }
    let mut total = 0.0;
    for (i, cand) in captions.iter().enumerate() {
        let refs: Vec<Vec<String>> = captions
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, c)| c.clone())
            .collect();
        total += bleu(cand, &refs, 4)?;
    }
    Ok(total / captions.len() as f64)
}

/// Distinct n-grams across the set divided by total words generated
/// (pre-deduplication).
pub fn div_n(captions: &[Vec<String>], n: usize) -> f64 {
    assert!(!captions.is_empty());
    let mut grams: HashSet<&[String]> = HashSet::new();
    let mut total_words = 0usize;
    for c in captions {
        total_words += c.len();
        if c.len() >= n {
            for w in c.windows(n) {
                grams.insert(w);
            }
        }
    }
    if total_words == 0 {
        0.0
    } else {
        grams.len() as f64 / total_words as f64
    }
}

/// For each word position t (1-based, position of an n-gram's last word),
/// the number of distinct n-grams ending there across all samples of all
/// conditions.
pub fn unique_ngrams_by_position(sample_sets: &[Vec<Vec<String>>], n: usize) -> Vec<usize> {
    let mut by_pos: Vec<HashSet<&[String]>> = Vec::new();
    for set in sample_sets {
        for caption in set {
            if caption.len() < n {
                continue;
            }
            for (start, w) in caption.windows(n).enumerate() {
                let end_pos = start + n; // 1-based position of last word
                if by_pos.len() < end_pos {
                    by_pos.resize_with(end_pos, HashSet::new);
                }
                by_pos[end_pos - 1].insert(w);
            }
        }
    }
    by_pos.into_iter().map(|s| s.len()).collect()
}

/// Evaluation report with the standard metric field names. Metrics that
/// need external resources are emitted as null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "B1")]
    pub b1: Option<f64>,
    #[serde(rename = "B2")]
    pub b2: Option<f64>,
    #[serde(rename = "B3")]
    pub b3: Option<f64>,
    #[serde(rename = "B4")]
    pub b4: Option<f64>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    #[serde(rename = "S")]
    pub s: Option<f64>,
    pub distinct_pct: f64,
    pub novel: usize,
    pub mbleu4: f64,
    pub div1: f64,
    pub div2: f64,
}
