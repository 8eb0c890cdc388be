//! Answer-quality metrics: exact match, ROUGE-1/2/L, BLEU and ANLS.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::mechanisms::Tokenizer;

pub const ANLS_THRESHOLD: f64 = 0.5;
const BLEU_SMOOTHING: f64 = 1e-9;
const BLEU_MAX_ORDER: usize = 4;

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

fn tokens(s: &str) -> Vec<String> {
    Tokenizer::SURFACE.tokenize(s)
}

pub fn exact_match(prediction: &str, reference: &str) -> f64 {
    if fold(prediction) == fold(reference) {
        1.0
    } else {
        0.0
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap(pred: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    pred.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

fn f1(overlap: usize, pred_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_total as f64;
    let recall = overlap as f64 / ref_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Both-empty and one-empty conventions, shared by the ROUGE variants.
fn empty_convention(pred: &[String], reference: &[String]) -> Option<f64> {
    match (pred.is_empty(), reference.is_empty()) {
        (true, true) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        _ => None,
    }
}

/// ROUGE-N F1 over n-gram multisets.
pub fn rouge_n(prediction: &str, reference: &str, n: usize) -> f64 {
    let (p, r) = (tokens(prediction), tokens(reference));
    if let Some(v) = empty_convention(&p, &r) {
        return v;
    }
    let (pc, rc) = (ngram_counts(&p, n), ngram_counts(&r, n));
    let (pt, rt) = (p.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1));
    if pt == 0 || rt == 0 {
        // too short to contain an n-gram
        return if p == r { 1.0 } else { 0.0 };
    }
    f1(clipped_overlap(&pc, &rc), pt, rt)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over the longest common token subsequence.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let (p, r) = (tokens(prediction), tokens(reference));
    if let Some(v) = empty_convention(&p, &r) {
        return v;
    }
    f1(lcs_len(&p, &r), p.len(), r.len())
}

/// Sentence BLEU with clipped n-gram precisions up to order
/// `min(4, |prediction|)`, zero counts smoothed to 1e-9, and the brevity
/// penalty `exp(1 - r/c)` for short predictions.
pub fn bleu(prediction: &str, reference: &str) -> f64 {
    let (p, r) = (tokens(prediction), tokens(reference));
    if let Some(v) = empty_convention(&p, &r) {
        return v;
    }
    let max_order = BLEU_MAX_ORDER.min(p.len());
    let mut log_precision = 0.0;
    for n in 1..=max_order {
        let pc = ngram_counts(&p, n);
        let matched = clipped_overlap(&pc, &ngram_counts(&r, n)) as f64;
        let total = (p.len() - n + 1) as f64;
        log_precision += (matched.max(BLEU_SMOOTHING) / total).ln();
    }
    let geo_mean = (log_precision / max_order as f64).exp();
    let (c, rl) = (p.len() as f64, r.len() as f64);
    let brevity = if c < rl { (1.0 - rl / c).exp() } else { 1.0 };
    (geo_mean * brevity).clamp(0.0, 1.0)
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let next = (diag + usize::from(ca != cb)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Normalized Levenshtein similarity on case-folded strings, zeroed below
/// `threshold`.
pub fn anls(prediction: &str, reference: &str, threshold: f64) -> f64 {
    let (p, r) = (fold(prediction), fold(reference));
    let longest = p.chars().count().max(r.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let s = 1.0 - levenshtein(&p, &r) as f64 / longest as f64;
    if s >= threshold {
        s
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub exact_match: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
    pub anls: f64,
}

impl MetricValues {
    pub fn score(prediction: &str, reference: &str) -> Self {
        Self {
            exact_match: exact_match(prediction, reference),
            rouge1: rouge_n(prediction, reference, 1),
            rouge2: rouge_n(prediction, reference, 2),
            rouge_l: rouge_l(prediction, reference),
            bleu: bleu(prediction, reference),
            anls: anls(prediction, reference, ANLS_THRESHOLD),
        }
    }

    fn as_array(&self) -> [f64; 6] {
        [self.exact_match, self.rouge1, self.rouge2, self.rouge_l, self.bleu, self.anls]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub query_id: u64,
    #[serde(flatten)]
    pub values: MetricValues,
}

/// Per-query scores and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: Vec<ScoredQuery>,
    pub mean: MetricValues,
}

impl MetricReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (u64, &'a str, &'a str)>) -> Self {
        let per_query: Vec<ScoredQuery> = pairs
            .into_iter()
            .map(|(query_id, pred, reference)| ScoredQuery { query_id, values: MetricValues::score(pred, reference) })
            .collect();
        let mut sums = [0.0; 6];
        for q in &per_query {
            for (s, v) in sums.iter_mut().zip(q.values.as_array()) {
                *s += v;
            }
        }
        let n = per_query.len().max(1) as f64;
        let [exact_match, rouge1, rouge2, rouge_l, bleu, anls] = sums.map(|s| s / n);
        Self { per_query, mean: MetricValues { exact_match, rouge1, rouge2, rouge_l, bleu, anls } }
    }
}
