//! Private aggregation of shard outputs.
//!
//! Classification votes go through Gaussian report-noisy-max. Free-text
//! answers are reduced to a token histogram (one count per response a token
//! appears in), then FindBestK privately picks how many tokens to release
//! and TopKwithPTR decides whether the exact top-k may be released at all.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

pub const DEFAULT_K_MIN: usize = 15;
pub const DEFAULT_K_MAX: usize = 30;

/// Gap threshold above which the top-k set is identical on all neighbors.
pub const PTR_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn invalid(msg: impl Into<String>) -> MechanismError {
    MechanismError::InvalidParameter(msg.into())
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Tokenizer

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did", "do",
    "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he",
    "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she", "should", "so", "some",
    "such", "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this",
    "those", "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where",
    "which", "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself", "yourselves",
];

/// Lowercases, splits on runs of non-alphanumeric characters and optionally
/// drops English stopwords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub remove_stopwords: bool,
}

impl Tokenizer {
    /// Keyword aggregation drops stopwords.
    pub const KEYWORDS: Tokenizer = Tokenizer { remove_stopwords: true };
    /// Metrics keep the surface text.
    pub const SURFACE: Tokenizer = Tokenizer { remove_stopwords: false };

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .filter(|t| !(self.remove_stopwords && STOPWORDS.binary_search(&t.as_str()).is_ok()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Votes

/// Shard votes per class, in class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteHistogram {
    pub labels: Vec<String>,
    pub counts: Vec<u64>,
    /// Votes outside the class set, which were dropped.
    pub dropped: usize,
}

impl VoteHistogram {
    pub fn count(&self, label: &str) -> Option<u64> {
        self.labels.iter().position(|l| l == label).map(|i| self.counts[i])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Counts shard votes per class; votes outside `classes` are dropped.
pub fn build_vote_histogram<S: AsRef<str>>(shard_labels: &[Option<S>], classes: &[String]) -> VoteHistogram {
    let mut counts = vec![0u64; classes.len()];
    let mut dropped = 0;
    for label in shard_labels {
        match label.as_ref().and_then(|l| classes.iter().position(|c| c == l.as_ref())) {
            Some(i) => counts[i] += 1,
            None => dropped += 1,
        }
    }
    VoteHistogram { labels: classes.to_vec(), counts, dropped }
}

/// Gaussian report-noisy-max: index of the largest `count + N(0, sigma²)`.
pub fn rnm_gaussian(hist: &VoteHistogram, sigma: f64, seed: u64) -> Result<usize, MechanismError> {
    rnm_gaussian_with(&hist.counts, sigma, &mut rng_for(seed))
}

pub fn rnm_gaussian_with<R: Rng>(counts: &[u64], sigma: f64, rng: &mut R) -> Result<usize, MechanismError> {
    if counts.is_empty() {
        return Err(invalid("vote histogram has no classes"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &c) in counts.iter().enumerate() {
        let noisy = c as f64 + if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        if noisy > best.1 {
            best = (i, noisy);
        }
    }
    Ok(best.0)
}

// ---------------------------------------------------------------------------
// Tokens

/// Number of responses each token appears in.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenHistogram {
    pub counts: BTreeMap<String, u64>,
    pub num_responses: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapStatistic {
    pub k: usize,
    pub d_k: u64,
}

impl TokenHistogram {
    /// Tokens by descending count, ties in lexicographic order.
    pub fn ranked(&self) -> Vec<(&str, u64)> {
        let mut ranked: Vec<(&str, u64)> = self.counts.iter().map(|(t, &c)| (t.as_str(), c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked
    }

    fn sorted_counts(&self) -> Vec<u64> {
        let mut counts: Vec<u64> = self.counts.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        counts
    }

    /// `H(k) - H(k+1)` on the sorted counts, with `H(j) = 0` past the vocabulary.
    pub fn gap(&self, k: usize) -> GapStatistic {
        gap_of(&self.sorted_counts(), k)
    }

    pub fn top_tokens(&self, k: usize) -> Vec<String> {
        self.ranked().into_iter().take(k).map(|(t, _)| t.to_string()).collect()
    }
}

fn gap_of(sorted: &[u64], k: usize) -> GapStatistic {
    let at = |rank: usize| rank.checked_sub(1).and_then(|i| sorted.get(i)).copied().unwrap_or(0);
    GapStatistic { k, d_k: at(k) - at(k + 1) }
}

pub fn build_token_histogram<S: AsRef<str>>(responses: &[S], tokenizer: Tokenizer) -> TokenHistogram {
    let mut counts = BTreeMap::new();
    for response in responses {
        let tokens: BTreeSet<String> = tokenizer.tokenize(response.as_ref()).into_iter().collect();
        for token in tokens {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    TokenHistogram { counts, num_responses: responses.len() }
}

fn gumbel<R: Rng>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -scale * (-u.ln()).ln()
}

/// Exponential-mechanism choice of `k` in `[k_min, k_max]` with utility `d_k`,
/// via the Gumbel-max trick with scale `4 / epsilon_em`.
pub fn find_best_k(
    hist: &TokenHistogram,
    epsilon_em: f64,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<usize, MechanismError> {
    find_best_k_with(hist, epsilon_em, k_min, k_max, &mut rng_for(seed))
}

pub fn find_best_k_with<R: Rng>(
    hist: &TokenHistogram,
    epsilon_em: f64,
    k_min: usize,
    k_max: usize,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    if !(epsilon_em > 0.0) {
        return Err(invalid(format!("epsilon_em must be > 0, got {epsilon_em}")));
    }
    if k_min < 1 || k_min > k_max {
        return Err(invalid(format!("invalid k range [{k_min}, {k_max}]")));
    }
    let scale = 4.0 / epsilon_em;
    let sorted = hist.sorted_counts();
    let mut best = (k_min, f64::NEG_INFINITY);
    for k in k_min..=k_max {
        let noise = if scale > 0.0 { gumbel(scale, rng) } else { 0.0 };
        let score = gap_of(&sorted, k).d_k as f64 + noise;
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "tokens", rename_all = "snake_case")]
pub enum KeywordRelease {
    Released(Vec<String>),
    Fallback,
}

/// Propose-test-release for the exact top-k tokens.
///
/// The test statistic is `max(2, d_k) + N(0, (2σ)²) - Φ⁻¹(1 - δ; 0, 2σ)`;
/// the top-k is released iff it exceeds 2. When `d_k <= 2` this happens with
/// probability exactly `delta_i`.
pub fn top_k_with_ptr(
    hist: &TokenHistogram,
    k: usize,
    sigma: f64,
    delta_i: f64,
    seed: u64,
) -> Result<KeywordRelease, MechanismError> {
    top_k_with_ptr_with(hist, k, sigma, delta_i, &mut rng_for(seed))
}

pub fn top_k_with_ptr_with<R: Rng>(
    hist: &TokenHistogram,
    k: usize,
    sigma: f64,
    delta_i: f64,
    rng: &mut R,
) -> Result<KeywordRelease, MechanismError> {
    if k < 1 {
        return Err(invalid("k must be >= 1"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be finite and > 0, got {sigma}")));
    }
    if !(delta_i > 0.0 && delta_i < 1.0) {
        return Err(invalid(format!("delta_i must lie in (0, 1), got {delta_i}")));
    }
    let std = 2.0 * sigma;
    let d_k = hist.gap(k).d_k as f64;
    let noise = Normal::new(0.0, std).expect("validated sigma").sample(rng);
    let noisy_gap = d_k.max(PTR_THRESHOLD) + noise - gaussian_quantile(1.0 - delta_i, 0.0, std)?;
    if noisy_gap > PTR_THRESHOLD {
        Ok(KeywordRelease::Released(hist.top_tokens(k)))
    } else {
        Ok(KeywordRelease::Fallback)
    }
}

/// Inverse CDF of `N(mean, std²)` at `p`.
pub fn gaussian_quantile(p: f64, mean: f64, std: f64) -> Result<f64, MechanismError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("probability must lie in (0, 1), got {p}")));
    }
    if !(std > 0.0) {
        return Err(invalid(format!("standard deviation must be > 0, got {std}")));
    }
    Ok(mean - std * std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn stopwords_sorted_for_binary_search() {
        assert!(STOPWORDS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn vote_histograms() {
        let abc = classes(&["A", "B", "C"]);
        let h = build_vote_histogram(&[Some("A"), Some("A"), Some("B")], &abc);
        assert_eq!(h.counts, vec![2, 1, 0]);
        let empty: Vec<Option<&str>> = vec![];
        assert_eq!(build_vote_histogram(&empty, &abc).counts, vec![0, 0, 0]);
        let h = build_vote_histogram(&[Some("A"), Some("zebra"), None], &abc);
        assert_eq!(h.counts, vec![1, 0, 0]);
        assert_eq!(h.dropped, 2);
    }

    #[test]
    fn noiseless_rnm() {
        let h = build_vote_histogram(&[Some("A"); 5].iter().chain(&[Some("B"); 3]).copied().collect::<Vec<_>>(), &classes(&["A", "B"]));
        assert_eq!(rnm_gaussian(&h, 0.0, 1).unwrap(), 0);
        let empty = VoteHistogram { labels: vec![], counts: vec![], dropped: 0 };
        assert!(rnm_gaussian(&empty, 1.0, 1).is_err());
    }

    #[test]
    fn token_histograms() {
        let h = build_token_histogram(&["paris france", "paris"], Tokenizer::SURFACE);
        assert_eq!(h.counts, BTreeMap::from([("france".into(), 1), ("paris".into(), 2)]));
        let h = build_token_histogram(&["go go go"], Tokenizer::SURFACE);
        assert_eq!(h.counts, BTreeMap::from([("go".into(), 1)]));
        let h = build_token_histogram(&["The Answer!", "the answer"], Tokenizer::SURFACE);
        assert_eq!(h.counts, BTreeMap::from([("answer".into(), 2), ("the".into(), 2)]));
        let h = build_token_histogram(&["The Answer!", "the answer"], Tokenizer::KEYWORDS);
        assert_eq!(h.counts, BTreeMap::from([("answer".into(), 2)]));
        let h = build_token_histogram(&["", "!!"], Tokenizer::SURFACE);
        assert!(h.counts.is_empty());
    }

    #[test]
    fn gaps_past_vocabulary_are_zero() {
        let h = build_token_histogram(&["a1 b2", "a1"], Tokenizer::SURFACE);
        assert_eq!(h.gap(1).d_k, 1);
        assert_eq!(h.gap(2).d_k, 1);
        assert_eq!(h.gap(3).d_k, 0);
        assert_eq!(h.gap(30).d_k, 0);
    }

    #[test]
    fn noiseless_find_best_k() {
        // counts 5,5,2,2,2,1 → gaps d1=0 d2=3 d3=0 d4=0 d5=1 d6=1
        let responses = ["a b c d e f", "a b c d e", "a b c d e", "a b", "a b"];
        let h = build_token_histogram(&responses, Tokenizer::SURFACE);
        assert_eq!(find_best_k(&h, f64::INFINITY, 1, 6, 0).unwrap(), 2);
        assert_eq!(find_best_k(&h, f64::INFINITY, 3, 6, 0).unwrap(), 5);
        assert!(find_best_k(&h, 1.0, 4, 3, 0).is_err());
        assert!(find_best_k(&h, 0.0, 1, 3, 0).is_err());
    }

    #[test]
    fn ptr_releases_large_gaps_exactly() {
        let responses: Vec<String> = (0..1000).map(|i| format!("alpha beta noise{i}")).collect();
        let h = build_token_histogram(&responses, Tokenizer::SURFACE);
        assert_eq!(h.gap(2).d_k, 999);
        let release = top_k_with_ptr(&h, 2, 1.0, 0.05, 3).unwrap();
        assert_eq!(release, KeywordRelease::Released(vec!["alpha".into(), "beta".into()]));
        assert!(top_k_with_ptr(&h, 0, 1.0, 0.05, 3).is_err());
        assert!(top_k_with_ptr(&h, 2, 1.0, 1.0, 3).is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(gaussian_quantile(0.5, 3.0, 2.0).unwrap(), 3.0);
        assert!((gaussian_quantile(0.975, 0.0, 1.0).unwrap() - 1.959964).abs() < 1e-6);
        assert!(gaussian_quantile(0.0, 0.0, 1.0).is_err());
        assert!(gaussian_quantile(1.0, 0.0, 1.0).is_err());
    }
}
