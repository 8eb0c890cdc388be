use dpicl_core::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full-matrix edit distance.
fn levenshtein_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let alphabet = ['a', 'b', 'c', 'd', ' ', 'é', 'Z'];
    let len = rng.random_range(0..16);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

#[test]
fn levenshtein_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (a, b) = (random_string(&mut rng), random_string(&mut rng));
        assert_eq!(levenshtein(&a, &b), levenshtein_oracle(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn hand_computed_values() {
    assert!((rouge_n("the cat sat", "the cat", 1) - 0.8).abs() < 1e-9);
    assert!((rouge_n("a b c", "a b c", 2) - 1.0).abs() < 1e-9);
    assert!((rouge_l("a b c d", "a x c d") - 0.75).abs() < 1e-9);
    assert!((bleu("the cat sat on the mat", "the cat sat on the mat") - 1.0).abs() < 1e-9);
    assert!(bleu("the the the", "the cat") < 0.34);
    assert!((anls("paris", "pariss", ANLS_THRESHOLD) - 5.0 / 6.0).abs() < 1e-9);
    assert_eq!(anls("abcd", "wxyz", ANLS_THRESHOLD), 0.0);
}

#[test]
fn brevity_penalty_applies_to_short_predictions() {
    // unigram precision 1, bigram precision 1, so only the penalty remains
    let b = bleu("the cat", "the cat sat on");
    assert!((b - (1.0f64 - 4.0 / 2.0).exp()).abs() < 1e-9, "{b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_are_bounded_and_anls_symmetric(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
        let v = MetricValues::score(&a, &b);
        for x in [v.exact_match, v.rouge1, v.rouge2, v.rouge_l, v.bleu, v.anls] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert_eq!(anls(&a, &b, ANLS_THRESHOLD), anls(&b, &a, ANLS_THRESHOLD));
    }

    #[test]
    fn identical_inputs_score_one(a in "[a-z]{1,6}( [a-z]{1,6}){0,5}") {
        let v = MetricValues::score(&a, &a);
        for x in [v.exact_match, v.rouge1, v.rouge2, v.rouge_l, v.bleu, v.anls] {
            prop_assert!((x - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn report_mean_is_arithmetic() {
    let pairs = [(1, "paris", "paris"), (2, "the cat", "the cat sat"), (3, "", "x")];
    let report = MetricReport::from_pairs(pairs);
    let mean_rouge1 = report.per_query.iter().map(|q| q.values.rouge1).sum::<f64>() / 3.0;
    assert!((report.mean.rouge1 - mean_rouge1).abs() < 1e-15);
    let json = serde_json::to_value(&report).unwrap();
    assert!(json["mean"]["rougeL"].is_number());
    assert_eq!(json["per_query"][0]["query_id"], 1);
}
