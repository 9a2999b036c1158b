//! Captioning and retrieval evaluation: consensus n-gram scoring (CIDEr),
//! recall at k, and mean average precision.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// One candidate caption with its reference set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionSet {
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CiderReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

const MAX_NGRAM: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, f64> {
    let mut counts = HashMap::new();
    if tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.join("\u{1f}")).or_insert(0.0) += 1.0;
    }
    counts
}

/// TF-IDF consensus score in [0,1]: for n = 1..4, cosine similarity between
/// the reference-clipped candidate vector and each reference vector
/// (components weighted by corpus idf = ln(images / max(1, df))), averaged
/// over references and then over n.
pub fn cider(corpus: &[CaptionSet]) -> Result<CiderReport> {
    if corpus.is_empty() {
        return Err(Error::Contract("cider needs at least one image".into()));
    }
    for set in corpus {
        if set.references.is_empty() {
            return Err(Error::Contract("every image needs at least one reference".into()));
        }
    }
    let num_images = corpus.len() as f64;

    // document frequency per n-gram: number of images whose reference set
    // contains it
    let mut df: Vec<HashMap<String, f64>> = vec![HashMap::new(); MAX_NGRAM];
    for set in corpus {
        for n in 1..=MAX_NGRAM {
            let mut seen: HashMap<String, ()> = HashMap::new();
            for r in &set.references {
                for gram in ngram_counts(&tokenize(r), n).into_keys() {
                    seen.entry(gram).or_insert(());
                }
            }
            for gram in seen.into_keys() {
                *df[n - 1].entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, gram: &str| -> f64 {
        let d = df[n - 1].get(gram).copied().unwrap_or(0.0).max(1.0);
        (num_images / d).ln()
    };

    let mut per_image = Vec::with_capacity(corpus.len());
    for set in corpus {
        let cand_tokens = tokenize(&set.candidate);
        let mut n_scores = Vec::with_capacity(MAX_NGRAM);
        for n in 1..=MAX_NGRAM {
            let cand = ngram_counts(&cand_tokens, n);
            let mut ref_sims = Vec::with_capacity(set.references.len());
            for r in &set.references {
                let refc = ngram_counts(&tokenize(r), n);
                // clip candidate counts against this reference
                let mut dot = 0.0;
                let mut cand_norm = 0.0;
                for (gram, &c) in &cand {
                    let w = idf(n, gram);
                    let clipped = c.min(refc.get(gram).copied().unwrap_or(0.0)) * w;
                    cand_norm += clipped * clipped;
                    dot += clipped * refc.get(gram).copied().unwrap_or(0.0) * w;
                }
                let mut ref_norm = 0.0;
                for (gram, &c) in &refc {
                    let v = c * idf(n, gram);
                    ref_norm += v * v;
                }
                let sim = if cand_norm > 0.0 && ref_norm > 0.0 {
                    dot / (cand_norm.sqrt() * ref_norm.sqrt())
                } else {
                    0.0
                };
                ref_sims.push(sim);
            }
            n_scores.push(ref_sims.iter().sum::<f64>() / ref_sims.len() as f64);
        }
        per_image.push(n_scores.iter().sum::<f64>() / MAX_NGRAM as f64);
    }
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderReport { per_image, mean })
}

/// Per-query 1-based ranks of the correct item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub ranks: Vec<usize>,
}

impl RankedRetrieval {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        if ranks.iter().any(|&r| r == 0) {
            return Err(Error::Contract("ranks are 1-based".into()));
        }
        Ok(RankedRetrieval { ranks })
    }
}

/// Fraction of queries whose correct item ranks within the top k.
pub fn recall_at_k(retrieval: &RankedRetrieval, k: usize) -> f64 {
    if retrieval.ranks.is_empty() {
        return 0.0;
    }
    let hits = retrieval.ranks.iter().filter(|&&r| r <= k).count();
    hits as f64 / retrieval.ranks.len() as f64
}

/// Average precision of one ranked relevance list (plain IR estimator:
/// mean over relevant items of precision at their rank). `None` when the
/// list has no positives.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        None
    } else {
        Some(acc / hits as f64)
    }
}

/// Unweighted mean of per-class average precision; classes without any
/// positive item are excluded with a warning on stderr.
pub fn mean_average_precision(per_class_relevance: &[Vec<bool>]) -> f64 {
    let mut aps = Vec::new();
    for (ci, rel) in per_class_relevance.iter().enumerate() {
        match average_precision(rel) {
            Some(ap) => aps.push(ap),
            None => eprintln!("warning: class {ci} has no positive items; excluded from mAP"),
        }
    }
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(candidate: &str, references: &[&str]) -> CaptionSet {
        CaptionSet {
            candidate: candidate.into(),
            references: references.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn identical_candidate_scores_one() {
        let corpus = vec![
            set(
                "a cracked beam blocks the tunnel",
                &["a cracked beam blocks the tunnel"],
            ),
            set(
                "dust fills the lower gallery",
                &["dust fills the lower gallery"],
            ),
        ];
        let report = cider(&corpus).unwrap();
        assert!((report.per_image[0] - 1.0).abs() < 1e-12);
        assert!((report.per_image[1] - 1.0).abs() < 1e-12);
        assert!((report.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let corpus = vec![
            set("entirely unrelated words here", &["a cracked beam blocks the tunnel"]),
            set("dust fills the gallery", &["dust fills the gallery"]),
        ];
        let report = cider(&corpus).unwrap();
        assert_eq!(report.per_image[0], 0.0);
    }

    #[test]
    fn empty_candidate_scores_zero_not_error() {
        let corpus = vec![
            set("", &["a cracked beam blocks the tunnel"]),
            set("other image", &["other image text content"]),
        ];
        let report = cider(&corpus).unwrap();
        assert_eq!(report.per_image[0], 0.0);
    }

    #[test]
    fn case_and_reference_order_invariance() {
        let refs_a = ["a miner walks out", "smoke hides the exit route"];
        let refs_b = ["smoke hides the exit route", "a miner walks out"];
        let other = set("water floods the shaft", &["water floods the shaft now"]);
        let a = cider(&[set("A Miner WALKS out", &refs_a), other.clone()]).unwrap();
        let b = cider(&[set("a miner walks out", &refs_b), other]).unwrap();
        assert!((a.per_image[0] - b.per_image[0]).abs() < 1e-12);
    }

    // Brute-force consensus scorer, written independently of the
    // implementation above: builds explicit n-gram vectors as sorted pairs
    // and computes cosines with plain loops.
    fn brute_force_cider(corpus: &[CaptionSet]) -> Vec<f64> {
        fn grams(words: &[String], n: usize) -> Vec<String> {
            if words.len() < n {
                return vec![];
            }
            (0..=words.len() - n)
                .map(|i| words[i..i + n].join(" "))
                .collect()
        }
        fn count(items: &[String]) -> Vec<(String, f64)> {
            let mut v: Vec<(String, f64)> = Vec::new();
            for it in items {
                match v.iter_mut().find(|(g, _)| g == it) {
                    Some((_, c)) => *c += 1.0,
                    None => v.push((it.clone(), 1.0)),
                }
            }
            v
        }
        let num_images = corpus.len() as f64;
        let mut scores = Vec::new();
        for target in corpus {
            let cand_words = tokenize(&target.candidate);
            let mut per_n = Vec::new();
            for n in 1..=4 {
                // document frequency from scratch
                let mut df: Vec<(String, f64)> = Vec::new();
                for img in corpus {
                    let mut grams_here: Vec<String> = Vec::new();
                    for r in &img.references {
                        for g in grams(&tokenize(r), n) {
                            if !grams_here.contains(&g) {
                                grams_here.push(g);
                            }
                        }
                    }
                    for g in grams_here {
                        match df.iter_mut().find(|(x, _)| *x == g) {
                            Some((_, c)) => *c += 1.0,
                            None => df.push((g, 1.0)),
                        }
                    }
                }
                let idf = |g: &str| {
                    let d = df
                        .iter()
                        .find(|(x, _)| x == g)
                        .map(|(_, c)| *c)
                        .unwrap_or(0.0)
                        .max(1.0);
                    (num_images / d).ln()
                };
                let cand = count(&grams(&cand_words, n));
                let mut sims = Vec::new();
                for r in &target.references {
                    let rc = count(&grams(&tokenize(r), n));
                    let ref_of = |g: &str| {
                        rc.iter().find(|(x, _)| x == g).map(|(_, c)| *c).unwrap_or(0.0)
                    };
                    let mut dot = 0.0;
                    let mut ca = 0.0;
                    for (g, c) in &cand {
                        let clipped = c.min(ref_of(g)) * idf(g);
                        dot += clipped * ref_of(g) * idf(g);
                        ca += clipped * clipped;
                    }
                    let mut rn = 0.0;
                    for (g, c) in &rc {
                        rn += (c * idf(g)) * (c * idf(g));
                    }
                    sims.push(if ca > 0.0 && rn > 0.0 {
                        dot / (ca.sqrt() * rn.sqrt())
                    } else {
                        0.0
                    });
                }
                per_n.push(sims.iter().sum::<f64>() / sims.len() as f64);
            }
            scores.push(per_n.iter().sum::<f64>() / 4.0);
        }
        scores
    }

    #[test]
    fn matches_brute_force_oracle_on_toy_corpus() {
        let corpus = vec![
            set(
                "a cracked beam blocks the tunnel exit",
                &[
                    "a cracked support beam blocks the tunnel",
                    "the tunnel exit is blocked by a beam",
                ],
            ),
            set(
                "dust fills the lower gallery",
                &["thick dust fills the lower gallery", "dust everywhere in the gallery"],
            ),
            set(
                "a miner walks toward the exit",
                &["a miner walks toward the lit exit", "someone walks to the exit"],
            ),
        ];
        let fast = cider(&corpus).unwrap();
        let slow = brute_force_cider(&corpus);
        for (a, b) in fast.per_image.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn recall_hand_counts() {
        let r = RankedRetrieval::new(vec![1, 2, 6, 11]).unwrap();
        assert_eq!(recall_at_k(&r, 5), 0.5);
        let ones = RankedRetrieval::new(vec![1, 1, 1]).unwrap();
        assert_eq!(recall_at_k(&ones, 1), 1.0);
        assert_eq!(recall_at_k(&r, 11), 1.0);
    }

    #[test]
    fn ranks_are_one_based() {
        assert!(RankedRetrieval::new(vec![0, 1]).is_err());
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true] as &[bool]), Some(1.0));
        let mut first_of_ten = vec![false; 10];
        first_of_ten[0] = true;
        assert_eq!(average_precision(&first_of_ten), Some(1.0));
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        // only the last of n relevant
        let n = 7;
        let mut last = vec![false; n];
        last[n - 1] = true;
        assert!((average_precision(&last).unwrap() - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn map_excludes_empty_classes_and_permutes() {
        let classes = vec![
            vec![true, false, true],
            vec![false, false],
            vec![true],
        ];
        let m = mean_average_precision(&classes);
        let expect = (5.0 / 6.0 + 1.0) / 2.0;
        assert!((m - expect).abs() < 1e-12);
        let permuted = vec![classes[2].clone(), classes[0].clone(), classes[1].clone()];
        assert!((mean_average_precision(&permuted) - m).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(ranks in proptest::collection::vec(1usize..50, 1..30)) {
            let r = RankedRetrieval::new(ranks.clone()).unwrap();
            let mut prev = 0.0;
            for k in 1..=50 {
                let v = recall_at_k(&r, k);
                prop_assert!(v >= prev);
                prev = v;
            }
            prop_assert_eq!(recall_at_k(&r, 50), 1.0);
        }

        #[test]
        fn map_stays_in_unit_interval(
            classes in proptest::collection::vec(
                proptest::collection::vec(proptest::bool::ANY, 1..12), 1..6)
        ) {
            let m = mean_average_precision(&classes);
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
