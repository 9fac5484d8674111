//! Corpus BLEU and ROUGE-L.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hypotheses paired with one or more references each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredCorpus<T> {
    items: Vec<(Vec<T>, Vec<Vec<T>>)>,
}

impl<T: Eq + std::hash::Hash + Clone> ScoredCorpus<T> {
    pub fn new(items: Vec<(Vec<T>, Vec<Vec<T>>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("corpus is empty"));
        }
        if let Some(i) = items.iter().position(|(_, refs)| refs.is_empty()) {
            return Err(Error::invalid(format!("hypothesis {i} has no reference")));
        }
        Ok(ScoredCorpus { items })
    }

    /// One reference per hypothesis.
    pub fn single(hyps: Vec<Vec<T>>, refs: Vec<Vec<T>>) -> Result<Self> {
        if hyps.len() != refs.len() {
            return Err(Error::invalid(format!(
                "{} hypotheses but {} references",
                hyps.len(),
                refs.len()
            )));
        }
        Self::new(
            hyps.into_iter()
                .zip(refs)
                .map(|(h, r)| (h, vec![r]))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[(Vec<T>, Vec<Vec<T>>)] {
        &self.items
    }
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram total for one sentence.
fn clipped<T: Eq + std::hash::Hash>(hyp: &[T], refs: &[Vec<T>], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn brevity(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// Corpus-level BLEU over orders `1..=max_n`, unsmoothed.
pub fn bleu<T: Eq + std::hash::Hash + Clone>(
    corpus: &ScoredCorpus<T>,
    max_n: usize,
) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::invalid(format!(
            "max_n must be in 1..=4, got {max_n}"
        )));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, refs) in corpus.items() {
        for n in 1..=max_n {
            let (m, t) = clipped(hyp, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c += hyp.len();
        r += closest_ref_len(hyp.len(), refs);
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    Ok(brevity(c, r) * log_mean.exp())
}

/// Sentence BLEU with add-one smoothing on orders above one. Intended for
/// inspecting single outputs, not for reporting.
pub fn sentence_bleu_smoothed<T: Eq + std::hash::Hash>(
    hyp: &[T],
    refs: &[Vec<T>],
    max_n: usize,
) -> f64 {
    if hyp.is_empty() || refs.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped(hyp, refs, n);
        let p = if n == 1 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    brevity(hyp.len(), closest_ref_len(hyp.len(), refs)) * (log_sum / max_n as f64).exp()
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA_SQ: f64 = 1.2;

/// ROUGE-L of one hypothesis: best precision and best recall over the
/// references, combined with weight `beta_sq`.
pub fn rouge_l_sentence<T: PartialEq>(hyp: &[T], refs: &[Vec<T>], beta_sq: f64) -> f64 {
    let mut p_max: f64 = 0.0;
    let mut r_max: f64 = 0.0;
    for r in refs {
        let l = lcs_len(hyp, r) as f64;
        if !hyp.is_empty() {
            p_max = p_max.max(l / hyp.len() as f64);
        }
        if !r.is_empty() {
            r_max = r_max.max(l / r.len() as f64);
        }
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    (1.0 + beta_sq) * p_max * r_max / (r_max + beta_sq * p_max)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l<T: Eq + std::hash::Hash + Clone>(corpus: &ScoredCorpus<T>) -> f64 {
    corpus
        .items()
        .iter()
        .map(|(h, r)| rouge_l_sentence(h, r, ROUGE_BETA_SQ))
        .sum::<f64>()
        / corpus.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub corpus_size: usize,
}

impl MetricsReport {
    pub fn compute<T: Eq + std::hash::Hash + Clone>(corpus: &ScoredCorpus<T>) -> Result<Self> {
        Ok(MetricsReport {
            bleu_1: bleu(corpus, 1)?,
            bleu_2: bleu(corpus, 2)?,
            bleu_3: bleu(corpus, 3)?,
            bleu_4: bleu(corpus, 4)?,
            rouge_l: rouge_l(corpus),
            corpus_size: corpus.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn one(h: &str, r: &str) -> ScoredCorpus<String> {
        ScoredCorpus::single(vec![w(h)], vec![w(r)]).unwrap()
    }

    #[test]
    fn perfect_match_is_one() {
        let c = one("the cat sat on the mat", "the cat sat on the mat");
        for n in 1..=4 {
            assert_eq!(bleu(&c, n).unwrap(), 1.0);
        }
        assert_eq!(rouge_l(&c), 1.0);
    }

    #[test]
    fn missing_four_gram_zeroes_bleu4() {
        let c = one("a b c d", "a b c e");
        assert_eq!(bleu(&c, 4).unwrap(), 0.0);
        assert!((bleu(&c, 1).unwrap() - 0.75).abs() < 1e-12);
        let b3 = (0.75f64 * (2.0 / 3.0) * 0.5).powf(1.0 / 3.0);
        assert!((bleu(&c, 3).unwrap() - b3).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let c = one("a a a", "a b");
        assert!((bleu(&c, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let c =
            ScoredCorpus::new(vec![(w("a b"), vec![w("a b c d"), w("a b c d e f g")])]).unwrap();
        let expected = (1.0f64 - 4.0 / 2.0).exp();
        assert!((bleu(&c, 1).unwrap() - expected).abs() < 1e-12);
        // ties between equally close references go to the shorter one
        assert_eq!(closest_ref_len(3, &[w("a b"), w("a b c d")]), 2);
    }

    #[test]
    fn empty_hypothesis_contributes_nothing() {
        let c = ScoredCorpus::single(vec![w(""), w("a b")], vec![w("x"), w("a b")]).unwrap();
        let v = bleu(&c, 1).unwrap();
        assert!(v > 0.0 && v < 1.0);
        assert_eq!(bleu(&one("", "a"), 1).unwrap(), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&one("a b", "c d")), 0.0);
        assert!((rouge_l(&one("a b c", "a c b")) - 2.0 / 3.0).abs() < 1e-12);
        // P = 1, R = 1/2
        let f = (1.0 + 1.2) * 0.5 / (0.5 + 1.2);
        assert!((rouge_l(&one("a b", "a x b y")) - f).abs() < 1e-12);
    }

    #[test]
    fn higher_order_can_score_higher_on_mixed_lengths() {
        // a one-word miss adds a unigram but no bigram, so p2 > p1
        let c = ScoredCorpus::single(vec![w("x"), w("a b")], vec![w("y"), w("a b")]).unwrap();
        let b1 = bleu(&c, 1).unwrap();
        let b2 = bleu(&c, 2).unwrap();
        assert!((b1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((b2 - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(b2 > b1);
        let single = one("the cat sat on a mat", "the cat sat on the mat");
        let scores: Vec<f64> = (1..=4).map(|n| bleu(&single, n).unwrap()).collect();
        assert!(scores.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ScoredCorpus::<String>::new(vec![]).is_err());
        assert!(ScoredCorpus::new(vec![(w("a"), vec![])]).is_err());
        assert!(bleu(&one("a", "a"), 5).is_err());
        assert!(bleu(&one("a", "a"), 0).is_err());
    }

    #[test]
    fn smoothed_sentence_bleu() {
        let s = sentence_bleu_smoothed(&w("a b c d"), &[w("a b c e")], 4);
        let expected = (0.75f64 * (3.0 / 4.0) * (2.0 / 3.0) * (1.0 / 2.0)).powf(0.25);
        assert!((s - expected).abs() < 1e-12);
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| a[i])
                .collect();
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    proptest! {
        #[test]
        fn lcs_matches_enumeration(a in prop::collection::vec(0u8..4, 0..=8), b in prop::collection::vec(0u8..4, 0..=8)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn bleu_order_invariant_and_bounded(
            pairs in prop::collection::vec((prop::collection::vec(0u8..5, 1..8), prop::collection::vec(0u8..5, 1..8)), 1..6)
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let c = ScoredCorpus::single(h.clone(), r.clone()).unwrap();
            let mut hr: Vec<_> = h.into_iter().zip(r).collect();
            hr.reverse();
            let (h2, r2): (Vec<_>, Vec<_>) = hr.into_iter().unzip();
            let c2 = ScoredCorpus::single(h2, r2).unwrap();
            for n in 1..=4 {
                let b = bleu(&c, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&b));
                prop_assert!((b - bleu(&c2, n).unwrap()).abs() < 1e-12);
            }
            let rl = rouge_l(&c);
            prop_assert!((0.0..=1.0).contains(&rl));
        }
    }
}
