//! Caption-quality metrics: BLEU, ROUGE-L, CIDEr, and an exact-match
//! METEOR variant.
//!
//! All four operate on pre-tokenized corpora and are pure functions of
//! their input. BLEU uses add-one smoothing on n-gram orders with zero
//! matches; the METEOR variant skips synonym and stemming stages entirely
//! (hence "meteor_lite" in every report).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("hypothesis {index} has no references")]
    NoReferences { index: usize },
    #[error("cider needs at least 2 documents for idf, got {got}")]
    CorpusTooSmall { got: usize },
    #[error("n-gram order {n} out of range 1..=4")]
    BadOrder { n: usize },
}

/// Hypotheses paired with one or more references each.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub entries: Vec<(Vec<String>, Vec<Vec<String>>)>,
}

/// Lowercase whitespace tokenization; the simulator vocabulary carries no
/// punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl Corpus {
    pub fn from_pairs(pairs: &[(&str, &[&str])]) -> Corpus {
        Corpus {
            entries: pairs
                .iter()
                .map(|(hyp, refs)| (tokenize(hyp), refs.iter().map(|r| tokenize(r)).collect()))
                .collect(),
        }
    }

    pub fn push(&mut self, hypothesis: Vec<String>, references: Vec<Vec<String>>) {
        self.entries.push((hypothesis, references));
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if self.entries.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        for (i, (_, refs)) in self.entries.iter().enumerate() {
            if refs.is_empty() {
                return Err(MetricsError::NoReferences { index: i });
            }
        }
        Ok(())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n: geometric mean of clipped modified n-gram
/// precisions for orders 1..=n, times the brevity penalty. Orders with zero
/// matches are add-one smoothed; an order with no candidate n-grams at all
/// scores the whole corpus 0.
pub fn bleu(corpus: &Corpus, n: usize) -> Result<f64, MetricsError> {
    corpus.validate()?;
    if !(1..=4).contains(&n) {
        return Err(MetricsError::BadOrder { n });
    }
    let mut log_precision_sum = 0.0;
    for order in 1..=n {
        let mut matched = 0u64;
        let mut total = 0u64;
        for (hyp, refs) in &corpus.entries {
            let hyp_counts = ngram_counts(hyp, order);
            // clip each candidate n-gram by its maximum count in any reference
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, order) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, &count) in &hyp_counts {
                total += count;
                matched += count.min(max_ref.get(gram).copied().unwrap_or(0));
            }
        }
        if total == 0 {
            return Ok(0.0);
        }
        let (matched, total) = if matched == 0 { (1, total + 1) } else { (matched, total) };
        log_precision_sum += (matched as f64 / total as f64).ln();
    }
    let hyp_len: usize = corpus.entries.iter().map(|(h, _)| h.len()).sum();
    let ref_len: usize = corpus
        .entries
        .iter()
        .map(|(h, refs)| {
            // closest reference length; ties favor the shorter
            refs.iter()
                .map(|r| r.len())
                .min_by_key(|&l| (l.abs_diff(h.len()), l))
                .unwrap()
        })
        .sum();
    let brevity = if hyp_len < ref_len && hyp_len > 0 {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(brevity * (log_precision_sum / n as f64).exp())
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

const ROUGE_BETA: f64 = 1.2;

/// Sentence-level LCS F-measure (β = 1.2, favoring recall), best reference
/// per hypothesis, averaged over the corpus.
pub fn rouge_l(corpus: &Corpus) -> Result<f64, MetricsError> {
    corpus.validate()?;
    let mut sum = 0.0;
    for (hyp, refs) in &corpus.entries {
        let mut best: f64 = 0.0;
        for r in refs {
            let lcs = lcs_len(hyp, r);
            if lcs == 0 || hyp.is_empty() || r.is_empty() {
                continue;
            }
            let p = lcs as f64 / hyp.len() as f64;
            let rec = lcs as f64 / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
        }
        sum += best;
    }
    Ok(sum / corpus.entries.len() as f64)
}

/// tf-idf vector over n-grams of one order: term frequency normalized by
/// the sentence's n-gram total, weighted by ln(N / df) with df counted over
/// the corpus's reference sets.
fn tfidf<'a>(
    tokens: &'a [String],
    n: usize,
    df: &HashMap<&[String], u64>,
    docs: f64,
) -> HashMap<&'a [String], f64> {
    let counts = ngram_counts(tokens, n);
    let total: u64 = counts.values().sum();
    if total == 0 {
        return HashMap::new();
    }
    counts
        .into_iter()
        .map(|(gram, c)| {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            (gram, c as f64 / total as f64 * (docs / d).ln())
        })
        .collect()
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: tf-idf n-gram cosine against each reference, averaged over
/// references and over orders 1..=4, scaled by 10.
pub fn cider(corpus: &Corpus) -> Result<f64, MetricsError> {
    corpus.validate()?;
    let docs = corpus.entries.len();
    if docs < 2 {
        return Err(MetricsError::CorpusTooSmall { got: docs });
    }
    let mut score = 0.0;
    for n in 1..=4 {
        // document frequency: number of reference sets containing the n-gram
        let mut df: HashMap<&[String], u64> = HashMap::new();
        for (_, refs) in &corpus.entries {
            let mut seen: Vec<&[String]> = Vec::new();
            for r in refs {
                for gram in ngram_counts(r, n).into_keys() {
                    if !seen.contains(&gram) {
                        seen.push(gram);
                        *df.entry(gram).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut order_sum = 0.0;
        for (hyp, refs) in &corpus.entries {
            let hv = tfidf(hyp, n, &df, docs as f64);
            let mut per_ref = 0.0;
            for r in refs {
                per_ref += cosine(&hv, &tfidf(r, n, &df, docs as f64));
            }
            order_sum += per_ref / refs.len() as f64;
        }
        score += order_sum / docs as f64;
    }
    Ok(10.0 * score / 4.0)
}

/// Exact-match alignment between hypothesis and reference: each hypothesis
/// token takes the reference occurrence right after the previous match when
/// possible (minimizing chunk breaks), otherwise the earliest unused one.
/// Returns (matches, chunks).
fn align(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for token in hyp {
        let next = prev.map(|p| p + 1).unwrap_or(usize::MAX);
        let pos = if next < reference.len() && !used[next] && &reference[next] == token {
            Some(next)
        } else {
            reference.iter().enumerate().position(|(i, t)| !used[i] && t == token)
        };
        if let Some(i) = pos {
            used[i] = true;
            matches += 1;
            if prev != Some(i.wrapping_sub(1)) {
                chunks += 1;
            }
            prev = Some(i);
        }
    }
    (matches, chunks)
}

/// Exact-match METEOR: recall-weighted harmonic mean 10PR/(R+9P) with
/// fragmentation penalty 0.5·(chunks/matches)³; best reference per
/// hypothesis, averaged over the corpus.
pub fn meteor_lite(corpus: &Corpus) -> Result<f64, MetricsError> {
    corpus.validate()?;
    let mut sum = 0.0;
    for (hyp, refs) in &corpus.entries {
        let mut best: f64 = 0.0;
        for r in refs {
            let (m, chunks) = align(hyp, r);
            if m == 0 {
                continue;
            }
            let p = m as f64 / hyp.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f = 10.0 * p * rec / (rec + 9.0 * p);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            best = best.max(f * (1.0 - penalty));
        }
        sum += best;
    }
    Ok(sum / corpus.entries.len() as f64)
}

/// All metrics for one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor_lite: f64,
}

pub fn full_report(corpus: &Corpus) -> Result<MetricReport, MetricsError> {
    Ok(MetricReport {
        bleu1: bleu(corpus, 1)?,
        bleu2: bleu(corpus, 2)?,
        bleu3: bleu(corpus, 3)?,
        bleu4: bleu(corpus, 4)?,
        rouge_l: rouge_l(corpus)?,
        cider: cider(corpus)?,
        meteor_lite: meteor_lite(corpus)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn identical_corpus_maxima() {
        let corpus = Corpus::from_pairs(&[
            ("the car stops", &["the car stops"]),
            ("the car slows down", &["the car slows down"]),
        ]);
        close(bleu(&corpus, 1).unwrap(), 1.0);
        close(bleu(&corpus, 4).unwrap(), 1.0);
        close(rouge_l(&corpus).unwrap(), 1.0);
        // 3-token and 4-token sentences: penalty 0.5/m^3 each
        let expected = ((1.0 - 0.5 / 27.0) + (1.0 - 0.5 / 64.0)) / 2.0;
        close(meteor_lite(&corpus).unwrap(), expected);
    }

    #[test]
    fn empty_corpus_rejected() {
        let corpus = Corpus::default();
        assert!(matches!(bleu(&corpus, 4), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(rouge_l(&corpus), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(cider(&corpus), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(meteor_lite(&corpus), Err(MetricsError::EmptyCorpus)));
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let corpus = Corpus::from_pairs(&[("", &["the car stops"])]);
        close(bleu(&corpus, 4).unwrap(), 0.0);
        close(rouge_l(&corpus).unwrap(), 0.0);
        close(meteor_lite(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        // "the the cat" vs "the cat": clipped matches = 2 of 3 candidates
        let corpus = Corpus::from_pairs(&[("the the cat", &["the cat"])]);
        // brevity penalty 1 (hyp longer), p1 = 2/3
        close(bleu(&corpus, 1).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn bleu4_hand_oracle() {
        // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3, BP = 1
        // (5/6 · 3/5 · 1/2 · 1/3)^(1/4) = (1/12)^(1/4)
        let corpus =
            Corpus::from_pairs(&[("the cat sat on the mat", &["the cat sat on a mat"])]);
        close(bleu(&corpus, 4).unwrap(), 0.537_284_965_911_771);
    }

    #[test]
    fn rouge_hand_oracle() {
        // LCS("a b c", "a c d") = 2, P = R = 2/3, so F = 2/3 at any beta
        let corpus = Corpus::from_pairs(&[("a b c", &["a c d"])]);
        close(rouge_l(&corpus).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        let corpus = Corpus::from_pairs(&[("x y", &["a b"])]);
        close(rouge_l(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn cider_hand_oracle() {
        // df("a") = 1, df("b") = 2 over 3 reference sets.
        // docs 1 and 2 give cosine 1 at n=1; doc 3 gives 0; n >= 2 empty.
        // score = 10/4 · (1 + 1 + 0)/3 = 5/3
        let corpus = Corpus::from_pairs(&[("a", &["a"]), ("b", &["b"]), ("a", &["b"])]);
        close(cider(&corpus).unwrap(), 5.0 / 3.0);
    }

    #[test]
    fn cider_single_document_rejected() {
        let corpus = Corpus::from_pairs(&[("a", &["a"])]);
        assert!(matches!(cider(&corpus), Err(MetricsError::CorpusTooSmall { got: 1 })));
    }

    #[test]
    fn ubiquitous_tokens_score_near_zero() {
        // "the" appears in every reference set, so idf("the") = 0
        let corpus = Corpus::from_pairs(&[
            ("the", &["the car stops"]),
            ("the", &["the car turns left"]),
            ("the", &["the road is clear the"]),
        ]);
        assert!(cider(&corpus).unwrap() < 1e-12);
    }

    #[test]
    fn meteor_reordering_costs_chunks() {
        let in_order = Corpus::from_pairs(&[("a b c", &["a b c"])]);
        let reordered = Corpus::from_pairs(&[("c a b", &["a b c"])]);
        let hi = meteor_lite(&in_order).unwrap();
        let lo = meteor_lite(&reordered).unwrap();
        close(hi, 1.0 - 0.5 / 27.0);
        // 2 chunks: [c] and [a b]
        close(lo, 1.0 - 0.5 * (2.0f64 / 3.0).powi(3));
        assert!(hi > lo);
    }

    #[test]
    fn meteor_zero_matches_is_zero() {
        let corpus = Corpus::from_pairs(&[("x y z", &["a b c"])]);
        close(meteor_lite(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn corpus_order_does_not_matter() {
        let a = Corpus::from_pairs(&[
            ("the car stops", &["the car stops now"]),
            ("the car turns left", &["the car turns right"]),
            ("x y", &["x z"]),
        ]);
        let mut b = a.clone();
        b.entries.reverse();
        close(bleu(&a, 4).unwrap(), bleu(&b, 4).unwrap());
        close(rouge_l(&a).unwrap(), rouge_l(&b).unwrap());
        close(cider(&a).unwrap(), cider(&b).unwrap());
        close(meteor_lite(&a).unwrap(), meteor_lite(&b).unwrap());
    }

    #[test]
    fn report_covers_every_metric() {
        let corpus = Corpus::from_pairs(&[
            ("the car stops", &["the car stops"]),
            ("the car slows down", &["the car slows down"]),
        ]);
        let report = full_report(&corpus).unwrap();
        close(report.bleu4, 1.0);
        close(report.rouge_l, 1.0);
        assert!(report.cider > 0.0);
        assert!(report.meteor_lite > 0.9);
    }
}
