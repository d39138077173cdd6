//! Sequence and classification metrics: smoothed BLEU-4, exact match, and
//! F1 / precision / recall.

use crate::error::{Error, Result};
use crate::TokenId;
use std::collections::HashMap;

/// Sentence-level smoothed BLEU-4 in [0, 100].
///
/// Modified n-gram precisions p₁..p₄ with clipping against the references;
/// for n ≥ 2 a zero match count is smoothed add-one on both numerator and
/// denominator, so only a genuinely absent n-gram order is padded and
/// `bleu4(x, [x]) == 100` exactly. Brevity penalty `exp(1 − r/c)` applies
/// when the candidate is shorter than the closest reference length (ties
/// toward the shorter reference). An empty candidate scores 0.
pub fn bleu4_smoothed(candidate: &[TokenId], references: &[Vec<TokenId>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Contract("bleu4: no references".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let c = candidate.len();
    // Reference length closest to c; ties toward the shorter.
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();

    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let cand_counts = ngram_counts(candidate, n);
        let total: u64 = cand_counts.values().sum();
        let mut matched: u64 = 0;
        for (gram, &count) in &cand_counts {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(best_ref);
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n >= 2 {
            1.0 / (total + 1) as f64
        } else {
            return Ok(0.0); // no unigram overlap at all
        };
        log_sum += libm::log(p);
    }
    let brevity = if c < r {
        libm::exp(1.0 - r as f64 / c as f64)
    } else {
        1.0
    };
    Ok(100.0 * brevity * libm::exp(log_sum / 4.0))
}

/// Corpus score: mean of per-sentence smoothed BLEU-4 values.
pub fn corpus_bleu4(candidates: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "corpus_bleu4: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("corpus_bleu4: empty corpus".into()));
    }
    let mut sum = 0.0;
    for (cand, re) in candidates.iter().zip(references) {
        sum += bleu4_smoothed(cand, std::slice::from_ref(re))?;
    }
    Ok(sum / candidates.len() as f64)
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Fraction of candidates exactly equal to their reference.
pub fn exact_match(candidates: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "exact_match: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("exact_match: empty lists".into()));
    }
    let hits = candidates
        .iter()
        .zip(references)
        .filter(|(c, r)| c == r)
        .count();
    Ok(hits as f64 / candidates.len() as f64)
}

/// Binary F1, precision and recall with positive class 1; 0/0 counts as 0.
pub fn f1_precision_recall(predictions: &[u8], labels: &[u8]) -> Result<(f64, f64, f64)> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "f1: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((f1, precision, recall))
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
