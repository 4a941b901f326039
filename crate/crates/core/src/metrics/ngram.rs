//! Smoothed and keyword-weighted n-gram precision over token streams.
//!
//! Both matchers follow the same shape: clipped n-gram precisions for
//! n = 1..max_n, combined by geometric mean and scaled by the brevity
//! penalty. The smoothing rule is pinned as add-one on zero precisions
//! for n >= 2: a level with no matches (or no n-grams at all, for a
//! hypothesis shorter than n tokens) contributes (m+1)/(t+1) instead of
//! m/t. Unigram precision is never smoothed, so a hypothesis sharing no
//! tokens with the reference scores 0. The weighted variant multiplies
//! each n-gram's count by `keyword_weight` when the n-gram's head token
//! is a keyword, in both the numerator and the denominator, which keeps
//! the result in [0,1] and leaves identical streams at exactly 1.

use super::lexer::{TokenKind, TokenStream};
use std::collections::HashMap;

/// Geometric-mean BLEU-style score with uniform n-gram weights.
pub fn ngram_match(hyp: &TokenStream, reference: &TokenStream, max_n: usize) -> f64 {
    assert!(max_n >= 1, "max_n must be at least 1");
    precision_score(hyp, reference, max_n, None)
}

/// As [`ngram_match`], with keyword-headed n-grams up-weighted by
/// `keyword_weight`.
pub fn weighted_ngram_match(
    hyp: &TokenStream,
    reference: &TokenStream,
    max_n: usize,
    keyword_weight: f64,
) -> f64 {
    assert!(max_n >= 1, "max_n must be at least 1");
    assert!(keyword_weight > 0.0, "keyword_weight must be positive");
    precision_score(hyp, reference, max_n, Some(keyword_weight))
}

fn precision_score(
    hyp: &TokenStream,
    reference: &TokenStream,
    max_n: usize,
    keyword_weight: Option<f64>,
) -> f64 {
    let h = hyp.len();
    let r = reference.len();
    if h == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total) = clipped_counts(hyp, reference, n, keyword_weight);
        let p = if matched == 0.0 || total == 0.0 {
            if n == 1 {
                // No unigram overlap (or an empty hypothesis, handled
                // above): the score bottoms out at 0 without smoothing.
                return 0.0;
            }
            (matched + 1.0) / (total + 1.0)
        } else {
            matched / total
        };
        log_sum += p.ln();
    }
    let brevity = if h > r {
        1.0
    } else {
        (1.0 - r as f64 / h as f64).exp()
    };
    brevity * (log_sum / max_n as f64).exp()
}

/// Weighted clipped matches and weighted hypothesis totals for one n.
fn clipped_counts(
    hyp: &TokenStream,
    reference: &TokenStream,
    n: usize,
    keyword_weight: Option<f64>,
) -> (f64, f64) {
    let weight_of = |stream: &TokenStream, start: usize| match keyword_weight {
        Some(w) if stream.tokens[start].kind == TokenKind::Keyword => w,
        _ => 1.0,
    };
    let mut ref_counts: HashMap<Vec<&str>, usize> = HashMap::new();
    if reference.len() >= n {
        for i in 0..=reference.len() - n {
            let gram: Vec<&str> = reference.tokens[i..i + n]
                .iter()
                .map(|t| t.lexeme.as_str())
                .collect();
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut hyp_counts: HashMap<Vec<&str>, (usize, f64)> = HashMap::new();
    let mut total = 0.0;
    if hyp.len() >= n {
        for i in 0..=hyp.len() - n {
            let gram: Vec<&str> = hyp.tokens[i..i + n]
                .iter()
                .map(|t| t.lexeme.as_str())
                .collect();
            let w = weight_of(hyp, i);
            total += w;
            let entry = hyp_counts.entry(gram).or_insert((0, w));
            entry.0 += 1;
        }
    }
    let mut matched = 0.0;
    for (gram, (count, w)) in &hyp_counts {
        let clip = (*count).min(ref_counts.get(gram).copied().unwrap_or(0));
        matched += clip as f64 * w;
    }
    (matched, total)
}
