//! Code-similarity scoring between a hypothesis and a reference
//! program.
//!
//! The combined score blends four views of the pair, each in [0,1]:
//!
//! 1. [`ngram_match`] — surface n-gram overlap of the token streams;
//! 2. [`weighted_ngram_match`] — the same with keyword-headed n-grams
//!    up-weighted, so control-flow words matter more than names;
//! 3. [`syntax_match`] — overlap of parse-tree shapes, blind to
//!    naming;
//! 4. [`dataflow_match`] — overlap of def/use structure, blind to
//!    everything but how values move.
//!
//! `combined = α·ngram + β·weighted + γ·syntax + δ·dataflow` with
//! non-negative weights summing to one (uniform by default). Broken
//! code still scores: parsing recovers where it can, and a hypothesis
//! or reference the parser cannot process at all contributes 0 to the
//! syntax and dataflow components instead of failing.

pub mod dataflow;
pub mod keywords;
pub mod lexer;
pub mod ngram;
pub mod parse;
pub mod syntax;

pub use dataflow::{dataflow_match, extract_dataflow, DataflowEdge, DataflowGraph};
pub use lexer::{tokenize, Token, TokenKind, TokenStream};
pub use ngram::{ngram_match, weighted_ngram_match};
pub use parse::{parse, SyntaxTree, TreeNode};
pub use syntax::syntax_match;

use crate::corpus::Language;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric weights must be non-negative and sum to 1 (got {alpha}, {beta}, {gamma}, {delta})")]
    InvalidWeights {
        alpha: f64,
        beta: f64,
        gamma: f64,
        delta: f64,
    },
    #[error("max_n must be at least 1")]
    InvalidMaxN,
    #[error("keyword_weight must be positive (got {0})")]
    InvalidKeywordWeight(f64),
}

/// Component weights (α, β, γ, δ) of the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights {
            alpha: 0.25,
            beta: 0.25,
            gamma: 0.25,
            delta: 0.25,
        }
    }
}

impl MetricWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self, MetricsError> {
        let w = MetricWeights {
            alpha,
            beta,
            gamma,
            delta,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let MetricWeights {
            alpha,
            beta,
            gamma,
            delta,
        } = *self;
        let parts = [alpha, beta, gamma, delta];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidWeights {
                alpha,
                beta,
                gamma,
                delta,
            });
        }
        Ok(())
    }
}

/// Tunables of the combined metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeBleuConfig {
    pub weights: MetricWeights,
    /// Longest n-gram length considered.
    pub max_n: usize,
    /// Multiplier for n-grams whose head token is a keyword.
    pub keyword_weight: f64,
}

impl Default for CodeBleuConfig {
    fn default() -> Self {
        CodeBleuConfig {
            weights: MetricWeights::default(),
            max_n: 4,
            keyword_weight: 5.0,
        }
    }
}

impl CodeBleuConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        self.weights.validate()?;
        if self.max_n < 1 {
            return Err(MetricsError::InvalidMaxN);
        }
        if !(self.keyword_weight.is_finite() && self.keyword_weight > 0.0) {
            return Err(MetricsError::InvalidKeywordWeight(self.keyword_weight));
        }
        Ok(())
    }
}

/// The four component scores and their weighted blend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeBleuScore {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub syntax: f64,
    pub dataflow: f64,
    pub combined: f64,
    pub weights: MetricWeights,
}

/// Scores `hyp` against `reference`.
pub fn codebleu(
    hyp: &str,
    reference: &str,
    language: Language,
    config: &CodeBleuConfig,
) -> CodeBleuScore {
    debug_assert!(config.validate().is_ok(), "invalid metric config");
    let hyp_tokens = tokenize(hyp, language);
    let ref_tokens = tokenize(reference, language);
    let ngram = ngram_match(&hyp_tokens, &ref_tokens, config.max_n);
    let weighted_ngram =
        weighted_ngram_match(&hyp_tokens, &ref_tokens, config.max_n, config.keyword_weight);
    let (syntax, dataflow) = match (parse(hyp, language), parse(reference, language)) {
        (Some(hyp_tree), Some(ref_tree)) => {
            let syntax = syntax_match(&hyp_tree, &ref_tree);
            let hyp_graph = extract_dataflow(&hyp_tree, hyp, language);
            let ref_graph = extract_dataflow(&ref_tree, reference, language);
            (syntax, dataflow_match(&hyp_graph, &ref_graph))
        }
        // A side the parser cannot process at all zeroes the
        // structural components rather than erroring.
        _ => (0.0, 0.0),
    };
    let w = config.weights;
    let combined =
        w.alpha * ngram + w.beta * weighted_ngram + w.gamma * syntax + w.delta * dataflow;
    CodeBleuScore {
        ngram,
        weighted_ngram,
        syntax,
        dataflow,
        combined,
        weights: w,
    }
}
