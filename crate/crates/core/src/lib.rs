//! Core library for `kaser`, a pipeline that simulates realistic student
//! programming errors.
//!
//! The pipeline stages, in data order:
//!
//! 1. [`corpus`] loads submission datasets and produces seeded
//!    cross-validation splits.
//! 2. [`taxonomy`] annotates submissions with error labels through an
//!    LLM judge and defines the error-set algebra (IoU, chi-square).
//! 3. [`clustering`] embeds raw error descriptions, groups them with
//!    hierarchical agglomerative clustering, and picks representative
//!    labels per cluster.
//! 4. [`knowledge`] fits a recurrent knowledge-tracing estimator whose
//!    per-KC mastery probabilities drive prompt construction.
//! 5. [`policy`] renders knowledge-aware prompts and samples candidate
//!    code from either a toy tabular policy or a remote model.
//! 6. [`grpo`] trains the policy with group-relative policy optimization
//!    against a three-part reward (similarity, error match, diversity).
//! 7. [`eval`] scores generations at the student level (best-of-K) and
//!    the problem level (coverage, distribution distance, diversity).
//!
//! [`metrics`] provides the CodeBLEU implementation used by both the
//! reward and the evaluation harness; [`llm`] and [`mock`] provide the
//! HTTP client and the deterministic offline stand-ins for the judge,
//! embedding, and generation endpoints.

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod clustering;
pub mod corpus;
pub mod eval;
pub mod grpo;
pub mod knowledge;
pub mod llm;
pub mod metrics;
pub mod mock;
pub mod policy;
pub mod taxonomy;
pub mod toy;
pub mod util;
