//! Group-relative policy optimization: the hybrid reward (similarity, error
//! match, diversity), group z-score advantages, the clipped surrogate with a
//! KL penalty, and the training loop for the trainable toy policy.
//!
//! One iteration snapshots the current policy, samples a group of candidates
//! per training item, scores each candidate with the three-part reward,
//! normalizes rewards to advantages within the group, and takes a single
//! ascent step on `L_clip − β·KL`. Because there is exactly one update per
//! sampled batch, probability ratios sit at 1 when the gradient is taken;
//! the clipping machinery matters for the exposed objective functions and is
//! exercised directly by tests.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, DatasetView, Language, Problem};
use crate::knowledge::{mastery_profile, KeError, KeParameters};
use crate::llm::map_bounded;
use crate::metrics::{codebleu, CodeBleuConfig};
use crate::policy::{
    build_knowledge_prompt, toy_sample, toy_token_distributions, toy_update, Completion,
    PolicyError, PolicyGrad, PolicyHandle, PolicyKind, Prompt, ToyPolicyParams,
};
use crate::taxonomy::{error_match_reward, judge_errors, ErrorLabel, ErrorSet, JudgeConfig, TaxonomyError};
use crate::llm::ChatTransport;
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size {0} is below the minimum of 2")]
    GroupTooSmall(usize),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("candidate {0} is unscored; policy-gradient math needs log-probabilities")]
    Unscored(usize),
    #[error("a {0:?} policy cannot be updated in place")]
    Untrainable(PolicyKind),
    #[error("reward for candidate {candidate} is non-finite")]
    NonFiniteReward { candidate: usize },
    #[error("objective became non-finite at iteration {iteration}; offending group: {dump}")]
    NonFiniteObjective { iteration: usize, dump: String },
    #[error("trace file {path}: {source}")]
    TraceIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Judge(#[from] TaxonomyError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ke(#[from] KeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Per-component reward weights. Equal weighting is the default and is what
/// the rest of the pipeline assumes unless a run overrides it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_sim: f64,
    pub w_err: f64,
    pub w_div: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_sim: 1.0,
            w_err: 1.0,
            w_div: 1.0,
        }
    }
}

/// One candidate's reward, component by component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_sim: f64,
    pub r_error: f64,
    pub r_div: f64,
    pub total: f64,
    pub weights: RewardWeights,
}

impl RewardBreakdown {
    pub fn assemble(r_sim: f64, r_error: f64, r_div: f64, weights: RewardWeights) -> Self {
        debug_assert!((-1e-12..=1.0 + 1e-12).contains(&r_sim), "r_sim {r_sim}");
        debug_assert!((-1e-12..=1.0 + 1e-12).contains(&r_error), "r_error {r_error}");
        debug_assert!((-1e-12..=1.0 + 1e-12).contains(&r_div), "r_div {r_div}");
        RewardBreakdown {
            r_sim,
            r_error,
            r_div,
            total: weights.w_sim * r_sim + weights.w_err * r_error + weights.w_div * r_div,
            weights,
        }
    }
}

/// Settings for reward computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub metric: CodeBleuConfig,
    /// Upper bound on concurrent similarity computations.
    pub max_parallel: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            metric: CodeBleuConfig::default(),
            max_parallel: 4,
        }
    }
}

/// Memo table for pairwise similarity scores, keyed by (hypothesis,
/// reference) text. Candidates repeat heavily across iterations at toy
/// scale, so this removes nearly all metric work from the training loop.
/// One cache serves one metric configuration; do not share across configs.
#[derive(Debug, Default)]
pub struct SimilarityCache {
    map: BTreeMap<(String, String), f64>,
    pub hits: u64,
    pub misses: u64,
}

impl SimilarityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Diversity reward of candidate `index` within its group: one minus the
/// closest-neighbour similarity, where each other candidate is scored as a
/// hypothesis against this one. A singleton group has no neighbours and
/// scores 1 (only reachable diagnostically; training requires G ≥ 2).
pub fn diversity_reward(
    codes: &[String],
    index: usize,
    language: Language,
    metric: &CodeBleuConfig,
) -> f64 {
    let mut closest = 0.0f64;
    for (j, other) in codes.iter().enumerate() {
        if j == index {
            continue;
        }
        closest = closest.max(codebleu(other, &codes[index], language, metric).combined);
    }
    1.0 - closest
}

/// Computes the full reward vector for one candidate group, given each
/// candidate's judged error set. Pairwise similarities are deduplicated,
/// read through the cache, and missing entries computed in parallel.
pub fn compute_group_rewards(
    codes: &[String],
    predicted: &[ErrorSet],
    truth_code: &str,
    truth_errors: &ErrorSet,
    language: Language,
    cfg: &RewardConfig,
    cache: &mut SimilarityCache,
) -> Result<Vec<RewardBreakdown>, GrpoError> {
    if codes.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    if predicted.len() != codes.len() {
        return Err(GrpoError::LengthMismatch {
            what: "predicted error sets",
            expected: codes.len(),
            got: predicted.len(),
        });
    }

    // Every (hypothesis, reference) pair the group needs.
    let mut needed: BTreeSet<(String, String)> = BTreeSet::new();
    for code in codes {
        needed.insert((code.clone(), truth_code.to_string()));
    }
    for (i, reference) in codes.iter().enumerate() {
        for (j, hyp) in codes.iter().enumerate() {
            if i != j {
                needed.insert((hyp.clone(), reference.clone()));
            }
        }
    }
    let mut missing: Vec<(String, String)> = Vec::new();
    for pair in needed {
        if cache.map.contains_key(&pair) {
            cache.hits += 1;
        } else {
            missing.push(pair);
        }
    }
    let computed = map_bounded(&missing, cfg.max_parallel.max(1), |(hyp, reference)| {
        codebleu(hyp, reference, language, &cfg.metric).combined
    });
    cache.misses += missing.len() as u64;
    for (pair, score) in missing.into_iter().zip(computed) {
        cache.map.insert(pair, score);
    }

    let lookup = |hyp: &str, reference: &str| -> f64 {
        cache.map[&(hyp.to_string(), reference.to_string())]
    };
    let mut rewards = Vec::with_capacity(codes.len());
    for (i, code) in codes.iter().enumerate() {
        let r_sim = lookup(code, truth_code);
        let mut closest = 0.0f64;
        for (j, hyp) in codes.iter().enumerate() {
            if i != j {
                closest = closest.max(lookup(hyp, code));
            }
        }
        let r_div = 1.0 - closest;
        let r_error = error_match_reward(&predicted[i], truth_errors);
        rewards.push(RewardBreakdown::assemble(r_sim, r_error, r_div, cfg.weights));
    }
    Ok(rewards)
}

/// Where candidate error sets come from during training: the real judge
/// behind a transport, or a deterministic stand-in for tests and toy runs.
pub trait ErrorJudge: Send + Sync {
    fn judge(&self, problem: &Problem, code: &str) -> Result<ErrorSet, GrpoError>;
}

impl<F> ErrorJudge for F
where
    F: Fn(&Problem, &str) -> Result<ErrorSet, GrpoError> + Send + Sync,
{
    fn judge(&self, problem: &Problem, code: &str) -> Result<ErrorSet, GrpoError> {
        self(problem, code)
    }
}

/// Judge verdict cache keyed by candidate hash (problem id + code bytes).
#[derive(Debug, Default)]
pub struct JudgeCache {
    entries: BTreeMap<String, ErrorSet>,
    pub hits: u64,
    pub misses: u64,
}

impl JudgeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(problem_id: &str, code: &str) -> String {
        sha256_hex(format!("{problem_id}\u{0}{code}").as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The production [`ErrorJudge`]: closed-catalog judge calls through a chat
/// transport, memoized by candidate hash.
pub struct TransportJudge<'a> {
    pub transport: &'a dyn ChatTransport,
    pub catalog: &'a [ErrorLabel],
    pub cfg: JudgeConfig,
    pub cache: Mutex<JudgeCache>,
}

impl<'a> TransportJudge<'a> {
    pub fn new(transport: &'a dyn ChatTransport, catalog: &'a [ErrorLabel], cfg: JudgeConfig) -> Self {
        Self {
            transport,
            catalog,
            cfg,
            cache: Mutex::new(JudgeCache::new()),
        }
    }
}

impl ErrorJudge for TransportJudge<'_> {
    fn judge(&self, problem: &Problem, code: &str) -> Result<ErrorSet, GrpoError> {
        let key = JudgeCache::key(&problem.id, code);
        {
            let mut cache = self.cache.lock().unwrap();
            if let Some(errors) = cache.entries.get(&key).cloned() {
                cache.hits += 1;
                return Ok(errors);
            }
        }
        let outcome = judge_errors(self.transport, code, problem, self.catalog, &self.cfg)?;
        let mut cache = self.cache.lock().unwrap();
        cache.misses += 1;
        cache.entries.insert(key, outcome.errors.clone());
        Ok(outcome.errors)
    }
}

/// Judges a whole candidate group, at most `max_parallel` calls in flight.
/// One failed candidate aborts the group — reward vectors are all-or-nothing.
pub fn judge_group(
    codes: &[String],
    problem: &Problem,
    judge: &dyn ErrorJudge,
    max_parallel: usize,
) -> Result<Vec<ErrorSet>, GrpoError> {
    map_bounded(codes, max_parallel.max(1), |code| judge.judge(problem, code))
        .into_iter()
        .collect()
}

/// Z-score normalization of group rewards: `(r − mean) / (std + epsilon)`
/// with population std. All-equal groups yield all-zero advantages, and the
/// result is nudged so the advantages sum to exactly zero.
pub fn normalize_advantages(totals: &[f64], epsilon: f64) -> Vec<f64> {
    if totals.is_empty() {
        return Vec::new();
    }
    let g = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / g;
    let variance = totals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = variance.sqrt();
    let mut advantages: Vec<f64> = totals.iter().map(|r| (r - mean) / (std + epsilon)).collect();
    // Rewrite the last entry as the exact negative of the left-to-right sum
    // of the others, so the group total is zero in floating point and not
    // merely near it. The adjustment is one rounding error in size.
    let last = advantages.len() - 1;
    let partial: f64 = advantages[..last].iter().sum();
    advantages[last] = -partial;
    advantages
}

/// One term of the clipped surrogate, with its derivative in `ratio`:
/// `min(ratio·adv, clamp(ratio, 1−ε, 1+ε)·adv)`.
pub fn clip_term(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clamped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    let clipped = clamped * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else if ratio > 1.0 - epsilon && ratio < 1.0 + epsilon {
        (clipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// How the probability ratio is granulated. The printed objective is
/// sequence-level; per-token ratios with the sequence advantage broadcast
/// to every token are the numerically stable default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    PerToken,
    Sequence,
}

/// Clipped surrogate over a group, from per-token log-probabilities. Returns
/// the objective value, its gradient with respect to every new log-prob, and
/// the fraction of ratios that fell outside the clip band.
pub fn l_clip_from_logprobs(
    logprobs_new: &[Vec<f64>],
    logprobs_old: &[Vec<f64>],
    advantages: &[f64],
    epsilon: f64,
    mode: RatioMode,
) -> Result<(f64, Vec<Vec<f64>>, f64), GrpoError> {
    let g = logprobs_new.len();
    if logprobs_old.len() != g {
        return Err(GrpoError::LengthMismatch {
            what: "old log-probabilities",
            expected: g,
            got: logprobs_old.len(),
        });
    }
    if advantages.len() != g {
        return Err(GrpoError::LengthMismatch {
            what: "advantages",
            expected: g,
            got: advantages.len(),
        });
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(g);
    let mut clipped_count = 0usize;
    let mut ratio_count = 0usize;
    for i in 0..g {
        let new = &logprobs_new[i];
        let old = &logprobs_old[i];
        if old.len() != new.len() {
            return Err(GrpoError::LengthMismatch {
                what: "old per-token log-probabilities",
                expected: new.len(),
                got: old.len(),
            });
        }
        let t = new.len();
        let mut grad = vec![0.0; t];
        if t == 0 {
            grads.push(grad);
            continue;
        }
        match mode {
            RatioMode::PerToken => {
                let mut candidate_value = 0.0;
                for k in 0..t {
                    let ratio = (new[k] - old[k]).exp();
                    let (term, dterm_dratio) = clip_term(ratio, advantages[i], epsilon);
                    candidate_value += term;
                    grad[k] = dterm_dratio * ratio / (g as f64 * t as f64);
                    ratio_count += 1;
                    if ratio < 1.0 - epsilon || ratio > 1.0 + epsilon {
                        clipped_count += 1;
                    }
                }
                value += candidate_value / t as f64;
            }
            RatioMode::Sequence => {
                let ratio = (new.iter().sum::<f64>() - old.iter().sum::<f64>()).exp();
                let (term, dterm_dratio) = clip_term(ratio, advantages[i], epsilon);
                value += term;
                let per_token = dterm_dratio * ratio / g as f64;
                grad.fill(per_token);
                ratio_count += 1;
                if ratio < 1.0 - epsilon || ratio > 1.0 + epsilon {
                    clipped_count += 1;
                }
            }
        }
        grads.push(grad);
    }
    let clip_fraction = if ratio_count == 0 {
        0.0
    } else {
        clipped_count as f64 / ratio_count as f64
    };
    Ok((value / g as f64, grads, clip_fraction))
}

/// Non-negative per-token KL estimate against the frozen reference policy:
/// `exp(δ) − δ − 1` with `δ = ℓ_ref − ℓ_new`, averaged over tokens and
/// candidates. Returns the estimate and its gradient in the new log-probs.
pub fn kl_from_logprobs(
    logprobs_new: &[Vec<f64>],
    logprobs_ref: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>), GrpoError> {
    let g = logprobs_new.len();
    if logprobs_ref.len() != g {
        return Err(GrpoError::LengthMismatch {
            what: "reference log-probabilities",
            expected: g,
            got: logprobs_ref.len(),
        });
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(g);
    for i in 0..g {
        let new = &logprobs_new[i];
        let reference = &logprobs_ref[i];
        if reference.len() != new.len() {
            return Err(GrpoError::LengthMismatch {
                what: "reference per-token log-probabilities",
                expected: new.len(),
                got: reference.len(),
            });
        }
        let t = new.len();
        let mut grad = vec![0.0; t];
        if t == 0 {
            grads.push(grad);
            continue;
        }
        let mut candidate_value = 0.0;
        for k in 0..t {
            let delta = reference[k] - new[k];
            candidate_value += delta.exp() - delta - 1.0;
            grad[k] = (1.0 - delta.exp()) / (g as f64 * t as f64);
        }
        value += candidate_value / t as f64;
        grads.push(grad);
    }
    Ok((value / g as f64, grads))
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Candidates sampled per prompt (G).
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// KL penalty coefficient (β).
    pub beta: f64,
    pub learning_rate: f64,
    /// Optimization steps; each step averages gradients over the whole
    /// shuffled item list, so one step is one epoch.
    pub iterations: usize,
    pub seed: u64,
    /// Added to the std denominator when normalizing advantages.
    pub advantage_epsilon: f64,
    pub ratio_mode: RatioMode,
    pub reward: RewardConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            clip_epsilon: 0.2,
            beta: 0.1,
            learning_rate: 0.1,
            iterations: 1,
            seed: 0,
            advantage_epsilon: 1e-8,
            ratio_mode: RatioMode::PerToken,
            reward: RewardConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_epsilon.is_finite() && self.clip_epsilon > 0.0) {
            return Err(GrpoError::BadConfig(format!(
                "clip epsilon must be positive, got {}",
                self.clip_epsilon
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(GrpoError::BadConfig(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(GrpoError::BadConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.advantage_epsilon.is_finite() && self.advantage_epsilon > 0.0) {
            return Err(GrpoError::BadConfig(format!(
                "advantage epsilon must be positive, got {}",
                self.advantage_epsilon
            )));
        }
        if self.reward.max_parallel == 0 {
            return Err(GrpoError::BadConfig(
                "max_parallel must be at least 1".to_string(),
            ));
        }
        self.reward
            .metric
            .validate()
            .map_err(|err| GrpoError::BadConfig(err.to_string()))?;
        for (name, w) in [
            ("w_sim", self.reward.weights.w_sim),
            ("w_err", self.reward.weights.w_err),
            ("w_div", self.reward.weights.w_div),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(GrpoError::BadConfig(format!(
                    "reward weight {name} must be non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Trainer-side capability gate: only policies that can be updated in place
/// may enter the training loop.
pub fn ensure_trainable(handle: &PolicyHandle) -> Result<(), GrpoError> {
    if handle.capabilities.can_update {
        Ok(())
    } else {
        Err(GrpoError::Untrainable(handle.kind))
    }
}

/// Extracts per-token log-probabilities from a sampled group, rejecting any
/// unscored candidate — completions without scores never reach gradient math.
pub fn group_logprobs(candidates: &[Completion]) -> Result<Vec<Vec<f64>>, GrpoError> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, candidate)| candidate.logprobs.clone().ok_or(GrpoError::Unscored(i)))
        .collect()
}

/// Everything `grpo_objective` measures about one group under the current
/// parameters.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// `L_clip − β·KL`.
    pub objective: f64,
    pub l_clip: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    /// Mean per-token entropy of the current policy at visited contexts.
    pub entropy: f64,
    pub logprobs_new: Vec<Vec<f64>>,
    /// Ascent gradient of the objective in the policy's logits table.
    pub grad: PolicyGrad,
}

/// Evaluates the GRPO objective for one candidate group under `params`,
/// differentiating through the toy policy's log-softmax down to its logits.
pub fn grpo_objective(
    params: &ToyPolicyParams,
    prompt: &Prompt,
    candidates: &[Completion],
    advantages: &[f64],
    logprobs_old: &[Vec<f64>],
    logprobs_ref: &[Vec<f64>],
    cfg: &GrpoConfig,
) -> Result<ObjectiveEval, GrpoError> {
    let g = candidates.len();
    if advantages.len() != g {
        return Err(GrpoError::LengthMismatch {
            what: "advantages",
            expected: g,
            got: advantages.len(),
        });
    }
    let steps: Vec<_> = candidates
        .iter()
        .map(|candidate| toy_token_distributions(params, prompt, candidate))
        .collect::<Result<_, _>>()?;
    let logprobs_new: Vec<Vec<f64>> = steps
        .iter()
        .map(|walk| walk.iter().map(|s| s.log_probs[s.token_index]).collect())
        .collect();

    let (l_clip, clip_grad, clip_fraction) = l_clip_from_logprobs(
        &logprobs_new,
        logprobs_old,
        advantages,
        cfg.clip_epsilon,
        cfg.ratio_mode,
    )?;
    let (kl, kl_grad) = kl_from_logprobs(&logprobs_new, logprobs_ref)?;
    let objective = l_clip - cfg.beta * kl;

    // Chain dJ/dℓ through the log-softmax: dℓ/dθ_v = 1[v = chosen] − p_v.
    let mut grad = PolicyGrad::default();
    let mut entropy_sum = 0.0;
    let mut token_count = 0usize;
    for (i, walk) in steps.iter().enumerate() {
        for (k, step) in walk.iter().enumerate() {
            let gl = clip_grad[i][k] - cfg.beta * kl_grad[i][k];
            let probs: Vec<f64> = step.log_probs.iter().map(|lp| lp.exp()).collect();
            let mut row: Vec<f64> = probs.iter().map(|p| -gl * p).collect();
            row[step.token_index] += gl;
            grad.add_row(&step.context, &row);
            entropy_sum -= probs
                .iter()
                .zip(&step.log_probs)
                .map(|(p, lp)| p * lp)
                .sum::<f64>();
            token_count += 1;
        }
    }
    let entropy = if token_count == 0 {
        0.0
    } else {
        entropy_sum / token_count as f64
    };
    Ok(ObjectiveEval {
        objective,
        l_clip,
        kl,
        clip_fraction,
        entropy,
        logprobs_new,
        grad,
    })
}

/// One (problem, student-knowledge) training pair: the rendered prompt and
/// the ground truth it is scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub problem: Problem,
    pub prompt: Prompt,
    pub truth_code: String,
    pub truth_errors: ErrorSet,
}

/// Builds the training pairs for a dataset view: one item per submission,
/// with the prompt snapshotting the student's estimated mastery *before*
/// that submission.
pub fn build_train_items(
    view: &DatasetView<'_>,
    ke: &KeParameters,
) -> Result<Vec<TrainItem>, GrpoError> {
    let ds = view.dataset();
    let mut items = Vec::with_capacity(view.len());
    for submission in view.submissions() {
        let t = ds
            .dense_index(&submission.student_id, &submission.problem_id)
            .ok_or_else(|| CorpusError::UnknownStudent(submission.student_id.clone()))?;
        let mastery = mastery_profile(ds, &submission.student_id, t, ke)?;
        let problem = ds
            .problem(&submission.problem_id)
            .expect("validated dataset")
            .clone();
        let prompt = build_knowledge_prompt(&problem, &mastery, ds.kcs())?;
        items.push(TrainItem {
            problem,
            prompt,
            truth_code: submission.code.clone(),
            truth_errors: ErrorSet::from_ids(submission.errors.iter().cloned()),
        });
    }
    Ok(items)
}

/// The assembled state of one group, written out when a step aborts.
#[derive(Debug, Clone, Serialize)]
pub struct CandidateGroup {
    pub prompt: Prompt,
    pub candidates: Vec<Completion>,
    pub logprobs_old: Vec<Vec<f64>>,
    pub logprobs_new: Vec<Vec<f64>>,
    pub logprobs_ref: Vec<Vec<f64>>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_r_sim: f64,
    pub mean_r_error: f64,
    pub mean_r_div: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    /// Writes the trace as CSV with the pinned column set.
    pub fn write_csv(&self, path: &Path) -> Result<(), GrpoError> {
        let mut out = Vec::new();
        writeln!(
            out,
            "iteration,mean_reward,mean_r_sim,mean_r_error,mean_r_div,kl,clip_fraction"
        )
        .expect("in-memory write");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration, r.mean_reward, r.mean_r_sim, r.mean_r_error, r.mean_r_div, r.kl, r.clip_fraction
            )
            .expect("in-memory write");
        }
        write_atomic(path, &out).map_err(|source| GrpoError::TraceIo {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Per-(iteration, item) sampling seed, derived so reordering items or
/// resuming at an iteration reproduces the same draws.
fn step_seed(seed: u64, iteration: usize, item: usize) -> u64 {
    let mut z = seed
        ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (item as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One GRPO iteration: snapshot the policy, sample and score a group per
/// item, and take a single ascent step on the batch-averaged objective.
pub fn grpo_step(
    params: &mut ToyPolicyParams,
    ref_params: &ToyPolicyParams,
    items: &[TrainItem],
    judge: &dyn ErrorJudge,
    cfg: &GrpoConfig,
    cache: &mut SimilarityCache,
    iteration: usize,
) -> Result<TraceRecord, GrpoError> {
    if items.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let old = params.clone();
    let mut grad_acc = PolicyGrad::default();
    let mut sums = (0.0, 0.0, 0.0, 0.0); // total, sim, error, div
    let mut candidate_count = 0usize;
    let mut kl_sum = 0.0;
    let mut clip_sum = 0.0;
    let mut entropy_sum = 0.0;

    for (item_index, item) in items.iter().enumerate() {
        let seed = step_seed(cfg.seed, iteration, item_index);
        let candidates = toy_sample(&old, &item.prompt, cfg.group_size, seed)?;
        let codes: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
        let predicted = judge_group(&codes, &item.problem, judge, cfg.reward.max_parallel)?;
        let rewards = compute_group_rewards(
            &codes,
            &predicted,
            &item.truth_code,
            &item.truth_errors,
            item.problem.language,
            &cfg.reward,
            cache,
        )?;
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        if let Some(bad) = totals.iter().position(|t| !t.is_finite()) {
            return Err(GrpoError::NonFiniteReward { candidate: bad });
        }
        let advantages = normalize_advantages(&totals, cfg.advantage_epsilon);
        let logprobs_old = group_logprobs(&candidates)?;
        let logprobs_ref: Vec<Vec<f64>> = candidates
            .iter()
            .map(|candidate| {
                crate::policy::toy_logprob(ref_params, &item.prompt, candidate)
                    .map(|(_, per_token)| per_token)
            })
            .collect::<Result<_, _>>()?;
        let eval = grpo_objective(
            params,
            &item.prompt,
            &candidates,
            &advantages,
            &logprobs_old,
            &logprobs_ref,
            cfg,
        )?;
        if !eval.objective.is_finite() {
            let group = CandidateGroup {
                prompt: item.prompt.clone(),
                candidates,
                logprobs_old,
                logprobs_new: eval.logprobs_new,
                logprobs_ref,
                rewards,
                advantages,
            };
            return Err(GrpoError::NonFiniteObjective {
                iteration,
                dump: serde_json::to_string(&group).unwrap_or_else(|_| format!("{group:?}")),
            });
        }
        for r in &rewards {
            sums.0 += r.total;
            sums.1 += r.r_sim;
            sums.2 += r.r_error;
            sums.3 += r.r_div;
        }
        candidate_count += rewards.len();
        kl_sum += eval.kl;
        clip_sum += eval.clip_fraction;
        entropy_sum += eval.entropy;
        grad_acc.merge(&eval.grad);
    }

    grad_acc.scale(1.0 / items.len() as f64);
    toy_update(params, &grad_acc, cfg.learning_rate)?;

    let n_items = items.len() as f64;
    let n_candidates = candidate_count as f64;
    Ok(TraceRecord {
        iteration,
        mean_reward: sums.0 / n_candidates,
        mean_r_sim: sums.1 / n_candidates,
        mean_r_error: sums.2 / n_candidates,
        mean_r_div: sums.3 / n_candidates,
        kl: kl_sum / n_items,
        clip_fraction: clip_sum / n_items,
        entropy: entropy_sum / n_items,
    })
}

/// Runs the full training loop: the reference policy is frozen at entry,
/// items are reshuffled every iteration, and the whole run is deterministic
/// given the seed and a deterministic judge.
pub fn grpo_train(
    params: &mut ToyPolicyParams,
    items: &[TrainItem],
    judge: &dyn ErrorJudge,
    cfg: &GrpoConfig,
) -> Result<TrainTrace, GrpoError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let ref_params = params.clone();
    let mut cache = SimilarityCache::new();
    // Domain-separate the shuffle stream from the per-step sampling seeds.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x53_48_55_46_46_4C_45_52);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = TrainTrace::default();
    for iteration in 0..cfg.iterations {
        order.shuffle(&mut shuffle_rng);
        let batch: Vec<TrainItem> = order.iter().map(|&i| items[i].clone()).collect();
        let record = grpo_step(params, &ref_params, &batch, judge, cfg, &mut cache, iteration)?;
        trace.records.push(record);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dataset, KnowledgeComponent, Submission};
    use crate::knowledge::MasteryVector;
    use crate::llm::ChatRequest;
    use crate::policy::toy_logprob;
    use rand::Rng;

    fn catalog() -> Vec<KnowledgeComponent> {
        vec![
            KnowledgeComponent {
                id: "kc-arith".to_string(),
                name: "arithmetic expressions".to_string(),
            },
            KnowledgeComponent {
                id: "kc-return".to_string(),
                name: "return statements".to_string(),
            },
        ]
    }

    fn problem() -> Problem {
        Problem {
            id: "sum3".to_string(),
            statement: "Sum three integers.".to_string(),
            language: Language::Java,
            kc_ids: vec!["kc-arith".to_string()],
        }
    }

    fn prompt() -> Prompt {
        let mastery = MasteryVector {
            m: ndarray::Array1::from_vec(vec![0.4, 0.6]),
        };
        build_knowledge_prompt(&problem(), &mastery, &catalog()).unwrap()
    }

    /// Four single-line candidates with pairwise-distinct judged error sets;
    /// the first matches the truth exactly.
    fn planted_vocab() -> Vec<String> {
        vec![
            "int total = a + b + c;".to_string(),
            "int total = a + b;".to_string(),
            "int total = a - b - c;".to_string(),
            "total == a + b + c;".to_string(),
        ]
    }

    fn planted_sets() -> BTreeMap<String, ErrorSet> {
        let vocab = planted_vocab();
        let mut sets = BTreeMap::new();
        sets.insert(vocab[0].clone(), ErrorSet::new());
        sets.insert(vocab[1].clone(), ErrorSet::from_ids(["missing-term"]));
        sets.insert(vocab[2].clone(), ErrorSet::from_ids(["wrong-operator"]));
        sets.insert(
            vocab[3].clone(),
            ErrorSet::from_ids(["assignment-instead-of-comparison"]),
        );
        sets
    }

    fn planted_judge() -> impl Fn(&Problem, &str) -> Result<ErrorSet, GrpoError> {
        let sets = planted_sets();
        move |_: &Problem, code: &str| Ok(sets.get(code).cloned().unwrap_or_default())
    }

    fn planted_item() -> TrainItem {
        TrainItem {
            problem: problem(),
            prompt: prompt(),
            truth_code: planted_vocab()[0].clone(),
            truth_errors: ErrorSet::new(),
        }
    }

    #[test]
    fn weights_default_to_equal_and_shape_the_total() {
        let b = RewardBreakdown::assemble(0.5, 1.0, 0.25, RewardWeights::default());
        assert!((b.total - 1.75).abs() < 1e-12);
        let w = RewardWeights {
            w_sim: 2.0,
            w_err: 0.0,
            w_div: 1.0,
        };
        let b = RewardBreakdown::assemble(0.5, 1.0, 0.25, w);
        assert!((b.total - 1.25).abs() < 1e-12);
    }

    #[test]
    fn diversity_is_zero_for_identical_groups_and_one_for_singletons() {
        let metric = CodeBleuConfig::default();
        let code = planted_vocab()[0].clone();
        let codes = vec![code.clone(), code.clone(), code];
        for i in 0..codes.len() {
            let d = diversity_reward(&codes, i, Language::Java, &metric);
            assert_eq!(d, 0.0, "identical candidates have no diversity");
        }
        let singleton = vec![planted_vocab()[1].clone()];
        assert_eq!(diversity_reward(&singleton, 0, Language::Java, &metric), 1.0);
    }

    #[test]
    fn diversity_is_the_complement_of_the_closest_neighbour() {
        let metric = CodeBleuConfig::default();
        let vocab = planted_vocab();
        let codes = vec![vocab[0].clone(), vocab[1].clone()];
        let sim = codebleu(&codes[1], &codes[0], Language::Java, &metric).combined;
        let d = diversity_reward(&codes, 0, Language::Java, &metric);
        assert!((d - (1.0 - sim)).abs() < 1e-12);
    }

    #[test]
    fn diversity_matches_brute_force_pair_enumeration() {
        let metric = CodeBleuConfig::default();
        let codes = planted_vocab();
        for i in 0..codes.len() {
            let mut best = 0.0f64;
            for (j, other) in codes.iter().enumerate() {
                if j != i {
                    best = best.max(codebleu(other, &codes[i], Language::Java, &metric).combined);
                }
            }
            let got = diversity_reward(&codes, i, Language::Java, &metric);
            assert!((got - (1.0 - best)).abs() < 1e-12, "candidate {i}");
        }
    }

    #[test]
    fn group_rewards_match_component_by_component_hand_assembly() {
        let cfg = RewardConfig::default();
        let mut cache = SimilarityCache::new();
        let vocab = planted_vocab();
        let codes = vec![
            vocab[0].clone(),
            vocab[1].clone(),
            vocab[2].clone(),
            vocab[3].clone(),
            vocab[1].clone(),
        ];
        let sets = planted_sets();
        let predicted: Vec<ErrorSet> = codes.iter().map(|c| sets[c].clone()).collect();
        let truth_errors = ErrorSet::new();
        let rewards = compute_group_rewards(
            &codes,
            &predicted,
            &vocab[0],
            &truth_errors,
            Language::Java,
            &cfg,
            &mut cache,
        )
        .unwrap();
        assert_eq!(rewards.len(), 5);
        for (i, r) in rewards.iter().enumerate() {
            let want_sim = codebleu(&codes[i], &vocab[0], Language::Java, &cfg.metric).combined;
            let want_div = diversity_reward(&codes, i, Language::Java, &cfg.metric);
            let want_err = error_match_reward(&predicted[i], &truth_errors);
            assert!((r.r_sim - want_sim).abs() < 1e-12, "candidate {i} r_sim");
            assert!((r.r_div - want_div).abs() < 1e-12, "candidate {i} r_div");
            assert!((r.r_error - want_err).abs() < 1e-12, "candidate {i} r_error");
            assert!((r.total - (want_sim + want_err + want_div)).abs() < 1e-12);
        }
        // The candidate identical to the truth earns full similarity and
        // error match in this otherwise-diverse, truth-correct group.
        assert_eq!(rewards[0].r_sim, 1.0);
        assert_eq!(rewards[0].r_error, 1.0);
    }

    #[test]
    fn identical_groups_earn_total_two_under_default_weights() {
        let cfg = RewardConfig::default();
        let mut cache = SimilarityCache::new();
        let truth = planted_vocab()[0].clone();
        let codes = vec![truth.clone(), truth.clone(), truth.clone()];
        let predicted = vec![ErrorSet::new(), ErrorSet::new(), ErrorSet::new()];
        let rewards = compute_group_rewards(
            &codes,
            &predicted,
            &truth,
            &ErrorSet::new(),
            Language::Java,
            &cfg,
            &mut cache,
        )
        .unwrap();
        for r in rewards {
            assert_eq!(r.r_sim, 1.0);
            assert_eq!(r.r_error, 1.0);
            assert_eq!(r.r_div, 0.0);
            assert!((r.total - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reordering_candidates_permutes_rewards_without_changing_values() {
        let cfg = RewardConfig::default();
        let vocab = planted_vocab();
        let sets = planted_sets();
        let codes: Vec<String> = vocab.clone();
        let predicted: Vec<ErrorSet> = codes.iter().map(|c| sets[c].clone()).collect();
        let mut cache = SimilarityCache::new();
        let base = compute_group_rewards(
            &codes,
            &predicted,
            &vocab[0],
            &ErrorSet::new(),
            Language::Java,
            &cfg,
            &mut cache,
        )
        .unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffled_codes: Vec<String> = perm.iter().map(|&i| codes[i].clone()).collect();
        let shuffled_predicted: Vec<ErrorSet> = perm.iter().map(|&i| predicted[i].clone()).collect();
        let mut cache = SimilarityCache::new();
        let shuffled = compute_group_rewards(
            &shuffled_codes,
            &shuffled_predicted,
            &vocab[0],
            &ErrorSet::new(),
            Language::Java,
            &cfg,
            &mut cache,
        )
        .unwrap();
        for (pos, &orig) in perm.iter().enumerate() {
            assert_eq!(shuffled[pos], base[orig], "position {pos}");
        }
    }

    #[test]
    fn extraneous_judged_errors_never_raise_the_total() {
        let cfg = RewardConfig::default();
        let mut cache = SimilarityCache::new();
        let vocab = planted_vocab();
        let codes = vec![vocab[1].clone(), vocab[0].clone()];
        let pool: Vec<String> = (0..10).map(|i| format!("e{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a7e);
        for trial in 0..1000 {
            let truth = ErrorSet::from_ids(pool.iter().filter(|_| rng.gen_bool(0.3)).cloned());
            let pred = ErrorSet::from_ids(pool.iter().filter(|_| rng.gen_bool(0.3)).cloned());
            let extraneous = match pool
                .iter()
                .find(|e| !truth.contains(e) && !pred.contains(e))
            {
                Some(e) => e.clone(),
                None => continue,
            };
            let mut inflated = pred.clone();
            inflated.insert(extraneous);
            let before = compute_group_rewards(
                &codes,
                &[pred.clone(), ErrorSet::new()],
                &vocab[0],
                &truth,
                Language::Java,
                &cfg,
                &mut cache,
            )
            .unwrap();
            let after = compute_group_rewards(
                &codes,
                &[inflated, ErrorSet::new()],
                &vocab[0],
                &truth,
                Language::Java,
                &cfg,
                &mut cache,
            )
            .unwrap();
            assert!(
                after[0].total <= before[0].total + 1e-15,
                "trial {trial}: extraneous error raised the total"
            );
        }
    }

    #[test]
    fn similarity_cache_avoids_recomputation() {
        let cfg = RewardConfig::default();
        let mut cache = SimilarityCache::new();
        let vocab = planted_vocab();
        let codes = vec![vocab[0].clone(), vocab[1].clone(), vocab[1].clone()];
        let predicted = vec![ErrorSet::new(), ErrorSet::new(), ErrorSet::new()];
        compute_group_rewards(
            &codes,
            &predicted,
            &vocab[0],
            &ErrorSet::new(),
            Language::Java,
            &cfg,
            &mut cache,
        )
        .unwrap();
        let distinct_pairs = cache.len() as u64;
        assert_eq!(cache.misses, distinct_pairs);
        assert_eq!(cache.hits, 0);
        compute_group_rewards(
            &codes,
            &predicted,
            &vocab[0],
            &ErrorSet::new(),
            Language::Java,
            &cfg,
            &mut cache,
        )
        .unwrap();
        assert_eq!(cache.misses, distinct_pairs, "second pass computed nothing");
        assert_eq!(cache.hits, distinct_pairs);
    }

    #[test]
    fn judge_failures_abort_the_whole_group() {
        let judge = |_: &Problem, code: &str| {
            if code.contains('-') {
                Err(GrpoError::BadConfig("judge offline".to_string()))
            } else {
                Ok(ErrorSet::new())
            }
        };
        let vocab = planted_vocab();
        let err = judge_group(&vocab, &problem(), &judge, 2).unwrap_err();
        assert!(matches!(err, GrpoError::BadConfig(_)));
    }

    #[test]
    fn transport_judge_caches_by_candidate_hash() {
        let labels = vec![ErrorLabel {
            id: "err-missing-term".to_string(),
            description: "dropped one addend from the sum".to_string(),
            category: crate::taxonomy::ErrorCategory::Logical,
        }];
        let calls = Mutex::new(0u32);
        let transport = move |_: &ChatRequest| {
            *calls.lock().unwrap() += 1;
            Ok(vec![
                "{\"errors\": [\"dropped one addend from the sum\"]}".to_string(),
            ])
        };
        let judge_cfg = JudgeConfig::new(
            "http://127.0.0.1:9/v1/chat/completions",
            "judge-model",
            crate::taxonomy::PromptTemplate::ErrorJudge,
        );
        let judge = TransportJudge::new(&transport, &labels, judge_cfg);
        let vocab = planted_vocab();
        let codes = vec![vocab[1].clone(), vocab[1].clone(), vocab[2].clone()];
        let sets = judge_group(&codes, &problem(), &judge, 2).unwrap();
        assert_eq!(sets.len(), 3);
        for set in &sets {
            assert!(set.contains("err-missing-term"));
        }
        let cache = judge.cache.lock().unwrap();
        assert_eq!(cache.len(), 2, "two distinct candidates");
        assert_eq!(cache.misses, 2);
        assert_eq!(cache.hits, 1);
    }

    #[test]
    fn advantages_match_the_hand_z_scores() {
        let a = normalize_advantages(&[1.0, 2.0, 3.0], 1e-8);
        assert!((a[0] + 1.2247).abs() < 1e-4);
        assert!(a[1].abs() < 1e-4);
        assert!((a[2] - 1.2247).abs() < 1e-4);
        assert_eq!(a.iter().sum::<f64>(), 0.0, "sum closes exactly");

        let equal = normalize_advantages(&[1.7, 1.7, 1.7, 1.7], 1e-8);
        assert_eq!(equal, vec![0.0, 0.0, 0.0, 0.0]);
        assert!(normalize_advantages(&[], 1e-8).is_empty());
    }

    #[test]
    fn advantage_sums_close_exactly_and_variance_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xad7a);
        let mut wide_checked = 0;
        while wide_checked < 200 {
            let g = rng.gen_range(2..=8);
            let totals: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..1000.0)).collect();
            let mean = totals.iter().sum::<f64>() / g as f64;
            let sigma = (totals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64).sqrt();
            if sigma < 50.0 {
                continue;
            }
            let a = normalize_advantages(&totals, 1e-8);
            assert_eq!(a.iter().sum::<f64>(), 0.0);
            let var = a.iter().map(|x| x * x).sum::<f64>() / g as f64;
            assert!((var - 1.0).abs() <= 1e-9, "wide-scale variance {var}");
            wide_checked += 1;
        }
        // Reward-scale groups: the epsilon in the denominator biases the
        // variance by O(eps/sigma), far below any tolerance that matters.
        let mut narrow_checked = 0;
        while narrow_checked < 200 {
            let g = rng.gen_range(2..=8);
            let totals: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..3.0)).collect();
            let mean = totals.iter().sum::<f64>() / g as f64;
            let sigma = (totals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64).sqrt();
            if sigma < 0.05 {
                continue;
            }
            let a = normalize_advantages(&totals, 1e-8);
            assert_eq!(a.iter().sum::<f64>(), 0.0);
            let var = a.iter().map(|x| x * x).sum::<f64>() / g as f64;
            assert!((var - 1.0).abs() <= 1e-6, "reward-scale variance {var}");
            narrow_checked += 1;
        }
    }

    #[test]
    fn clip_term_reference_arithmetic() {
        let (v, d) = clip_term(1.5, 1.0, 0.2);
        assert!((v - 1.2).abs() < 1e-12, "positive advantage clips high");
        assert_eq!(d, 0.0);
        let (v, d) = clip_term(0.5, -1.0, 0.2);
        assert!((v + 0.8).abs() < 1e-12, "min selects the clipped branch");
        assert_eq!(d, 0.0);
        let (v, d) = clip_term(1.1, 2.0, 0.2);
        assert!((v - 2.2).abs() < 1e-12, "inside the band nothing clips");
        assert_eq!(d, 2.0);
        let (v, d) = clip_term(1.0, -0.7, 0.2);
        assert_eq!(v, -0.7);
        assert_eq!(d, -0.7);
    }

    #[test]
    fn ratio_one_objective_is_the_mean_advantage() {
        let logprobs = vec![vec![-0.3, -1.1], vec![-0.7, -0.2], vec![-0.9, -0.4]];
        let advantages = normalize_advantages(&[1.0, 2.0, 3.0], 1e-8);
        for mode in [RatioMode::PerToken, RatioMode::Sequence] {
            let (value, _, clip_fraction) =
                l_clip_from_logprobs(&logprobs, &logprobs, &advantages, 0.2, mode).unwrap();
            assert!(value.abs() < 1e-12, "z-scores sum to zero, {mode:?}");
            assert_eq!(clip_fraction, 0.0);
        }
    }

    #[test]
    fn kl_estimator_reference_points() {
        let new = vec![vec![-0.4, -1.3]];
        let (kl, grads) = kl_from_logprobs(&new, &new).unwrap();
        assert_eq!(kl, 0.0, "identical policies have zero divergence");
        assert!(grads[0].iter().all(|g| *g == 0.0));

        let ln2 = 2.0f64.ln();
        let (kl, grads) = kl_from_logprobs(&vec![vec![-ln2]], &vec![vec![0.0]]).unwrap();
        assert!((kl - (2.0 - ln2 - 1.0)).abs() < 1e-12);
        assert!((grads[0][0] - (1.0 - 2.0)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(0x412);
        for _ in 0..1000 {
            let a = rng.gen_range(-5.0..0.0);
            let b = rng.gen_range(-5.0..0.0);
            let (kl, _) = kl_from_logprobs(&vec![vec![a]], &vec![vec![b]]).unwrap();
            assert!(kl >= 0.0, "estimator must be non-negative");
        }
    }

    /// All sampling contexts reachable with `slots` draws over `vocab_len`
    /// tokens, in breadth-first order.
    fn all_contexts(p: &Prompt, vocab_len: usize, slots: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..slots {
            let mut next = Vec::new();
            for prefix in &frontier {
                out.push(crate::policy::context_id(p, prefix));
                for v in 0..vocab_len {
                    let mut longer = prefix.clone();
                    longer.push(v);
                    next.push(longer);
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn objective_gradient_matches_finite_differences_across_random_configs() {
        let p = prompt();
        let mut rng = ChaCha8Rng::seed_from_u64(0x6e0);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 100 && attempts < 400 {
            attempts += 1;
            let vocab_len = rng.gen_range(2..=4);
            let slots = rng.gen_range(1..=3);
            let vocab: Vec<String> = (0..vocab_len).map(|i| format!("int v{i} = {i};")).collect();
            let mut params = ToyPolicyParams::new(vocab.clone(), slots).unwrap();
            let mut old_params = params.clone();
            let mut ref_params = params.clone();
            for context in all_contexts(&p, vocab_len, slots) {
                let draw = |rng: &mut ChaCha8Rng| {
                    (0..vocab_len).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>()
                };
                params.theta.insert(context.clone(), draw(&mut rng));
                old_params.theta.insert(context.clone(), draw(&mut rng));
                ref_params.theta.insert(context, draw(&mut rng));
            }
            let g = rng.gen_range(2..=4);
            let candidates = toy_sample(&old_params, &p, g, rng.gen()).unwrap();
            let totals: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..3.0)).collect();
            let advantages = normalize_advantages(&totals, 1e-8);
            let logprobs_old = group_logprobs(&candidates).unwrap();
            let logprobs_ref: Vec<Vec<f64>> = candidates
                .iter()
                .map(|c| toy_logprob(&ref_params, &p, c).unwrap().1)
                .collect();
            let cfg = GrpoConfig {
                ratio_mode: if checked % 2 == 0 {
                    RatioMode::PerToken
                } else {
                    RatioMode::Sequence
                },
                ..GrpoConfig::default()
            };

            // The clip kink is non-differentiable; skip configurations that
            // land a ratio within reach of a central-difference step.
            let eval = grpo_objective(
                &params,
                &p,
                &candidates,
                &advantages,
                &logprobs_old,
                &logprobs_ref,
                &cfg,
            )
            .unwrap();
            let near_kink = (0..candidates.len()).any(|i| match cfg.ratio_mode {
                RatioMode::PerToken => (0..eval.logprobs_new[i].len()).any(|k| {
                    let ratio = (eval.logprobs_new[i][k] - logprobs_old[i][k]).exp();
                    (ratio - 0.8).abs() < 1e-3 || (ratio - 1.2).abs() < 1e-3
                }),
                RatioMode::Sequence => {
                    let ratio = (eval.logprobs_new[i].iter().sum::<f64>()
                        - logprobs_old[i].iter().sum::<f64>())
                    .exp();
                    (ratio - 0.8).abs() < 1e-3 || (ratio - 1.2).abs() < 1e-3
                }
            });
            if near_kink {
                continue;
            }

            let step = 1e-5;
            for (context, row) in &eval.grad.rows {
                for v in 0..row.len() {
                    let mut plus = params.clone();
                    plus.theta.get_mut(context).unwrap()[v] += step;
                    let mut minus = params.clone();
                    minus.theta.get_mut(context).unwrap()[v] -= step;
                    let jp = grpo_objective(&plus, &p, &candidates, &advantages, &logprobs_old, &logprobs_ref, &cfg)
                        .unwrap()
                        .objective;
                    let jm = grpo_objective(&minus, &p, &candidates, &advantages, &logprobs_old, &logprobs_ref, &cfg)
                        .unwrap()
                        .objective;
                    let numeric = (jp - jm) / (2.0 * step);
                    let analytic = row[v];
                    let rel = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        rel <= 1e-4,
                        "config {checked} context {context} entry {v}: analytic {analytic}, numeric {numeric}"
                    );
                }
            }
            checked += 1;
        }
        assert_eq!(checked, 100, "not enough kink-free configurations");
    }

    #[test]
    fn ratio_modes_coincide_at_the_sampling_point() {
        let p = prompt();
        let vocab: Vec<String> = planted_vocab();
        let slots = 3;
        let mut params = ToyPolicyParams::new(vocab, slots).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x70c);
        for context in all_contexts(&p, 4, slots) {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            params.theta.insert(context, row);
        }
        let candidates = toy_sample(&params, &p, 4, 99).unwrap();
        let advantages = normalize_advantages(&[0.5, 1.5, 2.5, 1.0], 1e-8);
        let logprobs_old = group_logprobs(&candidates).unwrap();
        // Sampling params, current params, and reference all agree, so the
        // KL gradient vanishes and every ratio sits at exactly 1.
        let eval = |mode: RatioMode| {
            let cfg = GrpoConfig {
                ratio_mode: mode,
                ..GrpoConfig::default()
            };
            grpo_objective(
                &params,
                &p,
                &candidates,
                &advantages,
                &logprobs_old,
                &logprobs_old,
                &cfg,
            )
            .unwrap()
        };
        let per_token = eval(RatioMode::PerToken);
        let sequence = eval(RatioMode::Sequence);
        assert_eq!(per_token.grad.rows.len(), sequence.grad.rows.len());
        for (context, pt_row) in &per_token.grad.rows {
            let seq_row = &sequence.grad.rows[context];
            for (a, b) in pt_row.iter().zip(seq_row) {
                // The broadcast advantage differs only by the token-mean
                // factor, so entries agree up to the slot count — and in
                // particular always in sign.
                assert!((b - a * slots as f64).abs() < 1e-12);
                assert!(a.signum() == b.signum() || (a.abs() < 1e-15 && b.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn zero_advantage_batches_leave_the_policy_unchanged() {
        let vocab = vec!["int only = 1;".to_string()];
        let mut params = ToyPolicyParams::new(vocab.clone(), 1).unwrap();
        let item = TrainItem {
            problem: problem(),
            prompt: prompt(),
            truth_code: vocab[0].clone(),
            truth_errors: ErrorSet::new(),
        };
        let judge = |_: &Problem, _: &str| Ok(ErrorSet::new());
        for beta in [0.0, 0.5] {
            let cfg = GrpoConfig {
                group_size: 3,
                beta,
                iterations: 3,
                ..GrpoConfig::default()
            };
            let before = toy_logprob(&params, &item.prompt, &toy_sample(&params, &item.prompt, 1, 0).unwrap()[0])
                .unwrap()
                .0;
            grpo_train(&mut params, &[item.clone()], &judge, &cfg).unwrap();
            for row in params.theta.values() {
                assert!(row.iter().all(|v| *v == 0.0), "beta {beta} moved the table");
            }
            let after = toy_logprob(&params, &item.prompt, &toy_sample(&params, &item.prompt, 1, 0).unwrap()[0])
                .unwrap()
                .0;
            assert_eq!(before, after);
        }
    }

    /// Monte-Carlo estimate of the expected group-total reward under the
    /// current policy, averaged over sampled groups.
    fn expected_reward(params: &ToyPolicyParams, item: &TrainItem, groups: usize, seed: u64) -> f64 {
        let judge = planted_judge();
        let cfg = RewardConfig::default();
        let mut cache = SimilarityCache::new();
        let mut total = 0.0;
        let mut count = 0usize;
        for g in 0..groups {
            let candidates = toy_sample(params, &item.prompt, 5, seed.wrapping_add(g as u64)).unwrap();
            let codes: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
            let predicted: Vec<ErrorSet> = codes
                .iter()
                .map(|c| judge(&item.problem, c).unwrap())
                .collect();
            let rewards = compute_group_rewards(
                &codes,
                &predicted,
                &item.truth_code,
                &item.truth_errors,
                Language::Java,
                &cfg,
                &mut cache,
            )
            .unwrap();
            total += rewards.iter().map(|r| r.total).sum::<f64>();
            count += rewards.len();
        }
        total / count as f64
    }

    #[test]
    fn training_without_kl_raises_monte_carlo_expected_reward() {
        let vocab = planted_vocab();
        let mut params = ToyPolicyParams::new(vocab, 1).unwrap();
        let item = planted_item();
        let before = expected_reward(&params, &item, 80, 0x3333);
        let cfg = GrpoConfig {
            beta: 0.0,
            iterations: 150,
            seed: 21,
            ..GrpoConfig::default()
        };
        grpo_train(&mut params, &[item.clone()], &planted_judge(), &cfg).unwrap();
        let after = expected_reward(&params, &item, 80, 0x3333);
        assert!(
            after > before + 0.1,
            "expected reward did not improve: {before} -> {after}"
        );
    }

    #[test]
    fn training_reaches_the_planted_optimum() {
        let vocab = planted_vocab();
        let mut params = ToyPolicyParams::new(vocab, 1).unwrap();
        let item = planted_item();
        let cfg = GrpoConfig {
            group_size: 5,
            beta: 0.1,
            learning_rate: 0.1,
            iterations: 2000,
            seed: 7,
            ..GrpoConfig::default()
        };
        let trace = grpo_train(&mut params, &[item.clone()], &planted_judge(), &cfg).unwrap();
        assert_eq!(trace.records.len(), 2000);

        let root = crate::policy::context_id(&item.prompt, &[]);
        let logits = params.theta[&root].clone();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let p_target = (logits[0] - max).exp() / z;
        assert!(
            p_target > 0.9,
            "planted candidate probability {p_target} after 2000 iterations"
        );

        // Entropy starts at the uniform value and collapses as the policy
        // concentrates; the mean reward climbs.
        assert!((trace.records[0].entropy - 4.0f64.ln()).abs() < 1e-9);
        let last = trace.records.last().unwrap();
        assert!(last.entropy < 0.6, "final entropy {}", last.entropy);
        assert!(last.mean_reward > trace.records[0].mean_reward + 0.3);
        for r in &trace.records {
            for v in [r.mean_reward, r.mean_r_sim, r.mean_r_error, r.mean_r_div, r.kl, r.clip_fraction, r.entropy] {
                assert!(v.is_finite());
            }
        }

        // Determinism: an identical run lands on the identical table.
        let mut rerun = ToyPolicyParams::new(planted_vocab(), 1).unwrap();
        let trace2 = grpo_train(&mut rerun, &[item], &planted_judge(), &cfg).unwrap();
        assert_eq!(rerun, params);
        assert_eq!(trace2.records, trace.records);
    }

    #[test]
    fn huge_beta_keeps_the_policy_at_the_reference() {
        let vocab = planted_vocab();
        let mut params = ToyPolicyParams::new(vocab, 1).unwrap();
        let item = planted_item();
        let cfg = GrpoConfig {
            beta: 1e3,
            learning_rate: 1e-3,
            iterations: 400,
            seed: 11,
            ..GrpoConfig::default()
        };
        grpo_train(&mut params, &[item.clone()], &planted_judge(), &cfg).unwrap();
        let root = crate::policy::context_id(&item.prompt, &[]);
        let logits = params.theta[&root].clone();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let tv: f64 = logits
            .iter()
            .map(|l| ((l - max).exp() / z - 0.25).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.05, "total variation {tv} from the uniform reference");
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let ok = GrpoConfig::default();
        ok.validate().unwrap();
        assert!(matches!(
            GrpoConfig { group_size: 1, ..ok.clone() }.validate(),
            Err(GrpoError::GroupTooSmall(1))
        ));
        for bad in [
            GrpoConfig { clip_epsilon: 0.0, ..ok.clone() },
            GrpoConfig { beta: -0.1, ..ok.clone() },
            GrpoConfig { learning_rate: 0.0, ..ok.clone() },
            GrpoConfig { advantage_epsilon: 0.0, ..ok.clone() },
            GrpoConfig {
                reward: RewardConfig { max_parallel: 0, ..RewardConfig::default() },
                ..ok.clone()
            },
            GrpoConfig {
                reward: RewardConfig {
                    weights: RewardWeights { w_sim: -1.0, ..RewardWeights::default() },
                    ..RewardConfig::default()
                },
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(GrpoError::BadConfig(_))));
        }
    }

    #[test]
    fn trace_csv_has_the_pinned_columns() {
        let trace = TrainTrace {
            records: vec![
                TraceRecord {
                    iteration: 0,
                    mean_reward: 1.25,
                    mean_r_sim: 0.5,
                    mean_r_error: 0.375,
                    mean_r_div: 0.375,
                    kl: 0.0,
                    clip_fraction: 0.0,
                    entropy: 1.3862943611198906,
                },
                TraceRecord {
                    iteration: 1,
                    mean_reward: 1.5,
                    mean_r_sim: 0.625,
                    mean_r_error: 0.4375,
                    mean_r_div: 0.4375,
                    kl: 0.0125,
                    clip_fraction: 0.0,
                    entropy: 1.2,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,mean_reward,mean_r_sim,mean_r_error,mean_r_div,kl,clip_fraction"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.25);
        assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.4375);
        assert!(lines.next().is_none());
    }

    #[test]
    fn non_finite_parameters_abort_with_a_group_dump() {
        let vocab = planted_vocab();
        let mut params = ToyPolicyParams::new(vocab, 1).unwrap();
        let item = planted_item();
        let root = crate::policy::context_id(&item.prompt, &[]);
        params.theta.insert(root, vec![f64::NAN, 0.0, 0.0, 0.0]);
        let cfg = GrpoConfig {
            iterations: 1,
            ..GrpoConfig::default()
        };
        let err = grpo_train(&mut params, &[item], &planted_judge(), &cfg).unwrap_err();
        match &err {
            GrpoError::NonFiniteObjective { iteration, dump } => {
                assert_eq!(*iteration, 0);
                assert!(dump.contains("candidates"), "dump carries the group");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn capability_checks_block_untrainable_and_unscored_inputs() {
        ensure_trainable(&PolicyHandle::toy()).unwrap();
        assert!(matches!(
            ensure_trainable(&PolicyHandle::remote(true)),
            Err(GrpoError::Untrainable(PolicyKind::Remote))
        ));
        let scored = Completion {
            tokens: vec!["a".to_string()],
            text: "a".to_string(),
            logprobs: Some(vec![-0.1]),
            refusal: false,
        };
        let unscored = Completion {
            tokens: Vec::new(),
            text: "b".to_string(),
            logprobs: None,
            refusal: false,
        };
        assert!(matches!(
            group_logprobs(&[scored, unscored]),
            Err(GrpoError::Unscored(1))
        ));
    }

    #[test]
    fn train_items_snapshot_mastery_before_each_submission() {
        let kcs = catalog();
        let problems = vec![
            Problem {
                id: "p0".to_string(),
                statement: "Sum three integers.".to_string(),
                language: Language::Java,
                kc_ids: vec!["kc-arith".to_string()],
            },
            Problem {
                id: "p1".to_string(),
                statement: "Return the maximum.".to_string(),
                language: Language::Java,
                kc_ids: vec!["kc-return".to_string()],
            },
        ];
        let submissions = vec![
            Submission {
                student_id: "s0".to_string(),
                problem_id: "p0".to_string(),
                order_index: 0,
                code: "int total = a + b + c;".to_string(),
                correct: true,
                errors: vec![],
            },
            Submission {
                student_id: "s0".to_string(),
                problem_id: "p1".to_string(),
                order_index: 1,
                code: "return a;".to_string(),
                correct: false,
                errors: vec!["err-missing-term".to_string()],
            },
            Submission {
                student_id: "s1".to_string(),
                problem_id: "p1".to_string(),
                order_index: 0,
                code: "return Math.max(a, b);".to_string(),
                correct: true,
                errors: vec![],
            },
        ];
        let ds = Dataset::new(kcs, problems, submissions).unwrap();
        let ke = KeParameters::init(3, 2, 5);
        let items = build_train_items(&ds.full_view(), &ke).unwrap();
        assert_eq!(items.len(), 3);

        // The second item of s0 sees the mastery profile after one step of
        // history; first submissions see the shared prior.
        let prior = mastery_profile(&ds, "s1", 0, &ke).unwrap();
        let after_one = mastery_profile(&ds, "s0", 1, &ke).unwrap();
        assert_eq!(items[1].prompt.mastery_snapshot.len(), 1);
        let (name, value) = &items[1].prompt.mastery_snapshot[0];
        assert_eq!(name, "return statements");
        assert!((value - after_one.m[1]).abs() < 1e-15);
        let (_, first_value) = &items[2].prompt.mastery_snapshot[0];
        assert!((first_value - prior.m[1]).abs() < 1e-15);

        assert!(items[1].truth_errors.contains("err-missing-term"));
        assert!(items[0].truth_errors.is_empty());
        assert_eq!(items[2].truth_code, "return Math.max(a, b);");
    }
}
