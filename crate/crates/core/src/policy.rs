//! Generative-policy abstraction: knowledge-guided prompt construction, a
//! trainable toy softmax policy for desk-scale training loops, the token-level
//! SFT loss, and a remote-endpoint sampler.
//!
//! The toy policy is tabular: each sampling context (prompt plus generated
//! prefix) hashes to a logits row over a shared snippet vocabulary, and a
//! completion is a fixed number of slot choices joined by newlines. Distinct
//! token choices deliberately carry distinct error content, so error-match
//! and diversity rewards stay informative at desk scale.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{KnowledgeComponent, Language, Problem};
use crate::knowledge::MasteryVector;
use crate::llm::{ChatMessage, ChatRequest, DetailedChatTransport, LlmError};
use crate::util::{sha256_hex, short_hash};

/// Logit magnitude guard for the toy policy; updates clip to ±this bound.
pub const LOGIT_BOUND: f64 = 30.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no mastery entry for knowledge component {0:?}")]
    MissingMastery(String),
    #[error("mastery vector has {got} entries for a catalog of {expected}")]
    MasteryShape { expected: usize, got: usize },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("unknown sampling context {0} (strict mode)")]
    UnknownContext(String),
    #[error("completion has {got} tokens, expected {expected} slots")]
    SlotCount { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("group size must be at least 1")]
    EmptyGroup,
    #[error("logits row for context {context} has {got} entries, vocabulary has {expected}")]
    RowShape {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("completion is unscored; policy-gradient math needs log-probabilities")]
    Unscored,
    #[error("parameter file {path}: {source}")]
    ParamIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parameter file {path}: {source}")]
    ParamFormat {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// A fully rendered generation prompt with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub text: String,
    pub problem_id: String,
    /// (KC name, unrounded mastery) for the problem's KCs, catalog order.
    pub mastery_snapshot: Vec<(String, f64)>,
}

impl Prompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(&self.system),
            ChatMessage::user(&self.text),
        ]
    }

    /// Stable identity of the rendered prompt (system and user bytes).
    pub fn context_key(&self) -> String {
        sha256_hex(format!("{}\u{0}{}", self.system, self.text).as_bytes())
    }
}

const SIMULATOR_SYSTEM_TEMPLATE: &str = "You are a student code simulator.\nGiven a programming problem and the student's mastery levels for specific knowledge components (KCs), generate {language} code that reflects the understanding, including plausible student errors. Output only the code, with no explanations or comments.";

fn language_name(language: Language) -> &'static str {
    match language {
        Language::Java => "Java",
        Language::Python => "Python",
    }
}

/// Renders the student-simulator prompt for one problem: statement first,
/// then one mastery line per problem KC in catalog order, values rounded to
/// two decimals (Rust's default round-half-even formatting).
pub fn build_knowledge_prompt(
    problem: &Problem,
    m: &MasteryVector,
    catalog: &[KnowledgeComponent],
) -> Result<Prompt, PolicyError> {
    if m.m.len() != catalog.len() {
        return Err(PolicyError::MasteryShape {
            expected: catalog.len(),
            got: m.m.len(),
        });
    }
    let mut snapshot = Vec::new();
    for (position, kc) in catalog.iter().enumerate() {
        if problem.kc_ids.iter().any(|id| *id == kc.id) {
            snapshot.push((kc.name.clone(), m.m[position]));
        }
    }
    for id in &problem.kc_ids {
        if !catalog.iter().any(|kc| kc.id == *id) {
            return Err(PolicyError::MissingMastery(id.clone()));
        }
    }
    let mut text = format!("Problem:\n{}\n\nStudent information:\n", problem.statement);
    for (index, (name, value)) in snapshot.iter().enumerate() {
        text.push_str(&format!(
            "KC {}: {}. The student's mastery level on {} is {:.2}.\n",
            index + 1,
            name,
            name,
            value
        ));
    }
    text.push_str("\nSimulate the student written code:");
    let system =
        SIMULATOR_SYSTEM_TEMPLATE.replace("{language}", language_name(problem.language));
    Ok(Prompt {
        system,
        text,
        problem_id: problem.id.clone(),
        mastery_snapshot: snapshot,
    })
}

/// One generated candidate. Toy completions always carry their tokens and
/// per-token log-probabilities; remote completions carry them only when the
/// endpoint returned scores — `logprobs: None` marks an unscored completion,
/// whose token list is empty and whose `text` is authoritative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<String>,
    pub text: String,
    pub logprobs: Option<Vec<f64>>,
    /// Set when the reply looks like refusal prose rather than code.
    pub refusal: bool,
}

impl Completion {
    pub fn scored(&self) -> bool {
        self.logprobs.is_some()
    }

    /// Sum of per-token log-probabilities; `None` for unscored completions.
    pub fn total_logprob(&self) -> Option<f64> {
        self.logprobs.as_ref().map(|lp| lp.iter().sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Toy,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub can_sample: bool,
    pub can_score: bool,
    pub can_update: bool,
}

/// What a policy backend can do. The toy policy supports everything; a
/// remote endpoint can sample, scores only if it returns log-probabilities,
/// and can never be updated in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyHandle {
    pub kind: PolicyKind,
    pub capabilities: Capabilities,
}

impl PolicyHandle {
    pub fn toy() -> Self {
        Self {
            kind: PolicyKind::Toy,
            capabilities: Capabilities {
                can_sample: true,
                can_score: true,
                can_update: true,
            },
        }
    }

    pub fn remote(endpoint_scores: bool) -> Self {
        Self {
            kind: PolicyKind::Remote,
            capabilities: Capabilities {
                can_sample: true,
                can_score: endpoint_scores,
                can_update: false,
            },
        }
    }
}

/// Tabular softmax policy: completions are `slots` token choices, each drawn
/// from a softmax over the shared vocabulary, conditioned on a hash of the
/// prompt and the generated prefix. Contexts absent from the table read as
/// all-zero logits (uniform) unless `strict` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicyParams {
    pub vocabulary: Vec<String>,
    pub slots: usize,
    #[serde(default)]
    pub strict: bool,
    pub theta: BTreeMap<String, Vec<f64>>,
}

/// Sampling context id: the prompt identity plus the chosen prefix.
pub fn context_id(prompt: &Prompt, prefix: &[usize]) -> String {
    let trail: Vec<String> = prefix.iter().map(|i| i.to_string()).collect();
    short_hash(format!("{}|{}", prompt.context_key(), trail.join(",")).as_bytes())
}

impl ToyPolicyParams {
    pub fn new(vocabulary: Vec<String>, slots: usize) -> Result<Self, PolicyError> {
        if vocabulary.is_empty() {
            return Err(PolicyError::EmptyVocabulary);
        }
        Ok(Self {
            vocabulary,
            slots,
            strict: false,
            theta: BTreeMap::new(),
        })
    }

    fn logits_for(&self, context: &str) -> Result<Vec<f64>, PolicyError> {
        match self.theta.get(context) {
            Some(row) => {
                if row.len() != self.vocabulary.len() {
                    return Err(PolicyError::RowShape {
                        context: context.to_string(),
                        expected: self.vocabulary.len(),
                        got: row.len(),
                    });
                }
                Ok(row.clone())
            }
            None if self.strict => Err(PolicyError::UnknownContext(context.to_string())),
            None => Ok(vec![0.0; self.vocabulary.len()]),
        }
    }

    fn token_index(&self, token: &str) -> Result<usize, PolicyError> {
        self.vocabulary
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| PolicyError::UnknownToken(token.to_string()))
    }

    /// Decodes a slot-choice sequence to text: tokens joined by newlines.
    pub fn decode(&self, token_indices: &[usize]) -> String {
        token_indices
            .iter()
            .map(|&i| self.vocabulary[i].as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Numerically stable log-softmax.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_z).collect()
}

/// Draws `g` completions by ancestral sampling, one token per slot.
/// Deterministic given the seed: one ChaCha stream drives all `g` samples.
pub fn toy_sample(
    params: &ToyPolicyParams,
    prompt: &Prompt,
    g: usize,
    seed: u64,
) -> Result<Vec<Completion>, PolicyError> {
    if g == 0 {
        return Err(PolicyError::EmptyGroup);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut completions = Vec::with_capacity(g);
    for _ in 0..g {
        let mut prefix: Vec<usize> = Vec::with_capacity(params.slots);
        let mut logprobs = Vec::with_capacity(params.slots);
        for _ in 0..params.slots {
            let context = context_id(prompt, &prefix);
            let scores = log_softmax(&params.logits_for(&context)?);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = scores.len() - 1;
            for (index, lp) in scores.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    chosen = index;
                    break;
                }
            }
            logprobs.push(scores[chosen]);
            prefix.push(chosen);
        }
        completions.push(Completion {
            tokens: prefix.iter().map(|&i| params.vocabulary[i].clone()).collect(),
            text: params.decode(&prefix),
            logprobs: Some(logprobs),
            refusal: false,
        });
    }
    Ok(completions)
}

/// Per-token scoring detail for one completion: the context visited, the
/// chosen token's vocabulary index, and the full log-softmax row there.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub context: String,
    pub token_index: usize,
    pub log_probs: Vec<f64>,
}

/// Walks `completion` under the policy, exposing the full distribution at
/// every step — the raw material for gradient math layered on top.
pub fn toy_token_distributions(
    params: &ToyPolicyParams,
    prompt: &Prompt,
    completion: &Completion,
) -> Result<Vec<TokenDistribution>, PolicyError> {
    if completion.tokens.len() != params.slots {
        return Err(PolicyError::SlotCount {
            expected: params.slots,
            got: completion.tokens.len(),
        });
    }
    let mut prefix = Vec::with_capacity(params.slots);
    let mut steps = Vec::with_capacity(params.slots);
    for token in &completion.tokens {
        let index = params.token_index(token)?;
        let context = context_id(prompt, &prefix);
        let scores = log_softmax(&params.logits_for(&context)?);
        steps.push(TokenDistribution {
            context,
            token_index: index,
            log_probs: scores,
        });
        prefix.push(index);
    }
    Ok(steps)
}

/// Exact log-probability of `completion` under the policy: per-token
/// log-softmax values and their sum.
pub fn toy_logprob(
    params: &ToyPolicyParams,
    prompt: &Prompt,
    completion: &Completion,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let per_token: Vec<f64> = toy_token_distributions(params, prompt, completion)?
        .iter()
        .map(|step| step.log_probs[step.token_index])
        .collect();
    Ok((per_token.iter().sum(), per_token))
}

/// Gradient with respect to the logits table: one row per touched context.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyGrad {
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl PolicyGrad {
    pub fn add_row(&mut self, context: &str, row: &[f64]) {
        let entry = self
            .rows
            .entry(context.to_string())
            .or_insert_with(|| vec![0.0; row.len()]);
        for (slot, value) in entry.iter_mut().zip(row) {
            *slot += value;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for value in row.iter_mut() {
                *value *= factor;
            }
        }
    }

    /// Accumulates another gradient into this one, row by row.
    pub fn merge(&mut self, other: &PolicyGrad) {
        for (context, row) in &other.rows {
            self.add_row(context, row);
        }
    }
}

/// Token-level cross-entropy of `target` under the policy, with its gradient
/// w.r.t. every touched logits row: `∂(−log p)/∂logit = softmax − onehot`.
pub fn sft_loss(
    params: &ToyPolicyParams,
    prompt: &Prompt,
    target: &Completion,
) -> Result<(f64, PolicyGrad), PolicyError> {
    if target.tokens.len() != params.slots {
        return Err(PolicyError::SlotCount {
            expected: params.slots,
            got: target.tokens.len(),
        });
    }
    let mut prefix = Vec::with_capacity(params.slots);
    let mut loss = 0.0;
    let mut grad = PolicyGrad::default();
    for token in &target.tokens {
        let index = params.token_index(token)?;
        let context = context_id(prompt, &prefix);
        let scores = log_softmax(&params.logits_for(&context)?);
        loss -= scores[index];
        let mut row: Vec<f64> = scores.iter().map(|lp| lp.exp()).collect();
        row[index] -= 1.0;
        grad.add_row(&context, &row);
        prefix.push(index);
    }
    Ok((loss, grad))
}

/// Gradient-ascent step `θ ← θ + lr·g`, clipping every logit to
/// ±[`LOGIT_BOUND`]. Contexts touched for the first time start from the
/// implicit zero row.
pub fn toy_update(
    params: &mut ToyPolicyParams,
    gradient: &PolicyGrad,
    learning_rate: f64,
) -> Result<(), PolicyError> {
    for (context, row) in &gradient.rows {
        if row.len() != params.vocabulary.len() {
            return Err(PolicyError::RowShape {
                context: context.clone(),
                expected: params.vocabulary.len(),
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite("gradient"));
        }
    }
    for (context, row) in &gradient.rows {
        let entry = params
            .theta
            .entry(context.clone())
            .or_insert_with(|| vec![0.0; params.vocabulary.len()]);
        for (logit, g) in entry.iter_mut().zip(row) {
            *logit = (*logit + learning_rate * g).clamp(-LOGIT_BOUND, LOGIT_BOUND);
        }
    }
    Ok(())
}

/// Writes the toy policy table as JSON (vocabulary, then parallel context /
/// logits arrays).
pub fn save_toy_policy(params: &ToyPolicyParams, path: &Path) -> Result<(), PolicyError> {
    #[derive(Serialize)]
    struct FileForm<'a> {
        vocabulary: &'a [String],
        slots: usize,
        strict: bool,
        contexts: Vec<&'a String>,
        logits: Vec<&'a Vec<f64>>,
    }
    let form = FileForm {
        vocabulary: &params.vocabulary,
        slots: params.slots,
        strict: params.strict,
        contexts: params.theta.keys().collect(),
        logits: params.theta.values().collect(),
    };
    let writer = BufWriter::new(File::create(path).map_err(|source| PolicyError::ParamIo {
        path: path.to_path_buf(),
        source,
    })?);
    serde_json::to_writer_pretty(writer, &form).map_err(|source| PolicyError::ParamFormat {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a toy policy table back, validating row shapes.
pub fn load_toy_policy(path: &Path) -> Result<ToyPolicyParams, PolicyError> {
    #[derive(Deserialize)]
    struct FileForm {
        vocabulary: Vec<String>,
        slots: usize,
        #[serde(default)]
        strict: bool,
        contexts: Vec<String>,
        logits: Vec<Vec<f64>>,
    }
    let reader = BufReader::new(File::open(path).map_err(|source| PolicyError::ParamIo {
        path: path.to_path_buf(),
        source,
    })?);
    let form: FileForm = serde_json::from_reader(reader).map_err(|source| PolicyError::ParamFormat {
        path: path.to_path_buf(),
        source,
    })?;
    if form.vocabulary.is_empty() {
        return Err(PolicyError::EmptyVocabulary);
    }
    let mut theta = BTreeMap::new();
    for (context, row) in form.contexts.into_iter().zip(form.logits) {
        if row.len() != form.vocabulary.len() {
            return Err(PolicyError::RowShape {
                context,
                expected: form.vocabulary.len(),
                got: row.len(),
            });
        }
        theta.insert(context, row);
    }
    Ok(ToyPolicyParams {
        vocabulary: form.vocabulary,
        slots: form.slots,
        strict: form.strict,
        theta,
    })
}

/// Decoding parameters for remote generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            top_k: Some(40),
            max_tokens: None,
            seed: None,
        }
    }
}

/// Replies with none of these anywhere read as refusal prose, not code.
const CODE_MARKERS: [&str; 10] = [
    "{", "}", ";", "=", "(", "def ", "return", "print", "import", "class ",
];

/// Heuristic refusal detector: a non-empty reply that contains no code
/// marker at all is flagged (the caller decides what to do with it).
pub fn looks_like_refusal(text: &str) -> bool {
    let trimmed = text.trim();
    !trimmed.is_empty() && !CODE_MARKERS.iter().any(|marker| trimmed.contains(marker))
}

/// Samples `g` completions from a remote endpoint in one request, forwarding
/// the decode parameters verbatim and requesting log-probabilities. Text is
/// kept exactly as returned (so scored token lists always decode to it);
/// completions come back unscored when the endpoint omits log-probabilities.
/// Transport failures retry up to `retries` additional times.
pub fn remote_sample(
    transport: &dyn DetailedChatTransport,
    model: &str,
    prompt: &Prompt,
    g: usize,
    decode: &DecodeParams,
    retries: u32,
) -> Result<Vec<Completion>, PolicyError> {
    if g == 0 {
        return Err(PolicyError::EmptyGroup);
    }
    let mut request = ChatRequest::new(model, prompt.messages());
    request.temperature = Some(decode.temperature);
    request.top_p = Some(decode.top_p);
    request.top_k = decode.top_k;
    request.max_tokens = decode.max_tokens;
    request.seed = decode.seed;
    request.n = Some(g as u32);
    request.logprobs = Some(true);

    let mut last_error = None;
    for _attempt in 0..=retries {
        match transport.chat_detailed(&request) {
            Ok(choices) => {
                return Ok(choices
                    .into_iter()
                    .map(|choice| {
                        let refusal = looks_like_refusal(&choice.content);
                        match choice.logprobs {
                            Some(scores) => Completion {
                                tokens: scores.iter().map(|t| t.token.clone()).collect(),
                                logprobs: Some(scores.into_iter().map(|t| t.logprob).collect()),
                                text: choice.content,
                                refusal,
                            },
                            None => Completion {
                                tokens: Vec::new(),
                                logprobs: None,
                                text: choice.content,
                                refusal,
                            },
                        }
                    })
                    .collect());
            }
            Err(err) => last_error = Some(err),
        }
    }
    Err(last_error.expect("at least one attempt ran").into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatChoice, TokenLogprob};
    use std::sync::Mutex;

    fn catalog() -> Vec<KnowledgeComponent> {
        vec![
            KnowledgeComponent {
                id: "kc-loop".to_string(),
                name: "loops".to_string(),
            },
            KnowledgeComponent {
                id: "kc-cond".to_string(),
                name: "conditionals".to_string(),
            },
        ]
    }

    fn problem(kc_ids: &[&str]) -> Problem {
        Problem {
            id: "p1".to_string(),
            statement: "Sum the first n integers.".to_string(),
            language: Language::Java,
            kc_ids: kc_ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn mastery(values: &[f64]) -> MasteryVector {
        MasteryVector {
            m: ndarray::Array1::from_vec(values.to_vec()),
        }
    }

    #[test]
    fn prompt_renders_one_line_per_problem_kc() {
        let prompt =
            build_knowledge_prompt(&problem(&["kc-loop"]), &mastery(&[0.7, 0.3]), &catalog())
                .unwrap();
        assert_eq!(
            prompt.text,
            "Problem:\nSum the first n integers.\n\nStudent information:\nKC 1: loops. The student's mastery level on loops is 0.70.\n\nSimulate the student written code:"
        );
        assert!(prompt.system.starts_with("You are a student code simulator.\n"));
        assert!(prompt.system.contains("generate Java code"));
        assert_eq!(prompt.mastery_snapshot, vec![("loops".to_string(), 0.7)]);
    }

    #[test]
    fn prompt_orders_kc_lines_by_catalog_not_by_problem_listing() {
        // The problem lists conditionals first; the prompt must not.
        let prompt = build_knowledge_prompt(
            &problem(&["kc-cond", "kc-loop"]),
            &mastery(&[0.25, 0.85]),
            &catalog(),
        )
        .unwrap();
        let loop_line = prompt.text.find("KC 1: loops").unwrap();
        let cond_line = prompt.text.find("KC 2: conditionals").unwrap();
        assert!(loop_line < cond_line);
        assert!(prompt.text.contains("mastery level on loops is 0.25."));
        assert!(prompt.text.contains("mastery level on conditionals is 0.85."));
    }

    #[test]
    fn prompt_rounding_is_two_decimal_half_even() {
        let prompt =
            build_knowledge_prompt(&problem(&["kc-loop"]), &mastery(&[0.705, 0.0]), &catalog())
                .unwrap();
        assert!(prompt.text.contains("is 0.70."), "{}", prompt.text);
        let python = Problem {
            language: Language::Python,
            ..problem(&["kc-loop"])
        };
        let prompt = build_knowledge_prompt(&python, &mastery(&[0.705, 0.0]), &catalog()).unwrap();
        assert!(prompt.system.contains("generate Python code"));
    }

    #[test]
    fn prompt_building_is_pure_and_rejects_gaps() {
        let a = build_knowledge_prompt(&problem(&["kc-loop"]), &mastery(&[0.5, 0.5]), &catalog())
            .unwrap();
        let b = build_knowledge_prompt(&problem(&["kc-loop"]), &mastery(&[0.5, 0.5]), &catalog())
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.context_key(), b.context_key());

        assert!(matches!(
            build_knowledge_prompt(&problem(&["kc-missing"]), &mastery(&[0.5, 0.5]), &catalog()),
            Err(PolicyError::MissingMastery(id)) if id == "kc-missing"
        ));
        assert!(matches!(
            build_knowledge_prompt(&problem(&["kc-loop"]), &mastery(&[0.5]), &catalog()),
            Err(PolicyError::MasteryShape { expected: 2, got: 1 })
        ));
    }

    fn toy_prompt() -> Prompt {
        build_knowledge_prompt(&problem(&["kc-loop"]), &mastery(&[0.7, 0.3]), &catalog()).unwrap()
    }

    fn vocab4() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into(), "d".into()]
    }

    #[test]
    fn one_token_vocabulary_always_samples_itself_at_logprob_zero() {
        let params = ToyPolicyParams::new(vec!["only".to_string()], 2).unwrap();
        let completions = toy_sample(&params, &toy_prompt(), 5, 9).unwrap();
        for completion in completions {
            assert_eq!(completion.tokens, vec!["only", "only"]);
            assert_eq!(completion.text, "only\nonly");
            for lp in completion.logprobs.unwrap() {
                assert_eq!(lp, 0.0);
            }
        }
    }

    #[test]
    fn uniform_sampling_concentrates_at_one_over_v() {
        let params = ToyPolicyParams::new(vocab4(), 1).unwrap();
        let completions = toy_sample(&params, &toy_prompt(), 10_000, 31).unwrap();
        let mut counts = [0usize; 4];
        for completion in &completions {
            let index = params.token_index(&completion.tokens[0]).unwrap();
            counts[index] += 1;
        }
        // Binomial(10_000, 1/4): σ ≈ 43.3, so ±3σ ≈ ±130 around 2500.
        for count in counts {
            assert!(
                (count as f64 - 2500.0).abs() <= 130.0,
                "count {count} outside 3σ of 2500"
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_sample_list() {
        let mut params = ToyPolicyParams::new(vocab4(), 3).unwrap();
        params
            .theta
            .insert(context_id(&toy_prompt(), &[]), vec![1.0, 0.5, -0.5, 0.0]);
        let first = toy_sample(&params, &toy_prompt(), 8, 1234).unwrap();
        let second = toy_sample(&params, &toy_prompt(), 8, 1234).unwrap();
        assert_eq!(first, second);
        let shifted = toy_sample(&params, &toy_prompt(), 8, 1235).unwrap();
        assert_ne!(first, shifted);
    }

    #[test]
    fn strict_mode_rejects_unknown_contexts() {
        let mut params = ToyPolicyParams::new(vocab4(), 1).unwrap();
        params.strict = true;
        assert!(matches!(
            toy_sample(&params, &toy_prompt(), 1, 0),
            Err(PolicyError::UnknownContext(_))
        ));
        params.strict = false;
        assert!(toy_sample(&params, &toy_prompt(), 1, 0).is_ok());
    }

    #[test]
    fn uniform_logprob_totals_minus_n_log_v() {
        let params = ToyPolicyParams::new(vocab4(), 3).unwrap();
        let completion = Completion {
            tokens: vec!["a".into(), "c".into(), "d".into()],
            text: "a\nc\nd".into(),
            logprobs: None,
            refusal: false,
        };
        let (total, per_token) = toy_logprob(&params, &toy_prompt(), &completion).unwrap();
        assert!((total - (-3.0 * 4.0f64.ln())).abs() < 1e-12);
        assert_eq!(per_token.len(), 3);
        for lp in per_token {
            assert!((lp - (-(4.0f64.ln()))).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit_drives_its_logprob_to_zero() {
        let prompt = toy_prompt();
        let mut params = ToyPolicyParams::new(vocab4(), 1).unwrap();
        params
            .theta
            .insert(context_id(&prompt, &[]), vec![LOGIT_BOUND, 0.0, 0.0, 0.0]);
        let completion = Completion {
            tokens: vec!["a".into()],
            text: "a".into(),
            logprobs: None,
            refusal: false,
        };
        let (total, _) = toy_logprob(&params, &prompt, &completion).unwrap();
        assert!(total <= 0.0);
        assert!(total > -1e-10);

        let rare = Completion {
            tokens: vec!["zzz".into()],
            text: "zzz".into(),
            logprobs: None,
            refusal: false,
        };
        assert!(matches!(
            toy_logprob(&params, &prompt, &rare),
            Err(PolicyError::UnknownToken(_))
        ));
    }

    #[test]
    fn sampled_logprobs_match_rescoring() {
        let prompt = toy_prompt();
        let mut params = ToyPolicyParams::new(vocab4(), 3).unwrap();
        params
            .theta
            .insert(context_id(&prompt, &[]), vec![0.3, -0.2, 1.1, 0.0]);
        for completion in toy_sample(&params, &prompt, 20, 77).unwrap() {
            let (total, per_token) = toy_logprob(&params, &prompt, &completion).unwrap();
            assert_eq!(per_token, completion.logprobs.clone().unwrap());
            assert!((total - completion.total_logprob().unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn sft_loss_equals_negative_logprob_everywhere() {
        let prompt = toy_prompt();
        let mut params = ToyPolicyParams::new(vocab4(), 2).unwrap();
        params
            .theta
            .insert(context_id(&prompt, &[]), vec![2.0, -1.0, 0.4, 0.0]);
        for completion in toy_sample(&params, &prompt, 10, 5).unwrap() {
            let (loss, _) = sft_loss(&params, &prompt, &completion).unwrap();
            let (logprob, _) = toy_logprob(&params, &prompt, &completion).unwrap();
            assert!((loss + logprob).abs() < 1e-12);
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn uniform_sft_loss_is_n_log_v_and_argmax_target_is_cheap() {
        let prompt = toy_prompt();
        let params = ToyPolicyParams::new(vocab4(), 2).unwrap();
        let target = Completion {
            tokens: vec!["b".into(), "d".into()],
            text: "b\nd".into(),
            logprobs: None,
            refusal: false,
        };
        let (loss, _) = sft_loss(&params, &prompt, &target).unwrap();
        assert!((loss - 2.0 * 4.0f64.ln()).abs() < 1e-12);

        let mut peaked = ToyPolicyParams::new(vocab4(), 1).unwrap();
        peaked
            .theta
            .insert(context_id(&prompt, &[]), vec![0.0, LOGIT_BOUND, 0.0, 0.0]);
        let argmax_target = Completion {
            tokens: vec!["b".into()],
            text: "b".into(),
            logprobs: None,
            refusal: false,
        };
        let (loss, _) = sft_loss(&peaked, &prompt, &argmax_target).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn sft_gradient_matches_central_finite_differences() {
        let prompt = toy_prompt();
        let mut params = ToyPolicyParams::new(vocab4(), 3).unwrap();
        let c0 = context_id(&prompt, &[]);
        params.theta.insert(c0, vec![0.8, -0.3, 0.1, 0.5]);
        let target = Completion {
            tokens: vec!["c".into(), "a".into(), "d".into()],
            text: "c\na\nd".into(),
            logprobs: None,
            refusal: false,
        };
        let (_, grad) = sft_loss(&params, &prompt, &target).unwrap();
        let step = 1e-6;
        for (context, row) in &grad.rows {
            for index in 0..row.len() {
                let mut plus = params.clone();
                plus.theta
                    .entry(context.clone())
                    .or_insert_with(|| vec![0.0; 4])[index] += step;
                let mut minus = params.clone();
                minus
                    .theta
                    .entry(context.clone())
                    .or_insert_with(|| vec![0.0; 4])[index] -= step;
                let (lp, _) = sft_loss(&plus, &prompt, &target).unwrap();
                let (lm, _) = sft_loss(&minus, &prompt, &target).unwrap();
                let numeric = (lp - lm) / (2.0 * step);
                let analytic = row[index];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom <= 1e-5,
                    "context {context} index {index}: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn updates_move_probability_and_respect_the_logit_guard() {
        let prompt = toy_prompt();
        let mut params = ToyPolicyParams::new(vocab4(), 1).unwrap();
        let context = context_id(&prompt, &[]);
        let before = toy_logprob(
            &params,
            &prompt,
            &Completion {
                tokens: vec!["b".into()],
                text: "b".into(),
                logprobs: None,
                refusal: false,
            },
        )
        .unwrap()
        .0;

        // Zero gradient leaves the table untouched.
        let zero = PolicyGrad::default();
        let snapshot = params.clone();
        toy_update(&mut params, &zero, 0.5).unwrap();
        assert_eq!(params, snapshot);

        let mut toward_b = PolicyGrad::default();
        toward_b.add_row(&context, &[0.0, 1.0, 0.0, 0.0]);
        toy_update(&mut params, &toward_b, 0.5).unwrap();
        let after = toy_logprob(
            &params,
            &prompt,
            &Completion {
                tokens: vec!["b".into()],
                text: "b".into(),
                logprobs: None,
                refusal: false,
            },
        )
        .unwrap()
        .0;
        assert!(after > before);

        // Softmax row still normalizes after the update.
        let row = log_softmax(&params.logits_for(&context).unwrap());
        let z: f64 = row.iter().map(|lp| lp.exp()).sum();
        assert!((z - 1.0).abs() < 1e-12);

        // Repeated large updates pin at the guard, never beyond.
        for _ in 0..200 {
            toy_update(&mut params, &toward_b, 10.0).unwrap();
        }
        assert_eq!(params.theta[&context][1], LOGIT_BOUND);

        let mut bad = PolicyGrad::default();
        bad.add_row(&context, &[f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(
            toy_update(&mut params, &bad, 0.1),
            Err(PolicyError::NonFinite("gradient"))
        ));
    }

    #[test]
    fn toy_policy_round_trips_through_its_parameter_file() {
        let prompt = toy_prompt();
        let mut params = ToyPolicyParams::new(vocab4(), 2).unwrap();
        params
            .theta
            .insert(context_id(&prompt, &[]), vec![0.1, 0.2, 0.3, 0.4]);
        params
            .theta
            .insert(context_id(&prompt, &[2]), vec![-1.0, 0.0, 1.0, 2.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        save_toy_policy(&params, &path).unwrap();
        let loaded = load_toy_policy(&path).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn remote_sampling_forwards_decode_params_verbatim() {
        let seen = Mutex::new(None);
        let transport = |request: &ChatRequest| {
            *seen.lock().unwrap() = Some(request.clone());
            Ok(vec![ChatChoice {
                content: "int x = 1;".to_string(),
                logprobs: None,
            }])
        };
        let decode = DecodeParams::default();
        let completions =
            remote_sample(&transport, "gen-model", &toy_prompt(), 1, &decode, 0).unwrap();
        assert_eq!(completions.len(), 1);
        assert!(!completions[0].scored());
        assert!(!completions[0].refusal);

        let request = seen.lock().unwrap().clone().unwrap();
        assert_eq!(request.temperature, Some(0.7));
        assert_eq!(request.top_p, Some(1.0));
        assert_eq!(request.top_k, Some(40));
        assert_eq!(request.n, Some(1));
        assert_eq!(request.logprobs, Some(true));
        assert_eq!(request.model, "gen-model");
    }

    #[test]
    fn remote_sampling_scores_completions_when_the_endpoint_does() {
        let transport = |_: &ChatRequest| {
            Ok(vec![ChatChoice {
                content: "x=1".to_string(),
                logprobs: Some(vec![
                    TokenLogprob { token: "x".into(), logprob: -0.1 },
                    TokenLogprob { token: "=1".into(), logprob: -0.4 },
                ]),
            }])
        };
        let completions = remote_sample(
            &transport,
            "gen",
            &toy_prompt(),
            1,
            &DecodeParams::default(),
            0,
        )
        .unwrap();
        let completion = &completions[0];
        assert!(completion.scored());
        assert_eq!(completion.tokens, vec!["x", "=1"]);
        assert_eq!(completion.tokens.concat(), completion.text);
        assert!((completion.total_logprob().unwrap() + 0.5).abs() < 1e-12);
        assert!(PolicyHandle::remote(true).capabilities.can_score);
        assert!(!PolicyHandle::remote(false).capabilities.can_score);
        assert!(!PolicyHandle::remote(true).capabilities.can_update);
        assert!(PolicyHandle::toy().capabilities.can_update);
    }

    #[test]
    fn remote_sampling_retries_transport_failures_and_flags_refusals() {
        let calls = Mutex::new(0u32);
        let transport = |_: &ChatRequest| {
            let mut calls = calls.lock().unwrap();
            *calls += 1;
            if *calls == 1 {
                Err(LlmError::Fault("connection reset".to_string()))
            } else {
                Ok(vec![ChatChoice {
                    content: "I cannot help with that request.".to_string(),
                    logprobs: None,
                }])
            }
        };
        let completions = remote_sample(
            &transport,
            "gen",
            &toy_prompt(),
            1,
            &DecodeParams::default(),
            1,
        )
        .unwrap();
        assert!(completions[0].refusal);
        assert_eq!(*calls.lock().unwrap(), 2);

        let always_down = |_: &ChatRequest| -> Result<Vec<ChatChoice>, LlmError> {
            Err(LlmError::Fault("down".to_string()))
        };
        assert!(matches!(
            remote_sample(&always_down, "gen", &toy_prompt(), 1, &DecodeParams::default(), 2),
            Err(PolicyError::Llm(LlmError::Fault(_)))
        ));
    }

    #[test]
    fn refusal_heuristic_accepts_code_and_flags_prose() {
        assert!(!looks_like_refusal("int a = 1;"));
        assert!(!looks_like_refusal("def f():\n    return 1"));
        assert!(!looks_like_refusal("print('hi')"));
        assert!(looks_like_refusal("I'm sorry, I can only help with text."));
        assert!(!looks_like_refusal(""));
        assert!(!looks_like_refusal("   "));
    }
}
