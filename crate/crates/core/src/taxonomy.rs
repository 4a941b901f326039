//! Error-set algebra and the LLM error judge.
//!
//! The error vocabulary lives here: labels with categories, the set/distribution
//! math used by rewards and evaluation (IoU, χ² distance), and the two judge
//! clients — the open-vocabulary annotator that builds raw error lists for a
//! dataset, and the closed-catalog judge that extracts error sets from generated
//! code. Judge exchanges are recorded in an append-only JSONL audit log keyed by
//! (student, problem, run id), which is also what the agreement tooling reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset, Problem, Submission};
use crate::llm::{map_bounded, ChatMessage, ChatRequest, ChatTransport, LlmError};

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("both error distributions are empty")]
    EmptyDistributions,
    #[error("judge catalog is empty")]
    EmptyCatalog,
    #[error("judge config invalid: max_parallel must be at least 1")]
    ZeroParallel,
    #[error("transport failed after {attempts} attempt(s): {source}")]
    TransportExhausted {
        attempts: u32,
        #[source]
        source: LlmError,
    },
    #[error("reply stayed malformed after {attempts} attempt(s); last reply: {last_reply:?}")]
    MalformedReply { attempts: u32, last_reply: String },
    #[error("distribution label {0:?} is not in the catalog")]
    UnknownLabel(String),
    #[error("the two audit runs share no items")]
    NoCommonItems,
    #[error("audit file {path}: {source}")]
    AuditIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audit file {path}:{line}: malformed record: {source}")]
    AuditMalformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Broad error family, as used by the annotation prompt's taxonomy examples.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum ErrorCategory {
    Syntax,
    Runtime,
    Logical,
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorCategory::Syntax => write!(f, "Syntax"),
            ErrorCategory::Runtime => write!(f, "Runtime"),
            ErrorCategory::Logical => write!(f, "Logical"),
        }
    }
}

impl FromStr for ErrorCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "Syntax" => Ok(ErrorCategory::Syntax),
            "Runtime" => Ok(ErrorCategory::Runtime),
            "Logical" => Ok(ErrorCategory::Logical),
            other => Err(format!("unknown error category {other:?}")),
        }
    }
}

/// One named error in the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorLabel {
    pub id: String,
    pub description: String,
    pub category: ErrorCategory,
}

/// A set of error label ids. Empty means the code was judged correct.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorSet(pub BTreeSet<String>);

impl ErrorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(ids.into_iter().map(Into::into).collect())
    }

    pub fn insert(&mut self, id: impl Into<String>) -> bool {
        self.0.insert(id.into())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.contains(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }

    pub fn to_vec(&self) -> Vec<String> {
        self.0.iter().cloned().collect()
    }
}

impl FromIterator<String> for ErrorSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Intersection-over-union of two error sets. Two empty sets score 1.0 so the
/// correct-correct case rewards fully and `iou` stays a total function.
pub fn iou(a: &ErrorSet, b: &ErrorSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.0.intersection(&b.0).count() as f64;
    let union = a.0.union(&b.0).count() as f64;
    intersection / union
}

/// The error-match reward for a judged candidate against the ground truth.
/// Identical to [`iou`] (the both-empty rule already lives there); kept as its
/// own name because reward code reads better saying what it means.
pub fn error_match_reward(pred: &ErrorSet, truth: &ErrorSet) -> f64 {
    iou(pred, truth)
}

/// Per-item F1 between two judged sets; both-empty counts as full agreement.
pub fn set_f1(a: &ErrorSet, b: &ErrorSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.0.intersection(&b.0).count() as f64;
    2.0 * intersection / (a.len() + b.len()) as f64
}

/// Label frequency counts, e.g. error frequencies over a batch of predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorDistribution(pub BTreeMap<String, u64>);

impl ErrorDistribution {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        Self(counts.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    /// Accumulates every label of every set.
    pub fn from_sets<'a, I: IntoIterator<Item = &'a ErrorSet>>(sets: I) -> Self {
        let mut dist = Self::new();
        for set in sets {
            dist.add_set(set);
        }
        dist
    }

    pub fn increment(&mut self, label: impl Into<String>) {
        *self.0.entry(label.into()).or_insert(0) += 1;
    }

    pub fn add_set(&mut self, set: &ErrorSet) {
        for label in set.iter() {
            self.increment(label.clone());
        }
    }

    pub fn count(&self, label: &str) -> u64 {
        self.0.get(label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks that every counted label exists in the catalog.
    pub fn validate_support(&self, catalog: &[ErrorLabel]) -> Result<(), TaxonomyError> {
        let known: BTreeSet<&str> = catalog.iter().map(|label| label.id.as_str()).collect();
        for label in self.0.keys() {
            if !known.contains(label.as_str()) {
                return Err(TaxonomyError::UnknownLabel(label.clone()));
            }
        }
        Ok(())
    }
}

fn chi_squared(
    p: &ErrorDistribution,
    q: &ErrorDistribution,
    normalize: bool,
) -> Result<f64, TaxonomyError> {
    if p.is_empty() && q.is_empty() {
        return Err(TaxonomyError::EmptyDistributions);
    }
    let p_total = p.total() as f64;
    let q_total = q.total() as f64;
    let weigh = |count: u64, total: f64| {
        if normalize {
            if total > 0.0 {
                count as f64 / total
            } else {
                0.0
            }
        } else {
            count as f64
        }
    };
    let mut union: BTreeSet<&String> = p.0.keys().collect();
    union.extend(q.0.keys());
    let mut sum = 0.0;
    for label in union {
        let p_i = weigh(p.count(label), p_total);
        let q_i = weigh(q.count(label), q_total);
        let denom = p_i + q_i;
        if denom > 0.0 {
            sum += (p_i - q_i).powi(2) / denom;
        }
    }
    Ok(sum)
}

/// χ² distance over raw counts: Σ (p_i − q_i)² / (p_i + q_i) over the label
/// union, skipping labels absent from both sides. Raw counts (not frequencies)
/// so reported magnitudes track batch size; see
/// [`normalized_chi_squared_distance`] for the frequency version.
pub fn chi_squared_distance(
    p: &ErrorDistribution,
    q: &ErrorDistribution,
) -> Result<f64, TaxonomyError> {
    chi_squared(p, q, false)
}

/// χ² distance after normalizing each distribution to frequencies summing to 1.
pub fn normalized_chi_squared_distance(
    p: &ErrorDistribution,
    q: &ErrorDistribution,
) -> Result<f64, TaxonomyError> {
    chi_squared(p, q, true)
}

/// Which prompt template a judge endpoint is driven with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    /// Open-vocabulary error annotation (builds raw labels for a dataset).
    ErrorAnnotation,
    /// Closed-catalog judging (selects which known errors a candidate contains).
    ErrorJudge,
}

/// Connection and retry settings for a judge endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub model: String,
    pub template: PromptTemplate,
    pub max_parallel: usize,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl JudgeConfig {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        template: PromptTemplate,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            template,
            max_parallel: 4,
            timeout_secs: 30,
            retries: 2,
        }
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.max_parallel < 1 {
            return Err(TaxonomyError::ZeroParallel);
        }
        Ok(())
    }
}

pub const ANNOTATION_SYSTEM_PROMPT: &str = r#"You are an expert Java programming instructor and automated code reviewer.
Given a Java programming problem and a student's buggy code solution, your task is to identify all errors present in the code. There is at least one error in the code. Use concise and standardized label/taxonomy for each error. Make sure the error label is generalizable without problem specific description.
Take the following error label examples as reference:
Syntax Error (Examples): Confusing assignment with equality, Unbalanced parentheses, Semicolon errors
Runtime Error (Examples): Uninitialized Variables, Parameter confusion, NullPointerExceptions
Logical Error (Examples): Off-by-one errors, Integer Division, Infinite Loops

Return a JSON object with this template:
{
"errors": [
    {
    "Reasoning": "<one sentence explanation of the error in the code>",
    "Category": "Syntax | Runtime | Logical",
    "Label": "<error label>"
    }
    ]
    }"#;

pub const JUDGE_SYSTEM_PROMPT: &str = r#"You are an experienced code reviewer.
Given a programming problem along with a code and a list of errors, your task is to:
1. Examine the code and all the errors in the list.
2. Reason which errors from the list are included in the code and return all that apply based on your reasoning.
3. Return an empty list if none of the errors are present in the code or the code is correct.

The output MUST match this exact schema:
{"errors": ["error 1", "error 2", ...]}"#;

/// Renders an error list the way the prompts display one: a JSON-style array
/// with `", "` separators, each entry JSON-escaped.
pub fn render_error_list(items: &[&str]) -> String {
    let rendered: Vec<String> = items
        .iter()
        .map(|item| serde_json::to_string(item).expect("string serializes"))
        .collect();
    format!("[{}]", rendered.join(", "))
}

/// Messages for one open-vocabulary annotation request.
pub fn annotation_messages(problem_statement: &str, code: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(ANNOTATION_SYSTEM_PROMPT),
        ChatMessage::user(format!("Problem: {problem_statement}\n\nCode:\n{code}")),
    ]
}

/// Messages for one closed-catalog judge request.
pub fn judge_messages(problem_statement: &str, code: &str, error_list: &[&str]) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(JUDGE_SYSTEM_PROMPT),
        ChatMessage::user(format!(
            "Problem: {problem_statement}\n\nCode: {code}\n\nError list: {}",
            render_error_list(error_list)
        )),
    ]
}

/// If the reply is wrapped in a Markdown code fence, returns the inner text.
fn strip_code_fences(reply: &str) -> Option<String> {
    let trimmed = reply.trim();
    let rest = trimmed.strip_prefix("```")?;
    let rest = &rest[rest.find('\n')? + 1..];
    let end = rest.rfind("```")?;
    Some(rest[..end].trim().to_string())
}

/// Strict parse with one repair pass (fence stripping) before giving up.
pub(crate) fn parse_with_repair<T: serde::de::DeserializeOwned>(
    raw: &str,
) -> Result<T, serde_json::Error> {
    match serde_json::from_str(raw) {
        Ok(value) => Ok(value),
        Err(first) => match strip_code_fences(raw) {
            Some(inner) => serde_json::from_str(&inner).map_err(|_| first),
            None => Err(first),
        },
    }
}

enum LastFailure {
    Transport(LlmError),
    Malformed(String),
}

/// Runs one request with up to `retries` additional attempts, parsing each
/// reply with `parse`. Returns the parsed value, the raw reply it came from,
/// and how many retries were consumed.
pub(crate) fn exchange<T, F>(
    transport: &dyn ChatTransport,
    request: &ChatRequest,
    retries: u32,
    parse: F,
) -> Result<(T, String, u32), TaxonomyError>
where
    F: Fn(&str) -> Result<T, String>,
{
    let mut last = None;
    for attempt in 0..=retries {
        match transport.chat(request) {
            Err(err) => last = Some(LastFailure::Transport(err)),
            Ok(contents) => {
                let raw = contents.into_iter().next().unwrap_or_default();
                match parse(&raw) {
                    Ok(value) => return Ok((value, raw, attempt)),
                    Err(_) => last = Some(LastFailure::Malformed(raw)),
                }
            }
        }
    }
    Err(match last.expect("at least one attempt ran") {
        LastFailure::Transport(source) => TaxonomyError::TransportExhausted {
            attempts: retries + 1,
            source,
        },
        LastFailure::Malformed(last_reply) => TaxonomyError::MalformedReply {
            attempts: retries + 1,
            last_reply,
        },
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgeReply {
    errors: Vec<String>,
}

/// Result of one closed-catalog judge call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub errors: ErrorSet,
    /// Reply entries that matched nothing in the catalog, in reply order.
    pub dropped: Vec<String>,
    pub retries: u32,
    pub raw_reply: String,
    pub request_hash: String,
}

fn resolve_label(text: &str, catalog: &[ErrorLabel]) -> Option<String> {
    let text = text.trim();
    catalog
        .iter()
        .find(|label| label.id == text)
        .or_else(|| catalog.iter().find(|label| label.description == text))
        .map(|label| label.id.clone())
}

/// Asks the judge which catalog errors `code` contains. Reply entries are
/// matched against catalog ids first, then descriptions; anything else is
/// dropped and reported in the outcome rather than silently discarded.
pub fn judge_errors(
    transport: &dyn ChatTransport,
    code: &str,
    problem: &Problem,
    catalog: &[ErrorLabel],
    cfg: &JudgeConfig,
) -> Result<JudgeOutcome, TaxonomyError> {
    cfg.validate()?;
    if catalog.is_empty() {
        return Err(TaxonomyError::EmptyCatalog);
    }
    let list: Vec<&str> = catalog.iter().map(|label| label.description.as_str()).collect();
    let mut request = ChatRequest::new(&cfg.model, judge_messages(&problem.statement, code, &list));
    request.temperature = Some(0.0);
    let request_hash = request.request_hash();
    let (reply, raw_reply, retries) = exchange(transport, &request, cfg.retries, |raw| {
        parse_with_repair::<JudgeReply>(raw).map_err(|err| err.to_string())
    })?;
    let mut errors = ErrorSet::new();
    let mut dropped = Vec::new();
    for item in reply.errors {
        match resolve_label(&item, catalog) {
            Some(id) => {
                errors.insert(id);
            }
            None => dropped.push(item),
        }
    }
    Ok(JudgeOutcome {
        errors,
        dropped,
        retries,
        raw_reply,
        request_hash,
    })
}

/// Judges many candidates with at most `cfg.max_parallel` requests in flight.
/// Results come back in input order.
pub fn judge_errors_batch(
    transport: &dyn ChatTransport,
    items: &[(&str, &Problem)],
    catalog: &[ErrorLabel],
    cfg: &JudgeConfig,
) -> Vec<Result<JudgeOutcome, TaxonomyError>> {
    map_bounded(items, cfg.max_parallel, |(code, problem)| {
        judge_errors(transport, code, problem, catalog, cfg)
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationReplyItem {
    #[serde(rename = "Reasoning")]
    reasoning: String,
    #[serde(rename = "Category")]
    category: String,
    #[serde(rename = "Label")]
    label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationReply {
    errors: Vec<AnnotationReplyItem>,
}

/// One error the annotator found, with its free-text rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedError {
    pub reasoning: String,
    pub category: ErrorCategory,
    pub label: String,
}

/// Result of one open-vocabulary annotation call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationOutcome {
    /// Deduplicated by label, first occurrence wins.
    pub errors: Vec<AnnotatedError>,
    pub retries: u32,
    pub raw_reply: String,
    pub request_hash: String,
}

/// Annotates one submission's code with an open-vocabulary error list. A reply
/// with an unknown category string counts as malformed and is retried.
pub fn annotate_code(
    transport: &dyn ChatTransport,
    code: &str,
    problem: &Problem,
    cfg: &JudgeConfig,
) -> Result<AnnotationOutcome, TaxonomyError> {
    cfg.validate()?;
    let mut request = ChatRequest::new(&cfg.model, annotation_messages(&problem.statement, code));
    request.temperature = Some(0.0);
    let request_hash = request.request_hash();
    let (items, raw_reply, retries) = exchange(transport, &request, cfg.retries, |raw| {
        let reply: AnnotationReply = parse_with_repair(raw).map_err(|err| err.to_string())?;
        reply
            .errors
            .into_iter()
            .map(|item| {
                let category = item.category.parse::<ErrorCategory>()?;
                Ok(AnnotatedError {
                    reasoning: item.reasoning,
                    category,
                    label: item.label,
                })
            })
            .collect::<Result<Vec<_>, String>>()
    })?;
    let mut seen = BTreeSet::new();
    let errors = items
        .into_iter()
        .filter(|item| seen.insert(item.label.clone()))
        .collect();
    Ok(AnnotationOutcome {
        errors,
        retries,
        raw_reply,
        request_hash,
    })
}

/// One line of the judge audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub key: String,
    pub request_hash: String,
    pub raw_reply: String,
    pub parsed_errors: Vec<String>,
    pub retries: u32,
}

/// Audit key for one judged item. The run id is the last `/`-separated
/// segment so two runs over the same items can be matched up.
pub fn audit_key(student_id: &str, problem_id: &str, run_id: &str) -> String {
    format!("{student_id}/{problem_id}/{run_id}")
}

fn item_key(key: &str) -> &str {
    key.rsplit_once('/').map(|(head, _)| head).unwrap_or(key)
}

/// Append-only JSONL writer for audit records. All writes go through one
/// instance, which serializes them by construction.
pub struct AuditLog {
    path: PathBuf,
    file: File,
}

impl AuditLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, TaxonomyError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| TaxonomyError::AuditIo {
                path: path.clone(),
                source,
            })?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, record: &AuditRecord) -> Result<(), TaxonomyError> {
        let line = serde_json::to_string(record).expect("audit record serializes");
        writeln!(self.file, "{line}").map_err(|source| TaxonomyError::AuditIo {
            path: self.path.clone(),
            source,
        })
    }
}

/// Reads every record of an audit file, in file order.
pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>, TaxonomyError> {
    let file = File::open(path).map_err(|source| TaxonomyError::AuditIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TaxonomyError::AuditIo {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|source| TaxonomyError::AuditMalformed {
                path: path.to_path_buf(),
                line: index + 1,
                source,
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Per-label votes for each category, used to pick a deterministic category
/// for cluster representatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTally {
    pub syntax: u64,
    pub runtime: u64,
    pub logical: u64,
}

impl CategoryTally {
    pub fn add(&mut self, category: ErrorCategory) {
        match category {
            ErrorCategory::Syntax => self.syntax += 1,
            ErrorCategory::Runtime => self.runtime += 1,
            ErrorCategory::Logical => self.logical += 1,
        }
    }

    /// Highest-voted category; ties resolve in declaration order
    /// (Syntax, then Runtime, then Logical) so the result is deterministic.
    pub fn majority(&self) -> ErrorCategory {
        let mut best = (ErrorCategory::Syntax, self.syntax);
        if self.runtime > best.1 {
            best = (ErrorCategory::Runtime, self.runtime);
        }
        if self.logical > best.1 {
            best = (ErrorCategory::Logical, self.logical);
        }
        best.0
    }
}

/// An item the annotation pass could not populate, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub student_id: String,
    pub problem_id: String,
    pub reason: String,
}

/// Summary of one annotation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub run_id: String,
    /// Items whose error lists this run populated.
    pub annotated: usize,
    /// Correct submissions, which are never sent to the annotator.
    pub skipped_correct: usize,
    /// Incorrect submissions that already carried labels and were kept as-is.
    pub already_annotated: usize,
    pub failures: Vec<AnnotationFailure>,
    /// Category votes per raw label across the whole run.
    pub label_categories: BTreeMap<String, CategoryTally>,
}

/// Annotates every incorrect submission that lacks error labels (or all of
/// them under `reannotate`) and returns the updated dataset plus a report.
/// Successful judge exchanges are appended to `audit` in submission order;
/// failed items keep their old labels and are named in the report. An
/// annotator that finds no errors in a known-incorrect submission counts as a
/// failure, because an empty set would claim the code is correct.
pub fn annotate_dataset(
    transport: &dyn ChatTransport,
    dataset: &Dataset,
    cfg: &JudgeConfig,
    run_id: &str,
    mut audit: Option<&mut AuditLog>,
    reannotate: bool,
) -> Result<(Dataset, AnnotationReport), TaxonomyError> {
    cfg.validate()?;
    let targets: Vec<&Submission> = dataset
        .submissions()
        .iter()
        .filter(|s| !s.correct && (reannotate || s.errors.is_empty()))
        .collect();
    let outcomes = map_bounded(&targets, cfg.max_parallel, |submission| {
        let problem = dataset
            .problem(&submission.problem_id)
            .expect("dataset validated at construction");
        annotate_code(transport, &submission.code, problem, cfg)
    });

    let mut new_errors: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut label_categories: BTreeMap<String, CategoryTally> = BTreeMap::new();
    for (submission, outcome) in targets.iter().zip(outcomes) {
        let key = audit_key(&submission.student_id, &submission.problem_id, run_id);
        match outcome {
            Ok(outcome) => {
                if let Some(log) = audit.as_deref_mut() {
                    log.append(&AuditRecord {
                        key,
                        request_hash: outcome.request_hash.clone(),
                        raw_reply: outcome.raw_reply.clone(),
                        parsed_errors: outcome.errors.iter().map(|e| e.label.clone()).collect(),
                        retries: outcome.retries,
                    })?;
                }
                if outcome.errors.is_empty() {
                    failures.push(AnnotationFailure {
                        student_id: submission.student_id.clone(),
                        problem_id: submission.problem_id.clone(),
                        reason: "annotator returned an empty error list for an incorrect submission"
                            .to_string(),
                    });
                    continue;
                }
                for error in &outcome.errors {
                    label_categories
                        .entry(error.label.clone())
                        .or_default()
                        .add(error.category);
                }
                new_errors.insert(
                    (submission.student_id.clone(), submission.problem_id.clone()),
                    outcome.errors.iter().map(|e| e.label.clone()).collect(),
                );
            }
            Err(err) => failures.push(AnnotationFailure {
                student_id: submission.student_id.clone(),
                problem_id: submission.problem_id.clone(),
                reason: err.to_string(),
            }),
        }
    }

    let annotated = new_errors.len();
    let skipped_correct = dataset.submissions().iter().filter(|s| s.correct).count();
    let already_annotated = dataset
        .submissions()
        .iter()
        .filter(|s| !s.correct && !s.errors.is_empty() && !reannotate)
        .count();
    let updated = dataset.with_errors(|submission| {
        new_errors
            .get(&(submission.student_id.clone(), submission.problem_id.clone()))
            .cloned()
            .unwrap_or_else(|| submission.errors.clone())
    })?;
    let report = AnnotationReport {
        run_id: run_id.to_string(),
        annotated,
        skipped_correct,
        already_annotated,
        failures,
        label_categories,
    };
    Ok((updated, report))
}

/// Agreement between two runs on one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAgreement {
    pub key: String,
    pub f1: f64,
    pub a: Vec<String>,
    pub b: Vec<String>,
}

/// Agreement between two annotation or judging runs over their common items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub items: Vec<ItemAgreement>,
    pub mean_f1: f64,
    pub common: usize,
    pub only_a: usize,
    pub only_b: usize,
}

/// Mean per-item F1 between two runs, matched on (student, problem) with the
/// run-id segment of each key ignored. When a run annotated an item more than
/// once, the last record wins (the log is append-only, so later is newer).
pub fn annotation_agreement(
    a: &[AuditRecord],
    b: &[AuditRecord],
) -> Result<AgreementReport, TaxonomyError> {
    fn index(records: &[AuditRecord]) -> BTreeMap<&str, &AuditRecord> {
        let mut map = BTreeMap::new();
        for record in records {
            map.insert(item_key(&record.key), record);
        }
        map
    }
    let index_a = index(a);
    let index_b = index(b);
    let mut items = Vec::new();
    for (key, record_a) in &index_a {
        if let Some(record_b) = index_b.get(key) {
            let set_a = ErrorSet::from_ids(record_a.parsed_errors.iter().cloned());
            let set_b = ErrorSet::from_ids(record_b.parsed_errors.iter().cloned());
            items.push(ItemAgreement {
                key: (*key).to_string(),
                f1: set_f1(&set_a, &set_b),
                a: record_a.parsed_errors.clone(),
                b: record_b.parsed_errors.clone(),
            });
        }
    }
    if items.is_empty() {
        return Err(TaxonomyError::NoCommonItems);
    }
    let mean_f1 = items.iter().map(|item| item.f1).sum::<f64>() / items.len() as f64;
    let common = items.len();
    let only_a = index_a.keys().filter(|k| !index_b.contains_key(*k)).count();
    let only_b = index_b.keys().filter(|k| !index_a.contains_key(*k)).count();
    Ok(AgreementReport {
        items,
        mean_f1,
        common,
        only_a,
        only_b,
    })
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn arb_set() -> impl Strategy<Value = ErrorSet> {
        prop::collection::btree_set(0u8..6, 0..5)
            .prop_map(|ids| ErrorSet::from_ids(ids.into_iter().map(|id| format!("E{id}"))))
    }

    fn arb_dist() -> impl Strategy<Value = ErrorDistribution> {
        prop::collection::btree_map(0u8..5, 0u64..50, 1..5).prop_map(|counts| {
            ErrorDistribution::from_counts(
                counts.into_iter().map(|(id, n)| (format!("E{id}"), n)),
            )
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_reflexive_and_bounded(a in arb_set(), b in arb_set()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn jaccard_distance_obeys_the_triangle_inequality(
            a in arb_set(),
            b in arb_set(),
            c in arb_set(),
        ) {
            let d = |x: &ErrorSet, y: &ErrorSet| 1.0 - iou(x, y);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }

        #[test]
        fn chi_squared_is_a_symmetric_premetric(p in arb_dist(), q in arb_dist()) {
            prop_assert_eq!(chi_squared_distance(&p, &p).unwrap(), 0.0);
            let pq = chi_squared_distance(&p, &q).unwrap();
            prop_assert_eq!(pq, chi_squared_distance(&q, &p).unwrap());
            prop_assert!(pq >= 0.0);
        }

        #[test]
        fn extraneous_labels_never_raise_the_reward(pred in arb_set(), truth in arb_set()) {
            let before = error_match_reward(&pred, &truth);
            let mut padded = pred.clone();
            padded.insert("X-not-a-real-error");
            let after = error_match_reward(&padded, &truth);
            prop_assert!(after <= before);
        }
    }
}
