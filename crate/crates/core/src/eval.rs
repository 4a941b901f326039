//! Two-level evaluation of simulated student code.
//!
//! The pair level scores each (student, problem) pair by generating K
//! candidate codes and keeping the best value per metric: CodeBLEU against
//! the ground-truth code and error-set IoU against the ground-truth labels.
//! The problem level pools every candidate generated for a problem and
//! measures error coverage (IoU of unioned label sets, chi-squared distance
//! of label frequencies) and code diversity (mean pairwise cosine distance
//! of embeddings, mean complement of the closest-neighbour CodeBLEU).
//!
//! Reports are written as one CSV per level plus a JSON aggregate table;
//! the writers recompute every aggregate from the per-item records and
//! refuse to emit a table that does not match. A paired t-test utility is
//! included for comparing per-item metric columns between two runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::clustering::ClusterError;
use crate::corpus::{DatasetView, Language, Problem, SplitAxis, Submission};
use crate::grpo::{build_train_items, judge_group, ErrorJudge, GrpoError};
use crate::knowledge::KeParameters;
use crate::llm::{map_bounded, EmbeddingRequest, EmbeddingTransport, LlmError};
use crate::metrics::{codebleu, CodeBleuConfig, MetricsError};
use crate::policy::{toy_sample, PolicyError, ToyPolicyParams};
use crate::taxonomy::{
    chi_squared_distance, iou, normalized_chi_squared_distance, ErrorDistribution, ErrorSet,
    TaxonomyError,
};
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("best-of-k needs at least one candidate")]
    NoCandidates,
    #[error("diversity metrics need at least two codes, got {0}")]
    TooFewCodes(usize),
    #[error("coverage needs at least one ground-truth submission")]
    NoTruth,
    #[error("{level} evaluation requires a {want} split, got {got}")]
    AxisMismatch {
        level: EvalLevel,
        want: SplitAxis,
        got: SplitAxis,
    },
    #[error("evaluation view is empty")]
    EmptyView,
    #[error("bad eval config: {0}")]
    BadConfig(String),
    #[error("no canned prediction for student {student} on problem {problem}")]
    MissingPrediction { student: String, problem: String },
    #[error("student {student} on problem {problem} has {got} candidates, need {need}")]
    NotEnoughCandidates {
        student: String,
        problem: String,
        need: usize,
        got: usize,
    },
    #[error("duplicate canned prediction for student {student} on problem {problem}")]
    DuplicatePrediction { student: String, problem: String },
    #[error("aggregate column {0} does not match its per-item recomputation")]
    Inconsistent(String),
    #[error("cross-fold aggregation failed: {0}")]
    FoldShape(String),
    #[error("paired t-test needs two equal-length samples of at least two values")]
    BadSample,
    #[error("embedding returned {got} vectors for {expected} codes")]
    EmbeddingShape { expected: usize, got: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Format {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Judge(#[from] GrpoError),
    #[error(transparent)]
    Embedding(#[from] LlmError),
    #[error(transparent)]
    Distance(#[from] ClusterError),
    #[error(transparent)]
    Frequency(#[from] TaxonomyError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metric(#[from] MetricsError),
}

/// Which evaluation level a run targets. Pair level walks student-problem
/// pairs (split by student); problem level pools candidates per problem
/// (split by problem).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalLevel {
    Pair,
    Problem,
}

impl EvalLevel {
    fn required_axis(self) -> SplitAxis {
        match self {
            EvalLevel::Pair => SplitAxis::ByStudent,
            EvalLevel::Problem => SplitAxis::ByProblem,
        }
    }
}

impl fmt::Display for EvalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalLevel::Pair => write!(f, "pair"),
            EvalLevel::Problem => write!(f, "problem"),
        }
    }
}

/// Settings for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub level: EvalLevel,
    /// Candidate budgets to report at, strictly ascending. Candidates are
    /// generated once at the largest K and smaller budgets score prefixes,
    /// which is what makes the @K columns monotone item by item.
    pub ks: Vec<usize>,
    pub metric: CodeBleuConfig,
    /// When set, one jointly-best candidate (largest metric sum) supplies
    /// both pair metrics instead of selecting independently per metric.
    /// Per-metric @K monotonicity is only guaranteed when this is off.
    pub joint_best: bool,
    /// Chi-squared over raw counts by default; set to compare normalized
    /// frequency distributions instead.
    pub chi_normalized: bool,
    pub embed_model: String,
    pub model_tag: String,
    pub max_parallel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            level: EvalLevel::Pair,
            ks: vec![1, 5],
            metric: CodeBleuConfig::default(),
            joint_best: false,
            chi_normalized: false,
            embed_model: "qwen3-embedding".to_string(),
            model_tag: "toy".to_string(),
            max_parallel: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ks.is_empty() {
            return Err(EvalError::BadConfig("ks must not be empty".to_string()));
        }
        if self.ks[0] == 0 {
            return Err(EvalError::BadConfig("ks must be positive".to_string()));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::BadConfig(
                "ks must be strictly ascending".to_string(),
            ));
        }
        if self.max_parallel == 0 {
            return Err(EvalError::BadConfig(
                "max_parallel must be at least 1".to_string(),
            ));
        }
        self.metric.validate()?;
        Ok(())
    }

    fn k_max(&self) -> usize {
        *self.ks.last().expect("validated non-empty")
    }
}

/// Best-of-K scores for one student-problem pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub student_id: String,
    pub problem_id: String,
    pub k: usize,
    pub codebleu_at_k: f64,
    pub iou_at_k: f64,
    pub best_codebleu_index: usize,
    pub best_iou_index: usize,
}

/// Coverage and diversity scores for one problem's pooled candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemReport {
    pub problem_id: String,
    /// How many generated candidates fed the problem-level metrics.
    pub candidates: usize,
    pub coverage_iou: f64,
    pub chi_sq: f64,
    pub mean_pairwise_cosine: f64,
    pub codebleu_complement_max: f64,
}

/// Mean and population standard deviation of one metric column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub type AggregateTable = BTreeMap<String, Stat>;

fn stat(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
            n: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Stat {
        mean,
        std: var.sqrt(),
        n,
    }
}

/// One completed evaluation run over a single split part.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRun {
    pub level: EvalLevel,
    pub axis: SplitAxis,
    pub fold: usize,
    pub part: String,
    pub model_tag: String,
    pub ks: Vec<usize>,
    /// Embedding width observed at the problem level; pair runs leave it
    /// unset because they never embed.
    pub embedding_dim: Option<usize>,
    /// Pooled candidate counts per problem (problem level only).
    pub candidates_per_problem: BTreeMap<String, usize>,
    pub pair_reports: Vec<PairReport>,
    pub problem_reports: Vec<ProblemReport>,
    pub aggregates: AggregateTable,
}

/// Canned candidate codes for one student-problem pair, as stored in the
/// prediction JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedPrediction {
    pub student_id: String,
    pub problem_id: String,
    pub candidates: Vec<String>,
}

/// An indexed set of canned predictions, one row per pair.
#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    rows: BTreeMap<(String, String), Vec<String>>,
}

impl PredictionSet {
    pub fn new(rows: Vec<CannedPrediction>) -> Result<Self, EvalError> {
        let mut map = BTreeMap::new();
        for row in rows {
            let key = (row.student_id.clone(), row.problem_id.clone());
            if map.insert(key, row.candidates).is_some() {
                return Err(EvalError::DuplicatePrediction {
                    student: row.student_id,
                    problem: row.problem_id,
                });
            }
        }
        Ok(Self { rows: map })
    }

    pub fn get(&self, student_id: &str, problem_id: &str) -> Option<&[String]> {
        self.rows
            .get(&(student_id.to_string(), problem_id.to_string()))
            .map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reads a prediction JSONL file, one [`CannedPrediction`] per line.
pub fn load_predictions(path: &Path) -> Result<PredictionSet, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: CannedPrediction =
            serde_json::from_str(line).map_err(|source| EvalError::Format {
                path: path.to_path_buf(),
                source,
            })?;
        rows.push(row);
    }
    PredictionSet::new(rows)
}

/// Writes predictions as JSONL, atomically.
pub fn save_predictions(path: &Path, rows: &[CannedPrediction]) -> Result<(), EvalError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("serializable row"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Where candidate codes come from: a prediction file produced earlier, or
/// the toy policy sampled on the spot with knowledge-guided prompts.
pub enum Generator<'a> {
    Canned(&'a PredictionSet),
    Toy {
        params: &'a ToyPolicyParams,
        ke: &'a KeParameters,
        seed: u64,
    },
}

fn pair_seed(seed: u64, student_id: &str, problem_id: &str) -> u64 {
    let digest = sha256_hex(format!("{seed}|{student_id}|{problem_id}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Samples `k` candidates per view pair from the toy policy, with one
/// deterministic stream per (seed, student, problem).
pub fn generate_predictions(
    view: &DatasetView<'_>,
    params: &ToyPolicyParams,
    ke: &KeParameters,
    k: usize,
    seed: u64,
) -> Result<Vec<CannedPrediction>, EvalError> {
    if k == 0 {
        return Err(EvalError::NoCandidates);
    }
    let items = build_train_items(view, ke)?;
    let mut rows = Vec::with_capacity(items.len());
    for (submission, item) in view.submissions().zip(&items) {
        let completions = toy_sample(
            params,
            &item.prompt,
            k,
            pair_seed(seed, &submission.student_id, &submission.problem_id),
        )?;
        rows.push(CannedPrediction {
            student_id: submission.student_id.clone(),
            problem_id: submission.problem_id.clone(),
            candidates: completions.into_iter().map(|c| c.text).collect(),
        });
    }
    Ok(rows)
}

fn candidate_lists(
    view: &DatasetView<'_>,
    generator: &Generator<'_>,
    k_max: usize,
) -> Result<Vec<Vec<String>>, EvalError> {
    match generator {
        Generator::Canned(set) => view
            .submissions()
            .map(|sub| {
                let canned = set.get(&sub.student_id, &sub.problem_id).ok_or_else(|| {
                    EvalError::MissingPrediction {
                        student: sub.student_id.clone(),
                        problem: sub.problem_id.clone(),
                    }
                })?;
                if canned.len() < k_max {
                    return Err(EvalError::NotEnoughCandidates {
                        student: sub.student_id.clone(),
                        problem: sub.problem_id.clone(),
                        need: k_max,
                        got: canned.len(),
                    });
                }
                Ok(canned[..k_max].to_vec())
            })
            .collect(),
        Generator::Toy { params, ke, seed } => {
            Ok(generate_predictions(view, params, ke, k_max, *seed)?
                .into_iter()
                .map(|row| row.candidates)
                .collect())
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// CodeBLEU-vs-truth and judged-IoU-vs-truth for every candidate, in order.
fn candidate_scores(
    candidates: &[String],
    truth_code: &str,
    truth_errors: &ErrorSet,
    problem: &Problem,
    judge: &dyn ErrorJudge,
    metric: &CodeBleuConfig,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut similarity = Vec::with_capacity(candidates.len());
    let mut overlap = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        similarity.push(codebleu(candidate, truth_code, problem.language, metric).combined);
        let predicted = judge.judge(problem, candidate)?;
        overlap.push(iou(&predicted, truth_errors));
    }
    Ok((similarity, overlap))
}

fn prefix_report(
    student_id: &str,
    problem_id: &str,
    k: usize,
    similarity: &[f64],
    overlap: &[f64],
    joint_best: bool,
) -> PairReport {
    let sim = &similarity[..k];
    let ov = &overlap[..k];
    let (codebleu_at_k, iou_at_k, best_codebleu_index, best_iou_index) = if joint_best {
        let sums: Vec<f64> = sim.iter().zip(ov).map(|(s, o)| s + o).collect();
        let idx = argmax(&sums);
        (sim[idx], ov[idx], idx, idx)
    } else {
        let si = argmax(sim);
        let oi = argmax(ov);
        (sim[si], ov[oi], si, oi)
    };
    PairReport {
        student_id: student_id.to_string(),
        problem_id: problem_id.to_string(),
        k,
        codebleu_at_k,
        iou_at_k,
        best_codebleu_index,
        best_iou_index,
    }
}

/// Scores one pair at K = number of candidates given: the best CodeBLEU
/// against the ground truth and the best judged-error IoU, each with the
/// index of the winning candidate (first index on ties). With
/// `cfg.joint_best` a single candidate maximizing the metric sum supplies
/// both values.
pub fn best_of_k(
    student_id: &str,
    candidates: &[String],
    truth_code: &str,
    truth_errors: &ErrorSet,
    problem: &Problem,
    judge: &dyn ErrorJudge,
    cfg: &EvalConfig,
) -> Result<PairReport, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    let (similarity, overlap) =
        candidate_scores(candidates, truth_code, truth_errors, problem, judge, &cfg.metric)?;
    Ok(prefix_report(
        student_id,
        &problem.id,
        candidates.len(),
        &similarity,
        &overlap,
        cfg.joint_best,
    ))
}

/// Error coverage for one problem: IoU of the unioned predicted and truth
/// label sets, plus the chi-squared distance between label frequencies
/// (raw counts, or normalized frequencies when `normalized` is set). Two
/// all-clean sides count as identical distributions.
pub fn problem_coverage(
    predicted: &[ErrorSet],
    truth: &[ErrorSet],
    normalized: bool,
) -> Result<(f64, f64), EvalError> {
    if truth.is_empty() {
        return Err(EvalError::NoTruth);
    }
    let union = |sets: &[ErrorSet]| {
        let mut all = ErrorSet::new();
        for set in sets {
            for id in set.iter() {
                all.insert(id.clone());
            }
        }
        all
    };
    let coverage = iou(&union(predicted), &union(truth));
    let p = ErrorDistribution::from_sets(predicted.iter());
    let q = ErrorDistribution::from_sets(truth.iter());
    let chi = if p.is_empty() && q.is_empty() {
        0.0
    } else if normalized {
        normalized_chi_squared_distance(&p, &q)?
    } else {
        chi_squared_distance(&p, &q)?
    };
    Ok((coverage, chi))
}

/// Diversity scores over one problem's pooled candidate codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityScores {
    /// Mean cosine distance over all unordered embedding pairs.
    pub mean_pairwise_cosine: f64,
    /// Mean over candidates of 1 minus the best CodeBLEU against any other
    /// candidate.
    pub codebleu_complement_max: f64,
    pub embedding_dim: usize,
}

/// Semantic and syntactic diversity of a candidate pool: the mean pairwise
/// cosine distance between code embeddings, and the mean complement of each
/// candidate's closest-neighbour CodeBLEU.
pub fn problem_diversity(
    codes: &[String],
    language: Language,
    embedder: &dyn EmbeddingTransport,
    embed_model: &str,
    metric: &CodeBleuConfig,
) -> Result<DiversityScores, EvalError> {
    if codes.len() < 2 {
        return Err(EvalError::TooFewCodes(codes.len()));
    }
    // Embed each distinct text once; duplicated candidates share a vector.
    let mut unique: BTreeMap<&str, usize> = BTreeMap::new();
    for code in codes {
        let next = unique.len();
        unique.entry(code.as_str()).or_insert(next);
    }
    let mut texts = vec![""; unique.len()];
    for (text, slot) in &unique {
        texts[*slot] = text;
    }
    let request = EmbeddingRequest::new(
        embed_model,
        texts.iter().map(|t| t.to_string()).collect(),
    );
    let vectors = embedder.embed(&request)?;
    if vectors.len() != texts.len() {
        return Err(EvalError::EmbeddingShape {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    let slot_of = |code: &String| unique[code.as_str()];
    let mut cosine_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            cosine_sum +=
                crate::clustering::cosine_distance(&vectors[slot_of(&codes[i])], &vectors[slot_of(&codes[j])])?;
            pairs += 1;
        }
    }
    // Pooled candidate lists repeat texts heavily, so score each distinct
    // (hypothesis, reference) pair once and read the rest from the table.
    let slots: Vec<usize> = codes.iter().map(slot_of).collect();
    let mut counts = vec![0usize; texts.len()];
    for &slot in &slots {
        counts[slot] += 1;
    }
    let mut similarity = vec![vec![0.0f64; texts.len()]; texts.len()];
    for (h, hyp) in texts.iter().enumerate() {
        for (r, reference) in texts.iter().enumerate() {
            if h != r {
                similarity[h][r] = codebleu(hyp, reference, language, metric).combined;
            }
        }
    }
    let complement_sum: f64 = slots
        .iter()
        .map(|&slot| {
            // Another candidate with the same text scores an exact 1.0.
            let mut closest = if counts[slot] > 1 { 1.0f64 } else { 0.0f64 };
            for (other, &count) in counts.iter().enumerate() {
                if other != slot && count > 0 {
                    closest = closest.max(similarity[other][slot]);
                }
            }
            1.0 - closest
        })
        .sum();
    Ok(DiversityScores {
        mean_pairwise_cosine: cosine_sum / pairs as f64,
        codebleu_complement_max: complement_sum / codes.len() as f64,
        embedding_dim: vectors[0].len(),
    })
}

/// Per-item aggregates for a pair-level run: CodeBLEU@K and IoU@K columns.
pub fn pair_aggregates(reports: &[PairReport]) -> AggregateTable {
    let mut by_k: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for report in reports {
        let entry = by_k.entry(report.k).or_default();
        entry.0.push(report.codebleu_at_k);
        entry.1.push(report.iou_at_k);
    }
    let mut table = AggregateTable::new();
    for (k, (similarity, overlap)) in by_k {
        table.insert(format!("CodeBLEU@{k}"), stat(&similarity));
        table.insert(format!("IoU@{k}"), stat(&overlap));
    }
    table
}

/// Per-item aggregates for a problem-level run.
pub fn problem_aggregates(reports: &[ProblemReport]) -> AggregateTable {
    let column = |f: fn(&ProblemReport) -> f64| {
        let values: Vec<f64> = reports.iter().map(f).collect();
        stat(&values)
    };
    let mut table = AggregateTable::new();
    table.insert("CosDist".to_string(), column(|r| r.mean_pairwise_cosine));
    table.insert(
        "CodeBLEU_comp_max".to_string(),
        column(|r| r.codebleu_complement_max),
    );
    table.insert("IoU".to_string(), column(|r| r.coverage_iou));
    table.insert("ChiSq".to_string(), column(|r| r.chi_sq));
    table
}

fn part_name(part: crate::corpus::Part) -> &'static str {
    match part {
        crate::corpus::Part::Train => "train",
        crate::corpus::Part::Val => "val",
        crate::corpus::Part::Test => "test",
    }
}

/// Runs one evaluation over a split view. The view's axis must match the
/// configured level: by-student splits feed pair-level runs, by-problem
/// splits feed problem-level runs. The judge annotates candidate codes; the
/// embedder is only consulted at the problem level.
pub fn run_eval(
    view: &DatasetView<'_>,
    generator: &Generator<'_>,
    judge: &dyn ErrorJudge,
    embedder: &dyn EmbeddingTransport,
    cfg: &EvalConfig,
) -> Result<EvalRun, EvalError> {
    cfg.validate()?;
    let want = cfg.level.required_axis();
    if view.axis != want {
        return Err(EvalError::AxisMismatch {
            level: cfg.level,
            want,
            got: view.axis,
        });
    }
    if view.is_empty() {
        return Err(EvalError::EmptyView);
    }
    let ds = view.dataset();
    let pairs: Vec<&Submission> = view.submissions().collect();
    let truth_sets: Vec<ErrorSet> = pairs
        .iter()
        .map(|sub| ErrorSet::from_ids(sub.errors.iter().cloned()))
        .collect();
    let lists = candidate_lists(view, generator, cfg.k_max())?;

    let mut run = EvalRun {
        level: cfg.level,
        axis: view.axis,
        fold: view.fold,
        part: part_name(view.part).to_string(),
        model_tag: cfg.model_tag.clone(),
        ks: cfg.ks.clone(),
        embedding_dim: None,
        candidates_per_problem: BTreeMap::new(),
        pair_reports: Vec::new(),
        problem_reports: Vec::new(),
        aggregates: AggregateTable::new(),
    };

    match cfg.level {
        EvalLevel::Pair => {
            let indices: Vec<usize> = (0..pairs.len()).collect();
            let scored: Vec<Result<(Vec<f64>, Vec<f64>), EvalError>> =
                map_bounded(&indices, cfg.max_parallel, |&i| {
                    let problem = ds.problem(&pairs[i].problem_id).expect("validated dataset");
                    candidate_scores(
                        &lists[i],
                        &pairs[i].code,
                        &truth_sets[i],
                        problem,
                        judge,
                        &cfg.metric,
                    )
                });
            for (i, result) in scored.into_iter().enumerate() {
                let (similarity, overlap) = result?;
                for &k in &cfg.ks {
                    run.pair_reports.push(prefix_report(
                        &pairs[i].student_id,
                        &pairs[i].problem_id,
                        k,
                        &similarity,
                        &overlap,
                        cfg.joint_best,
                    ));
                }
            }
            run.aggregates = pair_aggregates(&run.pair_reports);
        }
        EvalLevel::Problem => {
            let mut by_problem: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, sub) in pairs.iter().enumerate() {
                by_problem.entry(sub.problem_id.as_str()).or_default().push(i);
            }
            for (problem_id, idxs) in by_problem {
                let problem = ds.problem(problem_id).expect("validated dataset");
                let truth: Vec<ErrorSet> =
                    idxs.iter().map(|&i| truth_sets[i].clone()).collect();
                let pooled: Vec<String> = idxs
                    .iter()
                    .flat_map(|&i| lists[i].iter().cloned())
                    .collect();
                let predicted = judge_group(&pooled, problem, judge, cfg.max_parallel)?;
                let (coverage_iou, chi_sq) =
                    problem_coverage(&predicted, &truth, cfg.chi_normalized)?;
                let diversity = problem_diversity(
                    &pooled,
                    problem.language,
                    embedder,
                    &cfg.embed_model,
                    &cfg.metric,
                )?;
                run.embedding_dim.get_or_insert(diversity.embedding_dim);
                run.candidates_per_problem
                    .insert(problem_id.to_string(), pooled.len());
                run.problem_reports.push(ProblemReport {
                    problem_id: problem_id.to_string(),
                    candidates: pooled.len(),
                    coverage_iou,
                    chi_sq,
                    mean_pairwise_cosine: diversity.mean_pairwise_cosine,
                    codebleu_complement_max: diversity.codebleu_complement_max,
                });
            }
            run.aggregates = problem_aggregates(&run.problem_reports);
        }
    }
    Ok(run)
}

/// Cross-fold table: for every column, the mean and population standard
/// deviation of the per-fold means. All runs must share a level and the
/// same column set.
pub fn cross_fold(runs: &[EvalRun]) -> Result<AggregateTable, EvalError> {
    let first = runs
        .first()
        .ok_or_else(|| EvalError::FoldShape("no runs given".to_string()))?;
    let columns: Vec<&String> = first.aggregates.keys().collect();
    let mut table = AggregateTable::new();
    for column in columns {
        let mut means = Vec::with_capacity(runs.len());
        for run in runs {
            if run.level != first.level {
                return Err(EvalError::FoldShape(format!(
                    "mixed levels {} and {}",
                    first.level, run.level
                )));
            }
            let entry = run.aggregates.get(column).ok_or_else(|| {
                EvalError::FoldShape(format!("fold {} lacks column {column}", run.fold))
            })?;
            means.push(entry.mean);
        }
        table.insert(column.clone(), stat(&means));
    }
    Ok(table)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const PAIR_CSV_HEADER: &str =
    "student_id,problem_id,k,codebleu_at_k,iou_at_k,best_codebleu_index,best_iou_index";

pub const PROBLEM_CSV_HEADER: &str =
    "problem_id,candidates,coverage_iou,chi_sq,mean_pairwise_cosine,codebleu_complement_max";

/// Writes the pair-level CSV, one row per (pair, K).
pub fn write_pair_csv(path: &Path, reports: &[PairReport]) -> Result<(), EvalError> {
    let mut out = String::from(PAIR_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.student_id),
            csv_field(&r.problem_id),
            r.k,
            r.codebleu_at_k,
            r.iou_at_k,
            r.best_codebleu_index,
            r.best_iou_index,
        ));
    }
    write_atomic(path, out.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the problem-level CSV, one row per problem.
pub fn write_problem_csv(path: &Path, reports: &[ProblemReport]) -> Result<(), EvalError> {
    let mut out = String::from(PROBLEM_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.problem_id),
            r.candidates,
            r.coverage_iou,
            r.chi_sq,
            r.mean_pairwise_cosine,
            r.codebleu_complement_max,
        ));
    }
    write_atomic(path, out.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct AggregateFile<'a> {
    level: EvalLevel,
    axis: SplitAxis,
    fold: usize,
    part: &'a str,
    model_tag: &'a str,
    ks: &'a [usize],
    embedding_dim: Option<usize>,
    candidates_per_problem: &'a BTreeMap<String, usize>,
    columns: &'a AggregateTable,
}

/// Writes the JSON aggregate table for a run, after recomputing every
/// column from the per-item records and refusing on any mismatch.
pub fn write_aggregate_json(path: &Path, run: &EvalRun) -> Result<(), EvalError> {
    let recomputed = match run.level {
        EvalLevel::Pair => pair_aggregates(&run.pair_reports),
        EvalLevel::Problem => problem_aggregates(&run.problem_reports),
    };
    if recomputed.len() != run.aggregates.len() {
        return Err(EvalError::Inconsistent("column count".to_string()));
    }
    for (column, entry) in &run.aggregates {
        if recomputed.get(column) != Some(entry) {
            return Err(EvalError::Inconsistent(column.clone()));
        }
    }
    let file = AggregateFile {
        level: run.level,
        axis: run.axis,
        fold: run.fold,
        part: &run.part,
        model_tag: &run.model_tag,
        ks: &run.ks,
        embedding_dim: run.embedding_dim,
        candidates_per_problem: &run.candidates_per_problem,
        columns: &run.aggregates,
    };
    let json = serde_json::to_string_pretty(&file).expect("serializable aggregate");
    write_atomic(path, json.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes every report a run carries into `dir`: the per-level CSV plus
/// `aggregate.json`. Returns the written paths.
pub fn write_reports(run: &EvalRun, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    match run.level {
        EvalLevel::Pair => {
            let path = dir.join("pairs.csv");
            write_pair_csv(&path, &run.pair_reports)?;
            written.push(path);
        }
        EvalLevel::Problem => {
            let path = dir.join("problems.csv");
            write_problem_csv(&path, &run.problem_reports)?;
            written.push(path);
        }
    }
    let path = dir.join("aggregate.json");
    write_aggregate_json(&path, run)?;
    written.push(path);
    Ok(written)
}

/// Two-sided paired t-test over matched samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedT {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub mean_diff: f64,
}

/// Classic paired t-test of `xs` against `ys` (differences `xs - ys`,
/// sample standard deviation, two-sided p). Zero-variance differences
/// degenerate to t = 0, p = 1 when the mean difference is zero, and to an
/// infinite statistic with p = 0 otherwise.
pub fn paired_t(xs: &[f64], ys: &[f64]) -> Result<PairedT, EvalError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(EvalError::BadSample);
    }
    let n = xs.len() as f64;
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let df = n - 1.0;
    if se == 0.0 {
        return Ok(if mean == 0.0 {
            PairedT {
                t: 0.0,
                p: 1.0,
                df,
                mean_diff: mean,
            }
        } else {
            PairedT {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
                mean_diff: mean,
            }
        });
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df of at least 1");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedT {
        t,
        p,
        df,
        mean_diff: mean,
    })
}
