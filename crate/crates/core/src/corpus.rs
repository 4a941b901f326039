//! Dataset model, JSONL ingestion, validation, and cross-validation splits.
//!
//! A dataset file is JSON-Lines. The first line is a header object carrying
//! the knowledge-component and problem catalogs; every subsequent line is
//! one submission:
//!
//! ```text
//! {"kcs":[{"id":"kc1","name":"loops"}],"problems":[{"id":"p1","statement":"...","language":"java","kc_ids":["kc1"]}]}
//! {"student_id":"s1","problem_id":"p1","order_index":0,"code":"...","correct":false,"errors":["off-by-one"]}
//! ```
//!
//! Only the first submission per (student, problem) is stored; a file with
//! a second attempt for the same pair is rejected. Within a student the
//! `order_index` values must be strictly increasing in file order, and are
//! re-numbered densely (0..n-1) after load so sequence models see gap-free
//! timelines. The original indices are preserved on serialization, which
//! keeps load → save byte-identical (modulo JSON key order) for valid
//! files.
//!
//! Splits are seeded Fisher–Yates shuffles of the unit ids (students or
//! problems) followed by contiguous slicing: fold k takes the k-th tenth
//! as test and the following tenth as validation, so the five test slices
//! are pairwise disjoint and every fold's ratios stay within one unit of
//! 0.8/0.1/0.1.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Number of cross-validation folds produced by [`make_split_plan`].
pub const FOLD_COUNT: usize = 5;

/// Minimum number of units (students or problems) required along a split
/// axis.
pub const MIN_SPLIT_UNITS: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line: {source}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset file is empty; expected a header line")]
    MissingHeader,
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("problem {problem:?} references unknown KC {kc:?}")]
    UnknownKc { problem: String, kc: String },
    #[error("problem {id:?} has an empty kc_ids list")]
    EmptyKcs { id: String },
    #[error("problem {id:?} has an empty name or statement")]
    EmptyProblemField { id: String },
    #[error("KC {id:?} has an empty name")]
    EmptyKcName { id: String },
    #[error("submission ({student}, {problem}) references an unknown problem")]
    UnknownProblem { student: String, problem: String },
    #[error("duplicate submission for ({student}, {problem}); only first submissions are stored")]
    DuplicatePair { student: String, problem: String },
    #[error("submission ({student}, {problem}) is marked correct but carries error labels")]
    CorrectWithErrors { student: String, problem: String },
    #[error("submission ({student}, {problem}) has empty code")]
    EmptyCode { student: String, problem: String },
    #[error("submission ({student}, {problem}) lists error label {label:?} twice")]
    DuplicateErrorLabel {
        student: String,
        problem: String,
        label: String,
    },
    #[error(
        "order_index not strictly increasing for student {student:?} \
         (index {index} follows {previous})"
    )]
    OrderNotIncreasing {
        student: String,
        previous: u64,
        index: u64,
    },
    #[error("unknown student {0:?}")]
    UnknownStudent(String),
    #[error("split by {axis} needs at least {need} units, dataset has {have}")]
    TooFewUnits {
        axis: SplitAxis,
        need: usize,
        have: usize,
    },
    #[error("split plan references unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("fold index {fold} out of range (plan has {count} folds)")]
    FoldOutOfRange { fold: usize, count: usize },
}

/// A knowledge component: one named skill a problem can exercise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeComponent {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Java,
    Python,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::Java => write!(f, "Java"),
            Language::Python => write!(f, "Python"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub language: Language,
    pub kc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub student_id: String,
    pub problem_id: String,
    pub order_index: u64,
    pub code: String,
    pub correct: bool,
    /// Error label ids attached to this submission. Empty until the
    /// annotation stage has run, and always empty for correct
    /// submissions.
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kcs: Vec<KnowledgeComponent>,
    problems: Vec<Problem>,
}

/// An immutable, validated collection of catalogs and submissions.
///
/// Construction (via [`Dataset::new`] or [`load_dataset`]) enforces every
/// schema invariant; afterwards the dataset is read-only and safe to share
/// across worker threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    kcs: Vec<KnowledgeComponent>,
    problems: Vec<Problem>,
    submissions: Vec<Submission>,
    kc_index: HashMap<String, usize>,
    problem_index: HashMap<String, usize>,
    students: Vec<String>,
    /// Submission indices per student, sorted by order_index; position in
    /// the vector is the dense re-indexed t.
    student_seqs: HashMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(
        kcs: Vec<KnowledgeComponent>,
        problems: Vec<Problem>,
        submissions: Vec<Submission>,
    ) -> Result<Self, CorpusError> {
        let mut kc_index = HashMap::new();
        for (i, kc) in kcs.iter().enumerate() {
            if kc.name.trim().is_empty() {
                return Err(CorpusError::EmptyKcName { id: kc.id.clone() });
            }
            if kc_index.insert(kc.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    kind: "KC",
                    id: kc.id.clone(),
                });
            }
        }
        let mut problem_index = HashMap::new();
        for (i, p) in problems.iter().enumerate() {
            if p.statement.trim().is_empty() {
                return Err(CorpusError::EmptyProblemField { id: p.id.clone() });
            }
            if p.kc_ids.is_empty() {
                return Err(CorpusError::EmptyKcs { id: p.id.clone() });
            }
            for kc in &p.kc_ids {
                if !kc_index.contains_key(kc) {
                    return Err(CorpusError::UnknownKc {
                        problem: p.id.clone(),
                        kc: kc.clone(),
                    });
                }
            }
            if problem_index.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    kind: "problem",
                    id: p.id.clone(),
                });
            }
        }

        let mut pairs = HashSet::new();
        let mut last_order: HashMap<&str, u64> = HashMap::new();
        for s in &submissions {
            if !problem_index.contains_key(&s.problem_id) {
                return Err(CorpusError::UnknownProblem {
                    student: s.student_id.clone(),
                    problem: s.problem_id.clone(),
                });
            }
            if s.code.trim().is_empty() {
                return Err(CorpusError::EmptyCode {
                    student: s.student_id.clone(),
                    problem: s.problem_id.clone(),
                });
            }
            if s.correct && !s.errors.is_empty() {
                return Err(CorpusError::CorrectWithErrors {
                    student: s.student_id.clone(),
                    problem: s.problem_id.clone(),
                });
            }
            let mut seen = HashSet::new();
            for e in &s.errors {
                if !seen.insert(e) {
                    return Err(CorpusError::DuplicateErrorLabel {
                        student: s.student_id.clone(),
                        problem: s.problem_id.clone(),
                        label: e.clone(),
                    });
                }
            }
            if !pairs.insert((s.student_id.clone(), s.problem_id.clone())) {
                return Err(CorpusError::DuplicatePair {
                    student: s.student_id.clone(),
                    problem: s.problem_id.clone(),
                });
            }
            match last_order.get(s.student_id.as_str()) {
                Some(&prev) if s.order_index <= prev => {
                    return Err(CorpusError::OrderNotIncreasing {
                        student: s.student_id.clone(),
                        previous: prev,
                        index: s.order_index,
                    });
                }
                _ => {}
            }
            last_order.insert(s.student_id.as_str(), s.order_index);
        }

        let mut student_seqs: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, s) in submissions.iter().enumerate() {
            student_seqs.entry(s.student_id.clone()).or_default().push(i);
        }
        // File order within a student is already order_index order (checked
        // above), so each sequence is sorted; position == dense t.
        let mut students: Vec<String> = student_seqs.keys().cloned().collect();
        students.sort();

        Ok(Dataset {
            kcs,
            problems,
            submissions,
            kc_index,
            problem_index,
            students,
            student_seqs,
        })
    }

    pub fn kcs(&self) -> &[KnowledgeComponent] {
        &self.kcs
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn submissions(&self) -> &[Submission] {
        &self.submissions
    }

    /// Sorted unique student ids.
    pub fn students(&self) -> &[String] {
        &self.students
    }

    pub fn kc(&self, id: &str) -> Option<&KnowledgeComponent> {
        self.kc_index.get(id).map(|&i| &self.kcs[i])
    }

    /// Position of a KC in the catalog, used as its index in multi-hot
    /// feature vectors and mastery profiles.
    pub fn kc_position(&self, id: &str) -> Option<usize> {
        self.kc_index.get(id).copied()
    }

    pub fn problem(&self, id: &str) -> Option<&Problem> {
        self.problem_index.get(id).map(|&i| &self.problems[i])
    }

    /// A student's submissions in dense temporal order.
    pub fn student_sequence(&self, student_id: &str) -> Result<Vec<&Submission>, CorpusError> {
        let seq = self
            .student_seqs
            .get(student_id)
            .ok_or_else(|| CorpusError::UnknownStudent(student_id.to_string()))?;
        Ok(seq.iter().map(|&i| &self.submissions[i]).collect())
    }

    /// Submissions of `student_id` with dense index < `t`, ascending. A
    /// `t` beyond the sequence length clamps to the full sequence.
    pub fn history(&self, student_id: &str, t: usize) -> Result<Vec<&Submission>, CorpusError> {
        let mut seq = self.student_sequence(student_id)?;
        seq.truncate(t);
        Ok(seq)
    }

    /// Dense re-indexed position of the submission for (student, problem),
    /// if present.
    pub fn dense_index(&self, student_id: &str, problem_id: &str) -> Option<usize> {
        let seq = self.student_seqs.get(student_id)?;
        seq.iter()
            .position(|&i| self.submissions[i].problem_id == problem_id)
    }

    /// A view spanning every submission, for stages that run on the whole
    /// corpus rather than one split part.
    pub fn full_view(&self) -> DatasetView<'_> {
        self.full_view_on(SplitAxis::ByStudent)
    }

    /// Like [`full_view`](Self::full_view) but tagged with an explicit split
    /// axis, for stages whose level depends on it.
    pub fn full_view_on(&self, axis: SplitAxis) -> DatasetView<'_> {
        DatasetView {
            ds: self,
            fold: 0,
            part: Part::Train,
            axis,
            indices: (0..self.submissions.len()).collect(),
        }
    }

    /// Replaces every submission's error list via `f` (used by the
    /// annotation and label-remapping stages), revalidating invariants.
    pub fn with_errors<F>(&self, mut f: F) -> Result<Dataset, CorpusError>
    where
        F: FnMut(&Submission) -> Vec<String>,
    {
        let submissions = self
            .submissions
            .iter()
            .map(|s| Submission {
                errors: f(s),
                ..s.clone()
            })
            .collect();
        Dataset::new(self.kcs.clone(), self.problems.clone(), submissions)
    }
}

/// Parses the JSONL wire format from a reader. `origin` appears in error
/// messages.
pub fn parse_dataset<R: std::io::Read>(reader: R, origin: &Path) -> Result<Dataset, CorpusError> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let header: Header = match lines.next() {
        None => return Err(CorpusError::MissingHeader),
        Some((_, line)) => {
            let line = line.map_err(|source| CorpusError::Io {
                path: origin.to_path_buf(),
                source,
            })?;
            serde_json::from_str(&line).map_err(|source| CorpusError::MalformedLine {
                path: origin.to_path_buf(),
                line: 1,
                source,
            })?
        }
    };
    let mut submissions = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|source| CorpusError::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sub: Submission =
            serde_json::from_str(&line).map_err(|source| CorpusError::MalformedLine {
                path: origin.to_path_buf(),
                line: idx + 1,
                source,
            })?;
        submissions.push(sub);
    }
    Dataset::new(header.kcs, header.problems, submissions)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(file, path)
}

/// Serializes to the JSONL wire format. Key order is fixed by the struct
/// definitions, so `to_jsonl(load(x))` is byte-identical to `x` for files
/// written by this function.
pub fn to_jsonl(ds: &Dataset) -> String {
    let header = Header {
        kcs: ds.kcs.clone(),
        problems: ds.problems.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for sub in &ds.submissions {
        out.push_str(&serde_json::to_string(sub).expect("submission serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), CorpusError> {
    crate::util::write_atomic(path, to_jsonl(ds).as_bytes()).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAxis {
    ByStudent,
    ByProblem,
}

impl fmt::Display for SplitAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitAxis::ByStudent => write!(f, "by_student"),
            SplitAxis::ByProblem => write!(f, "by_problem"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

/// One fold's unit assignment (student or problem ids, per the plan axis).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    pub fn part(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

/// A deterministic 5-fold split assignment over one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub axis: SplitAxis,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Computes the 5-fold plan for `axis` under `seed`.
///
/// Unit ids are sorted, shuffled once with seeded Fisher–Yates, and cut
/// into tenths: fold k tests on the k-th tenth and validates on the
/// (k+1)-th, training on everything else. Test slices are therefore
/// pairwise disjoint across folds.
pub fn make_split_plan(
    ds: &Dataset,
    axis: SplitAxis,
    seed: u64,
) -> Result<SplitPlan, CorpusError> {
    let mut units: Vec<String> = match axis {
        SplitAxis::ByStudent => ds.students.clone(),
        SplitAxis::ByProblem => ds.problems.iter().map(|p| p.id.clone()).collect(),
    };
    units.sort();
    let n = units.len();
    if n < MIN_SPLIT_UNITS {
        return Err(CorpusError::TooFewUnits {
            axis,
            need: MIN_SPLIT_UNITS,
            have: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        units.swap(i, j);
    }
    let s = ((n as f64) / 10.0).round().max(1.0) as usize;
    // With n >= 10 the six consumed slices always fit: s <= n/10 + 1/2, so
    // (FOLD_COUNT + 1) * s <= 0.6 n + 3 < n.
    debug_assert!((FOLD_COUNT + 1) * s <= n);
    let mut folds = Vec::with_capacity(FOLD_COUNT);
    for k in 0..FOLD_COUNT {
        let test: Vec<String> = units[k * s..(k + 1) * s].to_vec();
        let val: Vec<String> = units[(k + 1) * s..(k + 2) * s].to_vec();
        let held: HashSet<&String> = test.iter().chain(val.iter()).collect();
        let train: Vec<String> = units
            .iter()
            .filter(|u| !held.contains(u))
            .cloned()
            .collect();
        folds.push(Fold { train, val, test });
    }
    Ok(SplitPlan { axis, seed, folds })
}

/// A filtered, read-only view of one split part: the submissions whose
/// unit (student or problem, per the plan axis) belongs to the part.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    ds: &'a Dataset,
    pub fold: usize,
    pub part: Part,
    pub axis: SplitAxis,
    indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn submissions(&self) -> impl Iterator<Item = &'a Submission> + '_ {
        self.indices.iter().map(|&i| &self.ds.submissions[i])
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Materializes the (train, val, test) views for fold `k` of `plan`.
pub fn fold_views<'a>(
    ds: &'a Dataset,
    plan: &SplitPlan,
    k: usize,
) -> Result<(DatasetView<'a>, DatasetView<'a>, DatasetView<'a>), CorpusError> {
    let fold = plan.folds.get(k).ok_or(CorpusError::FoldOutOfRange {
        fold: k,
        count: plan.folds.len(),
    })?;
    let known = |id: &String| match plan.axis {
        SplitAxis::ByStudent => ds.student_seqs.contains_key(id),
        SplitAxis::ByProblem => ds.problem_index.contains_key(id),
    };
    for id in fold.train.iter().chain(&fold.val).chain(&fold.test) {
        if !known(id) {
            return Err(CorpusError::UnknownUnit(id.clone()));
        }
    }
    let view = |ids: &[String], part: Part| {
        let set: HashSet<&String> = ids.iter().collect();
        let indices = ds
            .submissions
            .iter()
            .enumerate()
            .filter(|(_, sub)| {
                let unit = match plan.axis {
                    SplitAxis::ByStudent => &sub.student_id,
                    SplitAxis::ByProblem => &sub.problem_id,
                };
                set.contains(unit)
            })
            .map(|(i, _)| i)
            .collect();
        DatasetView {
            ds,
            fold: k,
            part,
            axis: plan.axis,
            indices,
        }
    };
    Ok((
        view(&fold.train, Part::Train),
        view(&fold.val, Part::Val),
        view(&fold.test, Part::Test),
    ))
}
