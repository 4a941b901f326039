//! Aggregating raw error descriptions into a representative catalog.
//!
//! Raw annotation labels vary in wording, so they are embedded, hierarchically
//! clustered under cosine distance, cut to a chosen cluster count, and each
//! cluster is summarized into one representative label. The merge sequence is
//! fully deterministic: exact Lance-Williams updates and ties broken by the
//! lowest (smaller id, larger id) pair, with cluster ids numbered leaves
//! first, then one new id per merge.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset};
use crate::llm::{map_bounded, ChatMessage, ChatRequest, ChatTransport, EmbeddingRequest, EmbeddingTransport, LlmError};
use crate::taxonomy::{
    exchange, parse_with_repair, render_error_list, CategoryTally, ErrorLabel, JudgeConfig,
    TaxonomyError,
};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("vector has zero norm (description {0:?})")]
    ZeroNorm(String),
    #[error("vector dimension {got} does not match expected {expected} (description {text:?})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        text: String,
    },
    #[error("clustering needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("cut count {k_c} out of range for {n} leaves")]
    KOutOfRange { k_c: usize, n: usize },
    #[error("{descriptions} descriptions but {assignment} assigned indices")]
    LengthMismatch {
        descriptions: usize,
        assignment: usize,
    },
    #[error("empty error description at index {0}")]
    EmptyDescription(usize),
    #[error("no precomputed vector for description {0:?}")]
    MissingVector(String),
    #[error("two clusters chose the same representative {0:?}")]
    DuplicateRepresentative(String),
    #[error("no mapping for raw label {0:?}")]
    MissingMapping(String),
    #[error("cluster {0} has no representative yet")]
    MissingRepresentative(usize),
    #[error("file {path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file {path}:{line}: {source}")]
    FileFormat {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// One raw error description with its embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedError {
    pub description: String,
    pub vector: Vec<f64>,
}

/// Cosine distance `1 − cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, ClusterError> {
    if u.len() != v.len() {
        return Err(ClusterError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
            text: String::new(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let norm_u = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_v = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm_u == 0.0 || norm_v == 0.0 {
        return Err(ClusterError::ZeroNorm(String::new()));
    }
    Ok(1.0 - dot / (norm_u * norm_v))
}

/// Linkage criterion for agglomeration. Average is the default throughout the
/// pipeline; the others exist for sensitivity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    Average,
    Complete,
    Single,
}

/// One agglomeration step joining clusters `a` and `b` (with `a < b`) at the
/// given linkage distance. The merge creates cluster id `leaf_count + t` for
/// the t-th merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// The full merge history of one agglomeration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub leaf_count: usize,
}

struct HeapEntry {
    distance: f64,
    a: usize,
    b: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.distance.total_cmp(&other.distance).is_eq() && self.a == other.a && self.b == other.b
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // Inverted so the std max-heap pops the smallest (distance, a, b) first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .distance
            .total_cmp(&self.distance)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

/// Agglomerates `points` under cosine distance with the requested linkage.
/// Lance-Williams updates keep each step O(active clusters); candidate pairs
/// sit in a lazily invalidated heap, so the whole run is O(n² log n).
pub fn hac(points: &[EmbeddedError], linkage: Linkage) -> Result<Dendrogram, ClusterError> {
    let n = points.len();
    if n < 2 {
        return Err(ClusterError::TooFewPoints(n));
    }
    let dim = points[0].vector.len();
    for point in points {
        if point.vector.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                got: point.vector.len(),
                text: point.description.clone(),
            });
        }
    }

    let mut dist: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&points[i].vector, &points[j].vector).map_err(|err| {
                match err {
                    ClusterError::ZeroNorm(_) => {
                        ClusterError::ZeroNorm(points[i].description.clone())
                    }
                    other => other,
                }
            })?;
            dist.insert((i, j), d);
            heap.push(HeapEntry { distance: d, a: i, b: j });
        }
    }

    let mut active: BTreeSet<usize> = (0..n).collect();
    let mut size: BTreeMap<usize, usize> = (0..n).map(|i| (i, 1)).collect();
    let mut merges = Vec::with_capacity(n - 1);
    while merges.len() < n - 1 {
        let entry = heap.pop().expect("a valid candidate pair always remains");
        let (a, b) = (entry.a, entry.b);
        if !active.contains(&a) || !active.contains(&b) {
            continue;
        }
        match dist.get(&(a, b)) {
            Some(current) if current.total_cmp(&entry.distance).is_eq() => {}
            _ => continue,
        }

        let new_id = n + merges.len();
        merges.push(Merge { a, b, distance: entry.distance });
        active.remove(&a);
        active.remove(&b);
        let size_a = size[&a] as f64;
        let size_b = size[&b] as f64;
        for &k in &active {
            let d_ak = dist[&key(a, k)];
            let d_bk = dist[&key(b, k)];
            let d_new = match linkage {
                Linkage::Single => d_ak.min(d_bk),
                Linkage::Complete => d_ak.max(d_bk),
                Linkage::Average => (size_a * d_ak + size_b * d_bk) / (size_a + size_b),
            };
            dist.insert(key(new_id, k), d_new);
            heap.push(HeapEntry {
                distance: d_new,
                a: k.min(new_id),
                b: k.max(new_id),
            });
        }
        let stale: Vec<(usize, usize)> = dist
            .keys()
            .filter(|(x, y)| *x == a || *y == a || *x == b || *y == b)
            .copied()
            .collect();
        for k in stale {
            dist.remove(&k);
        }
        size.insert(new_id, size[&a] + size[&b]);
        active.insert(new_id);
    }
    Ok(Dendrogram { merges, leaf_count: n })
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// A flat clustering: every raw-error index mapped to a cluster id in
/// `0..k_c`, plus (after summarization) one representative label per cluster.
/// Cluster ids are assigned by smallest member index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub k_c: usize,
    pub representatives: BTreeMap<usize, ErrorLabel>,
}

impl ClusterAssignment {
    /// Member indices of one cluster, ascending.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    /// All clusters as member-index lists, ordered by cluster id.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        (0..self.k_c).map(|c| self.members(c)).collect()
    }

    /// Maps every raw description to its cluster's representative id.
    /// Requires summarization to have filled all representatives.
    pub fn remap(&self, descriptions: &[String]) -> Result<BTreeMap<String, String>, ClusterError> {
        if descriptions.len() != self.assignment.len() {
            return Err(ClusterError::LengthMismatch {
                descriptions: descriptions.len(),
                assignment: self.assignment.len(),
            });
        }
        let mut mapping = BTreeMap::new();
        for (index, &cluster) in self.assignment.iter().enumerate() {
            let representative = self
                .representatives
                .get(&cluster)
                .ok_or(ClusterError::MissingRepresentative(cluster))?;
            mapping.insert(descriptions[index].clone(), representative.id.clone());
        }
        Ok(mapping)
    }
}

/// Flattens a dendrogram to exactly `k_c` clusters by undoing the last
/// `k_c − 1` merges (equivalently: applying only the first `n − k_c`).
pub fn cut(dendrogram: &Dendrogram, k_c: usize) -> Result<ClusterAssignment, ClusterError> {
    let n = dendrogram.leaf_count;
    if k_c < 1 || k_c > n {
        return Err(ClusterError::KOutOfRange { k_c, n });
    }
    let mut parent: Vec<Option<usize>> = vec![None; 2 * n - 1];
    for (t, merge) in dendrogram.merges.iter().take(n - k_c).enumerate() {
        parent[merge.a] = Some(n + t);
        parent[merge.b] = Some(n + t);
    }
    let root_of = |mut node: usize| {
        while let Some(up) = parent[node] {
            node = up;
        }
        node
    };
    let mut cluster_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut assignment = vec![0usize; n];
    for leaf in 0..n {
        let root = root_of(leaf);
        let next = cluster_of_root.len();
        let id = *cluster_of_root.entry(root).or_insert(next);
        assignment[leaf] = id;
    }
    debug_assert_eq!(cluster_of_root.len(), k_c);
    Ok(ClusterAssignment {
        assignment,
        k_c,
        representatives: BTreeMap::new(),
    })
}

pub const SUMMARIZE_SYSTEM_PROMPT: &str = r#"You are an experienced computer science teacher.
You will be provided with a list of errors from student code that refer to the same underlying errors but may vary in wording.

Your task is to:
1. Carefully examine all the errors in the list to ensure none are overlooked.
2. Reason explicitly the error refer to the same underlying concept or if they are related but represent distinct or complementary aspects of a broader theme.
3. Based on your reasoning: select one error from the list that best represents the group — choose the one that is most clearly worded, generalizable, and inclusive of the others. Remove all problem specific description from the selected error.

Return output strictly in the following JSON format:
{
"Reasoning": "<Exactly one sentence explaining your reasoning on the majority error>",
"Representative_error": "<Error name>"
}"#;

/// Messages for one cluster-summarization request.
pub fn summarize_messages(members: &[&str]) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(SUMMARIZE_SYSTEM_PROMPT),
        ChatMessage::user(format!(
            "The error list is: {}\n\nNow follow the instructions in system message and perform the task.",
            render_error_list(members)
        )),
    ]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SummarizeReply {
    #[serde(rename = "Reasoning")]
    #[allow(dead_code)]
    reasoning: String,
    #[serde(rename = "Representative_error")]
    representative: String,
}

/// Asks the summarizer endpoint for one representative per cluster. A reply
/// naming a description outside the cluster counts as malformed and is
/// retried (closed-choice validation). Representative categories are the
/// majority vote over member tallies from the annotation stage.
pub fn summarize_clusters(
    transport: &dyn ChatTransport,
    assignment: &ClusterAssignment,
    descriptions: &[String],
    categories: &BTreeMap<String, CategoryTally>,
    cfg: &JudgeConfig,
) -> Result<ClusterAssignment, ClusterError> {
    cfg.validate()?;
    if descriptions.len() != assignment.assignment.len() {
        return Err(ClusterError::LengthMismatch {
            descriptions: descriptions.len(),
            assignment: assignment.assignment.len(),
        });
    }
    let clusters = assignment.clusters();
    let outcomes = map_bounded(&clusters, cfg.max_parallel, |members| {
        let mut seen = BTreeSet::new();
        let member_texts: Vec<&str> = members
            .iter()
            .map(|&i| descriptions[i].as_str())
            .filter(|text| seen.insert(*text))
            .collect();
        let mut request = ChatRequest::new(&cfg.model, summarize_messages(&member_texts));
        request.temperature = Some(0.0);
        let (representative, _raw, _retries) =
            exchange(transport, &request, cfg.retries, |raw| {
                let reply: SummarizeReply =
                    parse_with_repair(raw).map_err(|err| err.to_string())?;
                let choice = reply.representative.trim().to_string();
                if member_texts.iter().any(|text| *text == choice) {
                    Ok(choice)
                } else {
                    Err(format!("representative {choice:?} is not a cluster member"))
                }
            })?;
        let mut tally = CategoryTally::default();
        for text in &member_texts {
            if let Some(votes) = categories.get(*text) {
                tally.syntax += votes.syntax;
                tally.runtime += votes.runtime;
                tally.logical += votes.logical;
            }
        }
        Ok::<ErrorLabel, TaxonomyError>(ErrorLabel {
            id: representative.clone(),
            description: representative,
            category: tally.majority(),
        })
    });

    let mut representatives = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (cluster, outcome) in outcomes.into_iter().enumerate() {
        let label = outcome?;
        if !seen.insert(label.id.clone()) {
            return Err(ClusterError::DuplicateRepresentative(label.id));
        }
        representatives.insert(cluster, label);
    }
    Ok(ClusterAssignment {
        assignment: assignment.assignment.clone(),
        k_c: assignment.k_c,
        representatives,
    })
}

/// Rewrites every submission's error labels through `mapping`, deduplicating
/// labels that land on the same representative. Labels missing from the
/// mapping are an error — a partial catalog must not silently pass through.
pub fn remap_dataset(
    dataset: &Dataset,
    mapping: &BTreeMap<String, String>,
) -> Result<Dataset, ClusterError> {
    for submission in dataset.submissions() {
        for label in &submission.errors {
            if !mapping.contains_key(label) {
                return Err(ClusterError::MissingMapping(label.clone()));
            }
        }
    }
    let remapped = dataset.with_errors(|submission| {
        let mut seen = BTreeSet::new();
        submission
            .errors
            .iter()
            .map(|label| mapping[label].clone())
            .filter(|label| seen.insert(label.clone()))
            .collect()
    })?;
    Ok(remapped)
}

/// Connection settings for an embedding endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub batch_size: usize,
    pub max_parallel: usize,
}

impl EmbedConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout_secs: 30,
            batch_size: 64,
            max_parallel: 4,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    model: String,
    text_hash: String,
    vector: Vec<f64>,
}

/// Append-only embedding cache keyed by (model, sha256 of text). Re-opening
/// replays the file, so repeated runs skip the endpoint entirely.
pub struct EmbedCache {
    map: BTreeMap<(String, String), Vec<f64>>,
    file: File,
    path: PathBuf,
}

impl EmbedCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ClusterError> {
        let path = path.into();
        let mut map = BTreeMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|source| ClusterError::FileIo {
                path: path.clone(),
                source,
            })?;
            for (index, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| ClusterError::FileIo {
                    path: path.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|source| ClusterError::FileFormat {
                        path: path.clone(),
                        line: index + 1,
                        source,
                    })?;
                map.insert((record.model, record.text_hash), record.vector);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| ClusterError::FileIo {
                path: path.clone(),
                source,
            })?;
        Ok(Self { map, file, path })
    }

    pub fn get(&self, model: &str, text: &str) -> Option<&Vec<f64>> {
        self.map
            .get(&(model.to_string(), sha256_hex(text.as_bytes())))
    }

    pub fn insert(&mut self, model: &str, text: &str, vector: Vec<f64>) -> Result<(), ClusterError> {
        let record = CacheRecord {
            model: model.to_string(),
            text_hash: sha256_hex(text.as_bytes()),
            vector,
        };
        let line = serde_json::to_string(&record).expect("cache record serializes");
        writeln!(self.file, "{line}").map_err(|source| ClusterError::FileIo {
            path: self.path.clone(),
            source,
        })?;
        self.map
            .insert((record.model, record.text_hash), record.vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn validate_vectors(texts: &[&str], vectors: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let dim = vectors
        .first()
        .map(|v| v.len())
        .expect("at least one vector");
    for (text, vector) in texts.iter().zip(vectors) {
        if vector.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                got: vector.len(),
                text: (*text).to_string(),
            });
        }
        if vector.iter().map(|x| x * x).sum::<f64>().sqrt() == 0.0 {
            return Err(ClusterError::ZeroNorm((*text).to_string()));
        }
    }
    Ok(dim)
}

/// Embeds `descriptions` through an endpoint, deduplicating repeats and using
/// (then filling) `cache` where provided. Batches of `cfg.batch_size` run with
/// at most `cfg.max_parallel` requests in flight.
pub fn embed_errors(
    descriptions: &[String],
    transport: &dyn EmbeddingTransport,
    cfg: &EmbedConfig,
    mut cache: Option<&mut EmbedCache>,
) -> Result<Vec<EmbeddedError>, ClusterError> {
    for (index, text) in descriptions.iter().enumerate() {
        if text.trim().is_empty() {
            return Err(ClusterError::EmptyDescription(index));
        }
    }
    let mut unique: Vec<&str> = Vec::new();
    let mut seen = BTreeSet::new();
    for text in descriptions {
        if seen.insert(text.as_str()) {
            unique.push(text.as_str());
        }
    }

    let mut vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut missing: Vec<&str> = Vec::new();
    for &text in &unique {
        match cache.as_deref().and_then(|c| c.get(&cfg.model, text)) {
            Some(vector) => {
                vectors.insert(text, vector.clone());
            }
            None => missing.push(text),
        }
    }

    if !missing.is_empty() {
        let batches: Vec<Vec<String>> = missing
            .chunks(cfg.batch_size.max(1))
            .map(|chunk| chunk.iter().map(|s| s.to_string()).collect())
            .collect();
        let replies = map_bounded(&batches, cfg.max_parallel.max(1), |batch| {
            transport.embed(&EmbeddingRequest::new(&cfg.model, batch.clone()))
        });
        let mut fresh = Vec::with_capacity(missing.len());
        for reply in replies {
            fresh.extend(reply?);
        }
        if fresh.len() != missing.len() {
            return Err(LlmError::ShapeMismatch {
                expected: missing.len(),
                got: fresh.len(),
            }
            .into());
        }
        for (text, vector) in missing.iter().zip(fresh) {
            if let Some(c) = cache.as_deref_mut() {
                c.insert(&cfg.model, text, vector.clone())?;
            }
            vectors.insert(text, vector);
        }
    }

    let ordered: Vec<Vec<f64>> = unique.iter().map(|text| vectors[*text].clone()).collect();
    validate_vectors(&unique, &ordered)?;
    Ok(descriptions
        .iter()
        .map(|text| EmbeddedError {
            description: text.clone(),
            vector: vectors[text.as_str()].clone(),
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct PrecomputedRecord {
    text: String,
    vector: Vec<f64>,
}

/// Loads a JSONL file of `{text, vector}` records.
pub fn load_precomputed(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, ClusterError> {
    let file = File::open(path).map_err(|source| ClusterError::FileIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut table = BTreeMap::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ClusterError::FileIo {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PrecomputedRecord =
            serde_json::from_str(&line).map_err(|source| ClusterError::FileFormat {
                path: path.to_path_buf(),
                line: index + 1,
                source,
            })?;
        table.insert(record.text, record.vector);
    }
    Ok(table)
}

/// Resolves every description against a precomputed-vector table, verbatim.
pub fn embed_from_precomputed(
    descriptions: &[String],
    table: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<EmbeddedError>, ClusterError> {
    for (index, text) in descriptions.iter().enumerate() {
        if text.trim().is_empty() {
            return Err(ClusterError::EmptyDescription(index));
        }
    }
    let mut points = Vec::with_capacity(descriptions.len());
    for text in descriptions {
        let vector = table
            .get(text)
            .ok_or_else(|| ClusterError::MissingVector(text.clone()))?;
        points.push(EmbeddedError {
            description: text.clone(),
            vector: vector.clone(),
        });
    }
    let texts: Vec<&str> = descriptions.iter().map(|s| s.as_str()).collect();
    let ordered: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
    if !ordered.is_empty() {
        validate_vectors(&texts, &ordered)?;
    }
    Ok(points)
}

/// One cluster in the human-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReportEntry {
    pub representative: String,
    pub members: Vec<String>,
    /// Mean cosine distance from the cluster medoid to all members
    /// (0 for singletons).
    pub medoid_distance: f64,
}

/// The cluster report written after summarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k_c: usize,
    pub clusters: Vec<ClusterReportEntry>,
}

/// Builds the report from a summarized assignment and the embedded points.
pub fn cluster_report(
    assignment: &ClusterAssignment,
    points: &[EmbeddedError],
) -> Result<ClusterReport, ClusterError> {
    if points.len() != assignment.assignment.len() {
        return Err(ClusterError::LengthMismatch {
            descriptions: points.len(),
            assignment: assignment.assignment.len(),
        });
    }
    let mut clusters = Vec::with_capacity(assignment.k_c);
    for cluster in 0..assignment.k_c {
        let members = assignment.members(cluster);
        let representative = assignment
            .representatives
            .get(&cluster)
            .ok_or(ClusterError::MissingRepresentative(cluster))?;
        let mut best: Option<(usize, f64)> = None;
        for &candidate in &members {
            let mut total = 0.0;
            for &other in &members {
                if other != candidate {
                    total += cosine_distance(&points[candidate].vector, &points[other].vector)?;
                }
            }
            let better = match best {
                None => true,
                Some((_, best_total)) => total < best_total,
            };
            if better {
                best = Some((candidate, total));
            }
        }
        let (_, total) = best.expect("clusters are non-empty");
        let medoid_distance = if members.len() > 1 {
            total / (members.len() - 1) as f64
        } else {
            0.0
        };
        clusters.push(ClusterReportEntry {
            representative: representative.id.clone(),
            members: members
                .iter()
                .map(|&i| points[i].description.clone())
                .collect(),
            medoid_distance,
        });
    }
    Ok(ClusterReport {
        k_c: assignment.k_c,
        clusters,
    })
}
