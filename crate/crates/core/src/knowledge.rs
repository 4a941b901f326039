//! Knowledge estimation from submission histories.
//!
//! A linear-tanh recurrence folds each student's per-submission features into
//! a d-dimensional knowledge state. A sigmoid head reads the state out as a
//! per-KC mastery vector in (0,1), problem correctness is predicted as the
//! masked mean of mastery over the problem's KCs, and training minimizes the
//! mean binary cross-entropy with analytic backpropagation gradients —
//! full-batch gradient descent at this corpus scale.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset};

/// Epsilon clamp keeping `log` arguments strictly positive in the loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KeError {
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("problem {0} has no knowledge components")]
    EmptyKcSet(String),
    #[error("problem {0} is not in the dataset")]
    UnknownProblem(String),
    #[error("no prediction events in the training selection")]
    NoEvents,
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
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
    Corpus(#[from] CorpusError),
}

/// A student's d-dimensional knowledge state.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeState {
    pub h: Array1<f64>,
}

/// Per-KC mastery in (0,1); index j is the dataset's j-th KC.
#[derive(Debug, Clone, PartialEq)]
pub struct MasteryVector {
    pub m: Array1<f64>,
}

/// All trainable parameters. Feature width is always `k + 2`: a KC
/// indicator multi-hot, the correctness bit, and a normalized error count.
#[derive(Debug, Clone, PartialEq)]
pub struct KeParameters {
    pub d: usize,
    pub k: usize,
    pub f: usize,
    /// d×d recurrence matrix.
    pub a: Array2<f64>,
    /// d×f input matrix.
    pub b: Array2<f64>,
    /// Shared initial state.
    pub h0: Array1<f64>,
    /// k×d mastery head weights.
    pub w_m: Array2<f64>,
    /// k-vector mastery head bias.
    pub b_m: Array1<f64>,
    pub seed: u64,
}

/// Width of the feature vector for a dataset with `k` KCs.
pub fn feature_width(k: usize) -> usize {
    k + 2
}

impl KeParameters {
    /// Seeded initialization: every entry uniform in [−0.1, 0.1], drawn in
    /// the fixed order A, B, h0, W_m, b_m (row-major within each).
    pub fn init(d: usize, k: usize, seed: u64) -> Self {
        let f = feature_width(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-0.1..0.1)).collect()
        };
        let a = Array2::from_shape_vec((d, d), draw(d * d)).expect("a shape");
        let b = Array2::from_shape_vec((d, f), draw(d * f)).expect("b shape");
        let h0 = Array1::from_vec(draw(d));
        let w_m = Array2::from_shape_vec((k, d), draw(k * d)).expect("w_m shape");
        let b_m = Array1::from_vec(draw(k));
        Self { d, k, f, a, b, h0, w_m, b_m, seed }
    }

    pub fn initial_state(&self) -> KnowledgeState {
        KnowledgeState { h: self.h0.clone() }
    }

    fn check_finite(&self) -> bool {
        self.a.iter().all(|x| x.is_finite())
            && self.b.iter().all(|x| x.is_finite())
            && self.h0.iter().all(|x| x.is_finite())
            && self.w_m.iter().all(|x| x.is_finite())
            && self.b_m.iter().all(|x| x.is_finite())
    }
}

/// Feature vector for one submission: KC multi-hot over `k` positions,
/// then correctness as 0/1, then the error count squashed to [0,1) as
/// `c/(c+1)` — self-contained, so features never depend on corpus-wide
/// statistics that would differ between folds.
pub fn response_features(
    k: usize,
    kc_indices: &[usize],
    correct: bool,
    error_count: usize,
) -> Array1<f64> {
    let mut x = Array1::zeros(feature_width(k));
    for &index in kc_indices {
        x[index] = 1.0;
    }
    x[k] = if correct { 1.0 } else { 0.0 };
    x[k + 1] = error_count as f64 / (error_count as f64 + 1.0);
    x
}

/// One recurrence step: `h' = tanh(A·h + B·x)`.
pub fn update_state(
    h: &KnowledgeState,
    x: &Array1<f64>,
    params: &KeParameters,
) -> Result<KnowledgeState, KeError> {
    if h.h.len() != params.d {
        return Err(KeError::ShapeMismatch {
            what: "state dimension",
            expected: params.d.to_string(),
            got: h.h.len().to_string(),
        });
    }
    if x.len() != params.f {
        return Err(KeError::ShapeMismatch {
            what: "feature width",
            expected: params.f.to_string(),
            got: x.len().to_string(),
        });
    }
    let u = params.a.dot(&h.h) + params.b.dot(x);
    Ok(KnowledgeState { h: u.mapv(f64::tanh) })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Reads the state out as per-KC mastery: `m = sigmoid(W_m·h + b_m)`.
pub fn mastery(h: &KnowledgeState, params: &KeParameters) -> Result<MasteryVector, KeError> {
    if h.h.len() != params.d {
        return Err(KeError::ShapeMismatch {
            what: "state dimension",
            expected: params.d.to_string(),
            got: h.h.len().to_string(),
        });
    }
    let z = params.w_m.dot(&h.h) + &params.b_m;
    Ok(MasteryVector { m: z.mapv(sigmoid) })
}

/// Compensatory correctness prediction: mean mastery over the problem's KCs.
pub fn predict_correctness(m: &MasteryVector, kc_indices: &[usize]) -> Result<f64, KeError> {
    if kc_indices.is_empty() {
        return Err(KeError::EmptyKcSet("<unspecified>".to_string()));
    }
    let total: f64 = kc_indices.iter().map(|&j| m.m[j]).sum();
    Ok(total / kc_indices.len() as f64)
}

/// Binary cross-entropy `−[a·log ŷ + (1−a)·log(1−ŷ)]`, with ŷ clamped to
/// [BCE_EPS, 1−BCE_EPS] so the logs stay finite.
pub fn bce_loss(y_hat: f64, actual: bool) -> f64 {
    let y = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if actual {
        -y.ln()
    } else {
        -(1.0 - y).ln()
    }
}

/// One student's prediction events: per step, the input features (folded in
/// after the prediction), the problem's KC indices, and the observed
/// correctness target.
struct Sequence {
    xs: Vec<Array1<f64>>,
    kc_sets: Vec<Vec<usize>>,
    targets: Vec<f64>,
}

fn kc_indices_of(ds: &Dataset, problem_id: &str) -> Result<Vec<usize>, KeError> {
    let problem = ds
        .problem(problem_id)
        .ok_or_else(|| KeError::UnknownProblem(problem_id.to_string()))?;
    let indices: Vec<usize> = problem
        .kc_ids
        .iter()
        .filter_map(|id| ds.kc_position(id))
        .collect();
    if indices.is_empty() {
        return Err(KeError::EmptyKcSet(problem_id.to_string()));
    }
    Ok(indices)
}

fn build_sequences(ds: &Dataset, students: &[String]) -> Result<Vec<Sequence>, KeError> {
    let k = ds.kcs().len();
    let mut sequences = Vec::with_capacity(students.len());
    for student in students {
        let submissions = ds.student_sequence(student)?;
        let mut xs = Vec::with_capacity(submissions.len());
        let mut kc_sets = Vec::with_capacity(submissions.len());
        let mut targets = Vec::with_capacity(submissions.len());
        for submission in submissions {
            let kc_indices = kc_indices_of(ds, &submission.problem_id)?;
            xs.push(response_features(
                k,
                &kc_indices,
                submission.correct,
                submission.errors.len(),
            ));
            kc_sets.push(kc_indices);
            targets.push(if submission.correct { 1.0 } else { 0.0 });
        }
        if !targets.is_empty() {
            sequences.push(Sequence { xs, kc_sets, targets });
        }
    }
    Ok(sequences)
}

struct Grads {
    a: Array2<f64>,
    b: Array2<f64>,
    h0: Array1<f64>,
    w_m: Array2<f64>,
    b_m: Array1<f64>,
}

impl Grads {
    fn zeros(params: &KeParameters) -> Self {
        Self {
            a: Array2::zeros((params.d, params.d)),
            b: Array2::zeros((params.d, params.f)),
            h0: Array1::zeros(params.d),
            w_m: Array2::zeros((params.k, params.d)),
            b_m: Array1::zeros(params.k),
        }
    }
}

fn outer(u: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
    u.view()
        .insert_axis(Axis(1))
        .dot(&v.view().insert_axis(Axis(0)))
}

/// Forward pass over one sequence: returns the states h_0..h_{T−1} (the
/// state used for the prediction at each step) and the summed BCE loss.
fn forward(params: &KeParameters, seq: &Sequence) -> (Vec<Array1<f64>>, f64) {
    let steps = seq.targets.len();
    let mut states = Vec::with_capacity(steps);
    states.push(params.h0.clone());
    for t in 0..steps.saturating_sub(1) {
        let u = params.a.dot(&states[t]) + params.b.dot(&seq.xs[t]);
        states.push(u.mapv(f64::tanh));
    }
    let mut loss = 0.0;
    for t in 0..steps {
        let h = KnowledgeState { h: states[t].clone() };
        let m = mastery(&h, params).expect("shapes fixed by construction");
        let y_hat = predict_correctness(&m, &seq.kc_sets[t]).expect("kc sets are non-empty");
        loss += bce_loss(y_hat, seq.targets[t] == 1.0);
    }
    (states, loss)
}

/// Mean BCE and its analytic gradient over all events in `sequences`.
/// Backpropagation runs through the sigmoid head, the masked mean, and the
/// tanh recurrence; every event is weighted 1/(total events).
fn loss_and_grads(
    params: &KeParameters,
    sequences: &[Sequence],
) -> Result<(f64, Grads), KeError> {
    let events: usize = sequences.iter().map(|s| s.targets.len()).sum();
    if events == 0 {
        return Err(KeError::NoEvents);
    }
    let scale = 1.0 / events as f64;
    let mut grads = Grads::zeros(params);
    let mut total_loss = 0.0;

    for seq in sequences {
        let steps = seq.targets.len();
        let (states, seq_loss) = forward(params, seq);
        total_loss += seq_loss;

        // carry = dL/dh_{t+1} flowing back through later steps.
        let mut carry: Array1<f64> = Array1::zeros(params.d);
        for t in (0..steps).rev() {
            let h_t = &states[t];
            let z = params.w_m.dot(h_t) + &params.b_m;
            let m = z.mapv(sigmoid);
            let kc = &seq.kc_sets[t];
            let y_hat: f64 = kc.iter().map(|&j| m[j]).sum::<f64>() / kc.len() as f64;
            let a_t = seq.targets[t];
            let y = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let dl_dy = scale * (-a_t / y + (1.0 - a_t) / (1.0 - y));

            let mut delta_z = Array1::zeros(params.k);
            for &j in kc {
                delta_z[j] += dl_dy / kc.len() as f64 * m[j] * (1.0 - m[j]);
            }
            grads.w_m += &outer(&delta_z, h_t);
            grads.b_m += &delta_z;
            let g = params.w_m.t().dot(&delta_z) + &carry;

            if t > 0 {
                // h_t = tanh(A·h_{t−1} + B·x_{t−1}); push g through the tanh.
                let c = &g * &h_t.mapv(|v| 1.0 - v * v);
                grads.a += &outer(&c, &states[t - 1]);
                grads.b += &outer(&c, &seq.xs[t - 1]);
                carry = params.a.t().dot(&c);
            } else {
                grads.h0 += &g;
            }
        }
    }
    Ok((total_loss * scale, grads))
}

/// Mean BCE of `params` over the given students' events (no gradients).
pub fn mean_loss(
    params: &KeParameters,
    ds: &Dataset,
    students: &[String],
) -> Result<f64, KeError> {
    let sequences = build_sequences(ds, students)?;
    let events: usize = sequences.iter().map(|s| s.targets.len()).sum();
    if events == 0 {
        return Err(KeError::NoEvents);
    }
    let total: f64 = sequences.iter().map(|seq| forward(params, seq).1).sum();
    Ok(total / events as f64)
}

/// (ŷ, observed) pairs for every event of the given students, in sequence
/// order — the inputs to calibration and ranking metrics.
pub fn predict_events(
    params: &KeParameters,
    ds: &Dataset,
    students: &[String],
) -> Result<Vec<(f64, bool)>, KeError> {
    let sequences = build_sequences(ds, students)?;
    let mut pairs = Vec::new();
    for seq in &sequences {
        let (states, _) = forward(params, seq);
        for t in 0..seq.targets.len() {
            let h = KnowledgeState { h: states[t].clone() };
            let m = mastery(&h, params)?;
            let y_hat = predict_correctness(&m, &seq.kc_sets[t])?;
            pairs.push((y_hat, seq.targets[t] == 1.0));
        }
    }
    Ok(pairs)
}

/// Rank-based AUC (Mann-Whitney with midranks for ties). `None` when either
/// class is absent.
pub fn auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let positives = pairs.iter().filter(|(_, label)| *label).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| pairs[i].0.total_cmp(&pairs[j].0));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len()
            && pairs[order[end]].0.total_cmp(&pairs[order[start]].0).is_eq()
        {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share the average rank.
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &index in &order[start..end] {
            if pairs[index].1 {
                rank_sum_pos += midrank;
            }
        }
        start = end;
    }
    let p = positives as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Training hyperparameters. `d` defaults to 32 in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeHyper {
    pub d: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Losses under the parameters entering epoch `epoch`; the final entry
/// (epoch == epochs) is measured at the returned parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// A trained estimator with its loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct KeTrained {
    pub params: KeParameters,
    pub curve: Vec<EpochRecord>,
    pub events: usize,
}

/// Full-batch gradient descent on mean BCE over the train students' events.
/// Deterministic given the seed; validation loss (when `val_students` is
/// non-empty) is measured against the same parameters as the train loss.
/// A non-finite loss aborts with the offending epoch.
pub fn train_ke(
    ds: &Dataset,
    train_students: &[String],
    val_students: &[String],
    hyper: &KeHyper,
) -> Result<KeTrained, KeError> {
    let k = ds.kcs().len();
    let mut params = KeParameters::init(hyper.d, k, hyper.seed);
    let train_seqs = build_sequences(ds, train_students)?;
    let events: usize = train_seqs.iter().map(|s| s.targets.len()).sum();
    if events == 0 {
        return Err(KeError::NoEvents);
    }
    let val_seqs = if val_students.is_empty() {
        None
    } else {
        Some(build_sequences(ds, val_students)?)
    };
    let val_loss_of = |params: &KeParameters, seqs: &Option<Vec<Sequence>>| -> Option<f64> {
        seqs.as_ref().map(|seqs| {
            let val_events: usize = seqs.iter().map(|s| s.targets.len()).sum();
            let total: f64 = seqs.iter().map(|seq| forward(params, seq).1).sum();
            total / val_events.max(1) as f64
        })
    };

    let mut curve = Vec::with_capacity(hyper.epochs + 1);
    for epoch in 0..hyper.epochs {
        let (train_loss, grads) = loss_and_grads(&params, &train_seqs)?;
        if !train_loss.is_finite() {
            return Err(KeError::Diverged { epoch, loss: train_loss });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val_loss_of(&params, &val_seqs),
        });
        let lr = hyper.learning_rate;
        params.a -= &(&grads.a * lr);
        params.b -= &(&grads.b * lr);
        params.h0 -= &(&grads.h0 * lr);
        params.w_m -= &(&grads.w_m * lr);
        params.b_m -= &(&grads.b_m * lr);
        if !params.check_finite() {
            return Err(KeError::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    let final_train: f64 = {
        let total: f64 = train_seqs.iter().map(|seq| forward(&params, seq).1).sum();
        total / events as f64
    };
    if !final_train.is_finite() {
        return Err(KeError::Diverged {
            epoch: hyper.epochs,
            loss: final_train,
        });
    }
    curve.push(EpochRecord {
        epoch: hyper.epochs,
        train_loss: final_train,
        val_loss: val_loss_of(&params, &val_seqs),
    });
    Ok(KeTrained { params, curve, events })
}

/// Folds `h0` through the student's first `t` submissions, then reads out
/// mastery — the profile injected into generation-time prompts.
pub fn mastery_profile(
    ds: &Dataset,
    student_id: &str,
    t: usize,
    params: &KeParameters,
) -> Result<MasteryVector, KeError> {
    let k = ds.kcs().len();
    if params.k != k {
        return Err(KeError::ShapeMismatch {
            what: "KC count",
            expected: params.k.to_string(),
            got: k.to_string(),
        });
    }
    let mut state = params.initial_state();
    for submission in ds.history(student_id, t)? {
        let kc_indices = kc_indices_of(ds, &submission.problem_id)?;
        let x = response_features(k, &kc_indices, submission.correct, submission.errors.len());
        state = update_state(&state, &x, params)?;
    }
    mastery(&state, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub learning_rate: f64,
    pub epochs: usize,
    pub events: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    d: usize,
    k: usize,
    f: usize,
    /// Row-major d×d.
    a: Vec<f64>,
    /// Row-major d×f.
    b: Vec<f64>,
    h0: Vec<f64>,
    /// Row-major k×d.
    w_m: Vec<f64>,
    b_m: Vec<f64>,
    seed: u64,
    meta: Option<TrainMeta>,
}

/// Writes parameters (and optional training metadata) as JSON, matrices
/// row-major.
pub fn save_params(
    params: &KeParameters,
    meta: Option<&TrainMeta>,
    path: &Path,
) -> Result<(), KeError> {
    let file = ParamsFile {
        d: params.d,
        k: params.k,
        f: params.f,
        a: params.a.iter().copied().collect(),
        b: params.b.iter().copied().collect(),
        h0: params.h0.to_vec(),
        w_m: params.w_m.iter().copied().collect(),
        b_m: params.b_m.to_vec(),
        seed: params.seed,
        meta: meta.cloned(),
    };
    let writer = BufWriter::new(File::create(path).map_err(|source| KeError::ParamIo {
        path: path.to_path_buf(),
        source,
    })?);
    serde_json::to_writer_pretty(writer, &file).map_err(|source| KeError::ParamFormat {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a parameter file back, checking every shape.
pub fn load_params(path: &Path) -> Result<(KeParameters, Option<TrainMeta>), KeError> {
    let reader = BufReader::new(File::open(path).map_err(|source| KeError::ParamIo {
        path: path.to_path_buf(),
        source,
    })?);
    let file: ParamsFile = serde_json::from_reader(reader).map_err(|source| KeError::ParamFormat {
        path: path.to_path_buf(),
        source,
    })?;
    if file.f != feature_width(file.k) {
        return Err(KeError::ShapeMismatch {
            what: "feature width",
            expected: feature_width(file.k).to_string(),
            got: file.f.to_string(),
        });
    }
    let shaped = |what: &'static str, rows: usize, cols: usize, data: Vec<f64>| {
        let got = data.len();
        Array2::from_shape_vec((rows, cols), data).map_err(|_| KeError::ShapeMismatch {
            what,
            expected: format!("{}×{}", rows, cols),
            got: got.to_string(),
        })
    };
    let a = shaped("recurrence matrix", file.d, file.d, file.a)?;
    let b = shaped("input matrix", file.d, file.f, file.b)?;
    let w_m = shaped("mastery weights", file.k, file.d, file.w_m)?;
    if file.h0.len() != file.d {
        return Err(KeError::ShapeMismatch {
            what: "initial state",
            expected: file.d.to_string(),
            got: file.h0.len().to_string(),
        });
    }
    if file.b_m.len() != file.k {
        return Err(KeError::ShapeMismatch {
            what: "mastery bias",
            expected: file.k.to_string(),
            got: file.b_m.len().to_string(),
        });
    }
    let params = KeParameters {
        d: file.d,
        k: file.k,
        f: file.f,
        a,
        b,
        h0: Array1::from_vec(file.h0),
        w_m,
        b_m: Array1::from_vec(file.b_m),
        seed: file.seed,
    };
    Ok((params, file.meta))
}

/// Central-difference gradient check: perturbs every parameter entry by
/// ±`step` and compares the numeric slope against the analytic gradient.
/// Returns the largest relative error seen (relative to the bigger of the
/// two magnitudes, floored at 1e-6).
pub fn gradient_check(
    ds: &Dataset,
    students: &[String],
    params: &KeParameters,
    step: f64,
) -> Result<f64, KeError> {
    let sequences = build_sequences(ds, students)?;
    let events: usize = sequences.iter().map(|s| s.targets.len()).sum();
    if events == 0 {
        return Err(KeError::NoEvents);
    }
    let (_, grads) = loss_and_grads(params, &sequences)?;
    let loss_at = |p: &KeParameters| -> f64 {
        let total: f64 = sequences.iter().map(|seq| forward(p, seq).1).sum();
        total / events as f64
    };
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, mutate: &dyn Fn(&mut KeParameters, f64)| {
        let mut plus = params.clone();
        mutate(&mut plus, step);
        let mut minus = params.clone();
        mutate(&mut minus, -step);
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    for i in 0..params.d {
        for j in 0..params.d {
            check(grads.a[(i, j)], &move |p, eps| p.a[(i, j)] += eps);
        }
        for j in 0..params.f {
            check(grads.b[(i, j)], &move |p, eps| p.b[(i, j)] += eps);
        }
        check(grads.h0[i], &move |p, eps| p.h0[i] += eps);
    }
    for i in 0..params.k {
        for j in 0..params.d {
            check(grads.w_m[(i, j)], &move |p, eps| p.w_m[(i, j)] += eps);
        }
        check(grads.b_m[i], &move |p, eps| p.b_m[i] += eps);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{KnowledgeComponent, Language, Problem, Submission};
    use proptest::prelude::*;
    use rand::Rng;

    fn state(values: &[f64]) -> KnowledgeState {
        KnowledgeState {
            h: Array1::from_vec(values.to_vec()),
        }
    }

    fn zero_params(d: usize, k: usize) -> KeParameters {
        KeParameters {
            d,
            k,
            f: feature_width(k),
            a: Array2::zeros((d, d)),
            b: Array2::zeros((d, feature_width(k))),
            h0: Array1::zeros(d),
            w_m: Array2::zeros((k, d)),
            b_m: Array1::zeros(k),
            seed: 0,
        }
    }

    #[test]
    fn zero_parameters_freeze_the_state_at_zero() {
        let params = zero_params(3, 2);
        let x = response_features(2, &[0], false, 2);
        let next = update_state(&state(&[0.4, -0.2, 0.9]), &x, &params).unwrap();
        assert_eq!(next.h.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn update_keeps_entries_inside_the_tanh_range() {
        let mut params = zero_params(2, 1);
        params.a = Array2::from_shape_vec((2, 2), vec![5.0, -3.0, 2.0, 8.0]).unwrap();
        params.b = Array2::from_shape_vec((2, 3), vec![4.0; 6]).unwrap();
        let x = response_features(1, &[0], true, 0);
        let next = update_state(&state(&[0.9, -0.9]), &x, &params).unwrap();
        for value in next.h.iter() {
            assert!(*value > -1.0 && *value < 1.0);
        }
    }

    #[test]
    fn update_matches_hand_matrix_arithmetic() {
        // A = [[0.5, 0], [0, 0.5]], B = [[0.1, 0.2], [0.3, 0.4]] (f forced
        // to 2 by hand), h = [0.2, −0.4], x = [1, 0]:
        //   u = [0.5·0.2 + 0.1, 0.5·(−0.4) + 0.3] = [0.2, 0.1]
        let params = KeParameters {
            d: 2,
            k: 0,
            f: 2,
            a: Array2::from_shape_vec((2, 2), vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
            b: Array2::from_shape_vec((2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            h0: Array1::zeros(2),
            w_m: Array2::zeros((0, 2)),
            b_m: Array1::zeros(0),
            seed: 0,
        };
        let x = Array1::from_vec(vec![1.0, 0.0]);
        let next = update_state(&state(&[0.2, -0.4]), &x, &params).unwrap();
        assert!((next.h[0] - (0.2f64).tanh()).abs() < 1e-15);
        assert!((next.h[1] - (0.1f64).tanh()).abs() < 1e-15);

        let wrong = Array1::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            update_state(&state(&[0.2, -0.4]), &wrong, &params),
            Err(KeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_head_reads_every_mastery_as_one_half() {
        let params = zero_params(3, 4);
        let m = mastery(&state(&[0.3, -0.9, 2.0]), &params).unwrap();
        assert_eq!(m.m.to_vec(), vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn growing_bias_pushes_mastery_monotonically_toward_one() {
        // Biases stay below ~36 — past that the sigmoid saturates to 1.0 in
        // f64 and "strictly below one" stops being representable.
        let mut params = zero_params(2, 1);
        let h = state(&[0.1, 0.2]);
        let mut previous = 0.0;
        for bias in [0.0, 1.0, 5.0, 20.0, 30.0] {
            params.b_m[0] = bias;
            let m = mastery(&h, &params).unwrap();
            assert!(m.m[0] > previous);
            assert!(m.m[0] < 1.0);
            previous = m.m[0];
        }
        assert!(previous > 0.999);
    }

    #[test]
    fn mastery_matches_hand_computed_sigmoids() {
        // W_m = I, b_m = [0, 0.5], h = [0.2, 0.1] → z = [0.2, 0.6].
        let mut params = zero_params(2, 2);
        params.w_m = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        params.b_m = Array1::from_vec(vec![0.0, 0.5]);
        let m = mastery(&state(&[0.2, 0.1]), &params).unwrap();
        assert!((m.m[0] - 1.0 / (1.0 + (-0.2f64).exp())).abs() < 1e-12);
        assert!((m.m[1] - 1.0 / (1.0 + (-0.6f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn masked_mean_matches_the_defining_cases() {
        let single = MasteryVector {
            m: Array1::from_vec(vec![0.7]),
        };
        assert_eq!(predict_correctness(&single, &[0]).unwrap(), 0.7);

        let three = MasteryVector {
            m: Array1::from_vec(vec![0.2, 0.8, 0.5]),
        };
        assert_eq!(predict_correctness(&three, &[0, 1]).unwrap(), 0.5);
        let all = predict_correctness(&three, &[0, 1, 2]).unwrap();
        assert!((all - 1.5 / 3.0).abs() < 1e-15);
        assert!(matches!(
            predict_correctness(&three, &[]),
            Err(KeError::EmptyKcSet(_))
        ));
    }

    #[test]
    fn bce_matches_the_reference_values() {
        assert!((bce_loss(0.5, true) - 2.0f64.ln()).abs() < 1e-12);
        assert!((bce_loss(0.9, false) - 10.0f64.ln()).abs() < 1e-12);
        assert!(bce_loss(0.999999, true) < 1e-5);
        assert!(bce_loss(0.000001, false) < 1e-5);
        // Exact endpoints stay finite through the clamp.
        assert!(bce_loss(0.0, true).is_finite());
        assert!(bce_loss(1.0, false).is_finite());
        assert!(bce_loss(0.0, true) > 20.0);
    }

    proptest! {
        #[test]
        fn masked_mean_ignores_kc_order_and_off_problem_masteries(
            values in proptest::collection::vec(0.01f64..0.99, 4..8),
            seed in 0u64..1000,
        ) {
            let k = values.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut indices: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.gen_range(0..=i);
                indices.swap(i, j);
            }
            let on_problem = &indices[..k / 2];
            let mut shuffled = on_problem.to_vec();
            shuffled.reverse();
            let m = MasteryVector { m: Array1::from_vec(values.clone()) };
            let forward_order = predict_correctness(&m, on_problem).unwrap();
            let backward_order = predict_correctness(&m, &shuffled).unwrap();
            prop_assert!((forward_order - backward_order).abs() < 1e-12);

            // Altering a mastery entry off the problem leaves ŷ untouched.
            let mut altered = values.clone();
            for &off in &indices[k / 2..] {
                altered[off] = 0.995;
            }
            let m2 = MasteryVector { m: Array1::from_vec(altered) };
            let with_altered = predict_correctness(&m2, on_problem).unwrap();
            prop_assert!((forward_order - with_altered).abs() < 1e-12);
        }

        #[test]
        fn mastery_stays_strictly_inside_the_unit_interval(
            // |z| ≤ 30 keeps the sigmoid away from f64 saturation.
            entries in proptest::collection::vec(-15.0f64..15.0, 6),
        ) {
            let mut params = zero_params(2, 3);
            params.w_m = Array2::from_shape_vec((3, 2), entries[..6].to_vec()).unwrap();
            let m = mastery(&state(&[1.0, -1.0]), &params).unwrap();
            for value in m.m.iter() {
                prop_assert!(*value > 0.0 && *value < 1.0);
            }
        }
    }

    /// Corpus builder: `spec[s][t] = (kc_index, correct, errors)`.
    fn dataset_from_events(k: usize, students: &[Vec<(usize, bool, usize)>]) -> Dataset {
        let kcs: Vec<KnowledgeComponent> = (0..k)
            .map(|i| KnowledgeComponent {
                id: format!("kc{i}"),
                name: format!("concept {i}"),
            })
            .collect();
        let mut problems = Vec::new();
        let mut submissions = Vec::new();
        for (s, events) in students.iter().enumerate() {
            for (t, &(kc, correct, errors)) in events.iter().enumerate() {
                let pid = format!("s{s}p{t}");
                problems.push(Problem {
                    id: pid.clone(),
                    statement: format!("Problem {t} for student {s}."),
                    language: Language::Java,
                    kc_ids: vec![format!("kc{kc}")],
                });
                submissions.push(Submission {
                    student_id: format!("s{s}"),
                    problem_id: pid,
                    order_index: t as u64,
                    code: "int f() { return 0; }".to_string(),
                    correct,
                    errors: (0..errors).map(|e| format!("error {e}")).collect(),
                });
            }
        }
        Dataset::new(kcs, problems, submissions).unwrap()
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let students: Vec<Vec<(usize, bool, usize)>> = (0..3)
                .map(|_| {
                    let len = rng.gen_range(2..5);
                    (0..len)
                        .map(|_| {
                            let correct = rng.gen_bool(0.5);
                            (
                                rng.gen_range(0..2),
                                correct,
                                if correct { 0 } else { rng.gen_range(1..4) },
                            )
                        })
                        .collect()
                })
                .collect();
            let ds = dataset_from_events(2, &students);
            let ids: Vec<String> = ds.students().to_vec();
            let params = KeParameters::init(3, 2, 100 + trial);
            let worst = gradient_check(&ds, &ids, &params, 1e-5).unwrap();
            assert!(
                worst <= 1e-4,
                "trial {trial}: worst relative gradient error {worst}"
            );
        }
    }

    #[test]
    fn zero_epochs_return_the_seeded_initialization() {
        let ds = dataset_from_events(2, &[vec![(0, true, 0), (1, false, 2)]]);
        let hyper = KeHyper {
            d: 4,
            learning_rate: 0.5,
            epochs: 0,
            seed: 42,
        };
        let trained = train_ke(&ds, &ds.students().to_vec(), &[], &hyper).unwrap();
        assert_eq!(trained.params, KeParameters::init(4, 2, 42));
        assert_eq!(trained.curve.len(), 1);
        assert_eq!(trained.events, 2);
    }

    #[test]
    fn training_is_deterministic_given_the_seed() {
        let ds = planted_corpus(10, 8, 0xabc);
        let hyper = KeHyper {
            d: 4,
            learning_rate: 1.0,
            epochs: 20,
            seed: 9,
        };
        let students = ds.students().to_vec();
        let once = train_ke(&ds, &students, &[], &hyper).unwrap();
        let twice = train_ke(&ds, &students, &[], &hyper).unwrap();
        assert_eq!(once.params, twice.params);
        assert_eq!(once.curve, twice.curve);
    }

    #[test]
    fn all_correct_corpus_drives_predictions_toward_one() {
        let students: Vec<Vec<(usize, bool, usize)>> = (0..5)
            .map(|_| (0..4).map(|t| (t % 2, true, 0)).collect())
            .collect();
        let ds = dataset_from_events(2, &students);
        let ids = ds.students().to_vec();
        let hyper = KeHyper {
            d: 4,
            learning_rate: 2.0,
            epochs: 400,
            seed: 5,
        };
        let trained = train_ke(&ds, &ids, &[], &hyper).unwrap();
        let final_loss = trained.curve.last().unwrap().train_loss;
        assert!(final_loss < 0.05, "final loss {final_loss}");
        for (y_hat, _) in predict_events(&trained.params, &ds, &ids).unwrap() {
            assert!(y_hat > 0.9);
        }
    }

    #[test]
    fn small_steps_never_increase_the_training_loss() {
        let ds = planted_corpus(12, 10, 0x55);
        let hyper = KeHyper {
            d: 4,
            learning_rate: 1e-3,
            epochs: 50,
            seed: 3,
        };
        let trained = train_ke(&ds, &ds.students().to_vec(), &[], &hyper).unwrap();
        for pair in trained.curve.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-12,
                "loss rose from {} to {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    /// Synthetic corpus from a planted mastery model: one decisive concept
    /// fully determines correctness. Even-numbered students master it and
    /// answer everything correctly; odd-numbered students lack it and answer
    /// everything incorrectly. Problems still rotate over three concepts so
    /// the mastery vector is non-trivial. The seed only perturbs which
    /// concept each problem carries.
    fn planted_corpus(students: usize, steps: usize, seed: u64) -> Dataset {
        let k = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Vec::new();
        for s in 0..students {
            let mastered = s % 2 == 0;
            let events: Vec<(usize, bool, usize)> = (0..steps)
                .map(|_| {
                    let kc = rng.gen_range(0..k);
                    (kc, mastered, if mastered { 0 } else { 1 })
                })
                .collect();
            spec.push(events);
        }
        dataset_from_events(k, &spec)
    }

    #[test]
    fn planted_mastery_is_recovered_with_high_auc() {
        let ds = planted_corpus(30, 12, 0x600d);
        let all: Vec<String> = ds.students().to_vec();
        let (train, held_out) = all.split_at(20);
        let hyper = KeHyper {
            d: 8,
            learning_rate: 2.0,
            epochs: 600,
            seed: 11,
        };
        let trained = train_ke(&ds, &train.to_vec(), &held_out.to_vec(), &hyper).unwrap();
        let pairs = predict_events(&trained.params, &ds, &held_out.to_vec()).unwrap();
        let score = auc(&pairs).unwrap();
        assert!(score > 0.9, "held-out AUC {score}");
    }

    #[test]
    fn auc_handles_perfect_reversed_and_degenerate_rankings() {
        let perfect = vec![(0.1, false), (0.2, false), (0.8, true), (0.9, true)];
        assert_eq!(auc(&perfect).unwrap(), 1.0);
        let reversed = vec![(0.9, false), (0.8, false), (0.1, true), (0.2, true)];
        assert_eq!(auc(&reversed).unwrap(), 0.0);
        let tied = vec![(0.5, false), (0.5, true)];
        assert_eq!(auc(&tied).unwrap(), 0.5);
        assert_eq!(auc(&[(0.5, true)]), None);
    }

    #[test]
    fn profile_starts_at_the_shared_prior_and_moves_with_history() {
        let ds = dataset_from_events(
            2,
            &[
                vec![(0, true, 0), (1, false, 2)],
                vec![(1, false, 3), (0, true, 0)],
            ],
        );
        let params = KeParameters::init(4, 2, 77);
        let prior_a = mastery_profile(&ds, "s0", 0, &params).unwrap();
        let prior_b = mastery_profile(&ds, "s1", 0, &params).unwrap();
        assert_eq!(prior_a, prior_b);
        let after = mastery_profile(&ds, "s0", 2, &params).unwrap();
        assert_ne!(prior_a, after);
        assert!(matches!(
            mastery_profile(&ds, "nobody", 0, &params),
            Err(KeError::Corpus(CorpusError::UnknownStudent(_)))
        ));
    }

    #[test]
    fn profile_matches_a_scalar_hand_fold() {
        // d = 2, k = 1 (f = 3). Student s0 answers kc0 correctly with 0
        // errors, then incorrectly with 1 error. Features: [1, 1, 0] then
        // [1, 0, 0.5]. Hand fold with plain scalar arithmetic below.
        let ds = dataset_from_events(1, &[vec![(0, true, 0), (0, false, 1), (0, true, 0)]]);
        let a = [[0.2, -0.1], [0.05, 0.3]];
        let b = [[0.4, 0.1, -0.2], [0.0, 0.25, 0.15]];
        let w = [0.7, -0.6];
        let bias = 0.2;
        let params = KeParameters {
            d: 2,
            k: 1,
            f: 3,
            a: Array2::from_shape_vec((2, 2), a.concat()).unwrap(),
            b: Array2::from_shape_vec((2, 3), b.concat()).unwrap(),
            h0: Array1::from_vec(vec![0.1, -0.2]),
            w_m: Array2::from_shape_vec((1, 2), w.to_vec()).unwrap(),
            b_m: Array1::from_vec(vec![bias]),
            seed: 0,
        };
        let xs = [[1.0, 1.0, 0.0], [1.0, 0.0, 0.5], [1.0, 1.0, 0.0]];
        let mut h = [0.1, -0.2];
        for x in &xs {
            let u0 = a[0][0] * h[0] + a[0][1] * h[1] + b[0][0] * x[0] + b[0][1] * x[1] + b[0][2] * x[2];
            let u1 = a[1][0] * h[0] + a[1][1] * h[1] + b[1][0] * x[0] + b[1][1] * x[1] + b[1][2] * x[2];
            h = [u0.tanh(), u1.tanh()];
        }
        let expected = 1.0 / (1.0 + (-(w[0] * h[0] + w[1] * h[1] + bias)).exp());
        let profile = mastery_profile(&ds, "s0", 3, &params).unwrap();
        assert!((profile.m[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn parameters_round_trip_through_the_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ke.json");
        let params = KeParameters::init(3, 2, 99);
        let meta = TrainMeta {
            learning_rate: 0.5,
            epochs: 10,
            events: 40,
            final_train_loss: 0.42,
            final_val_loss: Some(0.5),
        };
        save_params(&params, Some(&meta), &path).unwrap();
        let (loaded, loaded_meta) = load_params(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded_meta, Some(meta));

        // A truncated matrix must be rejected, not zero-padded.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["w_m"].as_array_mut().unwrap().pop();
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(
            load_params(&path),
            Err(KeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mean_loss_agrees_with_the_curve_endpoint() {
        let ds = planted_corpus(8, 6, 0x77);
        let students = ds.students().to_vec();
        let hyper = KeHyper {
            d: 4,
            learning_rate: 0.5,
            epochs: 30,
            seed: 21,
        };
        let trained = train_ke(&ds, &students, &[], &hyper).unwrap();
        let external = mean_loss(&trained.params, &ds, &students).unwrap();
        let last = trained.curve.last().unwrap();
        assert!((external - last.train_loss).abs() < 1e-12);
    }
}
