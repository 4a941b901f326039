//! Run configuration: one JSON file that pins every knob of a pipeline run.
//!
//! The configuration is versioned, validated before anything executes, and
//! hashed to give stages their content addresses. Paths inside the file
//! resolve relative to the file's own directory, so a config can travel
//! with its data. Credentials never live here — the judge and embedding
//! clients read `KASER_JUDGE_API_KEY` and `KASER_EMBED_API_KEY` from the
//! environment when present.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kaser_core::clustering::{EmbedConfig, Linkage};
use kaser_core::eval::EvalLevel;
use kaser_core::grpo::{GrpoConfig, RatioMode, RewardConfig, RewardWeights};
use kaser_core::knowledge::KeHyper;
use kaser_core::metrics::CodeBleuConfig;
use kaser_core::taxonomy::{JudgeConfig, PromptTemplate};
use kaser_core::util::sha256_hex;

use crate::CliError;

/// The config format this binary reads.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Which of the five cross-validation folds trains and tests this run.
    pub fold: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { fold: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeSection {
    pub d: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for KeSection {
    fn default() -> Self {
        Self {
            d: 16,
            learning_rate: 0.5,
            epochs: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSection {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoSection {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub advantage_epsilon: f64,
    pub ratio_mode: RatioMode,
    /// Reward-term weights; ablations set individual terms to zero.
    pub reward_weights: RewardWeights,
}

impl Default for GrpoSection {
    fn default() -> Self {
        Self {
            group_size: 5,
            clip_epsilon: 0.2,
            beta: 0.1,
            learning_rate: 2.0,
            iterations: 200,
            advantage_epsilon: 1e-8,
            ratio_mode: RatioMode::PerToken,
            reward_weights: RewardWeights::default(),
        }
    }
}

/// Connection details for one OpenAI-style endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSection {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Texts per embedding request; ignored by the chat endpoint.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_max_parallel() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_retries() -> u32 {
    2
}

fn default_batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    /// Catalog size; `null` keeps every distinct raw label (identity).
    pub k_c: Option<usize>,
    pub linkage: Linkage,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k_c: None,
            linkage: Linkage::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Levels to score; pair-level uses the split's test students,
    /// problem-level pools candidates across the whole corpus.
    pub levels: Vec<EvalLevel>,
    pub ks: Vec<usize>,
    pub joint_best: bool,
    pub chi_normalized: bool,
    pub model_tag: String,
    pub max_parallel: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            levels: vec![EvalLevel::Pair, EvalLevel::Problem],
            ks: vec![1, 5],
            joint_best: false,
            chi_normalized: false,
            model_tag: "toy".to_string(),
            max_parallel: 4,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Submission corpus, JSONL.
    pub dataset: PathBuf,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub ke: KeSection,
    #[serde(default)]
    pub sft: SftSection,
    #[serde(default)]
    pub grpo: GrpoSection,
    pub judge: EndpointSection,
    pub embedding: EndpointSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Directory that receives stage outputs and the run manifest.
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Reads a config file, resolves its paths against the file's
    /// directory, and validates it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig =
            serde_json::from_slice(&bytes).map_err(|source| CliError::ConfigFormat {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = resolve(base, &cfg.dataset);
        cfg.out = resolve(base, &cfg.out);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the schema version, referenced paths, and every numeric
    /// section before any stage runs.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (this binary reads {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if !self.dataset.is_file() {
            return Err(CliError::Config(format!(
                "dataset {} does not exist",
                self.dataset.display()
            )));
        }
        if self.split.fold >= 5 {
            return Err(CliError::Config(format!(
                "split.fold must be 0..5, got {}",
                self.split.fold
            )));
        }
        for (name, section) in [("ke", &self.ke.learning_rate), ("sft", &self.sft.learning_rate)] {
            if !(section.is_finite() && *section > 0.0) {
                return Err(CliError::Config(format!(
                    "{name}.learning_rate must be positive, got {section}"
                )));
            }
        }
        if self.ke.d == 0 {
            return Err(CliError::Config("ke.d must be at least 1".to_string()));
        }
        if self.ke.epochs == 0 || self.sft.epochs == 0 {
            return Err(CliError::Config(
                "ke.epochs and sft.epochs must be at least 1".to_string(),
            ));
        }
        if let Some(k_c) = self.cluster.k_c {
            if k_c == 0 {
                return Err(CliError::Config("cluster.k_c must be at least 1".to_string()));
            }
        }
        if self.eval.levels.is_empty() {
            return Err(CliError::Config(
                "eval.levels must name at least one level".to_string(),
            ));
        }
        // Delegate to the core validators so the CLI accepts exactly what
        // the library accepts.
        self.grpo_config().validate().map_err(|e| {
            CliError::Config(format!("grpo section: {e}"))
        })?;
        for level in &self.eval.levels {
            self.eval_config(*level)
                .validate()
                .map_err(|e| CliError::Config(format!("eval section: {e}")))?;
        }
        for (name, endpoint) in [("judge", &self.judge), ("embedding", &self.embedding)] {
            if endpoint.endpoint.trim().is_empty() || endpoint.model.trim().is_empty() {
                return Err(CliError::Config(format!(
                    "{name} endpoint and model must be non-empty"
                )));
            }
            if endpoint.max_parallel == 0 || endpoint.batch_size == 0 {
                return Err(CliError::Config(format!(
                    "{name}.max_parallel and batch_size must be at least 1"
                )));
            }
        }
        Ok(())
    }

    /// Canonical serialization hash of the whole config.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn judge_config(&self, template: PromptTemplate) -> JudgeConfig {
        let mut cfg = JudgeConfig::new(&self.judge.endpoint, &self.judge.model, template);
        cfg.max_parallel = self.judge.max_parallel;
        cfg.timeout_secs = self.judge.timeout_secs;
        cfg.retries = self.judge.retries;
        cfg
    }

    pub fn embed_config(&self) -> EmbedConfig {
        let mut cfg = EmbedConfig::new(&self.embedding.endpoint, &self.embedding.model);
        cfg.timeout_secs = self.embedding.timeout_secs;
        cfg.batch_size = self.embedding.batch_size;
        cfg.max_parallel = self.embedding.max_parallel;
        cfg
    }

    pub fn ke_hyper(&self) -> KeHyper {
        KeHyper {
            d: self.ke.d,
            learning_rate: self.ke.learning_rate,
            epochs: self.ke.epochs,
            seed: stage_seed(self.seed, "ke-train"),
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.grpo.group_size,
            clip_epsilon: self.grpo.clip_epsilon,
            beta: self.grpo.beta,
            learning_rate: self.grpo.learning_rate,
            iterations: self.grpo.iterations,
            seed: stage_seed(self.seed, "grpo-train"),
            advantage_epsilon: self.grpo.advantage_epsilon,
            ratio_mode: self.grpo.ratio_mode,
            reward: RewardConfig {
                weights: self.grpo.reward_weights,
                metric: CodeBleuConfig::default(),
                max_parallel: self.judge.max_parallel,
            },
        }
    }

    pub fn eval_config(&self, level: EvalLevel) -> kaser_core::eval::EvalConfig {
        kaser_core::eval::EvalConfig {
            level,
            ks: self.eval.ks.clone(),
            metric: CodeBleuConfig::default(),
            joint_best: self.eval.joint_best,
            chi_normalized: self.eval.chi_normalized,
            embed_model: self.embedding.model.clone(),
            model_tag: self.eval.model_tag.clone(),
            max_parallel: self.eval.max_parallel,
        }
    }

    /// The seed every split derives from, distinct from stage seeds.
    pub fn split_seed(&self) -> u64 {
        stage_seed(self.seed, "split")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Derives one stage's sub-seed from the run seed, so no two stochastic
/// components ever share an RNG stream.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let digest = sha256_hex(format!("{seed}|{stage}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("sha256 prefix is hex")
}

/// A ready-to-edit config pointing at the bundled toy corpus and a local
/// mock server.
pub fn toy_config(dataset: PathBuf, out: PathBuf, endpoint: &str) -> RunConfig {
    RunConfig {
        schema_version: SCHEMA_VERSION,
        dataset,
        split: SplitSection::default(),
        ke: KeSection::default(),
        sft: SftSection::default(),
        grpo: GrpoSection::default(),
        judge: EndpointSection {
            endpoint: endpoint.to_string(),
            model: "toy-judge".to_string(),
            max_parallel: default_max_parallel(),
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            batch_size: default_batch_size(),
        },
        embedding: EndpointSection {
            endpoint: endpoint.to_string(),
            model: "toy-embed".to_string(),
            max_parallel: default_max_parallel(),
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            batch_size: default_batch_size(),
        },
        cluster: ClusterSection::default(),
        eval: EvalSection::default(),
        out,
        seed: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
        path
    }

    #[test]
    fn loading_resolves_paths_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("corpus.jsonl");
        kaser_core::corpus::save_dataset(&kaser_core::toy::toy_dataset(0), &dataset).unwrap();
        let cfg = toy_config(
            PathBuf::from("corpus.jsonl"),
            PathBuf::from("runs"),
            "http://127.0.0.1:1/v1",
        );
        let path = write_config(dir.path(), &cfg);
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.dataset, dir.path().join("corpus.jsonl"));
        assert_eq!(loaded.out, dir.path().join("runs"));
    }

    #[test]
    fn a_missing_dataset_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(
            PathBuf::from("absent.jsonl"),
            PathBuf::from("runs"),
            "http://127.0.0.1:1/v1",
        );
        let path = write_config(dir.path(), &cfg);
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }

    #[test]
    fn an_unsupported_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("corpus.jsonl");
        kaser_core::corpus::save_dataset(&kaser_core::toy::toy_dataset(0), &dataset).unwrap();
        let mut cfg = toy_config(dataset, dir.path().join("runs"), "http://127.0.0.1:1/v1");
        cfg.schema_version = 99;
        let path = write_config(dir.path(), &cfg);
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("schema_version"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{ "schema_version": 1, "dataset": "x", "out": "y", "surprise": 1,
            "judge": {"endpoint": "e", "model": "m"},
            "embedding": {"endpoint": "e", "model": "m"} }"#;
        let path = dir.path().join("config.json");
        std::fs::write(&path, text).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");
    }

    #[test]
    fn the_config_hash_is_stable_and_seed_sensitive() {
        let cfg = toy_config(
            PathBuf::from("a"),
            PathBuf::from("b"),
            "http://127.0.0.1:1/v1",
        );
        assert_eq!(cfg.config_hash(), cfg.config_hash());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn stage_seeds_differ_between_stages_and_follow_the_run_seed() {
        assert_ne!(stage_seed(0, "ke-train"), stage_seed(0, "grpo-train"));
        assert_ne!(stage_seed(0, "ke-train"), stage_seed(1, "ke-train"));
        assert_eq!(stage_seed(7, "eval"), stage_seed(7, "eval"));
    }
}
