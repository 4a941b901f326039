//! The pipeline stages and the runner that executes them.
//!
//! Stages form a fixed chain: annotate → cluster → ke-train → sft-toy →
//! grpo-train → eval. Each stage's directory name carries a hash of the
//! inputs that determine its result (config fields, sub-seed, upstream
//! hashes), so a rerun with the same configuration verifies the existing
//! outputs and skips the work, while an ablation that only changes reward
//! weights re-runs training but reuses everything upstream. A stage that
//! actually executes invalidates all downstream stages first.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::json;

use kaser_core::clustering::{
    cluster_report, cut, embed_errors, hac, remap_dataset, summarize_clusters,
};
use kaser_core::corpus::{
    fold_views, load_dataset, make_split_plan, parse_dataset, save_dataset, Dataset, DatasetView,
    SplitAxis,
};
use kaser_core::eval::{write_reports, EvalLevel, EvalRun, Generator};
use kaser_core::grpo::{build_train_items, grpo_train, JudgeCache, TransportJudge};
use kaser_core::knowledge::{
    load_params, save_params, train_ke, KeParameters, KeTrained, TrainMeta,
};
use kaser_core::llm::{HttpChatTransport, HttpEmbeddingTransport};
use kaser_core::policy::{
    load_toy_policy, save_toy_policy, sft_loss, toy_update, Completion, PolicyGrad, ToyPolicyParams,
};
use kaser_core::taxonomy::{annotate_dataset, AuditLog, ErrorLabel, PromptTemplate};
use kaser_core::util::{sha256_hex, write_atomic};

use crate::config::{stage_seed, RunConfig};
use crate::manifest::{
    hash_outputs, unix_now, RunManifest, StageReceipt, StageRecord, StageStatus,
};
use crate::CliError;

/// Stage names in execution order.
pub const STAGE_ORDER: [&str; 6] = [
    "annotate",
    "cluster",
    "ke-train",
    "sft-toy",
    "grpo-train",
    "eval",
];

/// One stage's content address.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub name: &'static str,
    pub hash: String,
    pub dir_name: String,
}

fn address(name: &'static str, identity: &serde_json::Value) -> StagePlan {
    let hash = sha256_hex(identity.to_string().as_bytes());
    StagePlan {
        name,
        dir_name: format!("{name}-{}", &hash[..12]),
        hash,
    }
}

/// Computes the whole chain's addresses for one configuration. The
/// dataset enters by digest, stochastic stages by their derived sub-seed,
/// and transports only by model name — moving a service to another port
/// does not invalidate its outputs.
pub fn plan_stages(cfg: &RunConfig, dataset_sha: &str) -> Vec<StagePlan> {
    let split_seed = cfg.split_seed();
    let annotate = address(
        "annotate",
        &json!({
            "stage": "annotate",
            "schema": 1,
            "dataset": dataset_sha,
            "judge_model": cfg.judge.model,
        }),
    );
    let cluster = address(
        "cluster",
        &json!({
            "stage": "cluster",
            "upstream": annotate.hash,
            "embed_model": cfg.embedding.model,
            "judge_model": cfg.judge.model,
            "k_c": cfg.cluster.k_c,
            "linkage": cfg.cluster.linkage,
        }),
    );
    let ke = address(
        "ke-train",
        &json!({
            "stage": "ke-train",
            "upstream": cluster.hash,
            "d": cfg.ke.d,
            "learning_rate": cfg.ke.learning_rate,
            "epochs": cfg.ke.epochs,
            "fold": cfg.split.fold,
            "split_seed": split_seed,
            "seed": stage_seed(cfg.seed, "ke-train"),
        }),
    );
    let sft = address(
        "sft-toy",
        &json!({
            "stage": "sft-toy",
            "upstream_cluster": cluster.hash,
            "upstream_ke": ke.hash,
            "learning_rate": cfg.sft.learning_rate,
            "epochs": cfg.sft.epochs,
            "fold": cfg.split.fold,
            "split_seed": split_seed,
        }),
    );
    let grpo = address(
        "grpo-train",
        &json!({
            "stage": "grpo-train",
            "upstream": sft.hash,
            "judge_model": cfg.judge.model,
            "grpo": cfg.grpo,
            "fold": cfg.split.fold,
            "split_seed": split_seed,
            "seed": stage_seed(cfg.seed, "grpo-train"),
        }),
    );
    let eval = address(
        "eval",
        &json!({
            "stage": "eval",
            "upstream": grpo.hash,
            "judge_model": cfg.judge.model,
            "embed_model": cfg.embedding.model,
            "eval": cfg.eval,
            "fold": cfg.split.fold,
            "split_seed": split_seed,
            "seed": stage_seed(cfg.seed, "eval"),
        }),
    );
    vec![annotate, cluster, ke, sft, grpo, eval]
}

/// Executes stages in order, skipping any whose receipt verifies.
pub struct Runner {
    pub cfg: RunConfig,
    pub plans: Vec<StagePlan>,
    pub manifest: RunManifest,
    resume: bool,
    dataset_bytes: Vec<u8>,
}

impl Runner {
    pub fn new(cfg: RunConfig, resume: bool) -> Result<Self, CliError> {
        let dataset_bytes = std::fs::read(&cfg.dataset).map_err(|source| CliError::Io {
            path: cfg.dataset.clone(),
            source,
        })?;
        let dataset_sha = sha256_hex(&dataset_bytes);
        let plans = plan_stages(&cfg, &dataset_sha);
        std::fs::create_dir_all(&cfg.out).map_err(|source| CliError::Io {
            path: cfg.out.clone(),
            source,
        })?;
        let manifest = RunManifest::load_or_create(&cfg.out, &cfg.config_hash())?;
        Ok(Self {
            cfg,
            plans,
            manifest,
            resume,
            dataset_bytes,
        })
    }

    pub fn stage_index(name: &str) -> Result<usize, CliError> {
        STAGE_ORDER
            .iter()
            .position(|s| *s == name)
            .ok_or_else(|| CliError::Stage(format!("unknown stage {name:?}")))
    }

    pub fn stage_dir(&self, name: &str) -> Result<PathBuf, CliError> {
        let index = Self::stage_index(name)?;
        Ok(self.cfg.out.join(&self.plans[index].dir_name))
    }

    /// Prints what a run through `last` would do, without executing.
    pub fn print_plan(&self, last: &str) -> Result<(), CliError> {
        let end = Self::stage_index(last)?;
        for plan in &self.plans[..=end] {
            let dir = self.cfg.out.join(&plan.dir_name);
            let cached = match StageReceipt::read(&dir)? {
                Some(receipt) => receipt.verify(&dir, plan.name, &plan.hash)?,
                None => false,
            };
            let verdict = if cached { "skip (outputs verified)" } else { "run" };
            println!("{:<12} {:<24} {}", plan.name, plan.dir_name, verdict);
        }
        Ok(())
    }

    /// Runs every stage up to and including `last`. The manifest is
    /// rewritten at each boundary; the first failure halts the chain with
    /// the failed stage recorded.
    pub fn run_through(&mut self, last: &str) -> Result<(), CliError> {
        let end = Self::stage_index(last)?;
        for index in 0..=end {
            self.step(index)?;
        }
        Ok(())
    }

    fn step(&mut self, index: usize) -> Result<(), CliError> {
        let plan = self.plans[index].clone();
        let dir = self.cfg.out.join(&plan.dir_name);

        if let Some(receipt) = StageReceipt::read(&dir)? {
            if receipt.verify(&dir, plan.name, &plan.hash)? {
                let prior = self.manifest.stages.get(plan.name);
                let (started, finished) = match prior {
                    Some(record) if record.hash == plan.hash => {
                        (record.started_unix, record.finished_unix)
                    }
                    _ => (unix_now(), unix_now()),
                };
                self.manifest.stages.insert(
                    plan.name.to_string(),
                    StageRecord {
                        hash: plan.hash.clone(),
                        dir: plan.dir_name.clone(),
                        status: StageStatus::Done,
                        started_unix: started,
                        finished_unix: finished,
                        outputs: receipt.outputs.clone(),
                    },
                );
                self.manifest.save(&self.cfg.out)?;
                println!("[skip] {:<10} {} (outputs verified)", plan.name, plan.dir_name);
                return Ok(());
            }
        }

        // This stage will execute, so nothing downstream can be trusted.
        self.invalidate_downstream(index)?;
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        let started = unix_now();
        println!("[run ] {:<10} {}", plan.name, plan.dir_name);
        let result = self.execute(plan.name, &dir);
        match result {
            Ok(output_names) => {
                let outputs = hash_outputs(&dir, &output_names)?;
                StageReceipt {
                    schema_version: 1,
                    stage: plan.name.to_string(),
                    hash: plan.hash.clone(),
                    outputs: outputs.clone(),
                }
                .write(&dir)?;
                self.manifest.stages.insert(
                    plan.name.to_string(),
                    StageRecord {
                        hash: plan.hash.clone(),
                        dir: plan.dir_name.clone(),
                        status: StageStatus::Done,
                        started_unix: started,
                        finished_unix: unix_now(),
                        outputs,
                    },
                );
                self.manifest.save(&self.cfg.out)?;
                Ok(())
            }
            Err(err) => {
                self.manifest.stages.insert(
                    plan.name.to_string(),
                    StageRecord {
                        hash: plan.hash.clone(),
                        dir: plan.dir_name.clone(),
                        status: StageStatus::Failed,
                        started_unix: started,
                        finished_unix: unix_now(),
                        outputs: BTreeMap::new(),
                    },
                );
                self.manifest.save(&self.cfg.out)?;
                Err(err)
            }
        }
    }

    fn invalidate_downstream(&mut self, index: usize) -> Result<(), CliError> {
        for plan in &self.plans[index + 1..] {
            self.manifest.stages.remove(plan.name);
            let receipt = StageReceipt::path(&self.cfg.out.join(&plan.dir_name));
            if receipt.is_file() {
                std::fs::remove_file(&receipt).map_err(|source| CliError::Io {
                    path: receipt.clone(),
                    source,
                })?;
            }
        }
        Ok(())
    }

    fn execute(&self, stage: &str, dir: &Path) -> Result<Vec<String>, CliError> {
        match stage {
            "annotate" => self.run_annotate(dir),
            "cluster" => self.run_cluster(dir),
            "ke-train" => self.run_ke_train(dir),
            "sft-toy" => self.run_sft(dir),
            "grpo-train" => self.run_grpo(dir),
            "eval" => self.run_eval_stage(dir),
            other => Err(CliError::Stage(format!("unknown stage {other:?}"))),
        }
    }

    // ----- transports -------------------------------------------------

    fn chat_transport(&self) -> Result<HttpChatTransport, CliError> {
        let timeout = Duration::from_secs(self.cfg.judge.timeout_secs);
        let mut transport = HttpChatTransport::new(&self.cfg.judge.endpoint, timeout)?;
        if let Ok(key) = std::env::var("KASER_JUDGE_API_KEY") {
            transport = transport.with_api_key(key);
        }
        Ok(transport)
    }

    fn embed_transport(&self) -> Result<HttpEmbeddingTransport, CliError> {
        let timeout = Duration::from_secs(self.cfg.embedding.timeout_secs);
        let mut transport = HttpEmbeddingTransport::new(&self.cfg.embedding.endpoint, timeout)?;
        if let Ok(key) = std::env::var("KASER_EMBED_API_KEY") {
            transport = transport.with_api_key(key);
        }
        Ok(transport)
    }

    // ----- artifact access --------------------------------------------

    pub fn source_dataset(&self) -> Result<Dataset, CliError> {
        Ok(parse_dataset(&self.dataset_bytes[..], &self.cfg.dataset)?)
    }

    fn annotated_dataset(&self) -> Result<Dataset, CliError> {
        Ok(load_dataset(&self.stage_dir("annotate")?.join("annotated.jsonl"))?)
    }

    /// The clustered (remapped) corpus every later stage trains on.
    pub fn remapped_dataset(&self) -> Result<Dataset, CliError> {
        Ok(load_dataset(&self.stage_dir("cluster")?.join("remapped.jsonl"))?)
    }

    pub fn catalog(&self) -> Result<Vec<ErrorLabel>, CliError> {
        let path = self.stage_dir("cluster")?.join("catalog.json");
        let bytes = std::fs::read(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| CliError::ConfigFormat { path, source })
    }

    pub fn ke_parameters(&self) -> Result<KeParameters, CliError> {
        let (params, _meta) = load_params(&self.stage_dir("ke-train")?.join("ke_params.json"))?;
        Ok(params)
    }

    pub fn grpo_policy(&self) -> Result<ToyPolicyParams, CliError> {
        Ok(load_toy_policy(&self.stage_dir("grpo-train")?.join("policy.json"))?)
    }

    fn train_view<'a>(&self, ds: &'a Dataset) -> Result<DatasetView<'a>, CliError> {
        let plan = make_split_plan(ds, SplitAxis::ByStudent, self.cfg.split_seed())?;
        let (train, _val, _test) = fold_views(ds, &plan, self.cfg.split.fold)?;
        Ok(train)
    }

    // ----- stage bodies -----------------------------------------------

    fn run_annotate(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let annotated_path = dir.join("annotated.jsonl");
        let resuming = self.resume && annotated_path.is_file();
        let input = if resuming {
            load_dataset(&annotated_path)?
        } else {
            self.source_dataset()?
        };
        let audit_path = dir.join("audit.jsonl");
        if !resuming && audit_path.is_file() {
            std::fs::remove_file(&audit_path).map_err(|source| CliError::Io {
                path: audit_path.clone(),
                source,
            })?;
        }
        let transport = self.chat_transport()?;
        let judge_cfg = self.cfg.judge_config(PromptTemplate::ErrorAnnotation);
        let plan = &self.plans[0];
        let run_id = format!("annotate-{}", &plan.hash[..12]);
        let mut audit = AuditLog::open(&audit_path)?;
        let (annotated, report) = annotate_dataset(
            &transport,
            &input,
            &judge_cfg,
            &run_id,
            Some(&mut audit),
            false,
        )?;
        save_dataset(&annotated, &annotated_path)?;
        let mut report_bytes =
            serde_json::to_vec_pretty(&report).expect("annotation report serializes");
        report_bytes.push(b'\n');
        let report_path = dir.join("annotation_report.json");
        write_atomic(&report_path, &report_bytes).map_err(|source| CliError::Io {
            path: report_path,
            source,
        })?;
        if !report.failures.is_empty() {
            return Err(CliError::Annotation {
                failed: report.failures.len(),
            });
        }
        println!(
            "       annotated {} submission(s), {} already labeled, {} correct",
            report.annotated, report.already_annotated, report.skipped_correct
        );
        Ok(vec![
            "annotated.jsonl".to_string(),
            "annotation_report.json".to_string(),
            "audit.jsonl".to_string(),
        ])
    }

    fn run_cluster(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let ds = self.annotated_dataset()?;
        let report_path = self.stage_dir("annotate")?.join("annotation_report.json");
        let report_bytes = std::fs::read(&report_path).map_err(|source| CliError::Io {
            path: report_path.clone(),
            source,
        })?;
        let report: kaser_core::taxonomy::AnnotationReport = serde_json::from_slice(&report_bytes)
            .map_err(|source| CliError::ConfigFormat {
                path: report_path,
                source,
            })?;

        let mut distinct: BTreeSet<String> = BTreeSet::new();
        for submission in ds.submissions() {
            distinct.extend(submission.errors.iter().cloned());
        }
        if distinct.is_empty() {
            return Err(CliError::Stage(
                "no raw error labels to cluster; run annotate on a corpus with incorrect submissions"
                    .to_string(),
            ));
        }
        let descriptions: Vec<String> = distinct.into_iter().collect();
        let k_c = self.cfg.cluster.k_c.unwrap_or(descriptions.len());
        if k_c > descriptions.len() {
            return Err(CliError::Config(format!(
                "cluster.k_c = {k_c} exceeds the {} distinct raw error label(s)",
                descriptions.len()
            )));
        }

        let embedder = self.embed_transport()?;
        let points = embed_errors(&descriptions, &embedder, &self.cfg.embed_config(), None)?;
        let dendrogram = hac(&points, self.cfg.cluster.linkage)?;
        let assignment = cut(&dendrogram, k_c)?;
        let chat = self.chat_transport()?;
        let judge_cfg = self.cfg.judge_config(PromptTemplate::ErrorAnnotation);
        let summarized = summarize_clusters(
            &chat,
            &assignment,
            &descriptions,
            &report.label_categories,
            &judge_cfg,
        )?;
        let mapping = summarized.remap(&descriptions)?;
        let remapped = remap_dataset(&ds, &mapping)?;
        let catalog: Vec<ErrorLabel> = (0..summarized.k_c)
            .map(|c| summarized.representatives[&c].clone())
            .collect();
        let freq_report = cluster_report(&summarized, &points)?;

        save_dataset(&remapped, &dir.join("remapped.jsonl"))?;
        write_json(dir, "catalog.json", &catalog)?;
        write_json(dir, "mapping.json", &mapping)?;
        write_json(dir, "dendrogram.json", &dendrogram)?;
        write_json(dir, "cluster_report.json", &freq_report)?;
        println!(
            "       {} raw label(s) -> {} representative(s)",
            descriptions.len(),
            catalog.len()
        );
        Ok(vec![
            "remapped.jsonl".to_string(),
            "catalog.json".to_string(),
            "mapping.json".to_string(),
            "dendrogram.json".to_string(),
            "cluster_report.json".to_string(),
        ])
    }

    fn run_ke_train(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let ds = self.remapped_dataset()?;
        let plan = make_split_plan(&ds, SplitAxis::ByStudent, self.cfg.split_seed())?;
        let fold = &plan.folds[self.cfg.split.fold];
        let trained: KeTrained = train_ke(&ds, &fold.train, &fold.val, &self.cfg.ke_hyper())?;

        let last = trained.curve.last().expect("curve has a final entry");
        let meta = TrainMeta {
            learning_rate: self.cfg.ke.learning_rate,
            epochs: self.cfg.ke.epochs,
            events: trained.events,
            final_train_loss: last.train_loss,
            final_val_loss: last.val_loss,
        };
        save_params(&trained.params, Some(&meta), &dir.join("ke_params.json"))?;

        let mut curve = String::from("epoch,train_loss,val_loss\n");
        for record in &trained.curve {
            let val = record
                .val_loss
                .map(|v| v.to_string())
                .unwrap_or_default();
            curve.push_str(&format!("{},{},{}\n", record.epoch, record.train_loss, val));
        }
        let curve_path = dir.join("curve.csv");
        write_atomic(&curve_path, curve.as_bytes()).map_err(|source| CliError::Io {
            path: curve_path,
            source,
        })?;
        println!(
            "       {} training event(s), final train loss {:.4}",
            trained.events, last.train_loss
        );
        Ok(vec!["ke_params.json".to_string(), "curve.csv".to_string()])
    }

    fn run_sft(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let ds = self.remapped_dataset()?;
        let ke = self.ke_parameters()?;
        let view = self.train_view(&ds)?;
        let vocabulary: Vec<String> = view
            .submissions()
            .map(|s| s.code.clone())
            .collect::<BTreeSet<String>>()
            .into_iter()
            .collect();
        let mut params = ToyPolicyParams::new(vocabulary, 1)?;
        let items = build_train_items(&view, &ke)?;

        let mut curve = String::from("epoch,mean_loss\n");
        for epoch in 0..self.cfg.sft.epochs {
            let mut total_grad = PolicyGrad::default();
            let mut loss_sum = 0.0;
            for item in &items {
                let target = Completion {
                    tokens: vec![item.truth_code.clone()],
                    text: item.truth_code.clone(),
                    logprobs: None,
                    refusal: false,
                };
                let (loss, grad) = sft_loss(&params, &item.prompt, &target)?;
                loss_sum += loss;
                total_grad.merge(&grad);
            }
            total_grad.scale(1.0 / items.len() as f64);
            toy_update(&mut params, &total_grad, self.cfg.sft.learning_rate)?;
            curve.push_str(&format!("{},{}\n", epoch, loss_sum / items.len() as f64));
        }
        save_toy_policy(&params, &dir.join("policy.json"))?;
        let curve_path = dir.join("sft_curve.csv");
        write_atomic(&curve_path, curve.as_bytes()).map_err(|source| CliError::Io {
            path: curve_path,
            source,
        })?;
        println!(
            "       warmed up on {} item(s) over {} epoch(s)",
            items.len(),
            self.cfg.sft.epochs
        );
        Ok(vec!["policy.json".to_string(), "sft_curve.csv".to_string()])
    }

    fn run_grpo(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let ds = self.remapped_dataset()?;
        let ke = self.ke_parameters()?;
        let catalog = self.catalog()?;
        let mut params = load_toy_policy(&self.stage_dir("sft-toy")?.join("policy.json"))?;
        let view = self.train_view(&ds)?;
        let items = build_train_items(&view, &ke)?;
        let transport = self.chat_transport()?;
        let judge = TransportJudge {
            transport: &transport,
            catalog: &catalog,
            cfg: self.cfg.judge_config(PromptTemplate::ErrorJudge),
            cache: Mutex::new(JudgeCache::new()),
        };
        let trace = grpo_train(&mut params, &items, &judge, &self.cfg.grpo_config())?;
        save_toy_policy(&params, &dir.join("policy.json"))?;
        trace.write_csv(&dir.join("trace.csv"))?;
        if let (Some(first), Some(last)) = (trace.records.first(), trace.records.last()) {
            println!(
                "       mean reward {:.4} -> {:.4} over {} iteration(s)",
                first.mean_reward,
                last.mean_reward,
                trace.records.len()
            );
        }
        Ok(vec!["policy.json".to_string(), "trace.csv".to_string()])
    }

    fn run_eval_stage(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let ds = self.remapped_dataset()?;
        let ke = self.ke_parameters()?;
        let catalog = self.catalog()?;
        let policy = self.grpo_policy()?;
        let split_plan = make_split_plan(&ds, SplitAxis::ByStudent, self.cfg.split_seed())?;
        let transport = self.chat_transport()?;
        let embedder = self.embed_transport()?;

        let mut outputs = Vec::new();
        for level in &self.cfg.eval.levels {
            let view = match level {
                EvalLevel::Pair => {
                    let (_train, _val, test) = fold_views(&ds, &split_plan, self.cfg.split.fold)?;
                    test
                }
                EvalLevel::Problem => ds.full_view_on(SplitAxis::ByProblem),
            };
            let judge = TransportJudge {
                transport: &transport,
                catalog: &catalog,
                cfg: self.cfg.judge_config(PromptTemplate::ErrorJudge),
                cache: Mutex::new(JudgeCache::new()),
            };
            let generator = Generator::Toy {
                params: &policy,
                ke: &ke,
                seed: stage_seed(self.cfg.seed, "eval"),
            };
            let run: EvalRun = kaser_core::eval::run_eval(
                &view,
                &generator,
                &judge,
                &embedder,
                &self.cfg.eval_config(*level),
            )?;
            let level_dir = dir.join(level.to_string());
            std::fs::create_dir_all(&level_dir).map_err(|source| CliError::Io {
                path: level_dir.clone(),
                source,
            })?;
            let written = write_reports(&run, &level_dir)?;
            for path in written {
                let name = path
                    .strip_prefix(dir)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .into_owned();
                outputs.push(name);
            }
            println!("       {level} level:");
            for (column, stat) in &run.aggregates {
                println!(
                    "         {column:<18} {:.4} ± {:.4}  (n = {})",
                    stat.mean, stat.std, stat.n
                );
            }
        }
        Ok(outputs)
    }
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    let path = dir.join(name);
    write_atomic(&path, &bytes).map_err(|source| CliError::Io { path, source })
}
