//! Command implementations: thin glue from parsed arguments to the stage
//! runner, plus the commands that are not pipeline stages (generate,
//! mock-serve, toy-init).

use std::path::PathBuf;
use std::sync::Arc;

use serde_json::json;

use kaser_core::corpus::save_dataset;
use kaser_core::mock::{serve, MockBehavior, MockFixtures};
use kaser_core::policy::{build_knowledge_prompt, toy_sample};
use kaser_core::taxonomy::annotation_messages;
use kaser_core::toy::{toy_dataset, toy_fixtures};

use crate::config::{stage_seed, toy_config, RunConfig};
use crate::stages::Runner;
use crate::{Cli, CliError, Command};

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Annotate => cmd_stage(&cli, "annotate"),
        Command::Cluster { k_c } => {
            let mut cfg = load_config(&cli)?;
            if let Some(k) = k_c {
                cfg.cluster.k_c = Some(k);
                cfg.validate()?;
            }
            run_stage(cfg, &cli, "cluster")
        }
        Command::KeTrain => cmd_stage(&cli, "ke-train"),
        Command::SftToy => cmd_stage(&cli, "sft-toy"),
        Command::GrpoTrain => cmd_stage(&cli, "grpo-train"),
        Command::Eval => cmd_stage(&cli, "eval"),
        Command::Pipeline => cmd_stage(&cli, "eval"),
        Command::Generate {
            ref student,
            ref problem,
            k,
        } => cmd_generate(&cli, student, problem, k),
        Command::MockServe {
            port,
            ref fixtures,
            malformed,
        } => cmd_mock_serve(port, fixtures.as_deref(), malformed),
        Command::ToyInit { ref dir, port } => cmd_toy_init(dir, cli.seed.unwrap_or(0), port),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required for this command".to_string()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn cmd_stage(cli: &Cli, stage: &str) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    if stage == "annotate" && cli.dry_run {
        return print_annotation_prompts(&cfg);
    }
    run_stage(cfg, cli, stage)
}

fn run_stage(cfg: RunConfig, cli: &Cli, stage: &str) -> Result<(), CliError> {
    let mut runner = Runner::new(cfg, cli.resume)?;
    if cli.dry_run {
        return runner.print_plan(stage);
    }
    runner.run_through(stage)
}

/// `annotate --dry-run`: show every prompt the annotator would send, and
/// send nothing.
fn print_annotation_prompts(cfg: &RunConfig) -> Result<(), CliError> {
    let runner = Runner::new(cfg.clone(), false)?;
    let ds = runner.source_dataset()?;
    let mut shown = 0usize;
    for submission in ds.submissions() {
        if submission.correct || !submission.errors.is_empty() {
            continue;
        }
        let problem = ds
            .problem(&submission.problem_id)
            .expect("dataset validates problem ids");
        println!(
            "--- {} / {} ({} chars)",
            submission.student_id,
            submission.problem_id,
            submission.code.len()
        );
        for message in annotation_messages(&problem.statement, &submission.code) {
            println!("[{}]", message.role);
            println!("{}", message.content);
        }
        println!();
        shown += 1;
    }
    println!("{shown} annotation request(s) would be sent");
    Ok(())
}

fn cmd_generate(cli: &Cli, student: &str, problem_id: &str, k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Config("--k must be at least 1".to_string()));
    }
    let cfg = load_config(cli)?;
    let mut runner = Runner::new(cfg, cli.resume)?;
    if cli.dry_run {
        return runner.print_plan("grpo-train");
    }
    // Generation needs the trained policy and estimator; run (or verify)
    // everything up to GRPO first.
    runner.run_through("grpo-train")?;

    let ds = runner.remapped_dataset()?;
    let ke = runner.ke_parameters()?;
    let policy = runner.grpo_policy()?;
    let problem = ds
        .problem(problem_id)
        .ok_or_else(|| CliError::Config(format!("unknown problem {problem_id:?}")))?
        .clone();
    if !ds.students().contains(&student.to_string()) {
        return Err(CliError::Config(format!("unknown student {student:?}")));
    }
    // Score mastery at this problem's position in the student's sequence,
    // or after their whole history for an unattempted problem.
    let t = ds
        .dense_index(student, problem_id)
        .unwrap_or(ds.student_sequence(student)?.len());
    let mastery = kaser_core::knowledge::mastery_profile(&ds, student, t, &ke)?;
    let prompt = build_knowledge_prompt(&problem, &mastery, ds.kcs())?;
    let seed = stage_seed(runner.cfg.seed, &format!("generate|{student}|{problem_id}"));
    let completions = toy_sample(&policy, &prompt, k, seed)?;

    let mastery_map: serde_json::Map<String, serde_json::Value> = ds
        .kcs()
        .iter()
        .zip(mastery.m.iter())
        .map(|(kc, value)| (kc.id.clone(), json!(value)))
        .collect();
    let record = json!({
        "student_id": student,
        "problem_id": problem_id,
        "order_index": t,
        "mastery": mastery_map,
        "candidates": completions.iter().map(|c| c.text.clone()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&record).expect("record serializes"));
    Ok(())
}

fn cmd_mock_serve(
    port: u16,
    fixtures_path: Option<&std::path::Path>,
    malformed: u64,
) -> Result<(), CliError> {
    let fixtures = match fixtures_path {
        Some(path) => MockFixtures::load(path)?,
        None => toy_fixtures(),
    };
    let mut behavior = MockBehavior::new(fixtures)?;
    if malformed > 0 {
        behavior = behavior.with_fault_malformed(malformed);
    }
    let server = serve(Arc::new(behavior), port)?;
    println!("mock services listening at {}", server.endpoint());
    println!("press ctrl-c to stop");
    loop {
        std::thread::park();
    }
}

fn cmd_toy_init(dir: &PathBuf, seed: u64, port: u16) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    let corpus_path = dir.join("corpus.jsonl");
    save_dataset(&toy_dataset(seed), &corpus_path)?;
    let fixtures_path = dir.join("fixtures.json");
    toy_fixtures().save(&fixtures_path)?;

    let endpoint = format!("http://127.0.0.1:{port}/v1");
    let mut cfg = toy_config(PathBuf::from("corpus.jsonl"), PathBuf::from("runs"), &endpoint);
    cfg.seed = seed;
    let config_path = dir.join("config.json");
    let mut bytes = serde_json::to_vec_pretty(&cfg).expect("config serializes");
    bytes.push(b'\n');
    std::fs::write(&config_path, &bytes).map_err(|source| CliError::Io {
        path: config_path.clone(),
        source,
    })?;

    println!("wrote {}", corpus_path.display());
    println!("wrote {}", fixtures_path.display());
    println!("wrote {}", config_path.display());
    println!();
    println!("next:");
    println!("  kaser mock-serve --port {port} --fixtures {}", fixtures_path.display());
    println!("  kaser pipeline --config {}", config_path.display());
    Ok(())
}
