//! `deskagent`: single entry point wiring the pipeline stages together.
//!
//! Configuration precedence everywhere: command-line flags beat the model
//! config file, which beats environment variables. Credentials are only ever
//! named indirectly via `api_key_env`; no key material lives in files.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use deskagent_core::boost::{boost_trajectory, load_tree, save_tree, BoostConfig, TrajTree};
use deskagent_core::curation::{
    decontaminate, filter_trajectories, AcceptAll, DecontaminationThresholds, RuleSet, TaskText,
    TrajectoryRules,
};
use deskagent_core::dataset::{export_dataset, flatten, BoostSelection};
use deskagent_core::gateway::{
    Gateway, GatewayConfig, HttpEmbedder, HttpTransport, MockEmbedder, MockScript, MockTransport,
};
use deskagent_core::harness::{load_suite, run_suite, SuitePolicy};
use deskagent_core::prompts::ScaffoldConfig;
use deskagent_core::runtime::{run_episode, AgentConfig, ScenarioScript, SimulatedEnvironment};
use deskagent_core::thought::{complete_thoughts, MarkPolicy, ThoughtConfig};
use deskagent_core::trajectory::{
    corpus_stats, load_trajectory, save_trajectory, Trajectory,
};

#[derive(Parser)]
#[command(name = "deskagent", version, about = "Trajectory pipeline and agent runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw trajectory files and copy them into a store.
    Ingest {
        /// Directory of `*.jsonl` trajectory files.
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply step/trajectory filter rules and optional decontamination.
    Curate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON list of benchmark tasks ({id, text}) to decontaminate against.
        #[arg(long)]
        benchmark_tasks: Option<PathBuf>,
        #[arg(long)]
        ngram_max: Option<f64>,
        #[arg(long)]
        cosine_max: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        success_only: bool,
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Reconstruct the thought behind every recorded action.
    CompleteThoughts {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        /// Overwrite trajectories that already have thoughts.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Sample alternative decisions for every trunk step.
    Boost {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decisions sampled per step.
        #[arg(long, default_value_t = 9)]
        n: usize,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Flatten decision trees into a training dataset.
    BuildDataset {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        scaling_factor: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one task against a simulated environment.
    RunAgent {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        model_config: PathBuf,
        /// Where to write the run record (JSONL). Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional Markdown replay path.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Run a benchmark suite and print the report.
    Evaluate {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        include_infeasible: bool,
        /// Exclude init failures from the scored denominator.
        #[arg(long)]
        exclude_init_failures: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Render a stored trajectory, tree, or run record as Markdown.
    Inspect { path: PathBuf },
}

/// Model connection settings. `api_key_env` names an environment variable;
/// the file never holds the key itself, and unknown fields (such as a literal
/// key) are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfig {
    endpoint: Option<String>,
    model: Option<String>,
    api_key_env: Option<String>,
    concurrency_limit: Option<usize>,
    timeout_secs: Option<u64>,
    /// Path to a scripted mock, relative to this config file.
    mock_script: Option<PathBuf>,
    /// Default step limit for `run-agent`; the flag overrides it.
    max_steps: Option<usize>,
}

fn load_model_config(path: &Path) -> Result<(ModelConfig, PathBuf)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("read model config {}", path.display()))?;
    let config: ModelConfig = serde_json::from_str(&text)
        .with_context(|| format!("parse model config {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok((config, base))
}

fn build_gateway(config_path: &Path) -> Result<(Gateway, ModelConfig)> {
    let (config, base) = load_model_config(config_path)?;
    let gw_config = GatewayConfig {
        endpoint: config
            .endpoint
            .clone()
            .or_else(|| std::env::var("DESKAGENT_ENDPOINT").ok())
            .unwrap_or_else(|| GatewayConfig::default().endpoint),
        model: config
            .model
            .clone()
            .or_else(|| std::env::var("DESKAGENT_MODEL").ok())
            .unwrap_or_else(|| GatewayConfig::default().model),
        api_key_env: config.api_key_env.clone(),
        concurrency_limit: config
            .concurrency_limit
            .unwrap_or_else(|| GatewayConfig::default().concurrency_limit),
        timeout_secs: config
            .timeout_secs
            .unwrap_or_else(|| GatewayConfig::default().timeout_secs),
        ..Default::default()
    };
    let gateway = match &config.mock_script {
        Some(script_path) => {
            let script = MockScript::load(&base.join(script_path))?;
            Gateway::new(Arc::new(MockTransport::new(script)), gw_config)
                .with_embedder(Arc::new(MockEmbedder::hash_based(64)))
        }
        None => {
            let transport = HttpTransport::new(&gw_config)?;
            let embedder = HttpEmbedder::new(&gw_config)?;
            Gateway::new(Arc::new(transport), gw_config).with_embedder(Arc::new(embedder))
        }
    };
    Ok((gateway, config))
}

// ---------------------------------------------------------------------------
// Trajectory store helpers: a directory with one `*.jsonl` file per
// trajectory, named by id.
// ---------------------------------------------------------------------------

fn jsonl_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("read directory {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    files.sort();
    Ok(files)
}

fn load_store(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for path in jsonl_files(dir, ".jsonl")? {
        if path.to_string_lossy().ends_with(".tree.jsonl") {
            continue;
        }
        let file = fs::File::open(&path)?;
        let t = load_trajectory(BufReader::new(file))
            .with_context(|| format!("load trajectory {}", path.display()))?;
        out.push(t);
    }
    if out.is_empty() {
        bail!("no trajectories found in {}", dir.display());
    }
    Ok(out)
}

fn write_store(dir: &Path, trajectories: &[Trajectory]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in trajectories {
        let file = fs::File::create(dir.join(format!("{}.jsonl", t.id)))?;
        save_trajectory(t, file)?;
    }
    Ok(())
}

fn load_trees(dir: &Path) -> Result<Vec<TrajTree>> {
    let mut out = Vec::new();
    for path in jsonl_files(dir, ".tree.jsonl")? {
        let file = fs::File::open(&path)?;
        out.push(
            load_tree(BufReader::new(file))
                .with_context(|| format!("load tree {}", path.display()))?,
        );
    }
    if out.is_empty() {
        bail!("no decision trees found in {}", dir.display());
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { dir, out } => {
            let trajectories = load_store(&dir)?;
            write_store(&out, &trajectories)?;
            println!("{}", serde_json::to_string_pretty(&corpus_stats(&trajectories))?);
        }
        Command::Curate {
            store,
            out,
            benchmark_tasks,
            ngram_max,
            cosine_max,
            max_steps,
            success_only,
            model_config,
        } => {
            let trajectories = load_store(&store)?;
            let traj_rules = TrajectoryRules {
                max_steps: max_steps.unwrap_or_else(|| TrajectoryRules::default().max_steps),
                success_only,
            };
            let (mut kept, reports) =
                filter_trajectories(&trajectories, &RuleSet::default(), &traj_rules, &AcceptAll);

            let mut verdicts = Vec::new();
            if let Some(bench_path) = benchmark_tasks {
                let bench: Vec<TaskText> =
                    serde_json::from_str(&fs::read_to_string(&bench_path)?)
                        .with_context(|| format!("parse {}", bench_path.display()))?;
                let tasks: Vec<TaskText> = kept
                    .iter()
                    .map(|t| TaskText {
                        id: t.id.clone(),
                        text: t.task_description.clone(),
                    })
                    .collect();
                let defaults = DecontaminationThresholds::default();
                let thresholds = DecontaminationThresholds {
                    ngram_n: defaults.ngram_n,
                    ngram_max: ngram_max.unwrap_or(defaults.ngram_max),
                    cosine_max: cosine_max.unwrap_or(defaults.cosine_max),
                };
                let embedder: Box<dyn deskagent_core::curation::EmbeddingPort> =
                    match model_config {
                        Some(path) => Box::new(build_gateway(&path)?.0),
                        None => Box::new(MockEmbedder::hash_based(64)),
                    };
                verdicts = decontaminate(&tasks, &bench, &thresholds, embedder.as_ref())?;
                let removed: std::collections::BTreeSet<&str> = verdicts
                    .iter()
                    .filter(|v| v.removed)
                    .map(|v| v.task_id.as_str())
                    .collect();
                kept.retain(|t| !removed.contains(t.id.as_str()));
            }

            write_store(&out, &kept)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "kept": kept.len(),
                    "filter_reports": reports,
                    "decontamination": verdicts,
                }))?
            );
        }
        Command::CompleteThoughts {
            store,
            out,
            model_config,
            force,
            checkpoint_dir,
        } => {
            let (gateway, _) = build_gateway(&model_config)?;
            let cfg = ThoughtConfig {
                force,
                checkpoint_dir,
                marks: MarkPolicy::PassThrough,
                ..Default::default()
            };
            let mut completed = Vec::new();
            let mut reports = Vec::new();
            for t in load_store(&store)? {
                let (done, report) = complete_thoughts(&t, &gateway, &cfg)?;
                completed.push(done);
                reports.push(report);
            }
            write_store(&out, &completed)?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
        Command::Boost {
            store,
            out,
            n,
            model_config,
            checkpoint_dir,
        } => {
            let (gateway, _) = build_gateway(&model_config)?;
            let cfg = BoostConfig {
                fan_out: n,
                checkpoint_dir,
                ..Default::default()
            };
            fs::create_dir_all(&out)?;
            let mut summary = Vec::new();
            for t in load_store(&store)? {
                let tree = boost_trajectory(&t, &cfg, &gateway)?;
                let file = fs::File::create(out.join(format!("{}.tree.jsonl", tree.trajectory_id)))?;
                summary.push(serde_json::json!({
                    "trajectory_id": tree.trajectory_id,
                    "trunk_steps": tree.trunk.len(),
                    "leaves": tree.leaf_count(),
                    "duplicate_leaves": tree.duplicate_leaf_count(),
                }));
                save_tree(&tree, file)?;
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::BuildDataset {
            trees,
            out,
            manifest,
            scaling_factor,
            seed,
        } => {
            if scaling_factor < 1 {
                bail!("scaling factor must be at least 1");
            }
            let sel = BoostSelection::from_scaling_factor(scaling_factor, seed);
            let cfg = ScaffoldConfig::default();
            let mut instances = Vec::new();
            for tree in load_trees(&trees)? {
                instances.extend(flatten(&tree, &sel, &cfg));
            }
            let sink = fs::File::create(&out)?;
            let built = export_dataset(&instances, &sel, &cfg, &AcceptAll, sink)?;
            let manifest_json = serde_json::to_string_pretty(&built)?;
            if let Some(path) = manifest {
                fs::write(path, &manifest_json)?;
            }
            println!("{manifest_json}");
        }
        Command::RunAgent {
            scenario,
            task,
            max_steps,
            model_config,
            out,
            replay,
        } => {
            let (gateway, config) = build_gateway(&model_config)?;
            // Precedence: flag > config file > environment > default.
            let max_steps = max_steps
                .or(config.max_steps)
                .or_else(|| {
                    std::env::var("DESKAGENT_MAX_STEPS")
                        .ok()
                        .and_then(|v| v.parse().ok())
                })
                .unwrap_or_else(|| AgentConfig::default().max_steps);
            let script = ScenarioScript::load(&scenario)?;
            let mut env = SimulatedEnvironment::new(script);
            let agent_cfg = AgentConfig {
                max_steps,
                ..Default::default()
            };
            let record = run_episode(&mut env, &task, &gateway, &agent_cfg)?;
            match out {
                Some(path) => {
                    deskagent_core::runtime::save_record(&record, fs::File::create(path)?)?
                }
                None => {
                    let stdout = std::io::stdout();
                    deskagent_core::runtime::save_record(&record, stdout.lock())?;
                }
            }
            if let Some(path) = replay {
                fs::write(path, deskagent_core::runtime::export_markdown(&record))?;
            }
        }
        Command::Evaluate {
            suite,
            model_config,
            include_infeasible,
            exclude_init_failures,
            seed,
            markdown,
        } => {
            let (gateway, _) = build_gateway(&model_config)?;
            let specs = load_suite(&suite)?;
            let policy = SuitePolicy {
                include_infeasible,
                count_init_failures: !exclude_init_failures,
                seed,
            };
            let report = run_suite(&specs, &gateway, &AgentConfig::default(), &policy)?;
            if let Some(path) = markdown {
                fs::write(path, report.to_markdown())?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Inspect { path } => {
            let text = fs::read_to_string(&path)?;
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .context("empty file")?;
            let value: serde_json::Value = serde_json::from_str(first)?;
            let markdown = match value["kind"].as_str() {
                Some("trajectory") => deskagent_core::trajectory::export_markdown(
                    &load_trajectory(BufReader::new(fs::File::open(&path)?))?,
                ),
                Some("tree") => deskagent_core::boost::export_markdown(&load_tree(
                    BufReader::new(fs::File::open(&path)?),
                )?),
                Some("run") => deskagent_core::runtime::export_markdown(
                    &deskagent_core::runtime::load_record(BufReader::new(fs::File::open(&path)?))?,
                ),
                other => bail!("unrecognized record kind {other:?} in {}", path.display()),
            };
            println!("{markdown}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable error record on stderr.
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": format!("{err:#}"),
                })
            );
            ExitCode::FAILURE
        }
    }
}
