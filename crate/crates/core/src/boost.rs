//! Environment snapshots and decision synthesis: every step of a
//! thought-completed trajectory is enriched with alternative (thought, action)
//! decisions sampled from a model, forming a tree whose trunk is the human
//! trajectory and whose leaves are never executed.

use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_decision, render_action, Action};
use crate::gateway::{Gateway, GatewayError};
use crate::prompts::{build_boost_request, HistoryEntry};
use crate::trajectory::{Observation, Trajectory};

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("trajectory {0} lacks thoughts; run thought completion first")]
    MissingThought(String),
    #[error("step index {index} out of range for {len} steps")]
    StepOutOfRange { index: usize, len: usize },
    #[error("fan-out must be at least 1")]
    ZeroFanOut,
    #[error("gateway failure at step {step} (checkpoint holds {completed} steps): {source}")]
    Gateway {
        step: usize,
        completed: usize,
        source: GatewayError,
    },
    #[error("tree schema error: {0}")]
    Schema(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// The decision context at one trunk step: task, current observation, and the
/// textual history of all preceding trunk steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentSnapshot {
    pub task: String,
    pub observation: Observation,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Human,
    Synthesized,
}

/// One (thought, action) decision, human or synthesized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionNode {
    pub thought: String,
    pub action: Action,
    pub source: DecisionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
    /// Raw model output; synthesized nodes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

/// A sampled slot whose reply could not be parsed into a decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub step_index: usize,
    pub slot: u32,
    pub reason: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStep {
    pub snapshot: EnvironmentSnapshot,
    pub human: DecisionNode,
    pub leaves: Vec<DecisionNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drops: Vec<DropRecord>,
}

/// Human trunk with synthesized leaves; leaves carry no observations because
/// they are never executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajTree {
    pub trajectory_id: String,
    pub task: String,
    pub trunk: Vec<TreeStep>,
}

impl TrajTree {
    pub fn leaf_count(&self) -> usize {
        self.trunk.iter().map(|s| s.leaves.len()).sum()
    }

    /// Number of literal-duplicate synthesized decisions, kept as frequency
    /// signal but worth flagging in stats.
    pub fn duplicate_leaf_count(&self) -> usize {
        self.trunk
            .iter()
            .map(|s| {
                let mut seen = std::collections::BTreeSet::new();
                s.leaves
                    .iter()
                    .filter(|l| !seen.insert((l.thought.clone(), render_action(&l.action))))
                    .count()
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct BoostConfig {
    /// Decisions sampled per trunk step.
    pub fan_out: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            fan_out: 9,
            temperature: 1.0,
            max_tokens: 1024,
            checkpoint_dir: None,
        }
    }
}

/// Extracts the environment snapshot at step `k`: history is the human
/// (thought, action) pairs of steps 0..k.
pub fn build_snapshot(t: &Trajectory, k: usize) -> Result<EnvironmentSnapshot, BoostError> {
    if k >= t.steps.len() {
        return Err(BoostError::StepOutOfRange {
            index: k,
            len: t.steps.len(),
        });
    }
    if !t.has_thoughts() {
        return Err(BoostError::MissingThought(t.id.clone()));
    }
    let history = t.steps[..k]
        .iter()
        .map(|s| HistoryEntry::new(s.thought.clone().unwrap(), s.action.clone()))
        .collect();
    Ok(EnvironmentSnapshot {
        task: t.task_description.clone(),
        observation: t.steps[k].observation.clone(),
        history,
    })
}

/// Samples `fan_out` decisions against a snapshot. Unparseable replies become
/// drop records, not nodes.
pub fn boost_step(
    snapshot: &EnvironmentSnapshot,
    step_index: usize,
    cfg: &BoostConfig,
    gateway: &Gateway,
) -> Result<(Vec<DecisionNode>, Vec<DropRecord>), BoostError> {
    if cfg.fan_out == 0 {
        return Err(BoostError::ZeroFanOut);
    }
    let request = build_boost_request(
        &snapshot.task,
        &snapshot.history,
        &snapshot.observation.screenshot_ref,
        cfg.temperature,
        cfg.max_tokens,
    );
    let replies = gateway
        .sample_n(&request, cfg.fan_out)
        .map_err(|source| BoostError::Gateway {
            step: step_index,
            completed: 0,
            source,
        })?;

    let mut leaves = Vec::new();
    let mut drops = Vec::new();
    for (slot, reply) in replies.into_iter().enumerate() {
        let slot = slot as u32;
        match reply {
            Ok(raw) => match parse_decision(&raw) {
                Ok((thought, action)) => leaves.push(DecisionNode {
                    thought,
                    action,
                    source: DecisionSource::Synthesized,
                    sample_index: Some(slot),
                    raw_text: Some(raw),
                }),
                Err(e) => drops.push(DropRecord {
                    step_index,
                    slot,
                    reason: e.to_string(),
                    raw_text: raw,
                }),
            },
            Err(e) => drops.push(DropRecord {
                step_index,
                slot,
                reason: e.to_string(),
                raw_text: String::new(),
            }),
        }
    }
    Ok((leaves, drops))
}

fn checkpoint_path(dir: &PathBuf, id: &str) -> PathBuf {
    dir.join(format!("{id}.tree.partial.jsonl"))
}

/// Boosts every trunk step of a thought-completed trajectory, terminal steps
/// included. Resumable per step through the checkpoint directory.
pub fn boost_trajectory(
    t: &Trajectory,
    cfg: &BoostConfig,
    gateway: &Gateway,
) -> Result<TrajTree, BoostError> {
    if cfg.fan_out == 0 {
        return Err(BoostError::ZeroFanOut);
    }
    if !t.has_thoughts() {
        return Err(BoostError::MissingThought(t.id.clone()));
    }

    let mut trunk: Vec<TreeStep> = Vec::with_capacity(t.steps.len());
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = checkpoint_path(dir, &t.id);
        if path.exists() {
            for line in fs::read_to_string(&path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let step: TreeStep = serde_json::from_str(line)
                    .map_err(|e| BoostError::Schema(format!("checkpoint: {e}")))?;
                trunk.push(step);
            }
            trunk.truncate(t.steps.len());
        }
    }

    for k in trunk.len()..t.steps.len() {
        let snapshot = build_snapshot(t, k)?;
        let (leaves, drops) = match boost_step(&snapshot, k, cfg, gateway) {
            Ok(ok) => ok,
            Err(BoostError::Gateway { source, .. }) => {
                if let Some(dir) = &cfg.checkpoint_dir {
                    fs::create_dir_all(dir)?;
                    let mut file = fs::File::create(checkpoint_path(dir, &t.id))?;
                    for step in &trunk {
                        writeln!(file, "{}", serde_json::to_string(step).unwrap())?;
                    }
                }
                return Err(BoostError::Gateway {
                    step: k,
                    completed: trunk.len(),
                    source,
                });
            }
            Err(other) => return Err(other),
        };
        let step = &t.steps[k];
        trunk.push(TreeStep {
            snapshot,
            human: DecisionNode {
                thought: step.thought.clone().unwrap(),
                action: step.action.clone(),
                source: DecisionSource::Human,
                sample_index: None,
                raw_text: None,
            },
            leaves,
            drops,
        });
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        let _ = fs::remove_file(checkpoint_path(dir, &t.id));
    }
    Ok(TrajTree {
        trajectory_id: t.id.clone(),
        task: t.task_description.clone(),
        trunk,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TreeRecord {
    Tree {
        trajectory_id: String,
        task: String,
    },
    TreeStep(TreeStep),
}

/// Saves a tree as line-delimited records: header, then one step per line.
pub fn save_tree<W: Write>(tree: &TrajTree, mut sink: W) -> Result<(), BoostError> {
    let header = TreeRecord::Tree {
        trajectory_id: tree.trajectory_id.clone(),
        task: tree.task.clone(),
    };
    writeln!(sink, "{}", serde_json::to_string(&header).unwrap())?;
    for step in &tree.trunk {
        let record = TreeRecord::TreeStep(step.clone());
        writeln!(sink, "{}", serde_json::to_string(&record).unwrap())?;
    }
    Ok(())
}

pub fn load_tree<R: BufRead>(reader: R) -> Result<TrajTree, BoostError> {
    let mut header: Option<(String, String)> = None;
    let mut trunk = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TreeRecord>(&line)
            .map_err(|e| BoostError::Schema(e.to_string()))?
        {
            TreeRecord::Tree {
                trajectory_id,
                task,
            } => header = Some((trajectory_id, task)),
            TreeRecord::TreeStep(step) => trunk.push(step),
        }
    }
    let (trajectory_id, task) =
        header.ok_or_else(|| BoostError::Schema("missing tree header".into()))?;
    Ok(TrajTree {
        trajectory_id,
        task,
        trunk,
    })
}

/// Markdown visualization: trunk steps with their leaf decisions.
pub fn export_markdown(tree: &TrajTree) -> String {
    let mut out = format!("# Decision tree for task: {}\n", tree.task);
    for (k, step) in tree.trunk.iter().enumerate() {
        out.push_str(&format!("\n## Trunk step {k}\n\n"));
        out.push_str(&format!(
            "![step {k}]({})\n\n",
            step.snapshot.observation.screenshot_ref
        ));
        out.push_str(&format!(
            "- **Human:** {} — `{}`\n",
            step.human.thought,
            render_action(&step.human.action)
        ));
        for leaf in &step.leaves {
            out.push_str(&format!(
                "- leaf {}: {} — `{}`\n",
                leaf.sample_index.unwrap_or_default(),
                leaf.thought,
                render_action(&leaf.action)
            ));
        }
        if !step.drops.is_empty() {
            out.push_str(&format!("- dropped slots: {}\n", step.drops.len()));
        }
    }
    out
}
