//! Persistent data model and line-delimited I/O for raw and thought-completed
//! trajectories.
//!
//! On disk a trajectory is one JSON object per line: a header record carrying
//! id/task/terminal/meta, then one step record per step. Actions are stored
//! both structured and as canonical text; the two must agree.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_action, render_action, Action, ParseActionError, Resolution};

/// One screen observation: a screenshot reference plus its resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    /// Opaque image reference: a file path or content hash resolved at
    /// pipeline time.
    pub screenshot_ref: String,
    pub resolution: Resolution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

impl Observation {
    pub fn new(screenshot_ref: impl Into<String>, resolution: Resolution) -> Self {
        Self {
            screenshot_ref: screenshot_ref.into(),
            resolution,
            timestamp_ms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    Human,
}

/// One (observation, optional thought, action) step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub observation: Observation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub action: Action,
    /// Label of the clicked element when the recorder captured one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_name: Option<String>,
    pub source: StepSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Finish,
    Fail,
}

/// A task description plus its ordered steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub task_description: String,
    pub steps: Vec<Step>,
    pub terminal: Terminal,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotator_meta: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("step order error: expected index {expected}, found {found}")]
    Order { expected: usize, found: usize },
    #[error("action parse error at step {step}: {source}")]
    ActionParse {
        step: usize,
        source: ParseActionError,
    },
    #[error("terminal invariant violated: {0}")]
    Terminal(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Trajectory {
    /// Validates the structural invariants: nonempty contiguous steps and no
    /// mid-list finish/fail.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.steps.is_empty() {
            return Err(TrajectoryError::Schema(format!(
                "trajectory {} has no steps",
                self.id
            )));
        }
        for (expected, step) in self.steps.iter().enumerate() {
            if step.index != expected {
                return Err(TrajectoryError::Order {
                    expected,
                    found: step.index,
                });
            }
        }
        let last = self.steps.len() - 1;
        for step in &self.steps[..last] {
            if step.action.is_terminal() {
                return Err(TrajectoryError::Terminal(format!(
                    "step {} is {:?} but is not the final step",
                    step.index, step.action
                )));
            }
        }
        match self.steps[last].action {
            Action::Finish if self.terminal != Terminal::Finish => {
                Err(TrajectoryError::Terminal(
                    "final action is finish but terminal is fail".into(),
                ))
            }
            Action::Fail if self.terminal != Terminal::Fail => Err(TrajectoryError::Terminal(
                "final action is fail but terminal is finish".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn application(&self) -> &str {
        self.annotator_meta
            .get("app")
            .map(String::as_str)
            .unwrap_or("unknown")
    }

    /// True once every step carries a thought.
    pub fn has_thoughts(&self) -> bool {
        self.steps.iter().all(|s| s.thought.is_some())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    id: String,
    task_description: String,
    terminal: Terminal,
    #[serde(default)]
    annotator_meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    index: usize,
    observation: Observation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thought: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    element_name: Option<String>,
    #[serde(default = "default_source")]
    source: StepSource,
}

fn default_source() -> StepSource {
    StepSource::Human
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Trajectory(Header),
    Step(StepRecord),
}

/// Loads and validates a trajectory from a line-delimited record stream.
pub fn load_trajectory<R: BufRead>(reader: R) -> Result<Trajectory, TrajectoryError> {
    let mut header: Option<Header> = None;
    let mut steps: Vec<Step> = Vec::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| TrajectoryError::Schema(format!("line {}: {e}", line_no + 1)))?;
        match record {
            Record::Trajectory(h) => {
                if header.is_some() {
                    return Err(TrajectoryError::Schema("duplicate header record".into()));
                }
                header = Some(h);
            }
            Record::Step(rec) => {
                if header.is_none() {
                    return Err(TrajectoryError::Schema(
                        "step record before header record".into(),
                    ));
                }
                let action = match (rec.action, rec.action_text.as_deref()) {
                    (Some(a), Some(text)) => {
                        let parsed = parse_action(text).map_err(|source| {
                            TrajectoryError::ActionParse {
                                step: rec.index,
                                source,
                            }
                        })?;
                        if parsed != a {
                            return Err(TrajectoryError::Schema(format!(
                                "step {}: structured action and action_text disagree",
                                rec.index
                            )));
                        }
                        a
                    }
                    (Some(a), None) => a,
                    (None, Some(text)) => {
                        parse_action(text).map_err(|source| TrajectoryError::ActionParse {
                            step: rec.index,
                            source,
                        })?
                    }
                    (None, None) => {
                        return Err(TrajectoryError::Schema(format!(
                            "step {} has neither action nor action_text",
                            rec.index
                        )))
                    }
                };
                steps.push(Step {
                    index: rec.index,
                    observation: rec.observation,
                    thought: rec.thought,
                    action,
                    element_name: rec.element_name,
                    source: rec.source,
                });
            }
        }
    }

    let header = header.ok_or_else(|| TrajectoryError::Schema("missing header record".into()))?;
    let trajectory = Trajectory {
        id: header.id,
        task_description: header.task_description,
        steps,
        terminal: header.terminal,
        annotator_meta: header.annotator_meta,
    };
    trajectory.validate()?;
    Ok(trajectory)
}

/// Saves a trajectory as a line-delimited record stream; inverse of
/// [`load_trajectory`].
pub fn save_trajectory<W: Write>(t: &Trajectory, mut sink: W) -> Result<(), TrajectoryError> {
    t.validate()?;
    let header = Record::Trajectory(Header {
        id: t.id.clone(),
        task_description: t.task_description.clone(),
        terminal: t.terminal,
        annotator_meta: t.annotator_meta.clone(),
    });
    writeln!(sink, "{}", serde_json::to_string(&header).unwrap())?;
    for step in &t.steps {
        let record = Record::Step(StepRecord {
            index: step.index,
            observation: step.observation.clone(),
            thought: step.thought.clone(),
            action: Some(step.action.clone()),
            action_text: Some(render_action(&step.action)),
            element_name: step.element_name.clone(),
            source: step.source,
        });
        writeln!(sink, "{}", serde_json::to_string(&record).unwrap())?;
    }
    Ok(())
}

/// Renders a trajectory as a Markdown document, one section per step.
pub fn export_markdown(t: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Task: {}\n\n", t.task_description));
    out.push_str(&format!(
        "- id: `{}`\n- terminal: **{}**\n- steps: {}\n",
        t.id,
        match t.terminal {
            Terminal::Finish => "finish",
            Terminal::Fail => "fail",
        },
        t.steps.len()
    ));
    for step in &t.steps {
        out.push_str(&format!("\n## Step {}\n\n", step.index));
        out.push_str(&format!(
            "![step {}]({})\n\n",
            step.index, step.observation.screenshot_ref
        ));
        if let Some(thought) = &step.thought {
            if !thought.is_empty() {
                out.push_str(&format!("**Thought:** {thought}\n\n"));
            }
        }
        out.push_str(&format!("**Action:** `{}`\n", render_action(&step.action)));
        if let Some(name) = &step.element_name {
            out.push_str(&format!("\n**Element:** {name}\n"));
        }
    }
    out.push_str(&format!(
        "\n---\nTerminal status: **{}**\n",
        match t.terminal {
            Terminal::Finish => "finish",
            Terminal::Fail => "fail",
        }
    ));
    out
}

/// Aggregate corpus statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub total_steps: usize,
    pub mean_steps: f64,
    pub per_app: BTreeMap<String, usize>,
}

pub fn corpus_stats(trajectories: &[Trajectory]) -> CorpusStats {
    let count = trajectories.len();
    let total_steps: usize = trajectories.iter().map(|t| t.steps.len()).sum();
    let mean_steps = if count == 0 {
        0.0
    } else {
        total_steps as f64 / count as f64
    };
    let mut per_app = BTreeMap::new();
    for t in trajectories {
        *per_app.entry(t.application().to_string()).or_insert(0) += 1;
    }
    CorpusStats {
        count,
        total_steps,
        mean_steps,
        per_app,
    }
}
