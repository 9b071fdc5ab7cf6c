//! The inference scaffold: a think-act loop over an abstract environment
//! port, plus a scripted state-machine environment for offline runs.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_decision, render_action, Action, Resolution};
use crate::gateway::{Gateway, GatewayError};
use crate::prompts::{build_scaffold_request, HistoryEntry, ScaffoldConfig};
use crate::trajectory::Observation;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("gateway failure: {0}")]
    Gateway(#[from] GatewayError),
    #[error("environment fault: {0}")]
    Environment(String),
    #[error("scenario schema error: {0}")]
    ScenarioSchema(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mutable agent state across one episode. History is textual only; past
/// screenshots are excluded.
#[derive(Debug, Clone, Default)]
pub struct AgentState {
    pub task: String,
    pub history: Vec<HistoryEntry>,
    pub terminal: Option<TerminalCause>,
}

impl AgentState {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            history: Vec::new(),
            terminal: None,
        }
    }

    pub fn step_count(&self) -> usize {
        self.history.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalCause {
    Finished,
    Failed,
    StepLimit,
}

/// Result of executing an action against an environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ExecResult {
    pub fn applied() -> Self {
        Self {
            applied: true,
            reason: None,
        }
    }

    pub fn rejected(reason: impl Into<String>) -> Self {
        Self {
            applied: false,
            reason: Some(reason.into()),
        }
    }
}

/// Boundary to whatever executes actions and produces observations. The real
/// OS automation seam; only the simulator implements it here.
pub trait EnvironmentPort {
    fn observe(&mut self) -> Result<Observation, RuntimeError>;
    fn execute(&mut self, action: &Action) -> Result<ExecResult, RuntimeError>;
    fn resolution(&self) -> Resolution;
}

/// One recorded step of an episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStep {
    pub observation_ref: String,
    pub thought: String,
    pub action: Action,
    pub action_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_result: Option<ExecResult>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub steps: Vec<RunStep>,
    pub terminal: TerminalCause,
    /// Set when the model failed the output format twice and the loop forced
    /// a fail decision.
    #[serde(default)]
    pub protocol_failure: bool,
}

impl RunRecord {
    pub fn emitted_fail(&self) -> bool {
        self.steps.iter().any(|s| s.action == Action::Fail)
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub max_steps: usize,
    pub scaffold: ScaffoldConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_steps: 30,
            scaffold: ScaffoldConfig::default(),
        }
    }
}

/// Builds the scaffold prompt for the current state and observation: the
/// template, the task, the textual history, and the single current
/// screenshot.
pub fn build_scaffold_prompt(
    state: &AgentState,
    obs: &Observation,
    cfg: &ScaffoldConfig,
) -> crate::gateway::ChatRequest {
    build_scaffold_request(&state.task, &state.history, &obs.screenshot_ref, cfg)
}

const FORMAT_REMINDER: &str = "\n\nYour previous response did not follow the required format. \
Reply with your thought process, then a final line starting with \"Action: \" followed by \
exactly one valid action.";

/// One think-act decision. A malformed completion earns one reprompt with a
/// format reminder; a second failure becomes a forced fail decision.
pub fn decide(
    state: &AgentState,
    obs: &Observation,
    gateway: &Gateway,
    cfg: &ScaffoldConfig,
) -> Result<(String, Action, bool), RuntimeError> {
    let request = build_scaffold_prompt(state, obs, cfg);
    let first = gateway.complete(&request)?;
    match parse_decision(&first) {
        Ok((thought, action)) => return Ok((thought, action, false)),
        Err(first_err) => {
            let mut retry = request.clone();
            retry.user_text.push_str(FORMAT_REMINDER);
            let second = gateway.complete(&retry)?;
            match parse_decision(&second) {
                Ok((thought, action)) => Ok((thought, action, false)),
                Err(second_err) => Ok((
                    format!(
                        "Model output could not be parsed as a decision \
                         (first: {first_err}; retry: {second_err})."
                    ),
                    Action::Fail,
                    true,
                )),
            }
        }
    }
}

/// Runs one episode: observe, decide, append history, execute; stops on
/// finish, fail, or the step limit. Finish and fail are never sent to the
/// environment.
pub fn run_episode<E: EnvironmentPort>(
    env: &mut E,
    task: &str,
    gateway: &Gateway,
    cfg: &AgentConfig,
) -> Result<RunRecord, RuntimeError> {
    let mut state = AgentState::new(task);
    let mut steps = Vec::new();
    let mut protocol_failure = false;

    let terminal = loop {
        let obs = env.observe()?;
        let started = Instant::now();
        let (thought, action, forced) = decide(&state, &obs, gateway, &cfg.scaffold)?;
        protocol_failure |= forced;
        state
            .history
            .push(HistoryEntry::new(thought.clone(), action.clone()));

        let env_result = if action.is_terminal() {
            None
        } else {
            Some(env.execute(&action)?)
        };
        steps.push(RunStep {
            observation_ref: obs.screenshot_ref.clone(),
            thought,
            action: action.clone(),
            action_text: render_action(&action),
            env_result,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        match action {
            Action::Finish => break TerminalCause::Finished,
            Action::Fail => break TerminalCause::Failed,
            _ if state.step_count() >= cfg.max_steps => break TerminalCause::StepLimit,
            _ => {}
        }
    };
    state.terminal = Some(terminal);

    Ok(RunRecord {
        task: task.to_string(),
        steps,
        terminal,
        protocol_failure,
    })
}

// ---------------------------------------------------------------------------
// Simulated environment
// ---------------------------------------------------------------------------

/// How a transition matches an incoming action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionMatcher {
    ClickWithin { x: u32, y: u32, width: u32, height: u32 },
    RightClickWithin { x: u32, y: u32, width: u32, height: u32 },
    DoubleClickWithin { x: u32, y: u32, width: u32, height: u32 },
    PressKey { key: String },
    Hotkey { keys: Vec<String> },
    TypeText { text: String },
    ScrollUp,
    ScrollDown,
}

impl ActionMatcher {
    fn within(x: u32, y: u32, rx: u32, ry: u32, w: u32, h: u32) -> bool {
        x >= rx && x < rx + w && y >= ry && y < ry + h
    }

    pub fn matches(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionMatcher::ClickWithin { x, y, width, height }, Action::Click { x: ax, y: ay }) => {
                Self::within(*ax, *ay, *x, *y, *width, *height)
            }
            (
                ActionMatcher::RightClickWithin { x, y, width, height },
                Action::RightClick { x: ax, y: ay },
            ) => Self::within(*ax, *ay, *x, *y, *width, *height),
            (
                ActionMatcher::DoubleClickWithin { x, y, width, height },
                Action::DoubleClick { x: ax, y: ay },
            ) => Self::within(*ax, *ay, *x, *y, *width, *height),
            (ActionMatcher::PressKey { key }, Action::PressKey { key: ak }) => {
                key.eq_ignore_ascii_case(ak)
            }
            (ActionMatcher::Hotkey { keys }, Action::Hotkey { keys: ak }) => {
                keys.len() == ak.len()
                    && keys
                        .iter()
                        .zip(ak)
                        .all(|(a, b)| a.eq_ignore_ascii_case(b))
            }
            (ActionMatcher::TypeText { text }, Action::TypeText { text: at }) => text == at,
            (ActionMatcher::ScrollUp, Action::Scroll { offset }) => *offset > 0,
            (ActionMatcher::ScrollDown, Action::Scroll { offset }) => *offset < 0,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub on: ActionMatcher,
    pub to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioState {
    pub screenshot_ref: String,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

/// A scripted state machine: named states, synthetic screenshots, and
/// action-matcher transitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub initial: String,
    pub states: BTreeMap<String, ScenarioState>,
    #[serde(default = "Resolution::default")]
    pub resolution: Resolution,
}

impl ScenarioScript {
    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, RuntimeError> {
        let script: ScenarioScript = serde_json::from_str(text)
            .map_err(|e| RuntimeError::ScenarioSchema(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !self.states.contains_key(&self.initial) {
            return Err(RuntimeError::ScenarioSchema(format!(
                "initial state {:?} not defined",
                self.initial
            )));
        }
        for (name, state) in &self.states {
            for t in &state.transitions {
                if !self.states.contains_key(&t.to) {
                    return Err(RuntimeError::ScenarioSchema(format!(
                        "state {name:?} transitions to undefined state {:?}",
                        t.to
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A restorable point-in-time copy of simulator state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimSnapshot {
    current: String,
    ticks: u64,
}

/// Reference [`EnvironmentPort`]: executes actions against the scripted state
/// machine. `wait` advances a tick counter and nothing else.
#[derive(Debug, Clone)]
pub struct SimulatedEnvironment {
    script: ScenarioScript,
    current: String,
    ticks: u64,
}

impl SimulatedEnvironment {
    pub fn new(script: ScenarioScript) -> Self {
        let current = script.initial.clone();
        Self {
            script,
            current,
            ticks: 0,
        }
    }

    pub fn current_state(&self) -> &str {
        &self.current
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            current: self.current.clone(),
            ticks: self.ticks,
        }
    }

    pub fn restore(&mut self, snapshot: &SimSnapshot) {
        self.current = snapshot.current.clone();
        self.ticks = snapshot.ticks;
    }

    /// Force a state, for interference testing. The state must exist.
    pub fn force_state(&mut self, state: &str) -> Result<(), RuntimeError> {
        if !self.script.states.contains_key(state) {
            return Err(RuntimeError::ScenarioSchema(format!(
                "unknown state {state:?}"
            )));
        }
        self.current = state.to_string();
        Ok(())
    }
}

impl EnvironmentPort for SimulatedEnvironment {
    fn observe(&mut self) -> Result<Observation, RuntimeError> {
        let state = &self.script.states[&self.current];
        Ok(Observation::new(
            state.screenshot_ref.clone(),
            self.script.resolution,
        ))
    }

    fn execute(&mut self, action: &Action) -> Result<ExecResult, RuntimeError> {
        if action.is_terminal() {
            return Err(RuntimeError::Environment(
                "terminal actions are not executable".into(),
            ));
        }
        if *action == Action::Wait {
            self.ticks += 1;
            return Ok(ExecResult::applied());
        }
        let state = &self.script.states[&self.current];
        if let Some(t) = state.transitions.iter().find(|t| t.on.matches(action)) {
            self.current = t.to.clone();
            Ok(ExecResult::applied())
        } else {
            Ok(ExecResult::rejected("no-transition"))
        }
    }

    fn resolution(&self) -> Resolution {
        self.script.resolution
    }
}

// ---------------------------------------------------------------------------
// Run record I/O
// ---------------------------------------------------------------------------

pub fn save_record<W: Write>(record: &RunRecord, mut sink: W) -> Result<(), RuntimeError> {
    writeln!(
        sink,
        "{}",
        serde_json::to_string(&serde_json::json!({
            "kind": "run",
            "task": record.task,
            "terminal": record.terminal,
            "protocol_failure": record.protocol_failure,
        }))
        .unwrap()
    )?;
    for step in &record.steps {
        writeln!(sink, "{}", serde_json::to_string(step).unwrap())?;
    }
    Ok(())
}

pub fn load_record<R: BufRead>(reader: R) -> Result<RunRecord, RuntimeError> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| RuntimeError::ScenarioSchema("empty run record".into()))??;
    let header: serde_json::Value = serde_json::from_str(&header_line)
        .map_err(|e| RuntimeError::ScenarioSchema(e.to_string()))?;
    let mut record = RunRecord {
        task: header["task"].as_str().unwrap_or_default().to_string(),
        steps: Vec::new(),
        terminal: serde_json::from_value(header["terminal"].clone())
            .map_err(|e| RuntimeError::ScenarioSchema(e.to_string()))?,
        protocol_failure: header["protocol_failure"].as_bool().unwrap_or(false),
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        record.steps.push(
            serde_json::from_str(&line).map_err(|e| RuntimeError::ScenarioSchema(e.to_string()))?,
        );
    }
    Ok(record)
}

/// Markdown replay of one episode.
pub fn export_markdown(record: &RunRecord) -> String {
    let mut out = format!("# Run: {}\n\n", record.task);
    out.push_str(&format!(
        "- terminal: **{:?}**\n- steps: {}\n",
        record.terminal,
        record.steps.len()
    ));
    for (i, step) in record.steps.iter().enumerate() {
        out.push_str(&format!("\n## Step {i}\n\n"));
        out.push_str(&format!("![step {i}]({})\n\n", step.observation_ref));
        out.push_str(&format!("**Thought:** {}\n\n", step.thought));
        out.push_str(&format!("**Action:** `{}`\n", step.action_text));
        if let Some(result) = &step.env_result {
            if !result.applied {
                out.push_str(&format!(
                    "\n*Rejected: {}*\n",
                    result.reason.as_deref().unwrap_or("unknown")
                ));
            }
        }
    }
    out
}
