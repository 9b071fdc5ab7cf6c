//! Benchmark runner over simulated tasks: snapshot-isolated execution,
//! initial-state validation with retries, feasibility-aware scoring, and
//! aggregate reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway};
use crate::runtime::{
    run_episode, AgentConfig, EnvironmentPort, RunRecord, RuntimeError, ScenarioScript,
    SimulatedEnvironment,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("runtime failure: {0}")]
    Runtime(#[from] RuntimeError),
    #[error("task spec error: {0}")]
    Spec(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

/// One initial-state check. A task passes validation only when every
/// validator passes (rule checks and the model judge are ANDed).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitValidator {
    AlwaysPass,
    AlwaysFail,
    /// Fails independently with `fail_probability` on each attempt, seeded so
    /// whole runs are reproducible.
    RandomFault { fail_probability: f64, seed: u64 },
    /// Asks the model whether the screen matches `question`; passes on a
    /// reply starting with "yes" (case-insensitive).
    ModelJudge { question: String },
}

/// Success predicate applied after the episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evaluator {
    /// The environment ends in the named state.
    ReachState { state: String },
    /// A fail action appears anywhere in the run. The only evaluator allowed
    /// for infeasible tasks.
    FailActionEmitted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub app_category: String,
    pub feasibility: Feasibility,
    pub task: String,
    pub scenario: ScenarioScript,
    #[serde(default)]
    pub init_validators: Vec<InitValidator>,
    pub evaluator: Evaluator,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario.validate()?;
        match (self.feasibility, &self.evaluator) {
            (Feasibility::Infeasible, Evaluator::FailActionEmitted) => Ok(()),
            (Feasibility::Infeasible, _) => Err(HarnessError::Spec(format!(
                "task {:?} is infeasible but not scored by the fail-action rule",
                self.id
            ))),
            (Feasibility::Feasible, Evaluator::FailActionEmitted) => Err(HarnessError::Spec(
                format!("task {:?} is feasible but scored by the fail-action rule", self.id),
            )),
            (Feasibility::Feasible, _) => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let spec: TaskSpec =
            serde_json::from_str(&text).map_err(|e| HarnessError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStatus {
    Ready,
    InitFailure,
}

fn fault_rng(seed: u64, task_id: &str, nonce: u64, attempt: u32) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(task_id.as_bytes());
    hasher.update(nonce.to_le_bytes());
    hasher.update(attempt.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed_bytes)
}

fn check_validator(
    validator: &InitValidator,
    env: &mut SimulatedEnvironment,
    task_id: &str,
    nonce: u64,
    attempt: u32,
    gateway: &Gateway,
) -> Result<bool, HarnessError> {
    match validator {
        InitValidator::AlwaysPass => Ok(true),
        InitValidator::AlwaysFail => Ok(false),
        InitValidator::RandomFault {
            fail_probability,
            seed,
        } => {
            let mut rng = fault_rng(*seed, task_id, nonce, attempt);
            Ok(rng.gen::<f64>() >= *fail_probability)
        }
        InitValidator::ModelJudge { question } => {
            let obs = env.observe()?;
            let reply = gateway
                .complete(&ChatRequest {
                    system_text: "You are verifying that a computer environment is correctly \
                                  configured before a task starts. Answer with \"yes\" or \"no\" \
                                  only."
                        .to_string(),
                    user_text: question.clone(),
                    images: vec![obs.screenshot_ref],
                    temperature: 0.0,
                    max_tokens: 8,
                    slot: None,
                })
                .map_err(RuntimeError::Gateway)?;
            Ok(reply.trim().to_ascii_lowercase().starts_with("yes"))
        }
    }
}

/// Runs the task's init validators against a freshly restored environment,
/// restoring the snapshot and retrying on failure, up to `max_attempts`
/// attempts in total. Returns the status and the number of attempts used.
pub fn validate_init(
    env: &mut SimulatedEnvironment,
    spec: &TaskSpec,
    gateway: &Gateway,
    max_attempts: u32,
    nonce: u64,
) -> Result<(InitStatus, u32), HarnessError> {
    let pristine = env.snapshot();
    let max_attempts = max_attempts.max(1);
    for attempt in 1..=max_attempts {
        env.restore(&pristine);
        let mut ok = true;
        for validator in &spec.init_validators {
            if !check_validator(validator, env, &spec.id, nonce, attempt, gateway)? {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok((InitStatus::Ready, attempt));
        }
    }
    Ok((InitStatus::InitFailure, max_attempts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Failure,
    InitFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub app_category: String,
    pub feasibility: Feasibility,
    pub outcome: Outcome,
    pub steps_used: usize,
    pub init_attempts: u32,
}

fn evaluate(spec: &TaskSpec, env: &SimulatedEnvironment, record: &RunRecord) -> bool {
    match &spec.evaluator {
        Evaluator::ReachState { state } => env.current_state() == state,
        Evaluator::FailActionEmitted => record.emitted_fail(),
    }
}

/// Runs one task end to end in its own fresh environment: restore, validate
/// init, run the episode, apply the evaluator.
pub fn run_task(
    spec: &TaskSpec,
    gateway: &Gateway,
    agent_cfg: &AgentConfig,
    nonce: u64,
) -> Result<TaskResult, HarnessError> {
    spec.validate()?;
    let mut env = SimulatedEnvironment::new(spec.scenario.clone());
    let pristine = env.snapshot();
    env.restore(&pristine);
    let (status, init_attempts) = validate_init(&mut env, spec, gateway, 3, nonce)?;
    if status == InitStatus::InitFailure {
        return Ok(TaskResult {
            task_id: spec.id.clone(),
            app_category: spec.app_category.clone(),
            feasibility: spec.feasibility,
            outcome: Outcome::InitFailure,
            steps_used: 0,
            init_attempts,
        });
    }
    env.restore(&pristine);
    let record = run_episode(&mut env, &spec.task, gateway, agent_cfg)?;
    let success = evaluate(spec, &env, &record);
    Ok(TaskResult {
        task_id: spec.id.clone(),
        app_category: spec.app_category.clone(),
        feasibility: spec.feasibility,
        outcome: if success {
            Outcome::Success
        } else {
            Outcome::Failure
        },
        steps_used: record.steps.len(),
        init_attempts,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuitePolicy {
    /// Score infeasible tasks under the fail-action rule instead of dropping
    /// them from the suite.
    pub include_infeasible: bool,
    /// Count init failures against the agent (the conservative default)
    /// rather than excluding them from the denominator.
    pub count_init_failures: bool,
    pub seed: u64,
}

impl Default for SuitePolicy {
    fn default() -> Self {
        Self {
            include_infeasible: false,
            count_init_failures: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub successes: usize,
    pub scored: usize,
    pub init_failures: usize,
}

impl CategoryStats {
    pub fn success_pct(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            100.0 * self.successes as f64 / self.scored as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    pub max_steps: usize,
    pub include_infeasible: bool,
    pub count_init_failures: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<TaskResult>,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub total: CategoryStats,
    pub config: ReportConfig,
}

impl EvalReport {
    /// Rebuilds the aggregates from the per-task rows; aggregates are never
    /// authored independently of the rows.
    fn aggregate(rows: Vec<TaskResult>, config: ReportConfig) -> Self {
        let mut per_category: BTreeMap<String, CategoryStats> = BTreeMap::new();
        let mut total = CategoryStats::default();
        for row in &rows {
            let cat = per_category.entry(row.app_category.clone()).or_default();
            let scored = match row.outcome {
                Outcome::Success => {
                    cat.successes += 1;
                    total.successes += 1;
                    true
                }
                Outcome::Failure => true,
                Outcome::InitFailure => {
                    cat.init_failures += 1;
                    total.init_failures += 1;
                    config.count_init_failures
                }
            };
            if scored {
                cat.scored += 1;
                total.scored += 1;
            }
        }
        Self {
            rows,
            per_category,
            total,
            config,
        }
    }

    pub fn total_success_pct(&self) -> f64 {
        self.total.success_pct()
    }

    /// Markdown table: one category per column plus the total.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Evaluation report\n\n");
        out.push_str("| Category | Success % | Successes / Scored | Init failures |\n");
        out.push_str("|---|---|---|---|\n");
        for (cat, stats) in &self.per_category {
            out.push_str(&format!(
                "| {} | {:.1} | {}/{} | {} |\n",
                cat,
                stats.success_pct(),
                stats.successes,
                stats.scored,
                stats.init_failures
            ));
        }
        out.push_str(&format!(
            "| **Total** | **{:.1}** | {}/{} | {} |\n",
            self.total.success_pct(),
            self.total.successes,
            self.total.scored,
            self.total.init_failures
        ));
        out.push_str("\n| Task | Category | Feasibility | Outcome | Steps |\n");
        out.push_str("|---|---|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:?} | {:?} | {} |\n",
                row.task_id, row.app_category, row.feasibility, row.outcome, row.steps_used
            ));
        }
        out
    }
}

/// Runs every task in the suite, each in its own freshly constructed and
/// restored environment, and aggregates the report. Infeasible tasks are
/// dropped up front unless the policy includes them.
pub fn run_suite(
    specs: &[TaskSpec],
    gateway: &Gateway,
    agent_cfg: &AgentConfig,
    policy: &SuitePolicy,
) -> Result<EvalReport, HarnessError> {
    let mut rows = Vec::new();
    for spec in specs {
        if spec.feasibility == Feasibility::Infeasible && !policy.include_infeasible {
            continue;
        }
        rows.push(run_task(spec, gateway, agent_cfg, policy.seed)?);
    }
    Ok(EvalReport::aggregate(
        rows,
        ReportConfig {
            max_steps: agent_cfg.max_steps,
            include_infeasible: policy.include_infeasible,
            count_init_failures: policy.count_init_failures,
            seed: policy.seed,
        },
    ))
}

/// Suite manifest: a JSON list of task-spec file paths, resolved relative to
/// the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub tasks: Vec<String>,
}

pub fn load_suite(manifest_path: &Path) -> Result<Vec<TaskSpec>, HarnessError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: SuiteManifest =
        serde_json::from_str(&text).map_err(|e| HarnessError::Spec(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .tasks
        .iter()
        .map(|rel| TaskSpec::load(&base.join(rel)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::tests::{gw, three_state_script};

    fn feasible_spec(id: &str) -> TaskSpec {
        TaskSpec {
            id: id.into(),
            app_category: "Editor".into(),
            feasibility: Feasibility::Feasible,
            task: "reach the done screen".into(),
            scenario: three_state_script(),
            init_validators: vec![InitValidator::AlwaysPass],
            evaluator: Evaluator::ReachState {
                state: "done".into(),
            },
        }
    }

    fn infeasible_spec(id: &str) -> TaskSpec {
        TaskSpec {
            id: id.into(),
            app_category: "Browser".into(),
            feasibility: Feasibility::Infeasible,
            task: "delete a file that does not exist".into(),
            scenario: three_state_script(),
            init_validators: vec![],
            evaluator: Evaluator::FailActionEmitted,
        }
    }

    fn solver_gateway() -> Gateway {
        gw(vec![
            "Open the menu.\nAction: click (20, 20)".into(),
            "Confirm.\nAction: press key: enter".into(),
            "Done.\nAction: finish".into(),
        ])
    }

    fn always_fail_gateway() -> Gateway {
        gw(vec!["This task cannot be done.\nAction: fail".into()])
    }

    #[test]
    fn always_pass_is_ready_on_first_attempt() {
        let spec = feasible_spec("t");
        let mut env = SimulatedEnvironment::new(spec.scenario.clone());
        let (status, attempts) =
            validate_init(&mut env, &spec, &solver_gateway(), 3, 0).unwrap();
        assert_eq!(status, InitStatus::Ready);
        assert_eq!(attempts, 1);
    }

    #[test]
    fn always_fail_exhausts_exactly_three_attempts() {
        let mut spec = feasible_spec("t");
        spec.init_validators = vec![InitValidator::AlwaysFail];
        let mut env = SimulatedEnvironment::new(spec.scenario.clone());
        let (status, attempts) =
            validate_init(&mut env, &spec, &solver_gateway(), 3, 0).unwrap();
        assert_eq!(status, InitStatus::InitFailure);
        assert_eq!(attempts, 3);
    }

    #[test]
    fn random_fault_extremes() {
        let mut spec = feasible_spec("t");
        spec.init_validators = vec![InitValidator::RandomFault {
            fail_probability: 1.0,
            seed: 7,
        }];
        let mut env = SimulatedEnvironment::new(spec.scenario.clone());
        let (status, _) = validate_init(&mut env, &spec, &solver_gateway(), 3, 0).unwrap();
        assert_eq!(status, InitStatus::InitFailure);

        spec.init_validators = vec![InitValidator::RandomFault {
            fail_probability: 0.0,
            seed: 7,
        }];
        let (status, attempts) =
            validate_init(&mut env, &spec, &solver_gateway(), 3, 0).unwrap();
        assert_eq!(status, InitStatus::Ready);
        assert_eq!(attempts, 1);
    }

    #[test]
    fn random_fault_failure_rate_is_roughly_cubed() {
        let mut spec = feasible_spec("t");
        spec.init_validators = vec![InitValidator::RandomFault {
            fail_probability: 0.3,
            seed: 42,
        }];
        let gateway = solver_gateway();
        let mut env = SimulatedEnvironment::new(spec.scenario.clone());
        let trials = 2_000;
        let failures = (0..trials)
            .filter(|&nonce| {
                validate_init(&mut env, &spec, &gateway, 3, nonce).unwrap().0
                    == InitStatus::InitFailure
            })
            .count();
        let rate = failures as f64 / trials as f64;
        assert!((rate - 0.027).abs() < 0.012, "rate {rate}");
    }

    #[test]
    fn model_judge_verdicts_gate_init() {
        let mut spec = feasible_spec("t");
        spec.init_validators = vec![InitValidator::ModelJudge {
            question: "Is the home screen visible?".into(),
        }];
        let mut env = SimulatedEnvironment::new(spec.scenario.clone());
        let (status, _) =
            validate_init(&mut env, &spec, &gw(vec!["Yes.".into()]), 3, 0).unwrap();
        assert_eq!(status, InitStatus::Ready);
        let (status, attempts) =
            validate_init(&mut env, &spec, &gw(vec!["no".into()]), 3, 0).unwrap();
        assert_eq!(status, InitStatus::InitFailure);
        assert_eq!(attempts, 3);
    }

    #[test]
    fn feasible_solver_succeeds_via_state_predicate() {
        let result = run_task(
            &feasible_spec("t"),
            &solver_gateway(),
            &AgentConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(result.outcome, Outcome::Success);
        assert_eq!(result.steps_used, 3);
    }

    #[test]
    fn infeasible_scoring_follows_fail_action_rule() {
        let spec = infeasible_spec("inf");
        let fail = run_task(&spec, &always_fail_gateway(), &AgentConfig::default(), 0).unwrap();
        assert_eq!(fail.outcome, Outcome::Success);

        let finish = run_task(
            &spec,
            &gw(vec!["Looks fine.\nAction: finish".into()]),
            &AgentConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(finish.outcome, Outcome::Failure);
    }

    #[test]
    fn mismatched_feasibility_and_evaluator_is_rejected() {
        let mut spec = feasible_spec("bad");
        spec.evaluator = Evaluator::FailActionEmitted;
        assert!(spec.validate().is_err());
        let mut spec = infeasible_spec("bad2");
        spec.evaluator = Evaluator::ReachState {
            state: "done".into(),
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn always_fail_agent_reproduces_hacking_arithmetic() {
        let mut specs: Vec<TaskSpec> = (0..10).map(|i| feasible_spec(&format!("f{i}"))).collect();
        specs.extend((0..5).map(|i| infeasible_spec(&format!("i{i}"))));
        let gateway = always_fail_gateway();

        let include = run_suite(
            &specs,
            &gateway,
            &AgentConfig::default(),
            &SuitePolicy {
                include_infeasible: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(include.total.successes, 5);
        assert_eq!(include.total.scored, 15);
        assert!((include.total_success_pct() - 100.0 / 3.0).abs() < 1e-9);

        let exclude = run_suite(
            &specs,
            &gateway,
            &AgentConfig::default(),
            &SuitePolicy::default(),
        )
        .unwrap();
        assert_eq!(exclude.total.scored, 10);
        assert_eq!(exclude.total_success_pct(), 0.0);
    }

    #[test]
    fn init_failure_policy_controls_denominator() {
        let mut bad = feasible_spec("bad-init");
        bad.init_validators = vec![InitValidator::AlwaysFail];
        let specs = vec![feasible_spec("ok"), bad];
        let gateway = solver_gateway();

        let counted = run_suite(
            &specs,
            &gateway,
            &AgentConfig::default(),
            &SuitePolicy::default(),
        )
        .unwrap();
        assert_eq!(counted.total.scored, 2);
        assert_eq!(counted.total.init_failures, 1);
        assert!((counted.total_success_pct() - 50.0).abs() < 1e-9);

        let excluded = run_suite(
            &specs,
            &gateway,
            &AgentConfig::default(),
            &SuitePolicy {
                count_init_failures: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(excluded.total.scored, 1);
        assert!((excluded.total_success_pct() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn report_aggregates_recompute_from_rows() {
        let specs = vec![
            feasible_spec("a"),
            feasible_spec("b"),
            infeasible_spec("c"),
        ];
        let report = run_suite(
            &specs,
            &solver_gateway(),
            &AgentConfig::default(),
            &SuitePolicy {
                include_infeasible: true,
                ..Default::default()
            },
        )
        .unwrap();
        let per_cat_scored: usize = report.per_category.values().map(|c| c.scored).sum();
        let per_cat_successes: usize = report.per_category.values().map(|c| c.successes).sum();
        assert_eq!(per_cat_scored, report.total.scored);
        assert_eq!(per_cat_successes, report.total.successes);
        assert_eq!(report.rows.len(), 3);
        let md = report.to_markdown();
        assert!(md.contains("| Editor |"));
        assert!(md.contains("**Total**"));
    }

    #[test]
    fn suite_outcomes_are_order_independent() {
        let mut specs = vec![
            feasible_spec("a"),
            infeasible_spec("b"),
            feasible_spec("c"),
        ];
        let gateway = always_fail_gateway();
        let policy = SuitePolicy {
            include_infeasible: true,
            ..Default::default()
        };
        let first = run_suite(&specs, &gateway, &AgentConfig::default(), &policy).unwrap();
        specs.reverse();
        let second = run_suite(&specs, &gateway, &AgentConfig::default(), &policy).unwrap();
        let mut a: Vec<_> = first.rows.iter().map(|r| (r.task_id.clone(), r.outcome)).collect();
        let mut b: Vec<_> = second.rows.iter().map(|r| (r.task_id.clone(), r.outcome)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
