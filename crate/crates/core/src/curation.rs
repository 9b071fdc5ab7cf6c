//! Rule-based step/trajectory filtering and benchmark decontamination.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::trajectory::{Terminal, Trajectory};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("embedder unavailable for tasks {task_ids:?}: {source}")]
    EmbedderUnavailable {
        task_ids: Vec<String>,
        source: GatewayError,
    },
    #[error("degenerate embedding (zero vector) for {0:?}")]
    DegenerateEmbedding(String),
}

/// Axis-aligned screen rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.width && py >= self.y && py < self.y + self.height
    }
}

/// The built-in step filter rules, individually toggleable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleSet {
    /// Drop interactions with the recorder's own UI: clicks inside the
    /// tracker window region or on its control elements.
    pub tracker_ui: bool,
    pub tracker_region: Option<Rect>,
    pub tracker_element_names: Vec<String>,
    /// Collapse consecutive duplicate coordinate actions.
    pub duplicate_collapse: bool,
    /// Drop steps whose screenshot cannot be resolved.
    pub unresolvable_screenshot: bool,
}

impl Default for RuleSet {
    fn default() -> Self {
        Self {
            tracker_ui: true,
            tracker_region: None,
            tracker_element_names: vec![
                "Start".to_string(),
                "Finish".to_string(),
                "Fail".to_string(),
                "Next Task".to_string(),
            ],
            duplicate_collapse: true,
            unresolvable_screenshot: false,
        }
    }
}

/// Trajectory-level filter configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRules {
    pub max_steps: usize,
    pub success_only: bool,
}

impl Default for TrajectoryRules {
    fn default() -> Self {
        Self {
            max_steps: 100,
            success_only: false,
        }
    }
}

/// What filtering removed from one trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub trajectory_id: String,
    /// (original step index, rule name) pairs.
    pub dropped_steps: Vec<(usize, String)>,
    pub dropped_trajectory: Option<String>,
}

impl FilterReport {
    pub fn is_empty(&self) -> bool {
        self.dropped_steps.is_empty() && self.dropped_trajectory.is_none()
    }
}

/// Resolves screenshot references; stubbed in tests.
pub trait ScreenshotResolver {
    fn resolvable(&self, screenshot_ref: &str) -> bool;
}

/// Treats the reference as a path under a base directory.
pub struct FsResolver<'a> {
    pub base: &'a Path,
}

impl ScreenshotResolver for FsResolver<'_> {
    fn resolvable(&self, screenshot_ref: &str) -> bool {
        self.base.join(screenshot_ref).exists()
    }
}

/// Accepts every reference; used when screenshots are not on disk.
pub struct AcceptAll;

impl ScreenshotResolver for AcceptAll {
    fn resolvable(&self, _screenshot_ref: &str) -> bool {
        true
    }
}

fn click_point(action: &crate::action::Action) -> Option<(u32, u32)> {
    use crate::action::Action;
    match *action {
        Action::Click { x, y } | Action::RightClick { x, y } | Action::DoubleClick { x, y } => {
            Some((x, y))
        }
        _ => None,
    }
}

/// Applies the step rules to one trajectory, renumbering surviving steps.
pub fn filter_steps(
    t: &Trajectory,
    rules: &RuleSet,
    resolver: &dyn ScreenshotResolver,
) -> (Trajectory, FilterReport) {
    let mut report = FilterReport {
        trajectory_id: t.id.clone(),
        ..Default::default()
    };
    let mut kept: Vec<crate::trajectory::Step> = Vec::with_capacity(t.steps.len());

    for step in &t.steps {
        if rules.tracker_ui {
            let on_tracker_element = step
                .element_name
                .as_deref()
                .is_some_and(|name| rules.tracker_element_names.iter().any(|n| n == name));
            let in_tracker_region = rules.tracker_region.is_some_and(|region| {
                click_point(&step.action).is_some_and(|(x, y)| region.contains(x, y))
            });
            if (on_tracker_element && click_point(&step.action).is_some()) || in_tracker_region {
                report.dropped_steps.push((step.index, "tracker-ui".into()));
                continue;
            }
        }
        if rules.unresolvable_screenshot && !resolver.resolvable(&step.observation.screenshot_ref) {
            report
                .dropped_steps
                .push((step.index, "unresolvable-screenshot".into()));
            continue;
        }
        if rules.duplicate_collapse {
            if let Some(prev) = kept.last() {
                if step.action.is_coordinate() && prev.action == step.action {
                    report
                        .dropped_steps
                        .push((step.index, "duplicate-collapse".into()));
                    continue;
                }
            }
        }
        kept.push(step.clone());
    }

    for (i, step) in kept.iter_mut().enumerate() {
        step.index = i;
    }
    let filtered = Trajectory {
        steps: kept,
        ..t.clone()
    };
    (filtered, report)
}

/// Applies step filtering then drops whole trajectories that come out empty,
/// exceed the step cap, or fail-terminate under success-only mode.
pub fn filter_trajectories(
    trajectories: &[Trajectory],
    rules: &RuleSet,
    traj_rules: &TrajectoryRules,
    resolver: &dyn ScreenshotResolver,
) -> (Vec<Trajectory>, Vec<FilterReport>) {
    let mut kept = Vec::new();
    let mut reports = Vec::new();
    for t in trajectories {
        let (filtered, mut report) = filter_steps(t, rules, resolver);
        if filtered.steps.is_empty() {
            report.dropped_trajectory = Some("empty-after-filter".into());
        } else if filtered.steps.len() > traj_rules.max_steps {
            report.dropped_trajectory = Some("step-cap".into());
        } else if traj_rules.success_only && filtered.terminal == Terminal::Fail {
            report.dropped_trajectory = Some("fail-terminated".into());
        }
        if report.dropped_trajectory.is_none() {
            kept.push(filtered);
        }
        reports.push(report);
    }
    (kept, reports)
}

/// Lower-cases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation()))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard similarity of the two n-gram sets. If either set is empty, returns
/// 1 when both token sequences are equal and 0 otherwise.
pub fn ngram_overlap(a: &str, b: &str, n: usize) -> f64 {
    assert!(n >= 1, "n-gram size must be at least 1");
    let ta = tokenize(a);
    let tb = tokenize(b);
    let grams = |tokens: &[String]| -> BTreeSet<String> {
        if tokens.len() < n {
            return BTreeSet::new();
        }
        tokens.windows(n).map(|w| w.join(" ")).collect()
    };
    let ga = grams(&ta);
    let gb = grams(&tb);
    if ga.is_empty() || gb.is_empty() {
        return if ta == tb { 1.0 } else { 0.0 };
    }
    let intersection = ga.intersection(&gb).count();
    let union = ga.len() + gb.len() - intersection;
    intersection as f64 / union as f64
}

/// Cosine similarity of two embedding vectors, normalized before the dot
/// product. A zero vector is a degenerate embedding.
pub fn cosine_similarity(a: &[f64], b: &[f64], label: &str) -> Result<f64, CurationError> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return Err(CurationError::DegenerateEmbedding(label.to_string()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// A training task compared against the benchmark set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskText {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecontaminationThresholds {
    pub ngram_n: usize,
    pub ngram_max: f64,
    pub cosine_max: f64,
}

impl Default for DecontaminationThresholds {
    fn default() -> Self {
        Self {
            ngram_n: 3,
            ngram_max: 0.5,
            cosine_max: 0.85,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecontaminationVerdict {
    pub task_id: String,
    pub matched_benchmark_task: Option<String>,
    pub ngram_score: f64,
    pub semantic_score: f64,
    pub removed: bool,
}

/// Port for embedding computation, stubbed in tests.
pub trait EmbeddingPort {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

impl EmbeddingPort for crate::gateway::Gateway {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        crate::gateway::Gateway::embed(self, texts)
    }
}

impl EmbeddingPort for crate::gateway::MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        crate::gateway::EmbeddingTransport::embed(self, texts)
    }
}

/// Scores every task against every benchmark task; a task is removed iff its
/// best n-gram overlap or best cosine similarity reaches its threshold.
pub fn decontaminate(
    tasks: &[TaskText],
    benchmark_tasks: &[TaskText],
    thresholds: &DecontaminationThresholds,
    embedder: &dyn EmbeddingPort,
) -> Result<Vec<DecontaminationVerdict>, CurationError> {
    if benchmark_tasks.is_empty() {
        return Ok(tasks
            .iter()
            .map(|t| DecontaminationVerdict {
                task_id: t.id.clone(),
                matched_benchmark_task: None,
                ngram_score: 0.0,
                semantic_score: 0.0,
                removed: false,
            })
            .collect());
    }

    let embed_all = |items: &[TaskText]| -> Result<Vec<Vec<f64>>, CurationError> {
        let texts: Vec<String> = items.iter().map(|t| t.text.clone()).collect();
        embedder
            .embed(&texts)
            .map_err(|source| CurationError::EmbedderUnavailable {
                task_ids: items.iter().map(|t| t.id.clone()).collect(),
                source,
            })
    };
    let task_vecs = embed_all(tasks)?;
    let bench_vecs = embed_all(benchmark_tasks)?;

    let mut verdicts = Vec::with_capacity(tasks.len());
    for (task, tv) in tasks.iter().zip(&task_vecs) {
        let mut best_ngram = 0.0_f64;
        let mut best_cosine = f64::NEG_INFINITY;
        let mut best_match: Option<&TaskText> = None;
        let mut best_score = f64::NEG_INFINITY;
        for (bench, bv) in benchmark_tasks.iter().zip(&bench_vecs) {
            let ng = ngram_overlap(&task.text, &bench.text, thresholds.ngram_n);
            let cos = cosine_similarity(tv, bv, &task.id)?;
            best_ngram = best_ngram.max(ng);
            best_cosine = best_cosine.max(cos);
            let evidence = ng.max(cos);
            if evidence > best_score {
                best_score = evidence;
                best_match = Some(bench);
            }
        }
        let removed = best_ngram >= thresholds.ngram_max || best_cosine >= thresholds.cosine_max;
        verdicts.push(DecontaminationVerdict {
            task_id: task.id.clone(),
            matched_benchmark_task: best_match.map(|b| b.id.clone()),
            ngram_score: best_ngram,
            semantic_score: best_cosine,
            removed,
        });
    }
    Ok(verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{Action, Resolution};
    use crate::gateway::MockEmbedder;
    use crate::trajectory::{Observation, Step, StepSource};
    use std::collections::BTreeMap;

    fn step(index: usize, action: Action, element: Option<&str>) -> Step {
        Step {
            index,
            observation: Observation::new(format!("s{index}.png"), Resolution::default()),
            thought: None,
            action,
            element_name: element.map(str::to_string),
            source: StepSource::Human,
        }
    }

    fn traj(actions: Vec<(Action, Option<&str>)>) -> Trajectory {
        Trajectory {
            id: "t".into(),
            task_description: "task".into(),
            steps: actions
                .into_iter()
                .enumerate()
                .map(|(i, (a, e))| step(i, a, e))
                .collect(),
            terminal: Terminal::Finish,
            annotator_meta: BTreeMap::new(),
        }
    }

    #[test]
    fn tracker_start_click_is_dropped() {
        let t = traj(vec![
            (Action::Click { x: 5, y: 5 }, Some("Start")),
            (Action::Click { x: 100, y: 100 }, None),
            (Action::Finish, None),
        ]);
        let (filtered, report) = filter_steps(&t, &RuleSet::default(), &AcceptAll);
        assert_eq!(filtered.steps.len(), 2);
        assert_eq!(report.dropped_steps, vec![(0, "tracker-ui".to_string())]);
        assert_eq!(filtered.steps[0].index, 0);
    }

    #[test]
    fn consecutive_duplicate_clicks_collapse() {
        let t = traj(vec![
            (Action::Click { x: 1, y: 1 }, None),
            (Action::Wait, None),
            (Action::Click { x: 400, y: 300 }, None),
            (Action::Click { x: 400, y: 300 }, None),
            (Action::Finish, None),
        ]);
        let (filtered, report) = filter_steps(&t, &RuleSet::default(), &AcceptAll);
        assert_eq!(filtered.steps.len(), 4);
        assert_eq!(report.dropped_steps, vec![(3, "duplicate-collapse".to_string())]);
    }

    #[test]
    fn no_rule_firing_is_identity() {
        let t = traj(vec![
            (Action::Click { x: 1, y: 1 }, None),
            (Action::TypeText { text: "hi".into() }, None),
            (Action::Finish, None),
        ]);
        let (filtered, report) = filter_steps(&t, &RuleSet::default(), &AcceptAll);
        assert_eq!(filtered, t);
        assert!(report.is_empty());
    }

    #[test]
    fn filtering_is_idempotent() {
        let t = traj(vec![
            (Action::Click { x: 5, y: 5 }, Some("Start")),
            (Action::Click { x: 2, y: 2 }, None),
            (Action::Click { x: 2, y: 2 }, None),
            (Action::Finish, None),
        ]);
        let rules = RuleSet::default();
        let (once, _) = filter_steps(&t, &rules, &AcceptAll);
        let (twice, report) = filter_steps(&once, &rules, &AcceptAll);
        assert_eq!(once, twice);
        assert!(report.is_empty());
    }

    #[test]
    fn trajectory_level_drops() {
        let empty_after = traj(vec![(Action::Click { x: 1, y: 1 }, Some("Start"))]);
        let long = traj(
            std::iter::repeat((Action::Wait, None))
                .take(150)
                .collect::<Vec<_>>(),
        );
        let mut failed = traj(vec![(Action::Fail, None)]);
        failed.terminal = Terminal::Fail;

        let traj_rules = TrajectoryRules {
            max_steps: 100,
            success_only: true,
        };
        let (kept, reports) = filter_trajectories(
            &[empty_after, long, failed],
            &RuleSet::default(),
            &traj_rules,
            &AcceptAll,
        );
        assert!(kept.is_empty());
        let reasons: Vec<_> = reports
            .iter()
            .filter_map(|r| r.dropped_trajectory.clone())
            .collect();
        assert_eq!(reasons, vec!["empty-after-filter", "step-cap", "fail-terminated"]);
    }

    #[test]
    fn unresolvable_screenshots_drop_steps() {
        struct NoneResolve;
        impl ScreenshotResolver for NoneResolve {
            fn resolvable(&self, _: &str) -> bool {
                false
            }
        }
        let t = traj(vec![(Action::Wait, None), (Action::Finish, None)]);
        let rules = RuleSet {
            unresolvable_screenshot: true,
            ..RuleSet::default()
        };
        let (filtered, report) = filter_steps(&t, &rules, &NoneResolve);
        assert!(filtered.steps.is_empty());
        assert_eq!(report.dropped_steps.len(), 2);
    }

    #[test]
    fn ngram_overlap_basics() {
        assert_eq!(ngram_overlap("Open Chrome now", "open chrome now", 3), 1.0);
        assert_eq!(ngram_overlap("alpha beta gamma", "delta epsilon zeta", 2), 0.0);
        // Hand enumeration: trigram sets of size 3 each, intersection 2, union 4.
        let s = ngram_overlap(
            "open chrome and clear history",
            "open chrome and clear cookies",
            3,
        );
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ngram_overlap_short_inputs() {
        // Fewer tokens than n: empty gram sets, equality decides.
        assert_eq!(ngram_overlap("hi", "hi", 3), 1.0);
        assert_eq!(ngram_overlap("hi", "yo", 3), 0.0);
    }

    #[test]
    fn cosine_cases() {
        let a = vec![1.0, 2.0, 3.0];
        assert!((cosine_similarity(&a, &a, "x").unwrap() - 1.0).abs() < 1e-6);
        let o1 = vec![1.0, 0.0];
        let o2 = vec![0.0, 5.0];
        assert!((cosine_similarity(&o1, &o2, "x").unwrap()).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &o1, "z"),
            Err(CurationError::DegenerateEmbedding(_))
        ));
    }

    fn task(id: &str, text: &str) -> TaskText {
        TaskText {
            id: id.into(),
            text: text.into(),
        }
    }

    #[test]
    fn identical_task_is_removed_with_full_ngram_score() {
        let embedder = MockEmbedder::hash_based(16);
        let verdicts = decontaminate(
            &[task("a", "open chrome and clear the history")],
            &[task("b1", "open chrome and clear the history")],
            &DecontaminationThresholds::default(),
            &embedder,
        )
        .unwrap();
        assert!(verdicts[0].removed);
        assert_eq!(verdicts[0].ngram_score, 1.0);
        assert_eq!(verdicts[0].matched_benchmark_task.as_deref(), Some("b1"));
    }

    #[test]
    fn paraphrase_removed_via_semantic_branch() {
        // Stub embedder constructed so the pair scores cosine 0.9 exactly.
        let theta = 0.9_f64.acos();
        let embedder = MockEmbedder::default()
            .with_entry("wipe browsing data", vec![1.0, 0.0])
            .with_entry("clear the browser history", vec![theta.cos(), theta.sin()]);
        let verdicts = decontaminate(
            &[task("a", "wipe browsing data")],
            &[task("b", "clear the browser history")],
            &DecontaminationThresholds::default(),
            &embedder,
        )
        .unwrap();
        assert!(verdicts[0].removed);
        assert!(verdicts[0].ngram_score < 0.5);
        assert!((verdicts[0].semantic_score - 0.9).abs() < 1e-9);
    }

    #[test]
    fn unrelated_task_is_kept() {
        let embedder = MockEmbedder::default()
            .with_entry("resize the image in paint", vec![1.0, 0.0])
            .with_entry("mute the system volume", vec![0.0, 1.0]);
        let verdicts = decontaminate(
            &[task("a", "resize the image in paint")],
            &[task("b", "mute the system volume")],
            &DecontaminationThresholds::default(),
            &embedder,
        )
        .unwrap();
        assert!(!verdicts[0].removed);
    }

    #[test]
    fn empty_benchmark_set_removes_nothing() {
        let embedder = MockEmbedder::default();
        let verdicts = decontaminate(
            &[task("a", "anything")],
            &[],
            &DecontaminationThresholds::default(),
            &embedder,
        )
        .unwrap();
        assert_eq!(verdicts.len(), 1);
        assert!(!verdicts[0].removed);
    }

    #[test]
    fn embedder_failure_carries_task_ids() {
        let embedder = MockEmbedder::default(); // dimension 0: nothing scripted
        let err = decontaminate(
            &[task("a", "x")],
            &[task("b", "y")],
            &DecontaminationThresholds::default(),
            &embedder,
        )
        .unwrap_err();
        match err {
            CurationError::EmbedderUnavailable { task_ids, .. } => {
                assert_eq!(task_ids, vec!["a".to_string()]);
            }
            other => panic!("unexpected error: {other}"),
        }
    }
}
