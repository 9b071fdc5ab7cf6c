//! Iterative reconstruction of the latent thought behind each recorded human
//! action. Steps run strictly in order: step k's prompt carries the
//! reconstructed thoughts of steps 0..k-1.

use std::fs;
use std::path::PathBuf;

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::gateway::{Gateway, GatewayError};
use crate::prompts::{build_thought_request, HistoryEntry};
use crate::trajectory::{Observation, Trajectory};

const MARK_RADIUS: i64 = 12;
const RED: Rgba<u8> = Rgba([255, 0, 0, 255]);

/// Completions mentioning these phrases are rejected and retried once.
pub const FORBIDDEN_PHRASES: [&str; 4] = ["red box", "red circle", "red arrow", "red square"];

#[derive(Debug, Error)]
pub enum ThoughtError {
    #[error("failed to decode image {path:?}: {detail}")]
    ImageDecode { path: String, detail: String },
    #[error("trajectory {0} already has thoughts; pass force to overwrite")]
    AlreadyCompleted(String),
    #[error("gateway failure at step {step} (checkpoint holds {completed} thoughts): {source}")]
    Gateway {
        step: usize,
        completed: usize,
        source: GatewayError,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

fn draw_disc(img: &mut RgbaImage, cx: i64, cy: i64, radius: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0 && px < w && py >= 0 && py < h {
                    img.put_pixel(px as u32, py as u32, RED);
                }
            }
        }
    }
}

fn draw_thick_line(img: &mut RgbaImage, x0: f64, y0: f64, x1: f64, y1: f64, thickness: i64) {
    let steps = ((x1 - x0).hypot(y1 - y0).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        draw_disc(img, x.round() as i64, y.round() as i64, thickness);
    }
}

fn draw_arrow(img: &mut RgbaImage, x0: f64, y0: f64, x1: f64, y1: f64) {
    draw_thick_line(img, x0, y0, x1, y1, 2);
    let angle = (y1 - y0).atan2(x1 - x0);
    let head_len = 18.0;
    for side in [-1.0, 1.0] {
        let a = angle + std::f64::consts::PI - side * 0.5;
        draw_thick_line(img, x1, y1, x1 + head_len * a.cos(), y1 + head_len * a.sin(), 2);
    }
}

/// Draws the position marks onto a copy of the screenshot: a filled red disc
/// for clicks, discs at both endpoints plus an arrow for drags. Actions
/// without coordinates return the bytes unchanged.
pub fn annotate_marks(image_bytes: &[u8], action: &Action) -> Result<Vec<u8>, ThoughtError> {
    let coords = match *action {
        Action::Click { x, y } | Action::RightClick { x, y } | Action::DoubleClick { x, y } => {
            Some((x, y, None))
        }
        Action::Drag { x1, y1, x2, y2 } => Some((x1, y1, Some((x2, y2)))),
        _ => None,
    };
    let Some((x, y, drag_end)) = coords else {
        return Ok(image_bytes.to_vec());
    };

    let decoded = image::load_from_memory(image_bytes).map_err(|e| ThoughtError::ImageDecode {
        path: "<memory>".into(),
        detail: e.to_string(),
    })?;
    let mut img = decoded.to_rgba8();
    draw_disc(&mut img, x as i64, y as i64, MARK_RADIUS);
    if let Some((x2, y2)) = drag_end {
        draw_disc(&mut img, x2 as i64, y2 as i64, MARK_RADIUS);
        draw_arrow(&mut img, x as f64, y as f64, x2 as f64, y2 as f64);
    }

    let mut out = Vec::new();
    image::DynamicImage::ImageRgba8(img)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| ThoughtError::ImageDecode {
            path: "<memory>".into(),
            detail: e.to_string(),
        })?;
    Ok(out)
}

/// How the screenshot attached to a thought prompt is produced.
#[derive(Debug, Clone)]
pub enum MarkPolicy {
    /// Load the screenshot from `screenshot_base`, draw marks, and write the
    /// marked copy into `output_dir`.
    Annotate {
        screenshot_base: PathBuf,
        output_dir: PathBuf,
    },
    /// Attach the original reference untouched.
    PassThrough,
}

#[derive(Debug, Clone)]
pub struct ThoughtConfig {
    pub force: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Prompt history cap; prompts carry at most this many prior steps.
    pub history_cap: usize,
    pub marks: MarkPolicy,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ThoughtConfig {
    fn default() -> Self {
        Self {
            force: false,
            checkpoint_dir: None,
            history_cap: 50,
            marks: MarkPolicy::PassThrough,
            temperature: 0.3,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepWarning {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ThoughtReport {
    pub trajectory_id: String,
    pub completed_steps: usize,
    pub resumed_from: usize,
    pub warnings: Vec<StepWarning>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Checkpoint {
    trajectory_id: String,
    thoughts: Vec<String>,
    warnings: Vec<StepWarning>,
}

fn checkpoint_path(dir: &PathBuf, id: &str) -> PathBuf {
    dir.join(format!("{id}.thoughts.json"))
}

fn mentions_marks(text: &str) -> bool {
    let lower = text.to_lowercase();
    FORBIDDEN_PHRASES.iter().any(|p| lower.contains(p))
}

fn prompt_screenshot(
    obs: &Observation,
    action: &Action,
    trajectory_id: &str,
    step: usize,
    policy: &MarkPolicy,
) -> Result<String, ThoughtError> {
    match policy {
        MarkPolicy::PassThrough => Ok(obs.screenshot_ref.clone()),
        MarkPolicy::Annotate {
            screenshot_base,
            output_dir,
        } => {
            if !action.is_coordinate() {
                return Ok(obs.screenshot_ref.clone());
            }
            let source = screenshot_base.join(&obs.screenshot_ref);
            let bytes = fs::read(&source).map_err(|e| ThoughtError::ImageDecode {
                path: source.display().to_string(),
                detail: e.to_string(),
            })?;
            let marked = annotate_marks(&bytes, action)?;
            fs::create_dir_all(output_dir)?;
            let out = output_dir.join(format!("{trajectory_id}_{step}.marked.png"));
            fs::write(&out, marked)?;
            Ok(out.display().to_string())
        }
    }
}

/// Reconstructs a thought for every step of the trajectory, in order. The
/// output differs from the input only in the thought fields. Resumable: with
/// a checkpoint directory configured, completed prefixes survive gateway
/// failures and reruns skip them.
pub fn complete_thoughts(
    t: &Trajectory,
    gateway: &Gateway,
    cfg: &ThoughtConfig,
) -> Result<(Trajectory, ThoughtReport), ThoughtError> {
    if t.has_thoughts() && !cfg.force {
        return Err(ThoughtError::AlreadyCompleted(t.id.clone()));
    }

    let mut checkpoint = Checkpoint {
        trajectory_id: t.id.clone(),
        ..Default::default()
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = checkpoint_path(dir, &t.id);
        if path.exists() {
            if let Ok(loaded) = serde_json::from_str::<Checkpoint>(&fs::read_to_string(&path)?) {
                if loaded.trajectory_id == t.id && loaded.thoughts.len() <= t.steps.len() {
                    checkpoint = loaded;
                }
            }
        }
    }
    let resumed_from = checkpoint.thoughts.len();

    let mut completed = t.clone();
    for (i, thought) in checkpoint.thoughts.iter().enumerate() {
        completed.steps[i].thought = Some(thought.clone());
    }

    for k in resumed_from..t.steps.len() {
        let history: Vec<HistoryEntry> = completed.steps[..k]
            .iter()
            .map(|s| HistoryEntry::new(s.thought.clone().unwrap_or_default(), s.action.clone()))
            .collect();
        let capped_start = history.len().saturating_sub(cfg.history_cap);
        let step = &t.steps[k];
        let screenshot =
            prompt_screenshot(&step.observation, &step.action, &t.id, k, &cfg.marks)?;
        let request = build_thought_request(
            &t.task_description,
            &history[capped_start..],
            &step.action,
            step.element_name.as_deref(),
            &screenshot,
            cfg.temperature,
            cfg.max_tokens,
        );

        let persist_and_fail = |checkpoint: &Checkpoint, source: GatewayError| {
            if let Some(dir) = &cfg.checkpoint_dir {
                let _ = fs::create_dir_all(dir);
                let _ = fs::write(
                    checkpoint_path(dir, &t.id),
                    serde_json::to_string_pretty(checkpoint).unwrap(),
                );
            }
            ThoughtError::Gateway {
                step: k,
                completed: checkpoint.thoughts.len(),
                source,
            }
        };

        let mut thought = gateway
            .complete(&request)
            .map_err(|e| persist_and_fail(&checkpoint, e))?;
        if mentions_marks(&thought) {
            let mut retry = request.clone();
            retry.user_text.push_str(
                "\n\nYour previous response mentioned the red marks. Rewrite your thought \
                 process without mentioning any red marks.",
            );
            let second = gateway
                .complete(&retry)
                .map_err(|e| persist_and_fail(&checkpoint, e))?;
            if mentions_marks(&second) {
                checkpoint.warnings.push(StepWarning {
                    step: k,
                    reason: "mark-mention after retry".into(),
                });
            }
            thought = second;
        }

        completed.steps[k].thought = Some(thought.clone());
        checkpoint.thoughts.push(thought);
        if let Some(dir) = &cfg.checkpoint_dir {
            fs::create_dir_all(dir)?;
            fs::write(
                checkpoint_path(dir, &t.id),
                serde_json::to_string_pretty(&checkpoint).unwrap(),
            )?;
        }
    }

    let report = ThoughtReport {
        trajectory_id: t.id.clone(),
        completed_steps: t.steps.len(),
        resumed_from,
        warnings: checkpoint.warnings,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        let _ = fs::remove_file(checkpoint_path(dir, &t.id));
    }
    Ok((completed, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Resolution;
    use crate::gateway::{
        GatewayConfig, MockRule, MockScript, MockTransport, RetryPolicy,
    };
    use crate::trajectory::{Step, StepSource, Terminal};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn white_png(w: u32, h: u32) -> Vec<u8> {
        let img = RgbaImage::from_pixel(w, h, Rgba([255, 255, 255, 255]));
        let mut out = Vec::new();
        image::DynamicImage::ImageRgba8(img)
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .unwrap();
        out
    }

    fn pixels(bytes: &[u8]) -> RgbaImage {
        image::load_from_memory(bytes).unwrap().to_rgba8()
    }

    #[test]
    fn click_mark_is_confined_to_the_disc() {
        let original = white_png(200, 200);
        let marked = annotate_marks(&original, &Action::Click { x: 100, y: 100 }).unwrap();
        let before = pixels(&original);
        let after = pixels(&marked);
        for y in 0..200u32 {
            for x in 0..200u32 {
                let dx = x as i64 - 100;
                let dy = y as i64 - 100;
                let inside = dx * dx + dy * dy <= MARK_RADIUS * MARK_RADIUS;
                if inside {
                    assert_eq!(*after.get_pixel(x, y), RED);
                } else if dx * dx + dy * dy > (MARK_RADIUS + 1) * (MARK_RADIUS + 1) {
                    assert_eq!(after.get_pixel(x, y), before.get_pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn non_coordinate_actions_leave_bytes_identical() {
        let original = white_png(32, 32);
        let out = annotate_marks(&original, &Action::Wait).unwrap();
        assert_eq!(out, original);
    }

    #[test]
    fn drag_marks_both_endpoints() {
        let original = white_png(120, 120);
        let marked = annotate_marks(&original, &Action::Drag { x1: 10, y1: 10, x2: 90, y2: 90 }).unwrap();
        let after = pixels(&marked);
        assert_eq!(*after.get_pixel(10, 10), RED);
        assert_eq!(*after.get_pixel(90, 90), RED);
        // Somewhere along the arrow shaft.
        assert_eq!(*after.get_pixel(50, 50), RED);
    }

    #[test]
    fn garbage_bytes_are_a_decode_error() {
        assert!(matches!(
            annotate_marks(b"not a png", &Action::Click { x: 1, y: 1 }),
            Err(ThoughtError::ImageDecode { .. })
        ));
    }

    fn fixture(n: usize) -> Trajectory {
        let mut steps: Vec<Step> = (0..n - 1)
            .map(|i| Step {
                index: i,
                observation: crate::trajectory::Observation::new(
                    format!("s{i}.png"),
                    Resolution::default(),
                ),
                thought: None,
                action: Action::Click { x: i as u32, y: 1 },
                element_name: None,
                source: StepSource::Human,
            })
            .collect();
        steps.push(Step {
            index: n - 1,
            observation: crate::trajectory::Observation::new("end.png", Resolution::default()),
            thought: None,
            action: Action::Finish,
            element_name: None,
            source: StepSource::Human,
        });
        Trajectory {
            id: "fix".into(),
            task_description: "the task".into(),
            steps,
            terminal: Terminal::Finish,
            annotator_meta: BTreeMap::new(),
        }
    }

    fn quiet_config() -> GatewayConfig {
        GatewayConfig {
            retry: RetryPolicy {
                max_attempts: 1,
                backoff_ms: vec![],
            },
            ..Default::default()
        }
    }

    #[test]
    fn thoughts_build_on_prior_thoughts() {
        let responses: Vec<String> = (0..3).map(|i| format!("reconstructed thought {i}")).collect();
        let mock = Arc::new(MockTransport::new(MockScript::uniform(responses)));
        let gw = Gateway::new(mock.clone(), quiet_config());
        let (done, report) = complete_thoughts(&fixture(3), &gw, &ThoughtConfig::default()).unwrap();
        assert!(done.has_thoughts());
        assert_eq!(report.completed_steps, 3);

        // Step 3's prompt must contain step 2's reconstructed thought.
        let transcript = mock.transcript();
        assert!(transcript[2].user_text.contains("reconstructed thought 1"));
        assert!(transcript[2].user_text.contains("reconstructed thought 0"));
        // Everything but the thoughts is untouched.
        let mut stripped = done.clone();
        for s in &mut stripped.steps {
            s.thought = None;
        }
        assert_eq!(stripped, fixture(3));
    }

    #[test]
    fn mark_mention_triggers_one_retry() {
        let script = MockScript {
            rules: vec![
                MockRule {
                    pattern: "without mentioning any red marks".into(),
                    responses: vec!["clean second attempt".into()],
                    fail_times: 0,
                },
                MockRule {
                    pattern: String::new(),
                    responses: vec!["I see a Red Circle here".into()],
                    fail_times: 0,
                },
            ],
            delay_ms: 0,
        };
        let mock = Arc::new(MockTransport::new(script));
        let gw = Gateway::new(mock, quiet_config());
        let (done, report) = complete_thoughts(&fixture(1), &gw, &ThoughtConfig::default()).unwrap();
        assert_eq!(done.steps[0].thought.as_deref(), Some("clean second attempt"));
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn gateway_failure_checkpoints_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ThoughtConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };

        // First run: one good reply, then hard failure.
        let script = MockScript {
            rules: vec![MockRule {
                pattern: String::new(),
                responses: vec!["thought 0".into()],
                fail_times: 0,
            }],
            delay_ms: 0,
        };
        struct FailAfter {
            inner: MockTransport,
            budget: std::sync::atomic::AtomicUsize,
        }
        impl crate::gateway::Transport for FailAfter {
            fn send(&self, req: &crate::gateway::ChatRequest) -> Result<String, GatewayError> {
                if self.budget.fetch_sub(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                    return Err(GatewayError::ProtocolError("down".into()));
                }
                self.inner.send(req)
            }
        }
        let gw = Gateway::new(
            Arc::new(FailAfter {
                inner: MockTransport::new(script.clone()),
                budget: std::sync::atomic::AtomicUsize::new(1),
            }),
            quiet_config(),
        );
        let err = complete_thoughts(&fixture(3), &gw, &cfg).unwrap_err();
        match err {
            ThoughtError::Gateway { step, completed, .. } => {
                assert_eq!(step, 1);
                assert_eq!(completed, 1);
            }
            other => panic!("unexpected: {other}"),
        }

        // Second run resumes at step 1 and only issues the remaining calls.
        let mock = Arc::new(MockTransport::new(MockScript::uniform(vec![
            "later thought".into(),
        ])));
        let gw2 = Gateway::new(mock.clone(), quiet_config());
        let (done, report) = complete_thoughts(&fixture(3), &gw2, &cfg).unwrap();
        assert_eq!(report.resumed_from, 1);
        assert_eq!(done.steps[0].thought.as_deref(), Some("thought 0"));
        assert_eq!(mock.call_count(), 2);
    }

    #[test]
    fn completed_trajectory_requires_force() {
        let mock = Arc::new(MockTransport::new(MockScript::uniform(vec!["t".into()])));
        let gw = Gateway::new(mock, quiet_config());
        let (done, _) = complete_thoughts(&fixture(2), &gw, &ThoughtConfig::default()).unwrap();
        assert!(matches!(
            complete_thoughts(&done, &gw_again(), &ThoughtConfig::default()),
            Err(ThoughtError::AlreadyCompleted(_))
        ));
        let forced = ThoughtConfig {
            force: true,
            ..Default::default()
        };
        assert!(complete_thoughts(&done, &gw_again(), &forced).is_ok());
    }

    fn gw_again() -> Gateway {
        Gateway::new(
            Arc::new(MockTransport::new(MockScript::uniform(vec!["x".into()]))),
            quiet_config(),
        )
    }
}
