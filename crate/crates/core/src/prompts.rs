//! Prompt templates and the shared history renderer.
//!
//! The scaffold prompt builder here is the single source of truth for both
//! training-instance construction and inference, so the two surfaces render
//! byte-identical history strings by construction.

use serde::{Deserialize, Serialize};

use crate::action::{render_action, Action};
use crate::gateway::ChatRequest;

/// System prompt for thought reconstruction.
pub const THOUGHT_COMPLETION_SYSTEM: &str = "\
You are a helpful computer use agent designed to complete tasks on a computer. Your goal is to recreate your thought process behind a specific action.

You will be provided with:

1. The task you are attempting to complete.
2. A history of the steps you have already performed (up to 50, if any; none if it was the first action).
3. The specific action you chose to take.
4. The name of the element you clicked (if you clicked on an element). It might be too general or vague, you have to decide what to click based on the screenshot.
5. A screenshot of the computer screen at the moment you decided to take the action.
6. The red marks on the screenshot indicate the position of the click or drag action.

To formulate your thought process, consider:

1. What do you observe on the screen? Consider your task and previous action when you analyzing current screenshot.
2. Evaluate your previous action (if applicable):
   - Did it achieve the intended effect? If not, identify possible reasons (e.g., misclick, inactive element).
      Some typical examples for ineffective action:
       - misclick in an empty space
       - ineffective opening some elements without double click
       - ineffective type text/ press key because of inactivated input box
   - Did the result align with your previous plan, or did something unexpected happen?
      Some typical examples for ineffective action:
         - misclick in a wrong element
         - forget to clear existing text in input bar
3. Based on your action history, assess your progress toward completing the overall task.
4. Consider if you're exploring how to finish the task because of failed attempts in history steps.


Present your thought process as a clear, natural first-person narrative that explains your reasoning at that moment.

Important requirements:
1. **DO NOT** mention the red marks in your response. These marks were **added after the fact** to indicate the position of your click or drag actions, and they were not on the screen when you made the decision. **DO NOT** mention \"red box\", \"red square\", \"red circle\", or \"red arrow\" in your response.
2. Write as if you are thinking in real-time before taking the action. Do not include post-action evaluation or hindsight.";

const ACTION_LIST: &str = "\
Valid actions:

1. click (x, y)
   click the element at the position (x, y) on the screen

2. right click (x, y)
   right click the element at the position (x, y) on the screen

3. double click (x, y)
   double click the element at the position (x, y) on the screen

4. drag from (x1, y1) to (x2, y2)
   drag the element from position (x1, y1) to (x2, y2).

5. scroll (x)
   scroll the screen vertically with pixel offset x. Positive values of x: scroll up, negative values of x: scroll down.

6. press key: key_content
   press the key key_content on the keyboard.

7. hotkey (key1, key2)
   press the hotkey composed of key1 and key2.

8. hotkey (key1, key2, key3)
   press the hotkey composed of key1, key2, and key3.

9. type text: text_content
   type content text_content on the keyboard.
   Note that before typing text, you need to ensure the text box or input field is active/focused first. If the text box is not yet activated, you should first click on it to activate it, and then use type text in a separate step.

10. wait
    wait for some time, usually for the system to respond, screen to refresh, advertisement to finish.

11. finish
    indicating that the task has been completed.

12. fail
    indicating that the task has failed, or this task is infeasible because not enough information is provided.";

/// System prompt for synthesizing alternative decisions against a snapshot.
pub fn boost_system() -> String {
    format!(
        "You are a helpful assistant who can help users complete computer tasks, with **full permission** to make any operations on the user's computer. The operating system is windows.\n\
         Based on the provided current state, you need to suggest the next action to complete the task. Do not try to complete the entire task in one step. Break it down into smaller steps, and at each step you will get a new state to interact with.\n\n\
         IMPORTANT: You must strictly adhere to the following rules:\n\n\
         1. Choose ONLY ONE action from the list below for each response, DO NOT perform more than one action per step.\n\
         2. Follow the exact syntax format for the selected action, DO NOT create or use any actions other than those listed.\n\
         3. Once the task is completed, output action finish.\n\n{ACTION_LIST}"
    )
}

/// System prompt for the inference scaffold.
pub fn scaffold_system() -> String {
    format!(
        "You are a helpful assistant who can help users complete computer tasks, with **full permission** to make any operations on the user's computer.\n\
         Based on the provided current state, you need to suggest the next action to complete the task. Do not try to complete the entire task in one step. Break it down into smaller steps, and at each step you will get a new state to interact with.\n\
         IMPORTANT: You must strictly adhere to the following rules:\n\
         1. Choose ONLY ONE action from the list below for each response, DO NOT perform more than one action per step.\n\
         2. Follow the exact syntax format for the selected action, DO NOT create or use any actions other than those listed.\n\
         3. Once the task is completed, output action finish.\n\n{ACTION_LIST}"
    )
}

/// One prior (thought, action) pair in a prompt history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub thought: String,
    pub action: Action,
}

impl HistoryEntry {
    pub fn new(thought: impl Into<String>, action: Action) -> Self {
        Self {
            thought: thought.into(),
            action,
        }
    }
}

/// Marker emitted when there is no prior history.
pub const EMPTY_HISTORY: &str = "None";

/// Renders a prompt history as numbered steps, or [`EMPTY_HISTORY`] when empty.
pub fn render_history(entries: &[HistoryEntry]) -> String {
    if entries.is_empty() {
        return EMPTY_HISTORY.to_string();
    }
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "Step {}:\nThought: {}\nAction: {}",
                i + 1,
                e.thought,
                render_action(&e.action)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Prompt sizing and sampling knobs for the scaffold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaffoldConfig {
    /// Token-estimate budget for the whole rendered prompt. Histories that
    /// overflow it lose their oldest entries first; the screenshot and the
    /// current step are never dropped.
    pub max_prompt_tokens: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ScaffoldConfig {
    fn default() -> Self {
        Self {
            max_prompt_tokens: 8192,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Rough token estimate: four characters per token.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// The scaffold's user-turn text for a task and rendered history.
pub fn scaffold_user_text(task: &str, history_str: &str) -> String {
    format!(
        "Response Format: {{Your thought process}}\n\
         Action: {{The specific action you choose to take}}\n\n\
         Your task is: {task}\n\
         History of the previous actions and thoughts you have done to reach the current screen: {history_str}\n\
         --------------------------------------------\n\
         Given the screenshot, what's the next step you will do to help with the task?"
    )
}

/// Renders the scaffold history for a step, applying the oldest-first
/// truncation policy under the prompt token budget.
pub fn scaffold_history_text(task: &str, history: &[HistoryEntry], cfg: &ScaffoldConfig) -> String {
    let system = scaffold_system();
    let mut start = 0;
    loop {
        let rendered = render_history(&history[start..]);
        let total = estimate_tokens(&system) + estimate_tokens(&scaffold_user_text(task, &rendered));
        if total <= cfg.max_prompt_tokens || start >= history.len() {
            return rendered;
        }
        start += 1;
    }
}

/// Builds the full scaffold [`ChatRequest`]: system prompt, task, textual
/// history, and the single current screenshot.
pub fn build_scaffold_request(
    task: &str,
    history: &[HistoryEntry],
    screenshot_ref: &str,
    cfg: &ScaffoldConfig,
) -> ChatRequest {
    let history_str = scaffold_history_text(task, history, cfg);
    ChatRequest {
        system_text: scaffold_system(),
        user_text: scaffold_user_text(task, &history_str),
        images: vec![screenshot_ref.to_string()],
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        slot: None,
    }
}

fn boost_user_text(task: &str, history_str: &str) -> String {
    format!(
        "Response Format: Your thought process\n\n\
         Action: The specific action you choose to take.\n\n\
         The task you are attempting to complete: {task}\n\
         Your performing history: {history_str}\n\
         Given the screenshot as below. What's the next step that you will do to help with the task?"
    )
}

/// Builds the decision-synthesis [`ChatRequest`] for one environment snapshot.
pub fn build_boost_request(
    task: &str,
    history: &[HistoryEntry],
    screenshot_ref: &str,
    temperature: f64,
    max_tokens: u32,
) -> ChatRequest {
    ChatRequest {
        system_text: boost_system(),
        user_text: boost_user_text(task, &render_history(history)),
        images: vec![screenshot_ref.to_string()],
        temperature,
        max_tokens,
        slot: None,
    }
}

/// Builds the thought-reconstruction [`ChatRequest`] for one recorded action.
/// `history` must already be capped by the caller.
pub fn build_thought_request(
    task: &str,
    history: &[HistoryEntry],
    action: &Action,
    element_name: Option<&str>,
    screenshot_ref: &str,
    temperature: f64,
    max_tokens: u32,
) -> ChatRequest {
    let mut user_text = format!(
        "The task you are attempting to complete: {task}\n\
         Your performing history: {}\n\
         The specific action you chose to perform: {}",
        render_history(history),
        render_action(action)
    );
    if let Some(name) = element_name {
        user_text.push_str(&format!("\nThe name of the element you clicked: {name}"));
    }
    ChatRequest {
        system_text: THOUGHT_COMPLETION_SYSTEM.to_string(),
        user_text,
        images: vec![screenshot_ref.to_string()],
        temperature,
        max_tokens,
        slot: None,
    }
}
