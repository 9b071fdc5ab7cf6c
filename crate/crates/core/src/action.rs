//! The unified action space: a 12-form single-line action grammar shared by
//! every pipeline stage and the agent runtime.
//!
//! Text form and structured form are interconvertible: `parse_action` and
//! `render_action` round-trip for every valid [`Action`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One atomic agent action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Click { x: u32, y: u32 },
    RightClick { x: u32, y: u32 },
    DoubleClick { x: u32, y: u32 },
    Drag { x1: u32, y1: u32, x2: u32, y2: u32 },
    /// Vertical scroll; positive offset scrolls up, negative scrolls down.
    Scroll { offset: i64 },
    PressKey { key: String },
    /// Exactly 2 or 3 keys, each a nonempty token without whitespace.
    Hotkey { keys: Vec<String> },
    /// Single-line text; no leading/trailing whitespace (the text form
    /// cannot carry it through a round trip).
    TypeText { text: String },
    Wait,
    Finish,
    Fail,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("hotkey must have 2 or 3 keys, got {0}")]
    HotkeyArity(usize),
    #[error("hotkey key {0:?} is empty or contains whitespace")]
    HotkeyKey(String),
    #[error("press key payload {0:?} is empty, multi-line, or padded with whitespace")]
    PressKeyPayload(String),
    #[error("type text payload {0:?} contains a newline or boundary whitespace")]
    TypeTextPayload(String),
}

impl Action {
    /// Checks the structural invariants that the grammar cannot express in
    /// the type system.
    pub fn validate(&self) -> Result<(), ActionError> {
        match self {
            Action::Hotkey { keys } => {
                if keys.len() < 2 || keys.len() > 3 {
                    return Err(ActionError::HotkeyArity(keys.len()));
                }
                for k in keys {
                    if k.is_empty()
                        || k.chars().any(|c| c.is_whitespace() || matches!(c, ',' | '(' | ')'))
                    {
                        return Err(ActionError::HotkeyKey(k.clone()));
                    }
                }
                Ok(())
            }
            Action::PressKey { key } => {
                if key.is_empty()
                    || key.contains('\n')
                    || key != key.trim()
                {
                    return Err(ActionError::PressKeyPayload(key.clone()));
                }
                Ok(())
            }
            Action::TypeText { text } => {
                if text.contains('\n') || text != text.trim() {
                    return Err(ActionError::TypeTextPayload(text.clone()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// True for actions that carry screen coordinates.
    pub fn is_coordinate(&self) -> bool {
        matches!(
            self,
            Action::Click { .. }
                | Action::RightClick { .. }
                | Action::DoubleClick { .. }
                | Action::Drag { .. }
        )
    }

    /// True for `finish` and `fail`.
    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::Finish | Action::Fail)
    }
}

/// Screen resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub fn new(width: u32, height: u32) -> Option<Self> {
        if width == 0 || height == 0 {
            None
        } else {
            Some(Self { width, height })
        }
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            width: 1280,
            height: 720,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseActionError {
    #[error("unknown action: {0:?}")]
    UnknownAction(String),
    #[error("malformed arguments for {keyword:?}: {detail}")]
    MalformedArguments { keyword: String, detail: String },
}

fn malformed(keyword: &str, detail: impl Into<String>) -> ParseActionError {
    ParseActionError::MalformedArguments {
        keyword: keyword.to_string(),
        detail: detail.into(),
    }
}

/// Strips an ASCII keyword prefix case-insensitively, returning the rest.
fn strip_keyword<'a>(s: &'a str, keyword: &str) -> Option<&'a str> {
    let bytes = s.as_bytes();
    let kw = keyword.as_bytes();
    if bytes.len() < kw.len() {
        return None;
    }
    if !bytes[..kw.len()].eq_ignore_ascii_case(kw) {
        return None;
    }
    let rest = &s[kw.len()..];
    // Keyword must end at a word boundary: "clicks" is not "click".
    if let Some(c) = rest.chars().next() {
        if c.is_ascii_alphanumeric() {
            return None;
        }
    }
    Some(rest)
}

/// Parses a parenthesized comma-separated group, returning the raw items and
/// the text after the closing paren.
fn parse_paren_group<'a>(s: &'a str, keyword: &str) -> Result<(Vec<&'a str>, &'a str), ParseActionError> {
    let s = s.trim_start();
    let rest = s
        .strip_prefix('(')
        .ok_or_else(|| malformed(keyword, "expected '('"))?;
    let close = rest
        .find(')')
        .ok_or_else(|| malformed(keyword, "missing ')'"))?;
    let inner = &rest[..close];
    let after = &rest[close + 1..];
    Ok((inner.split(',').map(str::trim).collect(), after))
}

fn parse_coord(item: &str, keyword: &str) -> Result<u32, ParseActionError> {
    let v: i64 = item
        .parse()
        .map_err(|_| malformed(keyword, format!("non-integer coordinate {item:?}")))?;
    if v < 0 {
        return Err(malformed(keyword, format!("negative coordinate {v}")));
    }
    u32::try_from(v).map_err(|_| malformed(keyword, format!("coordinate {v} out of range")))
}

fn parse_coord_pair<'a>(s: &'a str, keyword: &str) -> Result<((u32, u32), &'a str), ParseActionError> {
    let (items, after) = parse_paren_group(s, keyword)?;
    if items.len() != 2 {
        return Err(malformed(keyword, format!("expected 2 coordinates, got {}", items.len())));
    }
    Ok(((parse_coord(items[0], keyword)?, parse_coord(items[1], keyword)?), after))
}

fn expect_end(after: &str, keyword: &str) -> Result<(), ParseActionError> {
    if after.trim().is_empty() {
        Ok(())
    } else {
        Err(malformed(keyword, format!("trailing input {:?}", after.trim())))
    }
}

/// Payload after the colon of `press key:` / `type text:`, left-trimmed.
fn parse_colon_payload<'a>(rest: &'a str, keyword: &str) -> Result<&'a str, ParseActionError> {
    let rest = rest.trim_start();
    let payload = rest
        .strip_prefix(':')
        .ok_or_else(|| malformed(keyword, "expected ':'"))?;
    Ok(payload.trim_start())
}

/// Parses one trimmed line of action text into an [`Action`].
///
/// Keywords are case-insensitive and whitespace between tokens is flexible;
/// the canonical surface form is produced by [`render_action`].
pub fn parse_action(text: &str) -> Result<Action, ParseActionError> {
    let line = text.trim();

    // Longest keywords first so "double click" is not read as "click".
    if let Some(rest) = strip_keyword(line, "double click") {
        let ((x, y), after) = parse_coord_pair(rest, "double click")?;
        expect_end(after, "double click")?;
        return Ok(Action::DoubleClick { x, y });
    }
    if let Some(rest) = strip_keyword(line, "right click") {
        let ((x, y), after) = parse_coord_pair(rest, "right click")?;
        expect_end(after, "right click")?;
        return Ok(Action::RightClick { x, y });
    }
    if let Some(rest) = strip_keyword(line, "drag from") {
        let ((x1, y1), after) = parse_coord_pair(rest, "drag")?;
        let after = after.trim_start();
        let after = strip_keyword(after, "to")
            .ok_or_else(|| malformed("drag", "expected 'to'"))?;
        let ((x2, y2), after) = parse_coord_pair(after, "drag")?;
        expect_end(after, "drag")?;
        return Ok(Action::Drag { x1, y1, x2, y2 });
    }
    if let Some(rest) = strip_keyword(line, "press key") {
        let key = parse_colon_payload(rest, "press key")?;
        let action = Action::PressKey {
            key: key.trim_end().to_string(),
        };
        action
            .validate()
            .map_err(|e| malformed("press key", e.to_string()))?;
        return Ok(action);
    }
    if let Some(rest) = strip_keyword(line, "type text") {
        let text = parse_colon_payload(rest, "type text")?;
        return Ok(Action::TypeText {
            text: text.trim_end().to_string(),
        });
    }
    if let Some(rest) = strip_keyword(line, "hotkey") {
        let (items, after) = parse_paren_group(rest, "hotkey")?;
        expect_end(after, "hotkey")?;
        let keys: Vec<String> = items.iter().map(|s| s.to_string()).collect();
        let action = Action::Hotkey { keys };
        action
            .validate()
            .map_err(|e| malformed("hotkey", e.to_string()))?;
        return Ok(action);
    }
    if let Some(rest) = strip_keyword(line, "scroll") {
        let (items, after) = parse_paren_group(rest, "scroll")?;
        expect_end(after, "scroll")?;
        if items.len() != 1 {
            return Err(malformed("scroll", format!("expected 1 offset, got {}", items.len())));
        }
        let offset: i64 = items[0]
            .parse()
            .map_err(|_| malformed("scroll", format!("non-integer offset {:?}", items[0])))?;
        return Ok(Action::Scroll { offset });
    }
    if let Some(rest) = strip_keyword(line, "click") {
        let ((x, y), after) = parse_coord_pair(rest, "click")?;
        expect_end(after, "click")?;
        return Ok(Action::Click { x, y });
    }
    for (kw, action) in [
        ("wait", Action::Wait),
        ("finish", Action::Finish),
        ("fail", Action::Fail),
    ] {
        if let Some(rest) = strip_keyword(line, kw) {
            if rest.trim().is_empty() {
                return Ok(action);
            }
        }
    }

    Err(ParseActionError::UnknownAction(line.to_string()))
}

/// Renders the canonical single-line surface form of an action.
pub fn render_action(a: &Action) -> String {
    match a {
        Action::Click { x, y } => format!("click ({x}, {y})"),
        Action::RightClick { x, y } => format!("right click ({x}, {y})"),
        Action::DoubleClick { x, y } => format!("double click ({x}, {y})"),
        Action::Drag { x1, y1, x2, y2 } => {
            format!("drag from ({x1}, {y1}) to ({x2}, {y2})")
        }
        Action::Scroll { offset } => format!("scroll ({offset})"),
        Action::PressKey { key } => format!("press key: {key}"),
        Action::Hotkey { keys } => format!("hotkey ({})", keys.join(", ")),
        Action::TypeText { text } => format!("type text: {text}"),
        Action::Wait => "wait".to_string(),
        Action::Finish => "finish".to_string(),
        Action::Fail => "fail".to_string(),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecisionParseError {
    #[error("no line starting with \"Action:\" in model output")]
    MissingActionLine,
    #[error("bad action line {line:?}: {source}")]
    BadActionLine {
        line: String,
        source: ParseActionError,
    },
}

/// Splits a raw model completion into (thought, action).
///
/// The split point is the LAST line beginning with `Action:` (case-insensitive,
/// leading whitespace allowed), so thoughts that quote the phrase do not
/// confuse the parser. Lines after the action line are ignored.
pub fn parse_decision(model_output: &str) -> Result<(String, Action), DecisionParseError> {
    let lines: Vec<&str> = model_output.lines().collect();
    let idx = lines
        .iter()
        .rposition(|l| {
            let t = l.trim_start();
            t.len() >= 7 && t.as_bytes()[..7].eq_ignore_ascii_case(b"action:")
        })
        .ok_or(DecisionParseError::MissingActionLine)?;

    let thought = lines[..idx].join("\n").trim().to_string();
    let line = lines[idx].trim_start();
    let action_text = &line[7..];
    let action = parse_action(action_text).map_err(|e| DecisionParseError::BadActionLine {
        line: lines[idx].to_string(),
        source: e,
    })?;
    Ok((thought, action))
}

/// One out-of-bounds coordinate found by [`validate_bounds`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundsViolation {
    pub axis: char,
    pub value: u32,
    pub limit: u32,
}

/// Flags coordinates at or beyond the screen edge. Non-coordinate actions
/// always pass.
pub fn validate_bounds(a: &Action, r: Resolution) -> Vec<BoundsViolation> {
    let mut out = Vec::new();
    let mut check = |axis: char, value: u32, limit: u32| {
        if value >= limit {
            out.push(BoundsViolation { axis, value, limit });
        }
    };
    match *a {
        Action::Click { x, y } | Action::RightClick { x, y } | Action::DoubleClick { x, y } => {
            check('x', x, r.width);
            check('y', y, r.height);
        }
        Action::Drag { x1, y1, x2, y2 } => {
            check('x', x1, r.width);
            check('y', y1, r.height);
            check('x', x2, r.width);
            check('y', y2, r.height);
        }
        _ => {}
    }
    out
}
