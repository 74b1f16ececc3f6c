//! Output-format validation and the format penalty.

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

pub const THINK_OPEN_TAG: &str = "<think>";
pub const THINK_CLOSE_TAG: &str = "</think>";
pub const ACTION_OPEN_TAG: &str = "<action>";
pub const ACTION_CLOSE_TAG: &str = "</action>";

/// Command stored when no action field can be recovered. A no-op in every
/// environment.
pub const FALLBACK_COMMAND: &str = "invalid";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAction {
    pub raw: Vec<TokenId>,
    pub thinking: String,
    pub command: Option<String>,
    pub strict_valid: bool,
    pub relaxed_valid: bool,
}

impl ParsedAction {
    /// Command to execute; the fallback placeholder when nothing was parsed.
    pub fn executable(&self) -> &str {
        match self.command.as_deref() {
            Some(c) if !c.is_empty() => c,
            _ => FALLBACK_COMMAND,
        }
    }

    /// No parseable action content.
    pub fn is_void(&self) -> bool {
        !self.relaxed_valid || self.command.as_deref().is_none_or(|c| c.is_empty() || c == FALLBACK_COMMAND)
    }
}

fn count(text: &str, pat: &str) -> usize {
    text.matches(pat).count()
}

fn allowed_command_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || " []<>-_.:".contains(c)
}

/// Strict structure check: exactly one of each tag, ordered
/// `<think>…</think><action>…</action>`, only whitespace outside the fields,
/// ASCII throughout and a non-empty command drawn from the command alphabet.
pub fn validate_strict(text: &str) -> bool {
    strict_command(text).is_some()
}

fn strict_command(text: &str) -> Option<&str> {
    if !text.chars().all(|c| c.is_ascii_graphic() || c.is_ascii_whitespace()) {
        return None;
    }
    for tag in [THINK_OPEN_TAG, THINK_CLOSE_TAG, ACTION_OPEN_TAG, ACTION_CLOSE_TAG] {
        if count(text, tag) != 1 {
            return None;
        }
    }
    let t_open = text.find(THINK_OPEN_TAG)?;
    let t_close = text.find(THINK_CLOSE_TAG)?;
    let a_open = text.find(ACTION_OPEN_TAG)?;
    let a_close = text.find(ACTION_CLOSE_TAG)?;
    if !(t_open < t_close && t_close < a_open && a_open < a_close) {
        return None;
    }
    let outside = [
        &text[..t_open],
        &text[t_close + THINK_CLOSE_TAG.len()..a_open],
        &text[a_close + ACTION_CLOSE_TAG.len()..],
    ];
    if outside.iter().any(|s| !s.trim().is_empty()) {
        return None;
    }
    let command = text[a_open + ACTION_OPEN_TAG.len()..a_close].trim();
    if command.is_empty() || !command.chars().all(allowed_command_char) {
        return None;
    }
    Some(command)
}

fn thinking_span(text: &str) -> String {
    let Some(start) = text.find(THINK_OPEN_TAG) else {
        return String::new();
    };
    let body = &text[start + THINK_OPEN_TAG.len()..];
    let end = body.find(THINK_CLOSE_TAG).unwrap_or(body.len());
    body[..end].trim().to_string()
}

/// Strict parse first; otherwise take the first `<action>` field up to its
/// closing tag (or the next tag, or the end of text).
pub fn validate_relaxed(text: &str) -> ParsedAction {
    let thinking = thinking_span(text);
    if let Some(cmd) = strict_command(text) {
        return ParsedAction {
            raw: Vec::new(),
            thinking,
            command: Some(cmd.to_string()),
            strict_valid: true,
            relaxed_valid: true,
        };
    }
    match text.find(ACTION_OPEN_TAG) {
        Some(pos) => {
            let body = &text[pos + ACTION_OPEN_TAG.len()..];
            let end = [ACTION_CLOSE_TAG, ACTION_OPEN_TAG, THINK_OPEN_TAG, THINK_CLOSE_TAG]
                .iter()
                .filter_map(|tag| body.find(tag))
                .min()
                .unwrap_or(body.len());
            ParsedAction {
                raw: Vec::new(),
                thinking,
                command: Some(body[..end].trim().to_string()),
                strict_valid: false,
                relaxed_valid: true,
            }
        }
        None => ParsedAction {
            raw: Vec::new(),
            thinking,
            command: Some(FALLBACK_COMMAND.to_string()),
            strict_valid: false,
            relaxed_valid: false,
        },
    }
}

pub fn apply_format_penalty(reward: f64, strict_valid: bool, lambda_fmt: f64) -> f64 {
    if strict_valid {
        reward
    } else {
        reward - lambda_fmt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strict_examples() {
        assert!(validate_strict("<think>x</think><action>search[a]</action>"));
        assert!(validate_strict("<think>x y</think>\n<action>click[next >]</action>"));
        assert!(!validate_strict("<think>x<action>search[a]</action>"));
        assert!(!validate_strict(
            "<think>x</think><action><action>search[a]</action>"
        ));
        assert!(!validate_strict("<think>x</think><action></action>"));
        assert!(!validate_strict("junk<think>x</think><action>search[a]</action>"));
        assert!(!validate_strict("<think>café</think><action>search[a]</action>"));
        assert!(!validate_strict("<action>search[a]</action><think>x</think>"));
    }

    #[test]
    fn relaxed_examples() {
        let p = validate_relaxed("<think>x</think><action>search[a b]</action>");
        assert!(p.strict_valid && p.relaxed_valid);
        assert_eq!(p.command.as_deref(), Some("search[a b]"));
        assert_eq!(p.thinking, "x");

        let p = validate_relaxed("garbage <action>click[buy]</action>");
        assert!(!p.strict_valid && p.relaxed_valid);
        assert_eq!(p.command.as_deref(), Some("click[buy]"));

        let p = validate_relaxed("<think>never closes");
        assert!(!p.strict_valid && !p.relaxed_valid);
        assert_eq!(p.executable(), FALLBACK_COMMAND);
        assert!(p.is_void());

        let p = validate_relaxed("<think>a</think>\n<action>click[next >]");
        assert_eq!(p.command.as_deref(), Some("click[next >]"));
        assert!(!p.strict_valid);
    }

    #[test]
    fn penalty_examples() {
        assert!((apply_format_penalty(1.0, false, 0.1) - 0.9).abs() < 1e-15);
        assert_eq!(apply_format_penalty(1.0, true, 0.1), 1.0);
        assert!((apply_format_penalty(0.0, false, 0.1) + 0.1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn strict_implies_relaxed(
            parts in prop::collection::vec(
                prop::sample::select(vec![
                    "<think>", "</think>", "<action>", "</action>", "\n", " ", "x", "search[a]", "click[buy]", "é",
                ]),
                0..12,
            )
        ) {
            let text: String = parts.concat();
            let p = validate_relaxed(&text);
            prop_assert_eq!(p.strict_valid, validate_strict(&text));
            prop_assert!(!p.strict_valid || p.relaxed_valid);
        }
    }
}
