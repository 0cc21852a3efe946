//! The five-tool action space and its text grammar.
//!
//! ```text
//! Action: name(arg1, arg2, ...)
//! ```
//!
//! Arguments are split on commas outside quotes and parentheses and then
//! trimmed. A double-quoted argument keeps its commas; `\"` and `\\` escape
//! inside quotes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tool {
    #[serde(rename = "getReasoningPath")]
    GetReasoningPath,
    #[serde(rename = "wikiSearch")]
    WikiSearch,
    #[serde(rename = "extractTriples")]
    ExtractTriples,
    #[serde(rename = "searchNeighbor")]
    SearchNeighbor,
    #[serde(rename = "finish")]
    Finish,
}

impl Tool {
    pub const ALL: [Tool; 5] = [
        Tool::GetReasoningPath,
        Tool::WikiSearch,
        Tool::ExtractTriples,
        Tool::SearchNeighbor,
        Tool::Finish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tool::GetReasoningPath => "getReasoningPath",
            Tool::WikiSearch => "wikiSearch",
            Tool::ExtractTriples => "extractTriples",
            Tool::SearchNeighbor => "searchNeighbor",
            Tool::Finish => "finish",
        }
    }

    pub fn from_name(name: &str) -> Option<Tool> {
        Tool::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Whether the policy may call this tool directly.
    pub fn policy_callable(self) -> bool {
        self != Tool::ExtractTriples
    }

    pub fn signature(self) -> &'static str {
        match self {
            Tool::GetReasoningPath => "getReasoningPath(question)",
            Tool::WikiSearch => "wikiSearch(entity, relation)",
            Tool::ExtractTriples => "extractTriples(entity, relation, document)",
            Tool::SearchNeighbor => "searchNeighbor(entity, relation)",
            Tool::Finish => "finish(answer1, answer2, ...)",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Tool::GetReasoningPath => "returns symbolic rules (relation chains) that may answer the question",
            Tool::WikiSearch => "retrieves documents about the entity and relation; triples in them are extracted automatically",
            Tool::ExtractTriples => "extracts triples from a document; runs automatically after wikiSearch",
            Tool::SearchNeighbor => "returns the entities linked to the entity by the relation; append ^-1 to follow it backwards",
            Tool::Finish => "ends the episode with the given answer entities, best answer first",
        }
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            Tool::GetReasoningPath => n == 1,
            Tool::WikiSearch | Tool::SearchNeighbor => n == 2,
            Tool::ExtractTriples => n == 3,
            Tool::Finish => n >= 1,
        }
    }

    fn arity_text(self) -> &'static str {
        match self {
            Tool::GetReasoningPath => "exactly 1 argument",
            Tool::WikiSearch | Tool::SearchNeighbor => "exactly 2 arguments",
            Tool::ExtractTriples => "exactly 3 arguments",
            Tool::Finish => "at least 1 argument",
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tool list for the executor's system prompt.
pub fn tool_descriptions() -> String {
    Tool::ALL
        .into_iter()
        .filter(|t| t.policy_callable())
        .map(|t| format!("- {}: {}", t.signature(), t.description()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Action {
    pub tool: Tool,
    pub args: Vec<String>,
}

impl Action {
    pub fn new<I, S>(tool: Tool, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tool,
            args: args.into_iter().map(Into::into).collect(),
        }
    }
}

/// Canonical text: `name(a, b)`, quoting arguments that would not survive
/// a plain split.
impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.tool)?;
        for (i, arg) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str(&quote_if_needed(arg))?;
        }
        f.write_str(")")
    }
}

fn quote_if_needed(arg: &str) -> String {
    let plain = !arg.is_empty()
        && arg.trim() == arg
        && !arg.contains([',', '"', '(', ')', '\\', '\n'])
        && !arg.starts_with('"');
    if plain {
        arg.to_string()
    } else {
        let escaped = arg.replace('\\', "\\\\").replace('"', "\\\"");
        format!("\"{escaped}\"")
    }
}

/// Invalid Action versus Error in Arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionErrorKind {
    #[serde(rename = "IA")]
    InvalidAction,
    #[serde(rename = "EA")]
    BadArguments,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct ActionError {
    pub kind: ActionErrorKind,
    /// The tool name as written, when one could be read.
    pub name: String,
    pub message: String,
}

impl ActionError {
    fn invalid(name: &str, message: impl Into<String>) -> Self {
        Self {
            kind: ActionErrorKind::InvalidAction,
            name: name.to_string(),
            message: message.into(),
        }
    }

    fn arguments(name: &str, message: impl Into<String>) -> Self {
        Self {
            kind: ActionErrorKind::BadArguments,
            name: name.to_string(),
            message: message.into(),
        }
    }
}

/// The call text: the rest of the last `Action:` line, or the whole
/// trimmed input when no such line exists.
fn call_text(text: &str) -> &str {
    text.lines()
        .rev()
        .find_map(|l| l.trim_start().strip_prefix("Action:"))
        .unwrap_or(text)
        .trim()
}

/// Parses an action, classifying failures as IA (unknown or unreadable
/// call, or a tool the policy may not call) or EA (arity or argument syntax).
pub fn parse_action(text: &str) -> Result<Action, ActionError> {
    let call = call_text(text);
    if call.is_empty() {
        return Err(ActionError::invalid("", "no action given"));
    }
    let Some(open) = call.find('(') else {
        return Err(ActionError::invalid(call, format!("`{call}` is not a tool call")));
    };
    let name = call[..open].trim();
    let valid_name = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if !valid_name {
        return Err(ActionError::invalid(name, format!("`{name}` is not a tool name")));
    }
    let Some(tool) = Tool::from_name(name) else {
        return Err(ActionError::invalid(name, format!("unknown tool `{name}`")));
    };
    if !tool.policy_callable() {
        return Err(ActionError::invalid(
            name,
            format!("`{name}` runs automatically after wikiSearch and cannot be called"),
        ));
    }
    if !call.ends_with(')') {
        return Err(ActionError::arguments(name, "argument list is not closed with `)`"));
    }
    let args = split_args(&call[open + 1..call.len() - 1]).map_err(|m| ActionError::arguments(name, m))?;
    if !tool.arity_ok(args.len()) {
        return Err(ActionError::arguments(
            name,
            format!("{name} takes {}, got {}", tool.arity_text(), args.len()),
        ));
    }
    if args.iter().any(String::is_empty) {
        return Err(ActionError::arguments(name, "empty argument"));
    }
    Ok(Action { tool, args })
}

fn split_args(inner: &str) -> Result<Vec<String>, String> {
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut args = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut was_quoted = false;
    let mut depth = 0usize;
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if quoted {
            match c {
                '\\' => match chars.next() {
                    Some(e @ ('"' | '\\')) => cur.push(e),
                    Some(other) => {
                        cur.push('\\');
                        cur.push(other);
                    }
                    None => return Err("unterminated quoted argument".into()),
                },
                '"' => quoted = false,
                _ => cur.push(c),
            }
            continue;
        }
        match c {
            '"' if cur.trim().is_empty() && !was_quoted => {
                cur.clear();
                quoted = true;
                was_quoted = true;
            }
            '"' => return Err("stray `\"` inside an argument".into()),
            ',' if depth == 0 => {
                args.push(finish_arg(&cur, was_quoted));
                cur.clear();
                was_quoted = false;
            }
            _ if was_quoted && !c.is_whitespace() => {
                return Err("text after a closing quote".into());
            }
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth = depth.checked_sub(1).ok_or("unbalanced `)`")?;
                cur.push(c);
            }
            _ => cur.push(c),
        }
    }
    if quoted {
        return Err("unterminated quoted argument".into());
    }
    if depth != 0 {
        return Err("unbalanced `(`".into());
    }
    args.push(finish_arg(&cur, was_quoted));
    Ok(args)
}

fn finish_arg(cur: &str, was_quoted: bool) -> String {
    if was_quoted {
        cur.to_string()
    } else {
        cur.trim().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kind(text: &str) -> ActionErrorKind {
        parse_action(text).unwrap_err().kind
    }

    #[test]
    fn plain_call() {
        assert_eq!(
            parse_action("Action: searchNeighbor(Sam, workFor)").unwrap(),
            Action::new(Tool::SearchNeighbor, ["Sam", "workFor"])
        );
    }

    #[test]
    fn bare_call_without_marker() {
        assert_eq!(parse_action("finish(SF)").unwrap(), Action::new(Tool::Finish, ["SF"]));
    }

    #[test]
    fn last_action_line_wins() {
        let text = "Thought: hmm\nAction: finish(a)\nThought: no\nAction: finish(b)";
        assert_eq!(parse_action(text).unwrap().args, vec!["b"]);
    }

    #[test]
    fn unknown_tool_is_ia() {
        assert_eq!(kind("Action: lookupEntity(Sam)"), ActionErrorKind::InvalidAction);
        assert_eq!(kind("Action: lookup(x)"), ActionErrorKind::InvalidAction);
        assert_eq!(kind(""), ActionErrorKind::InvalidAction);
        assert_eq!(kind("I think the answer is SF."), ActionErrorKind::InvalidAction);
        assert_eq!(kind("Action: extractTriples(a, b, c)"), ActionErrorKind::InvalidAction);
    }

    #[test]
    fn arity_errors_are_ea() {
        assert_eq!(kind("Action: wikiSearch(Sam)"), ActionErrorKind::BadArguments);
        assert_eq!(kind("Action: finish()"), ActionErrorKind::BadArguments);
        assert_eq!(kind("Action: searchNeighbor(a, b, c)"), ActionErrorKind::BadArguments);
        assert_eq!(kind("Action: getReasoningPath(who, what)"), ActionErrorKind::BadArguments);
        assert_eq!(kind("Action: searchNeighbor(a, )"), ActionErrorKind::BadArguments);
        assert_eq!(kind("Action: finish(\"a)"), ActionErrorKind::BadArguments);
        assert_eq!(kind("Action: finish(a"), ActionErrorKind::BadArguments);
    }

    #[test]
    fn quoted_arguments_keep_commas() {
        let a = parse_action(r#"Action: getReasoningPath("who, if anyone, wrote it?")"#).unwrap();
        assert_eq!(a.args, vec!["who, if anyone, wrote it?"]);
        let a = parse_action(r#"finish("Washington, D.C.", Paris)"#).unwrap();
        assert_eq!(a.args, vec!["Washington, D.C.", "Paris"]);
    }

    #[test]
    fn parentheses_inside_labels_are_kept() {
        let a = parse_action("searchNeighbor(Paris (France), locatedIn)").unwrap();
        assert_eq!(a.args, vec!["Paris (France)", "locatedIn"]);
    }

    #[test]
    fn finish_keeps_duplicates_for_the_env_to_drop() {
        assert_eq!(parse_action("finish(a, a, b)").unwrap().args, vec!["a", "a", "b"]);
    }

    proptest! {
        #[test]
        fn display_round_trips(
            tool in prop::sample::select(vec![Tool::GetReasoningPath, Tool::WikiSearch, Tool::SearchNeighbor, Tool::Finish]),
            pool in prop::collection::vec("[ -~]{1,12}", 3),
        ) {
            let n = match tool {
                Tool::GetReasoningPath => 1,
                Tool::Finish => 3,
                _ => 2,
            };
            let args: Vec<String> = pool.into_iter().take(n).collect();
            let action = Action { tool, args };
            prop_assert_eq!(parse_action(&action.to_string()).unwrap(), action);
        }
    }
}
