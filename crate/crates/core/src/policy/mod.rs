//! The policy boundary: chat prompts in, completion text out.
//!
//! One [`Policy`] handle serves every prompt the system issues; the
//! [`Purpose`] on each request says which template produced it.

mod http;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

pub use http::{HttpPolicy, HttpPolicyConfig};
pub use scripted::{FnPolicy, ReplayPolicy, RoutedPolicy, ScriptEntry, ScriptedPolicy, REPLAY_FALLBACK};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy unavailable: {0}")]
    Unavailable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Which prompt a request carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Next thought and action of the executor.
    Act,
    /// Rule bodies for the plan fixed at episode start.
    InitialPlan,
    /// Rule bodies requested through `getReasoningPath`.
    Plan,
    /// Triples from one retrieved document.
    Extract,
    /// Critique of a finished trajectory.
    Refine,
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Purpose::Act => "act",
            Purpose::InitialPlan => "initial_plan",
            Purpose::Plan => "plan",
            Purpose::Extract => "extract",
            Purpose::Refine => "refine",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyRequest<'a> {
    pub purpose: Purpose,
    /// The question id of the episode issuing the request.
    pub episode_id: &'a str,
    /// Number of environment steps completed when the request was made.
    pub step: usize,
    pub messages: &'a [ChatMessage],
}

pub trait Policy: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError>;
}

/// Thought/action/observation texts of one completed step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepText {
    pub thought: String,
    pub action_raw: String,
    pub observation: String,
}

/// Everything the executor prompt is rendered from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyContext {
    /// Rendered agent instructions, tool signatures included.
    pub system: String,
    /// Feedback from an earlier attempt, shown ahead of the instructions.
    pub critique: Option<String>,
    /// The initial observation: question, topic entities, notes.
    pub task: String,
    pub plan: Vec<String>,
    pub history: Vec<StepText>,
}

impl PolicyContext {
    pub fn new(system: impl Into<String>, task: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            critique: None,
            task: task.into(),
            plan: Vec::new(),
            history: Vec::new(),
        }
    }

    /// Context replaying a recorded trajectory's steps.
    pub fn from_trajectory(system: impl Into<String>, task: impl Into<String>, t: &Trajectory) -> Self {
        let mut ctx = Self::new(system, task);
        ctx.plan = t.plan.clone();
        ctx.history = t
            .steps
            .iter()
            .map(|s| StepText {
                thought: s.thought.clone(),
                action_raw: s.action_raw.clone(),
                observation: s.observation.clone(),
            })
            .collect();
        ctx
    }
}

pub const OBSERVATION_PREFIX: &str = "Observation: ";

/// Canonical assistant text for one step.
pub fn render_step(thought: &str, action_raw: &str) -> String {
    format!("Thought: {thought}\nAction: {action_raw}")
}

pub fn render_observation(observation: &str) -> String {
    format!("{OBSERVATION_PREFIX}{observation}")
}

fn render_task(ctx: &PolicyContext) -> String {
    if ctx.plan.is_empty() {
        ctx.task.clone()
    } else {
        format!("{}\n\nPlan (candidate rules):\n{}", ctx.task, ctx.plan.join("\n"))
    }
}

fn render_system(ctx: &PolicyContext) -> String {
    match &ctx.critique {
        Some(c) => format!("Feedback on a previous attempt at this question:\n{c}\n\n{}", ctx.system),
        None => ctx.system.clone(),
    }
}

/// `system, user(task), (assistant(step), user(observation))*`.
pub fn build_agent_prompt(ctx: &PolicyContext) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(2 + 2 * ctx.history.len());
    messages.push(ChatMessage::system(render_system(ctx)));
    messages.push(ChatMessage::user(render_task(ctx)));
    for step in &ctx.history {
        messages.push(ChatMessage::assistant(render_step(&step.thought, &step.action_raw)));
        messages.push(ChatMessage::user(render_observation(&step.observation)));
    }
    messages
}

fn marker_lines<'a>(text: &'a str, marker: &str) -> Vec<(usize, &'a str)> {
    let mut found = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix(marker) {
            found.push((offset, rest));
        }
        offset += line.len();
    }
    found
}

/// Splits a completion into `(thought, action_raw)`.
///
/// The action is the rest of the last line starting with `Action:`; the
/// thought is the text between the last `Thought:` line before it and that
/// line. Missing markers give empty strings.
pub fn parse_react(text: &str) -> (String, String) {
    let actions = marker_lines(text, "Action:");
    let thoughts = marker_lines(text, "Thought:");
    match actions.last() {
        Some(&(action_at, rest)) => {
            let action_raw = rest.lines().next().unwrap_or("").trim().to_string();
            let thought = thoughts
                .iter()
                .rev()
                .find(|&&(at, _)| at < action_at)
                .map(|&(at, _)| {
                    let start = text[at..].find("Thought:").map(|i| at + i + "Thought:".len()).unwrap_or(at);
                    text[start..action_at].trim().to_string()
                })
                .unwrap_or_default();
            (thought, action_raw)
        }
        None => {
            let thought = thoughts
                .last()
                .map(|&(_, rest)| rest.trim().to_string())
                .unwrap_or_default();
            (thought, String::new())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx_with(steps: usize) -> PolicyContext {
        let mut ctx = PolicyContext::new("sys", "Question: where?");
        for i in 0..steps {
            ctx.history.push(StepText {
                thought: format!("t{i}"),
                action_raw: format!("searchNeighbor(e{i}, r)"),
                observation: format!("o{i}"),
            });
        }
        ctx
    }

    #[test]
    fn empty_history_has_two_messages() {
        let m = build_agent_prompt(&ctx_with(0));
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].role, Role::System);
        assert_eq!(m[1].role, Role::User);
    }

    #[test]
    fn history_alternates_roles() {
        let m = build_agent_prompt(&ctx_with(2));
        let roles: Vec<Role> = m.iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            vec![Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant, Role::User]
        );
        assert_eq!(m[2].content, "Thought: t0\nAction: searchNeighbor(e0, r)");
        assert_eq!(m[3].content, "Observation: o0");
        assert_eq!(build_agent_prompt(&ctx_with(2)), m);
    }

    #[test]
    fn plan_and_critique_are_rendered() {
        let mut ctx = ctx_with(0);
        ctx.plan = vec!["r(x, y)".into()];
        ctx.critique = Some("be faster".into());
        let m = build_agent_prompt(&ctx);
        assert!(m[0].content.starts_with("Feedback on a previous attempt"));
        assert!(m[0].content.ends_with("sys"));
        assert!(m[1].content.contains("r(x, y)"));
    }

    #[test]
    fn react_parsing() {
        assert_eq!(
            parse_react("Thought: go left\nAction: finish(SF)"),
            ("go left".into(), "finish(SF)".into())
        );
        assert_eq!(parse_react("Action: finish(SF)"), (String::new(), "finish(SF)".into()));
        assert_eq!(parse_react("I think the answer is SF."), (String::new(), String::new()));
    }

    #[test]
    fn react_takes_last_pair() {
        let text = "Thought: a\nAction: x(1)\nObservation: fake\nThought: b\nmore b\nAction: y(2)\ntrailing";
        assert_eq!(parse_react(text), ("b\nmore b".into(), "y(2)".into()));
    }

    #[test]
    fn react_thought_without_action() {
        assert_eq!(parse_react("Thought: hmm"), ("hmm".into(), String::new()));
    }

    proptest! {
        #[test]
        fn parse_inverts_render(
            thought in "[a-zA-Z0-9 ,.?]{0,40}",
            action in "[a-zA-Z]{1,12}\\([a-zA-Z0-9 ,]{0,20}\\)",
        ) {
            let thought = thought.trim().to_string();
            let action = action.trim().to_string();
            prop_assert_eq!(parse_react(&render_step(&thought, &action)), (thought, action));
        }

        #[test]
        fn distinct_histories_render_distinctly(a in "[a-z ]{0,10}", b in "[a-z ]{0,10}", field in 0usize..3) {
            prop_assume!(a != b);
            let mut x = ctx_with(2);
            let mut y = ctx_with(2);
            let set = |c: &mut PolicyContext, v: &str| match field {
                0 => c.history[1].thought = v.to_string(),
                1 => c.history[1].action_raw = v.to_string(),
                _ => c.history[1].observation = v.to_string(),
            };
            set(&mut x, &a);
            set(&mut y, &b);
            prop_assert_ne!(build_agent_prompt(&x), build_agent_prompt(&y));
        }
    }
}
