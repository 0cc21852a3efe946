//! The episode environment: tool dispatch over the graph, the planner, a
//! document retriever and the extraction prompt.

mod action;
mod retriever;

use std::collections::BTreeSet;
use std::time::Instant;

use thiserror::Error;
use tracing::debug;

use crate::data::QuestionRecord;
use crate::kg::{KnowledgeGraph, LabeledTriple};
use crate::policy::{build_agent_prompt, render_observation, ChatMessage, Policy, PolicyContext, PolicyError, PolicyRequest, Purpose, StepText};
use crate::rules::{assemble_planner_prompt, parse_rule_bodies, DemonstrationPool, RuleBody};
use crate::template::{render, TemplateError, Templates};
use crate::trajectory::{ActionRecord, StepRecord, Termination};

pub use action::{parse_action, tool_descriptions, Action, ActionError, ActionErrorKind, Tool};
pub use retriever::{CorpusRetriever, DocHit, Retriever};

/// Header of the extracted-triples part of a `wikiSearch` observation.
pub const EXTRACTED_HEADER: &str = "Extracted triples:";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode `{0}` is already finished")]
    Finished(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvConfig {
    pub max_steps: usize,
    /// Documents fetched per `wikiSearch`; each goes through extraction.
    pub top_n_docs: usize,
    /// Longer entity lists are cut and end with `(+N more)`.
    pub max_list_items: usize,
    /// Hard bound on observation length, in characters.
    pub max_chars: usize,
    /// Characters of each document shown in the observation.
    pub snippet_chars: usize,
    /// Seed questions shown to the planner.
    pub planner_k: usize,
    /// Ask the planner for rules before the first step.
    pub plan_on_reset: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 10,
            top_n_docs: 3,
            max_list_items: 30,
            max_chars: 4000,
            snippet_chars: 400,
            planner_k: 3,
            plan_on_reset: false,
        }
    }
}

/// Structured result behind an observation's text.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Task { entities: Vec<String>, missing: Vec<String> },
    Rules(Vec<RuleBody>),
    Entities { entity: String, relation: String, neighbors: Vec<String> },
    UnknownEntity(String),
    Documents { docs: Vec<DocHit>, extracted: Vec<LabeledTriple> },
    Answers(Vec<String>),
    ActionError(ActionError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub text: String,
    pub payload: Payload,
}

/// Per-episode state. The environment never mutates the graph; extracted
/// triples wait in `buffered` until the caller commits them.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub question: QuestionRecord,
    /// Text of the initial observation.
    pub task: String,
    pub plan: Vec<String>,
    pub critique: Option<String>,
    pub steps: Vec<StepRecord>,
    pub done: bool,
    pub termination: Option<Termination>,
    pub final_answers: Vec<String>,
    pub buffered: Vec<LabeledTriple>,
}

impl EnvState {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }
}

/// Everything an environment needs except the policy, so one set of
/// resources can serve successive policies.
#[derive(Clone)]
pub struct EnvResources<'a> {
    pub graph: &'a KnowledgeGraph,
    pub templates: &'a Templates,
    pub demonstrations: Option<&'a DemonstrationPool>,
    pub retriever: Option<&'a dyn Retriever>,
    pub config: EnvConfig,
}

impl<'a> EnvResources<'a> {
    pub fn new(graph: &'a KnowledgeGraph, templates: &'a Templates) -> Self {
        Self {
            graph,
            templates,
            demonstrations: None,
            retriever: None,
            config: EnvConfig::default(),
        }
    }

    pub fn with_policy<'b>(&'b self, policy: &'b dyn Policy) -> Environment<'b>
    where
        'a: 'b,
    {
        Environment {
            graph: self.graph,
            policy,
            templates: self.templates,
            demonstrations: self.demonstrations,
            retriever: self.retriever,
            config: self.config.clone(),
        }
    }
}

pub struct Environment<'a> {
    pub graph: &'a KnowledgeGraph,
    pub policy: &'a dyn Policy,
    pub templates: &'a Templates,
    pub demonstrations: Option<&'a DemonstrationPool>,
    pub retriever: Option<&'a dyn Retriever>,
    pub config: EnvConfig,
}

impl<'a> Environment<'a> {
    pub fn new(graph: &'a KnowledgeGraph, policy: &'a dyn Policy, templates: &'a Templates) -> Self {
        Self {
            graph,
            policy,
            templates,
            demonstrations: None,
            retriever: None,
            config: EnvConfig::default(),
        }
    }

    pub fn with_demonstrations(mut self, pool: &'a DemonstrationPool) -> Self {
        self.demonstrations = Some(pool);
        self
    }

    pub fn with_retriever(mut self, retriever: &'a dyn Retriever) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn with_config(mut self, config: EnvConfig) -> Self {
        self.config = config;
        self
    }

    /// Executor instructions with the tool list filled in.
    pub fn system_prompt(&self) -> Result<String, TemplateError> {
        render("agent_system", &self.templates.agent_system, &[("tools", &tool_descriptions())])
    }

    pub fn reset(&self, question: &QuestionRecord) -> Result<(EnvState, Observation), EnvError> {
        self.reset_with(question, None)
    }

    /// Starts an episode; `critique` is feedback on an earlier attempt.
    pub fn reset_with(
        &self,
        question: &QuestionRecord,
        critique: Option<String>,
    ) -> Result<(EnvState, Observation), EnvError> {
        let entities: Vec<String> = question.question_entities.iter().map(|e| e.trim().to_string()).collect();
        let missing: Vec<String> = entities
            .iter()
            .filter(|e| self.graph.entity_id(e).is_none())
            .cloned()
            .collect();
        let mut text = format!("Question: {}\nTopic entities: {}", question.question.trim(), entities.join(", "));
        for m in &missing {
            text.push_str(&format!(
                "\nNote: topic entity `{m}` is not in the knowledge graph; wikiSearch may still find facts about it."
            ));
        }
        let mut state = EnvState {
            question: question.clone(),
            task: text.clone(),
            plan: Vec::new(),
            critique,
            steps: Vec::new(),
            done: false,
            termination: None,
            final_answers: Vec::new(),
            buffered: Vec::new(),
        };
        if self.config.plan_on_reset {
            let rules = self.plan(&state, &question.question, Purpose::InitialPlan)?;
            state.plan = rules.iter().map(RuleBody::serialize).collect();
        }
        let obs = Observation {
            text,
            payload: Payload::Task { entities, missing },
        };
        Ok((state, obs))
    }

    /// The executor's view of the episode so far.
    pub fn context(&self, state: &EnvState) -> Result<PolicyContext, TemplateError> {
        let mut ctx = PolicyContext::new(self.system_prompt()?, state.task.clone());
        ctx.critique = state.critique.clone();
        ctx.plan = state.plan.clone();
        ctx.history = state
            .steps
            .iter()
            .map(|s| StepText {
                thought: s.thought.clone(),
                action_raw: s.action_raw.clone(),
                observation: s.observation.clone(),
            })
            .collect();
        Ok(ctx)
    }

    /// Chat messages for the executor's next move.
    pub fn prompt(&self, state: &EnvState) -> Result<Vec<ChatMessage>, TemplateError> {
        Ok(build_agent_prompt(&self.context(state)?))
    }

    /// Runs one action. Invalid actions still consume a step and yield an
    /// instructive observation.
    pub fn step(&self, state: &mut EnvState, thought: &str, action_raw: &str) -> Result<Observation, EnvError> {
        if state.done {
            return Err(EnvError::Finished(state.question.id.clone()));
        }
        let started = Instant::now();
        let (record, obs) = match parse_action(action_raw) {
            Ok(action) => {
                let obs = self.dispatch(state, thought, action_raw, &action)?;
                let record = ActionRecord {
                    name: action.tool.name().to_string(),
                    args: action.args.clone(),
                };
                if action.tool == Tool::Finish {
                    state.final_answers = dedup_answers(&action.args);
                    state.done = true;
                    state.termination = Some(Termination::Finish);
                }
                (record, obs)
            }
            Err(err) => {
                let record = ActionRecord {
                    name: err.name.clone(),
                    args: Vec::new(),
                };
                (record, action_error_observation(action_raw, err))
            }
        };
        let obs = Observation {
            text: truncate_chars(&obs.text, self.config.max_chars),
            payload: obs.payload,
        };
        debug!(
            episode = %state.question.id,
            step = state.steps.len(),
            action = %record.name,
            latency_us = started.elapsed().as_micros() as u64,
            "env step"
        );
        state.steps.push(StepRecord {
            thought: thought.to_string(),
            action: record,
            action_raw: action_raw.to_string(),
            observation: obs.text.clone(),
        });
        if !state.done && state.steps.len() >= self.config.max_steps {
            state.done = true;
            state.termination = Some(Termination::MaxSteps);
        }
        Ok(obs)
    }

    /// Runs a parsed action through its canonical text.
    pub fn step_action(&self, state: &mut EnvState, thought: &str, action: &Action) -> Result<Observation, EnvError> {
        self.step(state, thought, &action.to_string())
    }

    fn dispatch(&self, state: &mut EnvState, thought: &str, action_raw: &str, action: &Action) -> Result<Observation, EnvError> {
        let a = &action.args;
        match action.tool {
            Tool::GetReasoningPath => self.exec_get_reasoning_path(state, &a[0]),
            Tool::SearchNeighbor => Ok(self.exec_search_neighbor(&a[0], &a[1])),
            Tool::WikiSearch => self.exec_wiki_search(state, thought, action_raw, &a[0], &a[1]),
            Tool::Finish => Ok(exec_finish(a)),
            Tool::ExtractTriples => unreachable!("parse_action rejects extractTriples"),
        }
    }

    fn plan(&self, state: &EnvState, sub_question: &str, purpose: Purpose) -> Result<Vec<RuleBody>, EnvError> {
        let demos = self
            .demonstrations
            .map(|p| p.demonstrations(sub_question, self.config.planner_k, Some(&state.question.id)))
            .unwrap_or_default();
        let prompt = assemble_planner_prompt(&self.templates.planner, sub_question, &demos)?;
        let messages = [ChatMessage::user(prompt)];
        let text = self.policy.generate(&PolicyRequest {
            purpose,
            episode_id: &state.question.id,
            step: state.steps.len(),
            messages: &messages,
        })?;
        let mut rules = parse_rule_bodies(&text).rules;
        rules.truncate(self.config.max_list_items);
        Ok(rules)
    }

    pub fn exec_get_reasoning_path(&self, state: &EnvState, sub_question: &str) -> Result<Observation, EnvError> {
        let rules = self.plan(state, sub_question, Purpose::Plan)?;
        let text = if rules.is_empty() {
            format!("No rules found for: {sub_question}")
        } else {
            let lines: Vec<String> = rules.iter().map(RuleBody::serialize).collect();
            format!("Rules:\n{}", lines.join("\n"))
        };
        Ok(Observation {
            text,
            payload: Payload::Rules(rules),
        })
    }

    pub fn exec_search_neighbor(&self, entity: &str, relation: &str) -> Observation {
        match self.graph.neighbors(entity, relation) {
            Ok(neighbors) => {
                let text = if neighbors.is_empty() {
                    format!("No neighbors of {entity} via {relation}.")
                } else {
                    format!(
                        "Neighbors of {entity} via {relation}: {}",
                        truncate_list(&neighbors, self.config.max_list_items)
                    )
                };
                Observation {
                    text,
                    payload: Payload::Entities {
                        entity: entity.to_string(),
                        relation: relation.to_string(),
                        neighbors,
                    },
                }
            }
            Err(_) => Observation {
                text: format!("Entity `{entity}` is not in the knowledge graph."),
                payload: Payload::UnknownEntity(entity.to_string()),
            },
        }
    }

    /// Retrieves documents and runs extraction on each; extracted triples
    /// are buffered on the state, not added to the graph.
    pub fn exec_wiki_search(
        &self,
        state: &mut EnvState,
        thought: &str,
        action_raw: &str,
        entity: &str,
        relation: &str,
    ) -> Result<Observation, EnvError> {
        let docs = match self.retriever {
            Some(r) => r.search(&format!("{entity} {relation}"), self.config.top_n_docs),
            None => Vec::new(),
        };
        if docs.is_empty() {
            return Ok(Observation {
                text: format!("No documents found for {entity} {relation}."),
                payload: Payload::Documents {
                    docs,
                    extracted: Vec::new(),
                },
            });
        }
        let history = self.extraction_history(state, thought, action_raw);
        let mut extracted: Vec<LabeledTriple> = Vec::new();
        for doc in &docs {
            for t in self.exec_extract_triples(state, &history, entity, relation, doc)? {
                if !extracted.contains(&t) {
                    extracted.push(t);
                }
            }
        }
        for t in &extracted {
            if !state.buffered.contains(t) {
                state.buffered.push(t.clone());
            }
        }
        let mut text = format!("Documents for {entity} / {relation}:");
        for (i, d) in docs.iter().enumerate() {
            text.push_str(&format!(
                "\n[{}] {}: {}",
                i + 1,
                d.title,
                truncate_chars(&d.text.replace('\n', " "), self.config.snippet_chars)
            ));
        }
        if extracted.is_empty() {
            text.push_str(&format!("\n{EXTRACTED_HEADER} none"));
        } else {
            text.push_str(&format!("\n{EXTRACTED_HEADER}"));
            for t in &extracted {
                text.push('\n');
                text.push_str(&t.to_tsv_line());
            }
        }
        Ok(Observation {
            text,
            payload: Payload::Documents { docs, extracted },
        })
    }

    fn extraction_history(&self, state: &EnvState, thought: &str, action_raw: &str) -> String {
        let mut h = state.task.clone();
        for s in &state.steps {
            h.push_str(&format!(
                "\nThought: {}\nAction: {}\n{}",
                s.thought,
                s.action_raw,
                render_observation(&s.observation)
            ));
        }
        h.push_str(&format!("\nThought: {thought}\nAction: {action_raw}"));
        h
    }

    /// One extraction call on one document.
    pub fn exec_extract_triples(
        &self,
        state: &EnvState,
        history: &str,
        entity: &str,
        relation: &str,
        doc: &DocHit,
    ) -> Result<Vec<LabeledTriple>, EnvError> {
        let document = format!("{}\n{}", doc.title, doc.text);
        let prompt = render(
            "extraction",
            &self.templates.extraction,
            &[("history", history), ("entity", entity), ("relation", relation), ("document", &document)],
        )?;
        let messages = [ChatMessage::user(prompt)];
        let text = self.policy.generate(&PolicyRequest {
            purpose: Purpose::Extract,
            episode_id: &state.question.id,
            step: state.steps.len(),
            messages: &messages,
        })?;
        Ok(parse_extracted_triples(&text).0)
    }
}

fn exec_finish(args: &[String]) -> Observation {
    let answers = dedup_answers(args);
    Observation {
        text: format!("Answers: {}", answers.join(", ")),
        payload: Payload::Answers(answers),
    }
}

fn dedup_answers(args: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    args.iter()
        .map(|a| a.trim().to_string())
        .filter(|a| seen.insert(a.clone()))
        .collect()
}

fn action_error_observation(action_raw: &str, err: ActionError) -> Observation {
    let usage: Vec<&str> = Tool::ALL
        .into_iter()
        .filter(|t| t.policy_callable())
        .map(Tool::signature)
        .collect();
    let text = match err.kind {
        ActionErrorKind::InvalidAction => format!(
            "Invalid action `{}`: {}. Use one of: {}.",
            action_raw.trim(),
            err.message,
            usage.join(", ")
        ),
        ActionErrorKind::BadArguments => {
            let sig = Tool::from_name(&err.name).map(Tool::signature).unwrap_or("");
            format!("Invalid arguments in `{}`: {}. Usage: {sig}.", action_raw.trim(), err.message)
        }
    };
    Observation {
        text,
        payload: Payload::ActionError(err),
    }
}

fn truncate_list(items: &[String], max: usize) -> String {
    if items.len() <= max {
        items.join(", ")
    } else {
        format!("{} (+{} more)", items[..max].join(", "), items.len() - max)
    }
}

const TRUNCATION_SUFFIX: &str = " ... (truncated)";

/// Cuts `s` to at most `max` characters, marking the cut.
pub fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        return s.to_string();
    }
    let keep = max.saturating_sub(TRUNCATION_SUFFIX.chars().count());
    let mut out: String = s.chars().take(keep).collect();
    out.push_str(TRUNCATION_SUFFIX);
    out.chars().take(max).collect()
}

/// Reads `head<TAB>relation<TAB>tail` or `(head, relation, tail)` lines.
/// Returns the distinct triples (inverse relations rewritten) and the
/// number of non-blank lines that were neither.
pub fn parse_extracted_triples(text: &str) -> (Vec<LabeledTriple>, usize) {
    let mut triples = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').map(str::trim).collect()
        } else if let Some(inner) = line.strip_prefix('(').and_then(|l| l.strip_suffix(')')) {
            inner.split(',').map(str::trim).collect()
        } else {
            Vec::new()
        };
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            skipped += 1;
            continue;
        }
        let t = LabeledTriple::new(fields[0], fields[1], fields[2]).canonical();
        if t.relation.is_empty() {
            skipped += 1;
            continue;
        }
        if !triples.contains(&t) {
            triples.push(t);
        }
    }
    (triples, skipped)
}
