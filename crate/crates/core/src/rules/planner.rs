use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{generalize, parse_rule, Bm25Index, RuleBody, RuleError};
use crate::data::QuestionRecord;
use crate::kg::{ground_rule, simple_paths_between, KnowledgeGraph, DEFAULT_MAX_LEN};
use crate::template::{render, TemplateError};

/// Rendered in place of demonstrations when retrieval found none.
pub const NO_DEMONSTRATIONS_MARKER: &str = "(no demonstrations available)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Seed questions per prompt.
    pub k: usize,
    /// Rule bodies per seed question.
    pub m: usize,
    pub max_len: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            k: 3,
            m: 5,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Demonstration {
    pub question_id: String,
    pub seed_question: String,
    pub rule_bodies: Vec<RuleBody>,
}

/// One line of the demonstrations cache file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoCacheEntry {
    pub question_id: String,
    pub question: String,
    pub rules: Vec<String>,
}

/// Up to `m` distinct rule bodies generalized from simple paths between the
/// question's entities and its answers, keeping only rules that ground to a
/// gold answer.
pub fn mine_rule_bodies(
    g: &KnowledgeGraph,
    question: &QuestionRecord,
    m: usize,
    max_len: usize,
) -> Vec<RuleBody> {
    let mut rules: Vec<RuleBody> = Vec::new();
    if m == 0 {
        return rules;
    }
    let gold: Vec<&str> = question.answer_entities.iter().map(|a| a.trim()).collect();
    for q_label in &question.question_entities {
        let Some(q) = g.entity_id(q_label) else { continue };
        for a_label in &question.answer_entities {
            let Some(a) = g.entity_id(a_label) else { continue };
            // Several paths can generalize to the same rule; over-fetch.
            for path in simple_paths_between(g, q, a, max_len, m.saturating_mul(4)) {
                let rule = generalize(g, &path);
                if rules.contains(&rule) {
                    continue;
                }
                let grounds = ground_rule(g, &rule, q_label)
                    .map(|ys| gold.iter().any(|a| ys.contains(*a)))
                    .unwrap_or(false);
                if grounds {
                    rules.push(rule);
                    if rules.len() == m {
                        return rules;
                    }
                }
            }
        }
    }
    rules
}

/// BM25-retrieves seed questions for `q` from `train` and mines their rule
/// bodies on the full graph. Seeds without any closed path are skipped and
/// the next hit takes their place.
pub fn build_demonstrations(
    q: &str,
    train: &[QuestionRecord],
    g_full: &KnowledgeGraph,
    k: usize,
    m: usize,
    max_len: usize,
) -> Result<Vec<Demonstration>, RuleError> {
    if train.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let texts: Vec<&str> = train.iter().map(|t| t.question.as_str()).collect();
    let index = Bm25Index::build(&texts)?;
    let mut demos = Vec::new();
    for (doc, _) in index.retrieve(q, train.len()) {
        let seed = &train[doc];
        let rule_bodies = mine_rule_bodies(g_full, seed, m, max_len);
        if rule_bodies.is_empty() {
            continue;
        }
        demos.push(Demonstration {
            question_id: seed.id.clone(),
            seed_question: seed.question.clone(),
            rule_bodies,
        });
        if demos.len() == k {
            break;
        }
    }
    Ok(demos)
}

/// Pre-mined rule bodies for a training set, with the BM25 index over it.
/// Produces the same demonstrations as [`build_demonstrations`] without
/// touching the graph at query time.
#[derive(Clone, Debug)]
pub struct DemonstrationPool {
    entries: Vec<DemoCacheEntry>,
    rules: Vec<Vec<RuleBody>>,
    index: Option<Bm25Index>,
}

impl DemonstrationPool {
    pub fn mine(train: &[QuestionRecord], g_full: &KnowledgeGraph, config: PlannerConfig) -> Result<Self, RuleError> {
        let entries = train
            .iter()
            .map(|q| DemoCacheEntry {
                question_id: q.id.clone(),
                question: q.question.clone(),
                rules: mine_rule_bodies(g_full, q, config.m, config.max_len)
                    .iter()
                    .map(RuleBody::serialize)
                    .collect(),
            })
            .collect();
        Self::from_cache(entries)
    }

    pub fn from_cache(entries: Vec<DemoCacheEntry>) -> Result<Self, RuleError> {
        let rules = entries
            .iter()
            .map(|e| e.rules.iter().map(|r| parse_rule(r)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let index = if entries.is_empty() {
            None
        } else {
            let texts: Vec<&str> = entries.iter().map(|e| e.question.as_str()).collect();
            Some(Bm25Index::build(&texts)?)
        };
        Ok(Self { entries, rules, index })
    }

    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            rules: Vec::new(),
            index: None,
        }
    }

    pub fn entries(&self) -> &[DemoCacheEntry] {
        &self.entries
    }

    /// Up to `k` demonstrations for `q`, skipping `exclude_id` (the question
    /// being answered, when it is itself a training question).
    pub fn demonstrations(&self, q: &str, k: usize, exclude_id: Option<&str>) -> Vec<Demonstration> {
        let Some(index) = &self.index else {
            return Vec::new();
        };
        index
            .retrieve(q, self.entries.len())
            .into_iter()
            .filter(|&(doc, _)| {
                !self.rules[doc].is_empty() && Some(self.entries[doc].question_id.as_str()) != exclude_id
            })
            .take(k)
            .map(|(doc, _)| Demonstration {
                question_id: self.entries[doc].question_id.clone(),
                seed_question: self.entries[doc].question.clone(),
                rule_bodies: self.rules[doc].clone(),
            })
            .collect()
    }

    pub fn by_id(&self) -> HashMap<&str, &[RuleBody]> {
        self.entries
            .iter()
            .zip(&self.rules)
            .map(|(e, r)| (e.question_id.as_str(), r.as_slice()))
            .collect()
    }
}

/// Fills the planner template with the question and rendered demonstrations,
/// in the order given.
pub fn assemble_planner_prompt(
    template: &str,
    q: &str,
    demos: &[Demonstration],
) -> Result<String, TemplateError> {
    let rendered = if demos.is_empty() {
        NO_DEMONSTRATIONS_MARKER.to_string()
    } else {
        demos
            .iter()
            .map(|d| {
                let rules: Vec<String> = d.rule_bodies.iter().map(RuleBody::serialize).collect();
                format!("Question: {}\nRules:\n{}", d.seed_question, rules.join("\n"))
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    render("planner", template, &[("question", q), ("demonstrations", &rendered)])
}
