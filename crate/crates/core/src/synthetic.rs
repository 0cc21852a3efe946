//! Seeded synthetic datasets with known answer paths, and the scripted
//! policies that exploit that knowledge.
//!
//! Every question owns a fresh chain of entities, so the chain is its only
//! path and each rule along it grounds to exactly the gold answers. Noise
//! triples live on a separate set of entities and relations.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet};
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_jsonl, DataError, Document, QuestionRecord};
use crate::kg::{write_triples_tsv, KgError, KnowledgeGraph, LabeledTriple};
use crate::policy::{FnPolicy, PolicyRequest, Purpose, Role, ScriptEntry};

const RELATIONS: [&str; 12] = [
    "worksFor",
    "locatedIn",
    "bornIn",
    "marriedTo",
    "directedBy",
    "writtenBy",
    "capitalOf",
    "memberOf",
    "starredIn",
    "foundedBy",
    "releasedBy",
    "coachedBy",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub questions: usize,
    /// Chain length of every question.
    pub hops: usize,
    /// Size of the relation vocabulary chains draw from (at most 12).
    pub chain_relations: usize,
    /// Answers per question; the last hop fans out when above 1.
    pub max_answers: usize,
    pub noise_entities: usize,
    pub noise_triples: usize,
    /// Extra questions whose chain is broken in the middle.
    pub unreachable: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// 20 two-hop questions on a 100-triple graph.
    fn default() -> Self {
        Self {
            questions: 20,
            hops: 2,
            chain_relations: 8,
            max_answers: 1,
            noise_entities: 30,
            noise_triples: 60,
            unreachable: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub triples: Vec<LabeledTriple>,
    pub questions: Vec<QuestionRecord>,
    /// One document per chain triple.
    pub documents: Vec<Document>,
    /// Per reachable question, its chain triples hop by hop; the last hop
    /// has one triple per answer.
    pub paths: BTreeMap<String, Vec<Vec<LabeledTriple>>>,
}

/// `worksFor` -> `works for`.
pub fn relation_words(rel: &str) -> String {
    let mut out = String::new();
    for c in rel.chars() {
        if c.is_uppercase() {
            out.push(' ');
            out.extend(c.to_lowercase());
        } else if c == '_' {
            out.push(' ');
        } else {
            out.push(c);
        }
    }
    out
}

impl SyntheticDataset {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        assert!(spec.hops >= 1, "hops must be at least 1");
        assert!(spec.max_answers >= 1, "max_answers must be at least 1");
        assert!(spec.unreachable == 0 || spec.hops >= 2, "unreachable questions need at least 2 hops");
        let vocab = &RELATIONS[..spec.chain_relations.clamp(1, RELATIONS.len())];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut next_entity = 0usize;
        let mut fresh = || {
            next_entity += 1;
            format!("e{next_entity:05}")
        };
        let mut triples = Vec::new();
        let mut questions = Vec::new();
        let mut documents = Vec::new();
        let mut paths = BTreeMap::new();

        let doc_for = |t: &LabeledTriple, documents: &mut Vec<Document>| {
            documents.push(Document {
                doc_id: format!("d{:05}", documents.len() + 1),
                title: t.head.clone(),
                text: format!("{} {} {}.", t.head, relation_words(&t.relation), t.tail),
            });
        };

        for i in 0..spec.questions + spec.unreachable {
            let id = format!("q{:03}", i + 1);
            let reachable = i < spec.questions;
            let rels: Vec<&str> = (0..spec.hops).map(|_| *vocab.choose(&mut rng).expect("vocab")).collect();
            let n_answers = rng.random_range(1..=spec.max_answers);
            let start = fresh();
            let mut hops: Vec<Vec<LabeledTriple>> = Vec::new();
            let mut cur = start.clone();
            for (h, rel) in rels.iter().enumerate() {
                let last = h + 1 == spec.hops;
                let fan = if last { n_answers } else { 1 };
                let mut layer = Vec::new();
                for _ in 0..fan {
                    layer.push(LabeledTriple::new(cur.clone(), *rel, fresh()));
                }
                if !reachable && h + 1 == spec.hops.div_ceil(2) {
                    // Break the chain: the next hop starts somewhere else.
                    cur = fresh();
                } else {
                    cur = layer[0].tail.clone();
                }
                hops.push(layer);
            }
            let answers: Vec<String> = hops.last().expect("hops").iter().map(|t| t.tail.clone()).collect();
            let mut phrase = start.clone();
            for rel in &rels {
                phrase = format!("the {} of {phrase}", relation_words(rel));
            }
            let question = format!("What is {phrase}?");
            for t in hops.iter().flatten() {
                triples.push(t.clone());
                doc_for(t, &mut documents);
            }
            questions.push(QuestionRecord {
                id: id.clone(),
                question,
                question_entities: vec![start],
                answer_entities: answers,
            });
            if reachable {
                paths.insert(id, hops);
            }
        }

        let noise_rels: Vec<String> = (0..4).map(|k| format!("noiseRel{k}")).collect();
        let noise_ents: Vec<String> = (0..spec.noise_entities.max(2)).map(|k| format!("n{k:04}")).collect();
        let mut seen: HashSet<LabeledTriple> = HashSet::new();
        let max_noise = noise_ents.len() * (noise_ents.len() - 1) * noise_rels.len();
        while seen.len() < spec.noise_triples.min(max_noise) {
            let h = noise_ents.choose(&mut rng).expect("noise");
            let t = noise_ents.choose(&mut rng).expect("noise");
            if h == t {
                continue;
            }
            let r = noise_rels.choose(&mut rng).expect("noise");
            let triple = LabeledTriple::new(h.clone(), r.clone(), t.clone());
            if seen.insert(triple.clone()) {
                triples.push(triple);
            }
        }
        Self {
            triples,
            questions,
            documents,
            paths,
        }
    }

    pub fn graph(&self) -> KnowledgeGraph {
        KnowledgeGraph::from_triples(&self.triples)
    }

    /// Gold answers of a question.
    fn answers(&self, id: &str) -> Vec<String> {
        self.questions
            .iter()
            .find(|q| q.id == id)
            .map(|q| q.answer_entities.clone())
            .unwrap_or_default()
    }

    /// Follows each chain with `searchNeighbor`, then finishes with the
    /// gold answers.
    pub fn oracle_script(&self) -> Vec<ScriptEntry> {
        self.paths
            .iter()
            .map(|(id, hops)| {
                let mut outputs: Vec<String> = hops
                    .iter()
                    .map(|layer| {
                        let t = &layer[0];
                        format!(
                            "Thought: Follow {} from {}.\nAction: searchNeighbor({}, {})",
                            t.relation, t.head, t.head, t.relation
                        )
                    })
                    .collect();
                outputs.push(format!(
                    "Thought: These are the answers.\nAction: finish({})",
                    self.answers(id).join(", ")
                ));
                ScriptEntry {
                    id: Some(id.clone()),
                    outputs,
                }
            })
            .collect()
    }

    /// Looks every hop up with `wikiSearch`, then finishes.
    pub fn wiki_script(&self) -> Vec<ScriptEntry> {
        self.paths
            .iter()
            .map(|(id, hops)| {
                let mut outputs: Vec<String> = hops
                    .iter()
                    .map(|layer| {
                        let t = &layer[0];
                        format!(
                            "Thought: The graph may lack this fact.\nAction: wikiSearch({}, {})",
                            t.head, t.relation
                        )
                    })
                    .collect();
                outputs.push(format!(
                    "Thought: Found them.\nAction: finish({})",
                    self.answers(id).join(", ")
                ));
                ScriptEntry {
                    id: Some(id.clone()),
                    outputs,
                }
            })
            .collect()
    }

    /// Rule bodies of each question's chain, one per line, as a planner
    /// would write them.
    pub fn gold_rule(&self, id: &str) -> Option<String> {
        let hops = self.paths.get(id)?;
        let n = hops.len();
        let atoms: Vec<String> = hops
            .iter()
            .enumerate()
            .map(|(i, layer)| format!("{}({}, {})", layer[0].relation, crate::rules::variable(i, n), crate::rules::variable(i + 1, n)))
            .collect();
        Some(atoms.join(" AND "))
    }

    /// Writes `kg.tsv`, `questions.jsonl`, `corpus.jsonl`,
    /// `oracle_script.jsonl` and `wiki_script.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SyntheticError> {
        std::fs::create_dir_all(dir).map_err(|e| SyntheticError::Io(dir.display().to_string(), e))?;
        write_triples_tsv(dir.join("kg.tsv"), &self.triples)?;
        write_jsonl(dir.join("questions.jsonl"), &self.questions)?;
        write_jsonl(dir.join("corpus.jsonl"), &self.documents)?;
        write_jsonl(dir.join("oracle_script.jsonl"), &self.oracle_script())?;
        write_jsonl(dir.join("wiki_script.jsonl"), &self.wiki_script())?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn document_section(prompt: &str) -> &str {
    prompt.rfind("Document:").map(|i| &prompt[i..]).unwrap_or(prompt)
}

/// Extraction that reads the true triple behind every synthetic document
/// in the prompt's document section.
pub fn oracle_extractor(ds: &SyntheticDataset) -> FnPolicy {
    let mut by_text: Vec<(String, LabeledTriple)> = Vec::new();
    for t in ds.paths.values().flatten().flatten() {
        let text = format!("{} {} {}.", t.head, relation_words(&t.relation), t.tail);
        if let Some(d) = ds.documents.iter().find(|d| d.text == text) {
            by_text.push((format!("{}\n{}", d.title, d.text), t.clone()));
        }
    }
    FnPolicy::new("oracle-extractor", move |req: &PolicyRequest<'_>| {
        let prompt = req.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let section = document_section(prompt);
        Ok(by_text
            .iter()
            .filter(|(doc, _)| section.contains(doc.as_str()))
            .map(|(_, t)| t.to_tsv_line())
            .collect::<Vec<_>>()
            .join("\n"))
    })
}

fn stable_hash(seed: u64, id: &str, attempt: u8) -> u64 {
    let mut h = DefaultHasher::new();
    (seed, id, attempt).hash(&mut h);
    h.finish()
}

/// How a [`noisy_actor`] episode ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Finishes with every gold answer.
    Correct,
    /// Finishes with the first gold answer only.
    Partial,
    /// Finishes with an entity that is not an answer.
    Wrong,
    /// Never finishes.
    Stall,
}

/// Outcome drawn for a question; the retry after a critique draws again.
pub fn noisy_outcome(seed: u64, id: &str, retry: bool) -> Outcome {
    match stable_hash(seed, id, retry as u8) % 4 {
        0 => Outcome::Correct,
        1 => Outcome::Partial,
        2 => Outcome::Wrong,
        _ => Outcome::Stall,
    }
}

/// A deterministic, imperfect executor: walks the gold chain with
/// `searchNeighbor` and then ends as [`noisy_outcome`] dictates. Answers
/// critiques with a fixed note and planning requests with the gold rule.
pub fn noisy_actor(ds: &SyntheticDataset, seed: u64) -> FnPolicy {
    let ds = ds.clone();
    FnPolicy::new("noisy-oracle", move |req: &PolicyRequest<'_>| {
        let id = req.episode_id;
        match req.purpose {
            Purpose::Refine => return Ok("Follow every hop and report all answers.".into()),
            Purpose::Extract => return Ok(String::new()),
            Purpose::Plan | Purpose::InitialPlan => return Ok(ds.gold_rule(id).unwrap_or_default()),
            Purpose::Act => {}
        }
        let Some(hops) = ds.paths.get(id) else {
            return Ok("Thought: I do not know.\nAction: finish(unknown)".into());
        };
        let retry = req
            .messages
            .first()
            .is_some_and(|m| m.role == Role::System && m.content.starts_with("Feedback"));
        let outcome = noisy_outcome(seed, id, retry);
        if outcome == Outcome::Stall {
            let t = &hops[0][0];
            return Ok(format!("Thought: Look again.\nAction: searchNeighbor({}, {})", t.head, t.relation));
        }
        if let Some(layer) = hops.get(req.step) {
            let t = &layer[0];
            return Ok(format!("Thought: Next hop.\nAction: searchNeighbor({}, {})", t.head, t.relation));
        }
        let answers = ds.answers(id);
        let finish = match outcome {
            Outcome::Correct => answers.join(", "),
            Outcome::Partial => answers[0].clone(),
            _ => hops[0][0].tail.clone(),
        };
        Ok(format!("Thought: Done.\nAction: finish({finish})"))
    })
}

/// `n` distinct random triples over `entities` entities and `relations`
/// relations, for load and query benchmarks.
pub fn random_triples(n: usize, entities: usize, relations: usize, seed: u64) -> Vec<LabeledTriple> {
    assert!(entities >= 2 && relations >= 1);
    assert!(n <= entities * (entities - 1) * relations, "not enough distinct triples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<(usize, usize, usize)> = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let h = rng.random_range(0..entities);
        let t = rng.random_range(0..entities);
        let r = rng.random_range(0..relations);
        if h != t && seen.insert((h, r, t)) {
            out.push(LabeledTriple::new(format!("ent{h}"), format!("rel{r}"), format!("ent{t}")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::path_coverage;
    use crate::kg::ground_rule;
    use crate::rules::parse_rule;

    #[test]
    fn default_spec_has_100_triples_and_20_questions() {
        let ds = SyntheticDataset::generate(&SyntheticSpec::default());
        assert_eq!(ds.triples.len(), 100);
        assert_eq!(ds.questions.len(), 20);
        assert_eq!(ds.graph().len(), 100);
    }

    #[test]
    fn gold_rules_ground_to_exactly_the_answers() {
        let spec = SyntheticSpec {
            max_answers: 2,
            ..SyntheticSpec::default()
        };
        let ds = SyntheticDataset::generate(&spec);
        let g = ds.graph();
        for q in &ds.questions {
            let rule = parse_rule(&ds.gold_rule(&q.id).unwrap()).unwrap();
            let got = ground_rule(&g, &rule, &q.question_entities[0]).unwrap();
            let want: std::collections::BTreeSet<String> = q.answer_entities.iter().cloned().collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn unreachable_questions_have_no_path() {
        let spec = SyntheticSpec {
            questions: 5,
            unreachable: 3,
            ..SyntheticSpec::default()
        };
        let ds = SyntheticDataset::generate(&spec);
        let cov = path_coverage(&ds.graph(), &ds.questions, 4);
        assert_eq!(cov.covered, 5);
        assert_eq!(cov.questions, 8);
    }

    #[test]
    fn generation_is_seeded() {
        let a = SyntheticDataset::generate(&SyntheticSpec::default());
        let b = SyntheticDataset::generate(&SyntheticSpec::default());
        let c = SyntheticDataset::generate(&SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        });
        assert_eq!(a, b);
        assert_ne!(a.triples, c.triples);
    }

    #[test]
    fn random_triples_are_distinct() {
        let ts = random_triples(1000, 100, 3, 5);
        let set: HashSet<_> = ts.iter().collect();
        assert_eq!(set.len(), 1000);
    }
}
