use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::warn;

use super::{shortest_paths_between, KgError, KnowledgeGraph, LabeledTriple};
use crate::data::QuestionRecord;

/// A degraded copy of a graph and exactly what was taken out of it.
#[derive(Clone, Debug)]
pub struct IncompleteKg {
    pub graph: KnowledgeGraph,
    pub removed: Vec<LabeledTriple>,
    /// Size of the shortest-path triple union the removal sampled from.
    pub candidates: usize,
    /// Questions or pairs skipped because an entity is missing from the graph.
    pub warnings: Vec<String>,
}

/// Sorted union of the triples on every shortest question-to-answer path.
pub fn path_triple_union(
    g: &KnowledgeGraph,
    questions: &[QuestionRecord],
    max_len: usize,
) -> (Vec<LabeledTriple>, Vec<String>) {
    let mut union = BTreeSet::new();
    let mut warnings = Vec::new();
    for q in questions {
        for q_label in &q.question_entities {
            let Some(q_ent) = g.entity_id(q_label) else {
                warnings.push(format!("{}: question entity `{q_label}` not in graph", q.id));
                continue;
            };
            for a_label in &q.answer_entities {
                let Some(a_ent) = g.entity_id(a_label) else {
                    warnings.push(format!("{}: answer entity `{a_label}` not in graph", q.id));
                    continue;
                };
                for path in shortest_paths_between(g, q_ent, a_ent, max_len) {
                    union.extend(path.triples().iter().map(|t| g.labeled(t)));
                }
            }
        }
    }
    (union.into_iter().collect(), warnings)
}

/// Removes `ceil(ratio * |L|)` triples sampled uniformly without replacement
/// from the shortest-path union `L`. Deterministic in all arguments.
pub fn construct_incomplete_kg(
    g: &KnowledgeGraph,
    questions: &[QuestionRecord],
    removal_ratio: f64,
    seed: u64,
    max_len: usize,
) -> Result<IncompleteKg, KgError> {
    if !(removal_ratio > 0.0 && removal_ratio <= 1.0) {
        return Err(KgError::InvalidArgument(format!(
            "removal ratio must be in (0, 1], got {removal_ratio}"
        )));
    }
    if max_len == 0 {
        return Err(KgError::InvalidArgument("max_len must be at least 1".into()));
    }
    let (candidates, warnings) = path_triple_union(g, questions, max_len);
    for w in &warnings {
        warn!(warning = %w, "skipping entity during incomplete-graph construction");
    }
    let n = candidates.len();
    let k = removal_count(removal_ratio, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();

    let mut graph = g.clone();
    let mut removed = Vec::with_capacity(k);
    for idx in picked {
        let t = &candidates[idx];
        graph.remove_triple(t)?;
        removed.push(t.clone());
    }
    Ok(IncompleteKg {
        graph,
        removed,
        candidates: n,
        warnings,
    })
}

/// `ceil(ratio * n)`, tolerant of products like `0.1 * 30 = 3.0000000000000004`.
fn removal_count(ratio: f64, n: usize) -> usize {
    let exact = ratio * n as f64;
    let k = (exact - 1e-9).ceil().max(0.0) as usize;
    k.min(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn question(id: &str, q: &str, a: &str) -> QuestionRecord {
        QuestionRecord {
            id: id.into(),
            question: format!("what links {q} to {a}?"),
            question_entities: vec![q.into()],
            answer_entities: vec![a.into()],
        }
    }

    fn chain() -> KnowledgeGraph {
        KnowledgeGraph::from_triples(&[
            LabeledTriple::new("A", "r", "B"),
            LabeledTriple::new("B", "s", "C"),
            LabeledTriple::new("X", "u", "Y"),
        ])
    }

    #[test]
    fn ceiling_arithmetic() {
        assert_eq!(removal_count(0.5, 2), 1);
        assert_eq!(removal_count(0.5, 3), 2);
        assert_eq!(removal_count(0.1, 30), 3);
        assert_eq!(removal_count(1.0, 7), 7);
        assert_eq!(removal_count(0.01, 1), 1);
        assert_eq!(removal_count(0.5, 0), 0);
    }

    #[test]
    fn half_of_a_two_hop_path_is_removed() {
        let g = chain();
        let out = construct_incomplete_kg(&g, &[question("q1", "A", "C")], 0.5, 7, 4).unwrap();
        assert_eq!(out.candidates, 2);
        assert_eq!(out.removed.len(), 1);
        assert_eq!(out.graph.len(), 2);
        assert!(!out.graph.contains_labels(&out.removed[0]));
        assert!(out.graph.contains_labels(&LabeledTriple::new("X", "u", "Y")));
    }

    #[test]
    fn same_seed_same_removal() {
        let g = chain();
        let qs = [question("q1", "A", "C")];
        let a = construct_incomplete_kg(&g, &qs, 0.5, 11, 4).unwrap();
        let b = construct_incomplete_kg(&g, &qs, 0.5, 11, 4).unwrap();
        assert_eq!(a.removed, b.removed);
        assert_eq!(a.graph, b.graph);
    }

    #[test]
    fn missing_question_entity_is_a_warning() {
        let g = chain();
        let qs = [question("q1", "Nobody", "C"), question("q2", "A", "C")];
        let out = construct_incomplete_kg(&g, &qs, 1.0, 1, 4).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.removed.len(), 2);
    }

    #[test]
    fn ratio_is_validated() {
        let g = chain();
        assert!(construct_incomplete_kg(&g, &[], 0.0, 1, 4).is_err());
        assert!(construct_incomplete_kg(&g, &[], 1.5, 1, 4).is_err());
    }
}
