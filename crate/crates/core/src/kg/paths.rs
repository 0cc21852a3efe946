use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use super::{EntityId, KgError, KnowledgeGraph, RelationId, Triple};
use crate::rules::RuleBody;

/// A relation chain grounded in the graph, from `start` to the last step's entity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClosedPath {
    pub start: EntityId,
    pub steps: Vec<(RelationId, EntityId)>,
}

impl ClosedPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn end(&self) -> EntityId {
        self.steps.last().map_or(self.start, |&(_, e)| e)
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.steps.iter().map(|&(r, _)| r)
    }

    /// Entities visited, including the start.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        std::iter::once(self.start).chain(self.steps.iter().map(|&(_, e)| e))
    }

    /// The stored triple behind each hop.
    pub fn triples(&self) -> Vec<Triple> {
        let mut prev = self.start;
        self.steps
            .iter()
            .map(|&(rel, ent)| {
                let t = if rel.is_inverse() {
                    Triple {
                        head: ent,
                        rel: rel.base(),
                        tail: prev,
                    }
                } else {
                    Triple {
                        head: prev,
                        rel,
                        tail: ent,
                    }
                };
                prev = ent;
                t
            })
            .collect()
    }

    /// Every hop is a triple of `g` in the stated direction.
    pub fn is_sound(&self, g: &KnowledgeGraph) -> bool {
        !self.is_empty() && self.triples().iter().all(|t| g.contains(t))
    }

    /// `r1(A, B) AND r2(B, C)` with entity labels.
    pub fn render(&self, g: &KnowledgeGraph) -> String {
        let mut prev = self.start;
        let atoms: Vec<String> = self
            .steps
            .iter()
            .map(|&(rel, ent)| {
                let s = format!(
                    "{}({}, {})",
                    g.relation_label(rel),
                    g.entity_label(prev),
                    g.entity_label(ent)
                );
                prev = ent;
                s
            })
            .collect();
        atoms.join(" AND ")
    }
}

fn require_entity(g: &KnowledgeGraph, label: &str) -> Result<EntityId, KgError> {
    g.entity_id(label)
        .ok_or_else(|| KgError::EntityNotFound(label.trim().to_string()))
}

fn require_max_len(max_len: usize) -> Result<(), KgError> {
    if max_len == 0 {
        return Err(KgError::InvalidArgument("max_len must be at least 1".into()));
    }
    Ok(())
}

/// All distinct shortest paths between two labeled entities, over both edge directions.
pub fn bfs_shortest_paths(
    g: &KnowledgeGraph,
    q_ent: &str,
    a_ent: &str,
    max_len: usize,
) -> Result<Vec<ClosedPath>, KgError> {
    require_max_len(max_len)?;
    let q = require_entity(g, q_ent)?;
    let a = require_entity(g, a_ent)?;
    Ok(shortest_paths_between(g, q, a, max_len))
}

/// Level-synchronous BFS from `q` that keeps every predecessor edge on the
/// level where each node was first reached, then unwinds all predecessor
/// chains from `a`. Empty when `q == a` or `a` is further than `max_len`.
pub fn shortest_paths_between(
    g: &KnowledgeGraph,
    q: EntityId,
    a: EntityId,
    max_len: usize,
) -> Vec<ClosedPath> {
    if q == a {
        return Vec::new();
    }
    let mut level_of: HashMap<EntityId, usize> = HashMap::from([(q, 0)]);
    let mut preds: HashMap<EntityId, Vec<(RelationId, EntityId)>> = HashMap::new();
    let mut frontier = vec![q];
    let mut found = false;
    for depth in 1..=max_len {
        let mut next = Vec::new();
        for &u in &frontier {
            for (rel, v) in g.edges(u) {
                match level_of.get(&v) {
                    Some(&d) if d < depth => continue,
                    Some(_) => {}
                    None => {
                        level_of.insert(v, depth);
                        next.push(v);
                    }
                }
                preds.entry(v).or_default().push((rel, u));
            }
        }
        if level_of.get(&a) == Some(&depth) {
            found = true;
            break;
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    if !found {
        return Vec::new();
    }

    let mut paths = Vec::new();
    let mut rev: Vec<(RelationId, EntityId)> = Vec::new();
    unwind(q, a, &preds, &mut rev, &mut paths);
    paths.sort();
    paths.dedup();
    paths
}

fn unwind(
    q: EntityId,
    node: EntityId,
    preds: &HashMap<EntityId, Vec<(RelationId, EntityId)>>,
    rev: &mut Vec<(RelationId, EntityId)>,
    out: &mut Vec<ClosedPath>,
) {
    if node == q {
        let steps = rev.iter().rev().copied().collect();
        out.push(ClosedPath { start: q, steps });
        return;
    }
    for &(rel, prev) in preds.get(&node).map(Vec::as_slice).unwrap_or(&[]) {
        rev.push((rel, node));
        unwind(q, prev, preds, rev, out);
        rev.pop();
    }
}

/// Undirected hop distance, or `None` when beyond `max_len`.
pub fn shortest_distance(
    g: &KnowledgeGraph,
    from: EntityId,
    to: EntityId,
    max_len: usize,
) -> Option<usize> {
    distances_from(g, from, max_len).get(&to).copied()
}

fn distances_from(g: &KnowledgeGraph, from: EntityId, max_len: usize) -> HashMap<EntityId, usize> {
    let mut dist = HashMap::from([(from, 0usize)]);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        if d == max_len {
            continue;
        }
        for (_, v) in g.edges(u) {
            if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(v) {
                slot.insert(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Up to `cap` simple paths of length at most `max_len`, shortest first.
pub fn enumerate_closed_paths(
    g: &KnowledgeGraph,
    q_ent: &str,
    a_ent: &str,
    max_len: usize,
    cap: usize,
) -> Result<Vec<ClosedPath>, KgError> {
    require_max_len(max_len)?;
    if cap == 0 {
        return Err(KgError::InvalidArgument("cap must be at least 1".into()));
    }
    let q = require_entity(g, q_ent)?;
    let a = require_entity(g, a_ent)?;
    Ok(simple_paths_between(g, q, a, max_len, cap))
}

/// Iterative deepening over exact lengths 1..=max_len. The distance-to-target
/// table prunes branches that cannot reach `a` in the remaining hops.
/// Within a length, order follows the adjacency order of each node.
pub fn simple_paths_between(
    g: &KnowledgeGraph,
    q: EntityId,
    a: EntityId,
    max_len: usize,
    cap: usize,
) -> Vec<ClosedPath> {
    if q == a || cap == 0 {
        return Vec::new();
    }
    let to_target = distances_from(g, a, max_len);
    let Some(&min_len) = to_target.get(&q) else {
        return Vec::new();
    };
    let mut out: Vec<Vec<(RelationId, EntityId)>> = Vec::new();
    let mut search = SimplePathSearch {
        g,
        target: a,
        to_target: &to_target,
        visited: HashSet::from([q]),
        steps: Vec::new(),
        out: &mut out,
        cap,
    };
    for len in min_len..=max_len {
        search.extend(q, len);
        if search.out.len() >= cap {
            break;
        }
    }
    out.into_iter()
        .map(|steps| ClosedPath { start: q, steps })
        .collect()
}

struct SimplePathSearch<'a> {
    g: &'a KnowledgeGraph,
    target: EntityId,
    to_target: &'a HashMap<EntityId, usize>,
    visited: HashSet<EntityId>,
    steps: Vec<(RelationId, EntityId)>,
    out: &'a mut Vec<Vec<(RelationId, EntityId)>>,
    cap: usize,
}

impl SimplePathSearch<'_> {
    fn extend(&mut self, node: EntityId, len: usize) {
        let depth = self.steps.len();
        if depth == len {
            if node == self.target {
                self.out.push(self.steps.clone());
            }
            return;
        }
        let remaining = len - depth - 1;
        for (rel, next) in self.g.edges(node) {
            if self.out.len() >= self.cap {
                return;
            }
            if self.visited.contains(&next) {
                continue;
            }
            if next == self.target && remaining > 0 {
                continue;
            }
            match self.to_target.get(&next) {
                Some(&d) if d <= remaining => {}
                _ => continue,
            }
            self.visited.insert(next);
            self.steps.push((rel, next));
            self.extend(next, len);
            self.steps.pop();
            self.visited.remove(&next);
        }
    }
}

/// Entities reachable from `start` by following `relations` in order.
pub fn ground_relations(
    g: &KnowledgeGraph,
    start: EntityId,
    relations: &[RelationId],
) -> BTreeSet<EntityId> {
    let mut frontier = BTreeSet::from([start]);
    for &rel in relations {
        frontier = frontier
            .iter()
            .flat_map(|&e| g.neighbor_ids(e, rel))
            .collect();
        if frontier.is_empty() {
            break;
        }
    }
    frontier
}

/// Every `y` such that the rule body holds from `q_ent` to `y`.
/// A relation unknown to the graph has no grounding.
pub fn ground_rule(
    g: &KnowledgeGraph,
    rule: &RuleBody,
    q_ent: &str,
) -> Result<BTreeSet<String>, KgError> {
    if rule.is_empty() {
        return Err(KgError::InvalidArgument("rule body has no atoms".into()));
    }
    let start = require_entity(g, q_ent)?;
    let mut rels = Vec::with_capacity(rule.len());
    for label in rule.relation_labels() {
        match g.relation_id(&label) {
            Some(r) => rels.push(r),
            None => return Ok(BTreeSet::new()),
        }
    }
    Ok(ground_relations(g, start, &rels)
        .into_iter()
        .map(|e| g.entity_label(e).to_string())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::LabeledTriple;
    use crate::rules::{generalize, RuleAtom};

    fn graph(triples: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let ts: Vec<LabeledTriple> = triples
            .iter()
            .map(|&(h, r, t)| LabeledTriple::new(h, r, t))
            .collect();
        KnowledgeGraph::from_triples(&ts)
    }

    fn diamond() -> KnowledgeGraph {
        graph(&[("A", "r", "B"), ("B", "t", "D"), ("A", "s", "C"), ("C", "t", "D")])
    }

    #[test]
    fn chain_has_single_shortest_path() {
        let g = graph(&[("A", "r", "B"), ("B", "s", "C")]);
        let paths = bfs_shortest_paths(&g, "A", "C", 4).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].render(&g), "r(A, B) AND s(B, C)");
    }

    #[test]
    fn diamond_has_two_shortest_paths() {
        let g = diamond();
        let paths = bfs_shortest_paths(&g, "A", "D", 4).unwrap();
        let rendered: Vec<String> = paths.iter().map(|p| p.render(&g)).collect();
        assert_eq!(paths.len(), 2);
        assert!(rendered.contains(&"r(A, B) AND t(B, D)".to_string()));
        assert!(rendered.contains(&"s(A, C) AND t(C, D)".to_string()));
    }

    #[test]
    fn self_path_is_empty() {
        let g = diamond();
        assert!(bfs_shortest_paths(&g, "A", "A", 4).unwrap().is_empty());
        assert!(enumerate_closed_paths(&g, "A", "A", 4, 10).unwrap().is_empty());
    }

    #[test]
    fn shortest_paths_use_inverse_edges() {
        let g = graph(&[("A", "r", "B"), ("C", "s", "B")]);
        let paths = bfs_shortest_paths(&g, "A", "C", 4).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].render(&g), "r(A, B) AND s^-1(B, C)");
        assert!(paths[0].is_sound(&g));
    }

    #[test]
    fn unreachable_within_bound_is_empty() {
        let g = graph(&[("A", "r", "B"), ("B", "s", "C"), ("C", "t", "D")]);
        assert!(bfs_shortest_paths(&g, "A", "D", 2).unwrap().is_empty());
        assert_eq!(bfs_shortest_paths(&g, "A", "D", 3).unwrap().len(), 1);
    }

    #[test]
    fn unknown_entity_is_an_error() {
        let g = diamond();
        assert!(matches!(
            bfs_shortest_paths(&g, "A", "Z", 4),
            Err(KgError::EntityNotFound(_))
        ));
        assert!(matches!(
            enumerate_closed_paths(&g, "Z", "A", 4, 1),
            Err(KgError::EntityNotFound(_))
        ));
    }

    #[test]
    fn enumeration_respects_cap_and_length() {
        let g = diamond();
        assert_eq!(enumerate_closed_paths(&g, "A", "D", 4, 1).unwrap().len(), 1);
        assert!(enumerate_closed_paths(&g, "A", "D", 1, 10).unwrap().is_empty());
        let all = enumerate_closed_paths(&g, "A", "D", 4, 100).unwrap();
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn enumeration_is_shortest_first() {
        let g = graph(&[("A", "r", "D"), ("A", "s", "B"), ("B", "t", "C"), ("C", "u", "D")]);
        let paths = enumerate_closed_paths(&g, "A", "D", 4, 100).unwrap();
        let lens: Vec<usize> = paths.iter().map(ClosedPath::len).collect();
        assert_eq!(lens, vec![1, 3]);
    }

    #[test]
    fn grounding_follows_the_chain() {
        let g = graph(&[("Sam", "workFor", "OpenAI"), ("OpenAI", "locatedIn", "SF")]);
        let rule = RuleBody::new(vec![
            RuleAtom::forward("workFor"),
            RuleAtom::forward("locatedIn"),
        ])
        .unwrap();
        let got = ground_rule(&g, &rule, "Sam").unwrap();
        assert_eq!(got, BTreeSet::from(["SF".to_string()]));
        let missing = RuleBody::new(vec![RuleAtom::forward("liveIn")]).unwrap();
        assert!(ground_rule(&g, &missing, "Sam").unwrap().is_empty());
    }

    #[test]
    fn grounding_matches_nested_loop_join() {
        let g = graph(&[
            ("a", "p", "b1"),
            ("a", "p", "b2"),
            ("a", "q", "b3"),
            ("b1", "q", "c1"),
            ("b1", "q", "c2"),
            ("b2", "q", "c2"),
            ("b2", "q", "c3"),
            ("b3", "q", "c4"),
        ]);
        let rule = RuleBody::new(vec![RuleAtom::forward("p"), RuleAtom::forward("q")]).unwrap();
        let got = ground_rule(&g, &rule, "a").unwrap();
        // Oracle: nested-loop join over the raw triple list.
        let raw: Vec<LabeledTriple> = g.labeled_triples().collect();
        let mut expected = BTreeSet::new();
        for t1 in raw.iter().filter(|t| t.head == "a" && t.relation == "p") {
            for t2 in raw.iter().filter(|t| t.head == t1.tail && t.relation == "q") {
                expected.insert(t2.tail.clone());
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn mined_path_round_trips_through_rule() {
        let g = graph(&[("A", "r", "B"), ("C", "s", "B"), ("C", "t", "D")]);
        for p in enumerate_closed_paths(&g, "A", "D", 4, 10).unwrap() {
            let rule = generalize(&g, &p);
            let got = ground_rule(&g, &rule, g.entity_label(p.start)).unwrap();
            assert!(got.contains(g.entity_label(p.end())));
        }
    }
}
