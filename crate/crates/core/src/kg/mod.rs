//! In-memory knowledge graph.
//!
//! Entities and relations are interned to dense ids. Every base relation
//! `r` with id `2k` has an inverse `r^-1` with id `2k + 1`, so inverting a
//! relation id is a single bit flip. Triples are always stored with the base
//! relation; the inverse direction is served from the incoming adjacency.

mod incomplete;
mod paths;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use incomplete::{construct_incomplete_kg, path_triple_union, IncompleteKg};
pub use paths::{
    bfs_shortest_paths, enumerate_closed_paths, ground_rule, ground_relations, shortest_distance,
    shortest_paths_between, simple_paths_between, ClosedPath,
};

/// Literal suffix marking a traversal against the stored edge direction.
pub const INVERSE_MARKER: &str = "^-1";

/// Default bound on path length (matches the deepest multi-hop questions).
pub const DEFAULT_MAX_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("knowledge graph is empty")]
    EmptyGraph,
    #[error("entity not found: {0}")]
    EntityNotFound(String),
    #[error("triple not found: {0}")]
    TripleNotFound(LabeledTriple),
    #[error("invalid relation label: {0}")]
    InvalidRelation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Relation id; even ids are stored relations, odd ids their inverses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl RelationId {
    pub fn inverse(self) -> Self {
        RelationId(self.0 ^ 1)
    }

    pub fn is_inverse(self) -> bool {
        self.0 & 1 == 1
    }

    pub fn base(self) -> Self {
        RelationId(self.0 & !1)
    }
}

/// A stored fact. `rel` is always a base (non-inverse) relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

/// A triple in surface form, as read from or written to TSV.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl LabeledTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    /// Rewrites `(h, r^-1, t)` as `(t, r, h)`; trims every field.
    pub fn canonical(&self) -> Self {
        let relation = self.relation.trim();
        match relation.strip_suffix(INVERSE_MARKER) {
            Some(base) => Self::new(self.tail.trim(), base.trim(), self.head.trim()),
            None => Self::new(self.head.trim(), relation, self.tail.trim()),
        }
    }

    pub fn to_tsv_line(&self) -> String {
        format!("{}\t{}\t{}", self.head, self.relation, self.tail)
    }
}

impl fmt::Display for LabeledTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Counts reported by [`load_kg`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub unique_triples: usize,
    pub duplicates: usize,
    pub entities: usize,
    pub relations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    // Indexed by base id / 2.
    relation_labels: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    // head -> sorted (base rel, tail)
    out_adj: Vec<Vec<(RelationId, EntityId)>>,
    // tail -> sorted (base rel, head)
    in_adj: Vec<Vec<(RelationId, EntityId)>>,
    triple_count: usize,
}

/// Parses one TSV line into trimmed fields; `None` for blank lines.
pub fn parse_tsv_line(line: &str, line_no: usize) -> Result<Option<LabeledTriple>, KgError> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(KgError::Parse {
            line: line_no,
            message: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    let (head, relation, tail) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
    if head.is_empty() || relation.is_empty() || tail.is_empty() {
        return Err(KgError::Parse {
            line: line_no,
            message: "empty field".into(),
        });
    }
    if relation.ends_with(INVERSE_MARKER) {
        return Err(KgError::Parse {
            line: line_no,
            message: format!("relation `{relation}` carries the reserved inverse marker"),
        });
    }
    Ok(Some(LabeledTriple::new(head, relation, tail)))
}

/// Reads a `head<TAB>relation<TAB>tail` file. Duplicate lines collapse.
pub fn load_kg(path: impl AsRef<Path>) -> Result<(KnowledgeGraph, LoadReport), KgError> {
    let path = path.as_ref();
    let io_err = |source| KgError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut triples = Vec::new();
    let mut lines = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        lines += 1;
        if let Some(t) = parse_tsv_line(&line, idx + 1)? {
            triples.push(t);
        }
    }
    let graph = KnowledgeGraph::from_triples(&triples);
    if graph.is_empty() {
        return Err(KgError::EmptyGraph);
    }
    let report = LoadReport {
        lines,
        unique_triples: graph.len(),
        duplicates: triples.len() - graph.len(),
        entities: graph.num_entities(),
        relations: graph.num_relations(),
    };
    Ok((graph, report))
}

/// Writes triples as TSV, one per line, LF-terminated.
pub fn write_triples_tsv<'a>(
    path: impl AsRef<Path>,
    triples: impl IntoIterator<Item = &'a LabeledTriple>,
) -> Result<(), KgError> {
    let path = path.as_ref();
    let io_err = |source| KgError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for t in triples {
        writeln!(out, "{}", t.to_tsv_line()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a TSV triple list (e.g. a removed-triples report) without building a graph.
pub fn read_triples_tsv(path: impl AsRef<Path>) -> Result<Vec<LabeledTriple>, KgError> {
    let path = path.as_ref();
    let io_err = |source| KgError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        if let Some(t) = parse_tsv_line(&line.map_err(io_err)?, idx + 1)? {
            out.push(t);
        }
    }
    Ok(out)
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bulk construction. Interning follows first appearance; duplicates collapse.
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a LabeledTriple>) -> Self {
        let mut g = Self::new();
        let mut ids = Vec::new();
        for t in triples {
            let t = t.canonical();
            let head = g.intern_entity(&t.head);
            let rel = g.intern_relation(&t.relation);
            let tail = g.intern_entity(&t.tail);
            ids.push(Triple { head, rel, tail });
        }
        g.rebuild_adjacency(ids);
        g
    }

    fn rebuild_adjacency(&mut self, mut ids: Vec<Triple>) {
        ids.sort_unstable();
        ids.dedup();
        let n = self.entity_labels.len();
        self.out_adj = vec![Vec::new(); n];
        self.in_adj = vec![Vec::new(); n];
        for t in &ids {
            self.out_adj[t.head.0 as usize].push((t.rel, t.tail));
            self.in_adj[t.tail.0 as usize].push((t.rel, t.head));
        }
        for adj in &mut self.in_adj {
            adj.sort_unstable();
        }
        self.triple_count = ids.len();
    }

    pub fn len(&self) -> usize {
        self.triple_count
    }

    pub fn is_empty(&self) -> bool {
        self.triple_count == 0
    }

    pub fn num_entities(&self) -> usize {
        self.entity_labels.len()
    }

    /// Number of base relations (inverses not counted).
    pub fn num_relations(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_index.get(label.trim()).copied()
    }

    /// Resolves a relation label, honouring a trailing `^-1`.
    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        let label = label.trim();
        match label.strip_suffix(INVERSE_MARKER) {
            Some(base) => self.relation_index.get(base.trim()).map(|r| r.inverse()),
            None => self.relation_index.get(label).copied(),
        }
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id.0 as usize]
    }

    /// Label of the stored relation underlying `id` (without marker).
    pub fn base_relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[(id.0 / 2) as usize]
    }

    pub fn relation_label(&self, id: RelationId) -> String {
        let base = self.base_relation_label(id);
        if id.is_inverse() {
            format!("{base}{INVERSE_MARKER}")
        } else {
            base.to_string()
        }
    }

    pub fn entity_labels(&self) -> impl Iterator<Item = &str> {
        self.entity_labels.iter().map(String::as_str)
    }

    pub fn relation_labels(&self) -> impl Iterator<Item = &str> {
        self.relation_labels.iter().map(String::as_str)
    }

    fn intern_entity(&mut self, label: &str) -> EntityId {
        let label = label.trim();
        if let Some(&id) = self.entity_index.get(label) {
            return id;
        }
        let id = EntityId(self.entity_labels.len() as u32);
        self.entity_labels.push(label.to_string());
        self.entity_index.insert(label.to_string(), id);
        self.out_adj.push(Vec::new());
        self.in_adj.push(Vec::new());
        id
    }

    fn intern_relation(&mut self, label: &str) -> RelationId {
        let label = label.trim();
        if let Some(&id) = self.relation_index.get(label) {
            return id;
        }
        let id = RelationId(2 * self.relation_labels.len() as u32);
        self.relation_labels.push(label.to_string());
        self.relation_index.insert(label.to_string(), id);
        id
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.out_adj
            .get(t.head.0 as usize)
            .is_some_and(|adj| adj.binary_search(&(t.rel, t.tail)).is_ok())
    }

    pub fn contains_labels(&self, t: &LabeledTriple) -> bool {
        self.resolve(t).is_some_and(|t| self.contains(&t))
    }

    /// Resolves a labeled triple to ids without interning.
    pub fn resolve(&self, t: &LabeledTriple) -> Option<Triple> {
        let t = t.canonical();
        Some(Triple {
            head: self.entity_id(&t.head)?,
            rel: self.relation_id(&t.relation)?,
            tail: self.entity_id(&t.tail)?,
        })
    }

    pub fn labeled(&self, t: &Triple) -> LabeledTriple {
        LabeledTriple::new(
            self.entity_label(t.head),
            self.relation_label(t.rel),
            self.entity_label(t.tail),
        )
    }

    /// Inserts a triple, interning new labels. Returns `false` if it was already present.
    pub fn add_triple(&mut self, t: &LabeledTriple) -> Result<bool, KgError> {
        let t = t.canonical();
        if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
            return Err(KgError::InvalidArgument(format!("triple has an empty field: {t}")));
        }
        let head = self.intern_entity(&t.head);
        let rel = self.intern_relation(&t.relation);
        let tail = self.intern_entity(&t.tail);
        Ok(self.insert_ids(Triple { head, rel, tail }))
    }

    fn insert_ids(&mut self, t: Triple) -> bool {
        let out = &mut self.out_adj[t.head.0 as usize];
        match out.binary_search(&(t.rel, t.tail)) {
            Ok(_) => false,
            Err(pos) => {
                out.insert(pos, (t.rel, t.tail));
                let inc = &mut self.in_adj[t.tail.0 as usize];
                let pos = inc.binary_search(&(t.rel, t.head)).unwrap_err();
                inc.insert(pos, (t.rel, t.head));
                self.triple_count += 1;
                true
            }
        }
    }

    /// Removes a present triple. Interned labels are kept.
    pub fn remove_triple(&mut self, t: &LabeledTriple) -> Result<(), KgError> {
        let ids = self
            .resolve(t)
            .filter(|ids| self.contains(ids))
            .ok_or_else(|| KgError::TripleNotFound(t.canonical()))?;
        self.remove_ids(ids);
        Ok(())
    }

    fn remove_ids(&mut self, t: Triple) {
        let out = &mut self.out_adj[t.head.0 as usize];
        if let Ok(pos) = out.binary_search(&(t.rel, t.tail)) {
            out.remove(pos);
            let inc = &mut self.in_adj[t.tail.0 as usize];
            if let Ok(pos) = inc.binary_search(&(t.rel, t.head)) {
                inc.remove(pos);
            }
            self.triple_count -= 1;
        }
    }

    /// Entities reached from `ent` along `rel` (inverse ids follow incoming edges).
    pub fn neighbor_ids(&self, ent: EntityId, rel: RelationId) -> impl Iterator<Item = EntityId> + '_ {
        let (adj, base) = if rel.is_inverse() {
            (&self.in_adj[ent.0 as usize], rel.base())
        } else {
            (&self.out_adj[ent.0 as usize], rel)
        };
        let lo = adj.partition_point(|&(r, _)| r < base);
        let hi = adj.partition_point(|&(r, _)| r <= base);
        adj[lo..hi].iter().map(|&(_, e)| e)
    }

    /// Sorted, deduplicated neighbor labels. An unknown relation yields an empty list.
    pub fn neighbors(&self, ent: &str, rel: &str) -> Result<Vec<String>, KgError> {
        let e = self
            .entity_id(ent)
            .ok_or_else(|| KgError::EntityNotFound(ent.trim().to_string()))?;
        let Some(r) = self.relation_id(rel) else {
            return Ok(Vec::new());
        };
        let mut out: Vec<String> = self
            .neighbor_ids(e, r)
            .map(|n| self.entity_label(n).to_string())
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// All edges leaving `ent` in both directions: outgoing first, then incoming as inverses.
    pub fn edges(&self, ent: EntityId) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        let out = self.out_adj[ent.0 as usize].iter().copied();
        let inc = self.in_adj[ent.0 as usize]
            .iter()
            .map(|&(r, h)| (r.inverse(), h));
        out.chain(inc)
    }

    /// Distinct relations (with direction) incident to `ent`, as labels.
    pub fn relations_of(&self, ent: EntityId) -> Vec<String> {
        let mut rels: Vec<RelationId> = self.edges(ent).map(|(r, _)| r).collect();
        rels.sort_unstable();
        rels.dedup();
        rels.into_iter().map(|r| self.relation_label(r)).collect()
    }

    /// Triples in (head id, relation id, tail id) order.
    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.out_adj.iter().enumerate().flat_map(|(h, adj)| {
            adj.iter().map(move |&(rel, tail)| Triple {
                head: EntityId(h as u32),
                rel,
                tail,
            })
        })
    }

    pub fn labeled_triples(&self) -> impl Iterator<Item = LabeledTriple> + '_ {
        self.triples().map(|t| self.labeled(&t))
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<(), KgError> {
        let triples: Vec<LabeledTriple> = self.labeled_triples().collect();
        write_triples_tsv(path, &triples)
    }

    /// Order-independent content hash over the labeled triple set.
    pub fn fingerprint(&self) -> u64 {
        let mut lines: Vec<LabeledTriple> = self.labeled_triples().collect();
        lines.sort_unstable();
        let mut h = DefaultHasher::new();
        lines.hash(&mut h);
        h.finish()
    }

    /// True when both adjacency indexes equal a fresh rebuild from the triple set.
    pub fn adjacency_consistent(&self) -> bool {
        let mut rebuilt = self.clone();
        rebuilt.rebuild_adjacency(self.triples().collect());
        let in_from_out_ok = self.triples().all(|t| {
            self.in_adj[t.tail.0 as usize]
                .binary_search(&(t.rel, t.head))
                .is_ok()
        });
        let in_total: usize = self.in_adj.iter().map(Vec::len).sum();
        rebuilt.out_adj == self.out_adj
            && rebuilt.in_adj == self.in_adj
            && in_from_out_ok
            && in_total == self.triple_count
            && rebuilt.triple_count == self.triple_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sam_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_triples(&[
            LabeledTriple::new("Sam", "workFor", "OpenAI"),
            LabeledTriple::new("OpenAI", "locatedIn", "SF"),
        ])
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_dedups_identical_lines() {
        let f = write_tmp("A\tr\tB\nA\tr\tB\nB\ts\tC\n");
        let (g, report) = load_kg(f.path()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(report.unique_triples, 2);
        assert_eq!(report.duplicates, 1);
        assert!(g.adjacency_consistent());
    }

    #[test]
    fn load_reports_malformed_line_number() {
        let f = write_tmp("A\tr\tB\nB\ts\tC\nC\td\n");
        match load_kg(f.path()) {
            Err(KgError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_empty_file() {
        let f = write_tmp("");
        assert!(matches!(load_kg(f.path()), Err(KgError::EmptyGraph)));
    }

    #[test]
    fn load_trims_fields() {
        let f = write_tmp(" A \t r\tB \r\n");
        let (g, _) = load_kg(f.path()).unwrap();
        assert_eq!(g.neighbors("A", "r").unwrap(), vec!["B"]);
    }

    #[test]
    fn neighbors_forward_inverse_and_absent() {
        let g = sam_graph();
        assert_eq!(g.neighbors("Sam", "workFor").unwrap(), vec!["OpenAI"]);
        assert_eq!(g.neighbors("OpenAI", "workFor^-1").unwrap(), vec!["Sam"]);
        assert!(g.neighbors("Sam", "locatedIn").unwrap().is_empty());
        assert!(g.neighbors("Sam", "noSuchRelation").unwrap().is_empty());
        assert!(matches!(
            g.neighbors("Nobody", "workFor"),
            Err(KgError::EntityNotFound(_))
        ));
    }

    #[test]
    fn neighbors_are_sorted() {
        let g = KnowledgeGraph::from_triples(&[
            LabeledTriple::new("x", "r", "c"),
            LabeledTriple::new("x", "r", "a"),
            LabeledTriple::new("x", "r", "b"),
        ]);
        assert_eq!(g.neighbors("x", "r").unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn inverse_of_inverse_is_identity() {
        let g = sam_graph();
        let r = g.relation_id("workFor").unwrap();
        assert_eq!(r.inverse().inverse(), r);
        assert_eq!(g.relation_id("workFor^-1"), Some(r.inverse()));
        assert_eq!(g.relation_label(r.inverse()), "workFor^-1");
    }

    #[test]
    fn add_then_remove_restores_graph() {
        let mut g = sam_graph();
        let before = g.clone();
        let t = LabeledTriple::new("SF", "workFor", "Sam");
        assert!(g.add_triple(&t).unwrap());
        assert!(!g.add_triple(&t).unwrap());
        g.remove_triple(&t).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn add_new_fact_is_visible() {
        let mut g = sam_graph();
        g.add_triple(&LabeledTriple::new("Sam", "liveIn", "SF")).unwrap();
        assert_eq!(g.neighbors("Sam", "liveIn").unwrap(), vec!["SF"]);
        assert!(g.adjacency_consistent());
    }

    #[test]
    fn add_inverse_form_is_canonicalised() {
        let mut g = sam_graph();
        assert!(!g
            .add_triple(&LabeledTriple::new("OpenAI", "workFor^-1", "Sam"))
            .unwrap());
    }

    #[test]
    fn remove_absent_is_not_found() {
        let mut g = sam_graph();
        let err = g
            .remove_triple(&LabeledTriple::new("Sam", "liveIn", "SF"))
            .unwrap_err();
        assert!(matches!(err, KgError::TripleNotFound(_)));
    }

    #[test]
    fn fingerprint_ignores_insertion_order() {
        let a = sam_graph();
        let b = KnowledgeGraph::from_triples(&[
            LabeledTriple::new("OpenAI", "locatedIn", "SF"),
            LabeledTriple::new("Sam", "workFor", "OpenAI"),
        ]);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn graph_is_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<KnowledgeGraph>();
    }
}
