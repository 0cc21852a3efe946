//! Symbolic rule bodies: generalization from grounded paths, the text
//! grammar the planner speaks, BM25 seed retrieval and demonstration mining.
//!
//! Grammar (one rule per line):
//!
//! ```text
//! rule := atom ( " AND " atom )*
//! atom := relation "(" var ", " var ")"
//! var  := "x" | "z1" | ... | "z{L-1}" | "y"
//! ```
//!
//! Inverse traversals carry a literal `^-1` suffix on the relation name.

mod bm25;
mod planner;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::kg::{ClosedPath, KgError, KnowledgeGraph, INVERSE_MARKER};
use crate::template::TemplateError;

pub use bm25::{tokenize, Bm25Index, DEFAULT_B, DEFAULT_K1};
pub use planner::{
    assemble_planner_prompt, build_demonstrations, mine_rule_bodies, DemoCacheEntry,
    Demonstration, DemonstrationPool, PlannerConfig, NO_DEMONSTRATIONS_MARKER,
};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule body must contain at least one atom")]
    Empty,
    #[error("malformed rule `{text}`: {reason}")]
    Malformed { text: String, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleAtom {
    /// Stored relation label, never marker-suffixed.
    pub relation: String,
    pub inverse: bool,
}

impl RuleAtom {
    pub fn forward(relation: impl Into<String>) -> Self {
        Self {
            relation: relation.into(),
            inverse: false,
        }
    }

    pub fn inverse(relation: impl Into<String>) -> Self {
        Self {
            relation: relation.into(),
            inverse: true,
        }
    }

    /// Parses `rel` or `rel^-1`.
    pub fn from_label(label: &str) -> Self {
        match label.strip_suffix(INVERSE_MARKER) {
            Some(base) => Self::inverse(base),
            None => Self::forward(label),
        }
    }

    pub fn label(&self) -> String {
        if self.inverse {
            format!("{}{INVERSE_MARKER}", self.relation)
        } else {
            self.relation.clone()
        }
    }

    fn flipped(mut self) -> Self {
        self.inverse = !self.inverse;
        self
    }
}

/// A closed chain `r1(x, z1) AND r2(z1, z2) AND ... AND rL(z{L-1}, y)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleBody {
    atoms: Vec<RuleAtom>,
}

impl RuleBody {
    pub fn new(atoms: Vec<RuleAtom>) -> Result<Self, RuleError> {
        if atoms.is_empty() {
            return Err(RuleError::Empty);
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[RuleAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Relation labels in chain order, inverse ones `^-1`-suffixed.
    pub fn relation_labels(&self) -> Vec<String> {
        self.atoms.iter().map(RuleAtom::label).collect()
    }

    /// Canonical text form.
    pub fn serialize(&self) -> String {
        let n = self.atoms.len();
        self.atoms
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}({}, {})", a.label(), variable(i, n), variable(i + 1, n)))
            .collect::<Vec<_>>()
            .join(" AND ")
    }
}

/// Name of the i-th variable in a chain of `n` atoms.
pub(crate) fn variable(i: usize, n: usize) -> String {
    match i {
        0 => "x".into(),
        i if i == n => "y".into(),
        i => format!("z{i}"),
    }
}

impl fmt::Display for RuleBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl FromStr for RuleBody {
    type Err = RuleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_rule(s)
    }
}

/// Replaces the entities of a grounded path with chain variables.
pub fn generalize(g: &KnowledgeGraph, path: &ClosedPath) -> RuleBody {
    let atoms = path
        .relations()
        .map(|r| RuleAtom {
            relation: g.base_relation_label(r).to_string(),
            inverse: r.is_inverse(),
        })
        .collect();
    RuleBody { atoms }
}

fn malformed(text: &str, reason: impl Into<String>) -> RuleError {
    RuleError::Malformed {
        text: text.to_string(),
        reason: reason.into(),
    }
}

/// Parses a single rule. Atoms whose variables are swapped are read as the
/// inverse relation; `∧`, `&` and any-case `and` are accepted as connectors.
pub fn parse_rule(text: &str) -> Result<RuleBody, RuleError> {
    let mut raw = Vec::new();
    let mut rest = text.trim();
    loop {
        let open = rest
            .find('(')
            .ok_or_else(|| malformed(text, "expected `relation(var, var)`"))?;
        let name = rest[..open].trim();
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == ',' || c == ')') {
            return Err(malformed(text, format!("bad relation name `{name}`")));
        }
        let close = rest[open..]
            .find(')')
            .map(|i| i + open)
            .ok_or_else(|| malformed(text, "unclosed `(`"))?;
        let vars: Vec<&str> = rest[open + 1..close].split(',').map(str::trim).collect();
        if vars.len() != 2 || vars.iter().any(|v| v.is_empty()) {
            return Err(malformed(text, "each atom takes exactly two variables"));
        }
        raw.push((name, vars[0], vars[1]));
        rest = rest[close + 1..].trim_start();
        if rest.is_empty() {
            break;
        }
        rest = strip_connector(rest).ok_or_else(|| malformed(text, "expected `AND` between atoms"))?;
    }

    let n = raw.len();
    let mut atoms = Vec::with_capacity(n);
    for (i, (name, a, b)) in raw.into_iter().enumerate() {
        let (from, to) = (variable(i, n), variable(i + 1, n));
        let atom = RuleAtom::from_label(name);
        if atom.relation.is_empty() {
            return Err(malformed(text, "bad relation name"));
        }
        if a == from && b == to {
            atoms.push(atom);
        } else if a == to && b == from {
            atoms.push(atom.flipped());
        } else {
            return Err(malformed(
                text,
                format!("atom {} must link `{from}` and `{to}`", i + 1),
            ));
        }
    }
    RuleBody::new(atoms)
}

fn strip_connector(s: &str) -> Option<&str> {
    for conn in ["∧", "&&", "&"] {
        if let Some(rest) = s.strip_prefix(conn) {
            return Some(rest.trim_start());
        }
    }
    let word = s.get(..3)?;
    let after = s.get(3..)?;
    if word.eq_ignore_ascii_case("and") && after.starts_with(char::is_whitespace) {
        return Some(after.trim_start());
    }
    None
}

/// Result of best-effort extraction from free-form policy output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedRules {
    pub rules: Vec<RuleBody>,
    pub skipped: usize,
}

/// Reads one rule per non-blank line. List bullets and numbering are
/// ignored; lines that do not parse are counted and skipped; repeats collapse.
pub fn parse_rule_bodies(text: &str) -> ParsedRules {
    let mut out = ParsedRules::default();
    for line in text.lines() {
        let line = strip_list_marker(line.trim());
        if line.is_empty() {
            continue;
        }
        match parse_rule(line) {
            Ok(rule) if !out.rules.contains(&rule) => out.rules.push(rule),
            Ok(_) => {}
            Err(_) => out.skipped += 1,
        }
    }
    out
}

fn strip_list_marker(line: &str) -> &str {
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r.trim_start();
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{enumerate_closed_paths, LabeledTriple};
    use proptest::prelude::*;

    #[test]
    fn generalize_replaces_entities_with_variables() {
        let g = KnowledgeGraph::from_triples(&[
            LabeledTriple::new("Sam", "workFor", "OpenAI"),
            LabeledTriple::new("OpenAI", "locatedIn", "SF"),
        ]);
        let p = enumerate_closed_paths(&g, "Sam", "SF", 4, 1).unwrap().remove(0);
        let rule = generalize(&g, &p);
        assert_eq!(rule.serialize(), "workFor(x, z1) AND locatedIn(z1, y)");
        assert!(!rule.serialize().contains("Sam"));
    }

    #[test]
    fn single_atom_rule() {
        let g = KnowledgeGraph::from_triples(&[LabeledTriple::new("A", "r", "B")]);
        let p = enumerate_closed_paths(&g, "A", "B", 4, 1).unwrap().remove(0);
        assert_eq!(generalize(&g, &p).serialize(), "r(x, y)");
        let back = enumerate_closed_paths(&g, "B", "A", 4, 1).unwrap().remove(0);
        assert_eq!(generalize(&g, &back).serialize(), "r^-1(x, y)");
    }

    #[test]
    fn empty_rule_is_rejected() {
        assert!(matches!(RuleBody::new(vec![]), Err(RuleError::Empty)));
    }

    #[test]
    fn parses_two_atom_rule() {
        let out = parse_rule_bodies("r1(x, z1) AND r2(z1, y)");
        assert_eq!(out.rules.len(), 1);
        assert_eq!(out.rules[0].len(), 2);
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn garbage_is_skipped_and_counted() {
        let out = parse_rule_bodies("garbage");
        assert!(out.rules.is_empty());
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn lists_and_prose_mix() {
        let text = "Here are the rules:\n\n1. a.b(x, z1) AND c(z1, y)\n- d(x, y)\n* d(x,y)\nthanks";
        let out = parse_rule_bodies(text);
        assert_eq!(out.rules.len(), 2);
        assert_eq!(out.skipped, 2);
    }

    #[test]
    fn swapped_variables_read_as_inverse() {
        let r = parse_rule("born_in(z1, x) ∧ located_in^-1(y, z1)").unwrap();
        assert_eq!(r.serialize(), "born_in^-1(x, z1) AND located_in(z1, y)");
    }

    #[test]
    fn broken_chains_are_rejected() {
        assert!(parse_rule("r(x, z1) AND s(z2, y)").is_err());
        assert!(parse_rule("r(x, z1)").is_err());
        assert!(parse_rule("r(x)").is_err());
        assert!(parse_rule("r(x, y) s(x, y)").is_err());
        assert!(parse_rule("(x, y)").is_err());
    }

    fn rel_name() -> impl Strategy<Value = String> {
        "[a-z][a-z_.]{0,12}"
    }

    fn atoms() -> impl Strategy<Value = Vec<RuleAtom>> {
        prop::collection::vec(
            (rel_name(), any::<bool>()).prop_map(|(relation, inverse)| RuleAtom { relation, inverse }),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            atoms in atoms(),
            pad in prop::collection::vec(prop::sample::select(vec!["", " ", "  ", "\t"]), 4),
            conn in prop::sample::select(vec!["AND", "and", "∧", "&"]),
            swap in any::<bool>(),
        ) {
            let rule = RuleBody::new(atoms).unwrap();
            let n = rule.len();
            // Re-render with noisy whitespace, alternative connectors and,
            // optionally, inverses written as swapped variables.
            let noisy: Vec<String> = rule.atoms().iter().enumerate().map(|(i, a)| {
                let (from, to) = (variable(i, n), variable(i + 1, n));
                if swap {
                    let flipped = RuleAtom { relation: a.relation.clone(), inverse: !a.inverse };
                    format!("{}({}{},{}{}{})", flipped.label(), pad[0], to, pad[1], from, pad[2])
                } else {
                    format!("{}({}{},{}{}{})", a.label(), pad[0], from, pad[1], to, pad[2])
                }
            }).collect();
            let text = noisy.join(&format!(" {conn} "));
            let parsed = parse_rule(&format!("{}{}", pad[3], text)).unwrap();
            prop_assert_eq!(&parsed, &rule);
            prop_assert_eq!(parse_rule(&rule.serialize()).unwrap().serialize(), rule.serialize());
        }

        #[test]
        fn generalize_preserves_length_and_relations(hops in 1usize..5) {
            let triples: Vec<LabeledTriple> = (0..hops)
                .map(|i| LabeledTriple::new(format!("e{i}"), format!("r{i}"), format!("e{}", i + 1)))
                .collect();
            let g = KnowledgeGraph::from_triples(&triples);
            let p = enumerate_closed_paths(&g, "e0", &format!("e{hops}"), 5, 1).unwrap().remove(0);
            let rule = generalize(&g, &p);
            prop_assert_eq!(rule.len(), p.len());
            let expected: Vec<String> = p.relations().map(|r| g.relation_label(r)).collect();
            prop_assert_eq!(rule.relation_labels(), expected);
        }
    }
}
