//! Answer metrics, failure taxonomy and path coverage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::QuestionRecord;
use crate::env::{parse_action, ActionErrorKind};
use crate::kg::{shortest_distance, KnowledgeGraph};
use crate::trajectory::{Termination, Trajectory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("question `{0}` has no gold answers")]
    EmptyGold(String),
}

/// Labels compare after trimming and case folding.
pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

fn normalized_set<S: AsRef<str>>(items: &[S]) -> BTreeSet<String> {
    items.iter().map(|s| normalize_label(s.as_ref())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub hits1: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Hits@1 on the first prediction; accuracy is the Jaccard index of the
/// predicted and gold sets; F1 over the sets.
pub fn score_question<P: AsRef<str>, G: AsRef<str>>(predicted: &[P], gold: &[G]) -> Result<QuestionScore, EvalError> {
    let g = normalized_set(gold);
    if g.is_empty() {
        return Err(EvalError::EmptyGold(String::new()));
    }
    let p = normalized_set(predicted);
    let hits1 = predicted
        .first()
        .map(|first| g.contains(&normalize_label(first.as_ref())))
        .unwrap_or(false);
    let inter = p.intersection(&g).count() as f64;
    let union = p.union(&g).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
    let recall = inter / g.len() as f64;
    let f1 = if inter == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(QuestionScore {
        hits1: if hits1 { 1.0 } else { 0.0 },
        accuracy: inter / union,
        f1,
        precision,
        recall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub hits1: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hits1: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub questions: usize,
    /// Questions without a trajectory; scored as empty predictions.
    pub missing: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,hits1,accuracy,f1,predicted,gold\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                csv_field(&r.id),
                r.hits1,
                r.accuracy,
                r.f1,
                csv_field(&r.predicted.join("|")),
                csv_field(&r.gold.join("|"))
            ));
        }
        out
    }

    /// Aggregates without per-question rows.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "hits1": self.hits1,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "questions": self.questions,
            "missing": self.missing,
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores every question against the trajectory with the same id.
pub fn evaluate(questions: &[QuestionRecord], trajectories: &[Trajectory]) -> Result<MetricsReport, EvalError> {
    let by_id: HashMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut rows = Vec::with_capacity(questions.len());
    let mut missing = 0;
    for q in questions {
        let predicted: Vec<String> = match by_id.get(q.id.as_str()) {
            Some(t) => t.final_answers.clone(),
            None => {
                missing += 1;
                Vec::new()
            }
        };
        let s = score_question(&predicted, &q.answer_entities).map_err(|_| EvalError::EmptyGold(q.id.clone()))?;
        rows.push(MetricsRow {
            id: q.id.clone(),
            hits1: s.hits1,
            accuracy: s.accuracy,
            f1: s.f1,
            predicted,
            gold: q.answer_entities.clone(),
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(MetricsReport {
        hits1: rows.iter().map(|r| r.hits1).sum::<f64>() / n,
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        questions: rows.len(),
        missing,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorClass {
    /// A step called an undefined tool.
    IA,
    /// A step passed the wrong number of arguments or unparsable ones.
    EA,
    /// The episode ran out of steps.
    EMS,
    /// Valid actions, but the answer is not fully correct.
    RE,
    OK,
}

impl ErrorClass {
    pub const FAILURES: [ErrorClass; 4] = [ErrorClass::IA, ErrorClass::EA, ErrorClass::EMS, ErrorClass::RE];
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// First match wins: IA, EA, EMS, RE, else OK. Steps are re-parsed from
/// their raw action text.
pub fn classify_error(t: &Trajectory) -> ErrorClass {
    let mut ea = false;
    for step in &t.steps {
        match parse_action(&step.action_raw) {
            Err(e) if e.kind == ActionErrorKind::InvalidAction => return ErrorClass::IA,
            Err(_) => ea = true,
            Ok(_) => {}
        }
    }
    if ea {
        ErrorClass::EA
    } else if t.termination == Termination::MaxSteps {
        ErrorClass::EMS
    } else if t.reward < 1.0 {
        ErrorClass::RE
    } else {
        ErrorClass::OK
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub failures: usize,
    pub counts: BTreeMap<ErrorClass, usize>,
    /// Share of failures per class, in percent.
    pub percentages: BTreeMap<ErrorClass, f64>,
}

impl ErrorReport {
    pub fn percent(&self, class: ErrorClass) -> f64 {
        self.percentages.get(&class).copied().unwrap_or(0.0)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tcount\tpercent\n");
        if self.failures == 0 {
            return out;
        }
        for c in ErrorClass::FAILURES {
            out.push_str(&format!(
                "{c}\t{}\t{:.2}\n",
                self.counts.get(&c).copied().unwrap_or(0),
                self.percent(c)
            ));
        }
        out
    }
}

/// Distribution of failure classes. Trajectories classified OK are ignored.
pub fn error_report<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> ErrorReport {
    let mut counts: BTreeMap<ErrorClass, usize> = BTreeMap::new();
    for t in trajectories {
        let c = classify_error(t);
        if c != ErrorClass::OK {
            *counts.entry(c).or_default() += 1;
        }
    }
    let failures: usize = counts.values().sum();
    if failures == 0 {
        return ErrorReport::default();
    }
    let percentages = ErrorClass::FAILURES
        .into_iter()
        .map(|c| (c, 100.0 * counts.get(&c).copied().unwrap_or(0) as f64 / failures as f64))
        .collect();
    for c in ErrorClass::FAILURES {
        counts.entry(c).or_default();
    }
    ErrorReport {
        failures,
        counts,
        percentages,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub id: String,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    pub covered: usize,
    pub questions: usize,
    pub rows: Vec<CoverageRow>,
}

/// Whether some question entity reaches some answer entity within
/// `max_len` hops in either edge direction.
pub fn question_covered(g: &KnowledgeGraph, q: &QuestionRecord, max_len: usize) -> bool {
    q.question_entities.iter().filter_map(|e| g.entity_id(e.trim())).any(|qe| {
        q.answer_entities
            .iter()
            .filter_map(|a| g.entity_id(a.trim()))
            .any(|ae| qe != ae && shortest_distance(g, qe, ae, max_len).is_some())
    })
}

/// Fraction of questions with at least one closed path. Questions whose
/// entities are not in the graph count as uncovered.
pub fn path_coverage(g: &KnowledgeGraph, questions: &[QuestionRecord], max_len: usize) -> CoverageReport {
    let rows: Vec<CoverageRow> = questions
        .iter()
        .map(|q| CoverageRow {
            id: q.id.clone(),
            covered: question_covered(g, q, max_len),
        })
        .collect();
    let covered = rows.iter().filter(|r| r.covered).count();
    CoverageReport {
        coverage: if rows.is_empty() {
            0.0
        } else {
            covered as f64 / rows.len() as f64
        },
        covered,
        questions: rows.len(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::LabeledTriple;
    use crate::trajectory::{ActionRecord, StepRecord};

    fn traj(actions: &[&str], termination: Termination, reward: f64) -> Trajectory {
        Trajectory {
            id: "t".into(),
            question: "q".into(),
            plan: vec![],
            steps: actions
                .iter()
                .map(|a| StepRecord {
                    thought: String::new(),
                    action: ActionRecord {
                        name: String::new(),
                        args: vec![],
                    },
                    action_raw: a.to_string(),
                    observation: String::new(),
                })
                .collect(),
            final_answers: vec![],
            reward,
            termination,
            refined: false,
        }
    }

    #[test]
    fn score_examples() {
        let s = score_question(&["a", "b"], &["a", "b"]).unwrap();
        assert_eq!((s.hits1, s.accuracy, s.f1), (1.0, 1.0, 1.0));
        let s = score_question(&["c", "a"], &["a", "b"]).unwrap();
        assert_eq!(s.hits1, 0.0);
        assert!((s.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 0.5).abs() < 1e-12);
        let s = score_question::<&str, &str>(&[], &["a"]).unwrap();
        assert_eq!((s.hits1, s.accuracy, s.f1), (0.0, 0.0, 0.0));
        assert!(score_question::<&str, &str>(&["a"], &[]).is_err());
    }

    #[test]
    fn scoring_normalizes_labels() {
        let s = score_question(&[" SF "], &["sf"]).unwrap();
        assert_eq!(s.hits1, 1.0);
    }

    #[test]
    fn classification_precedence() {
        assert_eq!(classify_error(&traj(&["lookup(x)", "finish()"], Termination::MaxSteps, 0.0)), ErrorClass::IA);
        assert_eq!(classify_error(&traj(&["finish()", "finish(a)"], Termination::Finish, 0.0)), ErrorClass::EA);
        let ten = ["searchNeighbor(a, r)"; 10];
        assert_eq!(classify_error(&traj(&ten, Termination::MaxSteps, 0.0)), ErrorClass::EMS);
        assert_eq!(classify_error(&traj(&["finish(a)"], Termination::Finish, 0.4)), ErrorClass::RE);
        assert_eq!(classify_error(&traj(&["finish(a)"], Termination::Finish, 1.0)), ErrorClass::OK);
    }

    #[test]
    fn report_percentages() {
        let mut ts = vec![traj(&["lookup(x)"], Termination::Finish, 0.0); 50];
        ts.extend(vec![traj(&["finish(a)"], Termination::Finish, 0.0); 50]);
        ts.push(traj(&["finish(a)"], Termination::Finish, 1.0));
        let r = error_report(&ts);
        assert_eq!(r.failures, 100);
        assert_eq!(r.percent(ErrorClass::IA), 50.0);
        assert_eq!(r.percent(ErrorClass::EA), 0.0);
        assert_eq!(r.percent(ErrorClass::EMS), 0.0);
        assert_eq!(r.percent(ErrorClass::RE), 50.0);
        assert!(r.to_tsv().contains("IA\t50\t50.00"));
        let one = error_report(&ts[..1]);
        assert_eq!(one.percent(ErrorClass::IA), 100.0);
        assert_eq!(error_report(&[]).failures, 0);
    }

    #[test]
    fn coverage_counts_questions_with_paths() {
        let g = KnowledgeGraph::from_triples(&[LabeledTriple::new("A", "r", "B")]);
        let q = |id: &str, e: &str, a: &str| QuestionRecord {
            id: id.into(),
            question: String::new(),
            question_entities: vec![e.into()],
            answer_entities: vec![a.into()],
        };
        let report = path_coverage(&g, &[q("1", "A", "B"), q("2", "B", "A"), q("3", "A", "Z")], 4);
        assert_eq!(report.covered, 2);
        assert!((report.coverage - 2.0 / 3.0).abs() < 1e-12);
        assert!(!report.rows[2].covered);
    }

    #[test]
    fn csv_rows() {
        let qs = vec![QuestionRecord {
            id: "q1".into(),
            question: String::new(),
            question_entities: vec![],
            answer_entities: vec!["a".into()],
        }];
        let mut t = traj(&["finish(a)"], Termination::Finish, 1.0);
        t.id = "q1".into();
        t.final_answers = vec!["a".into()];
        let m = evaluate(&qs, &[t]).unwrap();
        assert_eq!(m.hits1, 1.0);
        assert_eq!(m.to_csv(), "id,hits1,accuracy,f1,predicted,gold\nq1,1,1.000000,1.000000,a,a\n");
    }
}
