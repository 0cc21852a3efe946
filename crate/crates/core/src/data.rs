//! Question sets, document corpora and JSONL plumbing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid record: {0}")]
    Invalid(String),
}

/// One line of a questions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub question_entities: Vec<String>,
    pub answer_entities: Vec<String>,
}

/// One line of the local document corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, DataError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: p.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| DataError::Json {
            path: p.clone(),
            line: idx + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes one compact JSON object per line. Returns the number of lines.
pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<usize, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut n = 0;
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| DataError::Json {
            path: path.display().to_string(),
            line: n + 1,
            source,
        })?;
        writeln!(out, "{line}").map_err(io_err)?;
        n += 1;
    }
    out.flush().map_err(io_err)?;
    Ok(n)
}

/// Loads questions and checks the fields every pipeline stage relies on.
pub fn read_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>, DataError> {
    let qs: Vec<QuestionRecord> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for q in &qs {
        if q.id.is_empty() {
            return Err(DataError::Invalid("question with empty id".into()));
        }
        if !seen.insert(q.id.as_str()) {
            return Err(DataError::Invalid(format!("duplicate question id `{}`", q.id)));
        }
        if q.answer_entities.is_empty() {
            return Err(DataError::Invalid(format!("question `{}` has no answers", q.id)));
        }
    }
    Ok(qs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_jsonl_keys_round_trip() {
        let line = r#"{"id":"q1","question":"who?","question_entities":["Sam"],"answer_entities":["SF"]}"#;
        let q: QuestionRecord = serde_json::from_str(line).unwrap();
        assert_eq!(serde_json::to_string(&q).unwrap(), line);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let q = QuestionRecord {
            id: "a".into(),
            question: "x".into(),
            question_entities: vec![],
            answer_entities: vec!["y".into()],
        };
        write_jsonl(&path, &[q.clone(), q]).unwrap();
        assert!(matches!(read_questions(&path), Err(DataError::Invalid(_))));
    }

    #[test]
    fn bad_json_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"doc_id\":\"1\",\"title\":\"t\",\"text\":\"x\"}\nnot json\n").unwrap();
        match read_jsonl::<Document>(&path) {
            Err(DataError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
