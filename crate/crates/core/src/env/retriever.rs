use crate::data::Document;
use crate::rules::{Bm25Index, RuleError};

/// A retrieved document.
#[derive(Clone, Debug, PartialEq)]
pub struct DocHit {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub score: f64,
}

/// Document search behind `wikiSearch`.
pub trait Retriever: Send + Sync {
    /// Up to `n` documents for `query`, best first.
    fn search(&self, query: &str, n: usize) -> Vec<DocHit>;
}

/// BM25 over a local corpus; each document is indexed as title plus text.
#[derive(Clone, Debug)]
pub struct CorpusRetriever {
    docs: Vec<Document>,
    index: Bm25Index,
}

impl CorpusRetriever {
    pub fn new(docs: Vec<Document>) -> Result<Self, RuleError> {
        let texts: Vec<String> = docs.iter().map(|d| format!("{} {}", d.title, d.text)).collect();
        let index = Bm25Index::build(&texts)?;
        Ok(Self { docs, index })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl Retriever for CorpusRetriever {
    fn search(&self, query: &str, n: usize) -> Vec<DocHit> {
        self.index
            .retrieve(query, n)
            .into_iter()
            .map(|(i, score)| {
                let d = &self.docs[i];
                DocHit {
                    doc_id: d.doc_id.clone(),
                    title: d.title.clone(),
                    text: d.text.clone(),
                    score,
                }
            })
            .collect()
    }
}
