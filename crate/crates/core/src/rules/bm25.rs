//! Okapi BM25 over short texts (training questions, corpus documents).

use std::collections::HashMap;

use super::RuleError;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    doc_lens: Vec<u32>,
    avg_doc_len: f64,
    // term -> (doc id, term frequency), doc ids ascending
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, RuleError> {
        Self::with_params(corpus, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params<S: AsRef<str>>(corpus: &[S], k1: f64, b: f64) -> Result<Self, RuleError> {
        if corpus.is_empty() {
            return Err(RuleError::EmptyCorpus);
        }
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for (id, doc) in corpus.iter().enumerate() {
            let tokens = tokenize(doc.as_ref());
            doc_lens.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((id as u32, count));
            }
        }
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        let avg_doc_len = total as f64 / doc_lens.len() as f64;
        Ok(Self {
            k1,
            b,
            doc_lens,
            avg_doc_len,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    /// `ln(1 + (N - n + 0.5) / (n + 0.5))`; strictly positive for any `n <= N`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.postings.get(term).map_or(0, Vec::len) as f64;
        let total = self.doc_lens.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc: u32) -> f64 {
        let tf = tf as f64;
        let norm = if self.avg_doc_len > 0.0 {
            self.doc_lens[doc as usize] as f64 / self.avg_doc_len
        } else {
            0.0
        };
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * norm))
    }

    /// Score of one document; each query token contributes, repeats included.
    pub fn score(&self, query: &str, doc: usize) -> f64 {
        tokenize(query)
            .iter()
            .filter_map(|term| {
                let plist = self.postings.get(term)?;
                let pos = plist.binary_search_by_key(&(doc as u32), |&(d, _)| d).ok()?;
                Some(self.idf(term) * self.term_weight(plist[pos].1, doc as u32))
            })
            .sum()
    }

    /// Top `k` documents with positive score, by descending score then ascending id.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(plist) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(doc, tf) in plist {
                *scores.entry(doc).or_default() += idf * self.term_weight(tf, doc);
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(d, s)| (d as usize, s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight-from-the-formula scorer used as an oracle.
    fn reference_scores(corpus: &[&str], query: &str) -> Vec<f64> {
        let docs: Vec<Vec<String>> = corpus.iter().map(|d| tokenize(d)).collect();
        let n = docs.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        docs.iter()
            .map(|doc| {
                tokenize(query)
                    .iter()
                    .map(|q| {
                        let tf = doc.iter().filter(|t| *t == q).count() as f64;
                        if tf == 0.0 {
                            return 0.0;
                        }
                        let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
                        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                        idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * doc.len() as f64 / avg))
                    })
                    .sum()
            })
            .collect()
    }

    const TOY: [&str; 20] = [
        "what movies did the director of inception direct",
        "who directed the movie titanic",
        "which actor starred in the movie heat",
        "what is the release year of heat",
        "who wrote the screenplay for inception",
        "what language is the movie amelie in",
        "which films share a director with titanic",
        "who starred in films directed by james cameron",
        "what genre are the movies written by nolan",
        "when were the films starred by pacino released",
        "where was the director of titanic born",
        "what is the capital of france",
        "who is the president of the united states",
        "which country is paris located in",
        "what currency is used in japan",
        "who founded the company openai",
        "where is openai headquartered",
        "where does sam work",
        "which city hosts the company where sam works",
        "what is the birthplace of the singer who recorded hank williams",
    ];

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Who's the C.E.O. of Open-AI?"),
            vec!["who", "s", "the", "c", "e", "o", "of", "open", "ai"]
        );
    }

    #[test]
    fn self_retrieval_ranks_first() {
        let idx = Bm25Index::build(&TOY).unwrap();
        for (i, doc) in TOY.iter().enumerate() {
            assert_eq!(idx.retrieve(doc, 1)[0].0, i, "doc {i}");
        }
    }

    #[test]
    fn no_shared_terms_is_empty() {
        let idx = Bm25Index::build(&TOY).unwrap();
        assert!(idx.retrieve("zebra xylophone", 5).is_empty());
        assert!(idx.retrieve("?!", 5).is_empty());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(Bm25Index::build(&empty), Err(RuleError::EmptyCorpus)));
    }

    #[test]
    fn ranking_matches_reference_computation() {
        let idx = Bm25Index::build(&TOY).unwrap();
        for query in ["who directed titanic", "the director of inception", "sam company city"] {
            let expected = reference_scores(&TOY, query);
            let mut want: Vec<(usize, f64)> = expected
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, s)| s > 0.0)
                .collect();
            want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let got = idx.retrieve(query, TOY.len());
            assert_eq!(got.len(), want.len(), "{query}");
            for ((gd, gs), (wd, ws)) in got.iter().zip(&want) {
                assert_eq!(gd, wd, "{query}");
                assert!((gs - ws).abs() < 1e-12);
            }
            for (doc, want) in expected.iter().enumerate() {
                assert!((idx.score(query, doc) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = Bm25Index::build(&["alpha beta", "alpha beta", "gamma"]).unwrap();
        let got = idx.retrieve("alpha", 3);
        assert_eq!(got.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(idx.retrieve("alpha", 1).len(), 1);
    }

    fn corpus() -> impl Strategy<Value = Vec<Vec<usize>>> {
        prop::collection::vec(prop::collection::vec(0usize..12, 1..15), 2..30)
    }

    fn render(doc: &[usize]) -> String {
        doc.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn scores_are_finite_and_non_negative(docs in corpus(), query in prop::collection::vec(0usize..15, 0..6)) {
            let texts: Vec<String> = docs.iter().map(|d| render(d)).collect();
            let idx = Bm25Index::build(&texts).unwrap();
            let q = render(&query);
            for (d, doc) in docs.iter().enumerate() {
                let s = idx.score(&q, d);
                prop_assert!(s.is_finite() && s >= 0.0);
                let shares = query.iter().any(|w| doc.contains(w));
                if !shares {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }

        /// Adding one more occurrence of the query term never lowers the score,
        /// with corpus statistics recomputed after the edit.
        #[test]
        fn adding_a_query_term_occurrence_never_lowers_score(
            docs in corpus(),
            term in 0usize..12,
            target in any::<prop::sample::Index>(),
        ) {
            let d = target.index(docs.len());
            let before: Vec<String> = docs.iter().map(|d| render(d)).collect();
            let mut edited = docs.clone();
            edited[d].push(term);
            let after: Vec<String> = edited.iter().map(|d| render(d)).collect();
            let q = format!("w{term}");
            let s0 = Bm25Index::build(&before).unwrap().score(&q, d);
            let s1 = Bm25Index::build(&after).unwrap().score(&q, d);
            prop_assert!(s1 >= s0, "{s0} -> {s1}");
        }
    }
}
