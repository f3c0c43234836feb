use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::encoders::pretokenize;
use crate::error::{Error, Result};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// BM25 inverted index over a response pool. Documents are deduplicated by
/// exact text, so ids and texts are in one-to-one correspondence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    docs: Vec<String>,
    doc_len: Vec<u32>,
    /// token -> (doc id, term frequency), ascending by doc id.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    avg_len: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredDoc {
    pub id: usize,
    pub score: f64,
}

impl LexicalIndex {
    pub fn build<'a>(pool: impl IntoIterator<Item = &'a str>) -> Self {
        let mut docs = Vec::new();
        let mut seen = HashSet::new();
        for d in pool {
            if seen.insert(d) {
                docs.push(d.to_string());
            }
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (id, d) in docs.iter().enumerate() {
            let toks = pretokenize(d);
            doc_len.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((id as u32, c));
            }
        }
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Self {
            docs,
            doc_len,
            postings,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, id: usize) -> &str {
        &self.docs[id]
    }

    pub fn lookup(&self, text: &str) -> Option<usize> {
        self.docs.iter().position(|d| d == text)
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, Vec::len)
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of every document; zero where no query term occurs.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.docs.len()];
        let terms: HashSet<String> = pretokenize(query).into_iter().collect();
        for t in terms {
            let Some(post) = self.postings.get(&t) else {
                continue;
            };
            let idf = self.idf(post.len());
            for &(id, tf) in post {
                let tf = tf as f64;
                let norm = 1.0 - BM25_B + BM25_B * self.doc_len[id as usize] as f64 / self.avg_len;
                out[id as usize] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
        out
    }

    /// Top `k` documents by score, ties by ascending id, skipping `exclude`.
    pub fn query(&self, text: &str, k: usize, exclude: &HashSet<usize>) -> Result<Vec<ScoredDoc>> {
        let excluded = exclude.iter().filter(|&&i| i < self.docs.len()).count();
        let available = self.docs.len() - excluded;
        if k > available {
            return Err(Error::Data(format!(
                "asked for {k} documents but only {available} are available"
            )));
        }
        let scores = self.scores(text);
        let mut ranked: Vec<ScoredDoc> = scores
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(i))
            .map(|(id, score)| ScoredDoc { id, score })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Map from text to id, for building exclusion sets.
    pub fn ids_of<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> HashSet<usize> {
        let by_text: HashMap<&str, usize> =
            self.docs.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        texts.into_iter().filter_map(|t| by_text.get(t).copied()).collect()
    }
}
