//! Corpora, synthetic generators, the lexical index and test-set transforms.

mod corpus;
mod extend;
mod index;
mod synth;

pub use corpus::{load_corpus, load_test, load_train, save_test, save_train, Corpus, Split, TestSet};
pub use extend::{
    extend_candidates, load_mined_cache, make_adversarial, save_mined_cache, MinedRecord,
    EXTENDED_SIZES,
};
pub use index::{LexicalIndex, ScoredDoc, BM25_B, BM25_K1};
pub use synth::{generate_synthetic, token_overlap, SynthConfig, SynthKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dialogue context with its gold response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub turns: Vec<String>,
    pub response: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Mined,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub label: u8,
    pub provenance: Provenance,
}

/// A context with a labeled candidate list holding exactly one positive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSample {
    pub id: usize,
    pub turns: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl TestSample {
    pub fn m(&self) -> usize {
        self.candidates.len()
    }

    pub fn gold_index(&self) -> Option<usize> {
        let mut it = self.candidates.iter().enumerate().filter(|(_, c)| c.label == 1);
        match (it.next(), it.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    /// Errors unless exactly one candidate is labeled positive.
    pub fn check(&self) -> Result<usize> {
        self.gold_index().ok_or_else(|| {
            Error::Data(format!(
                "sample {} has {} positive candidates, expected exactly one",
                self.id,
                self.candidates.iter().filter(|c| c.label == 1).count()
            ))
        })
    }

    pub fn provenance_count(&self, p: Provenance) -> usize {
        self.candidates.iter().filter(|c| c.provenance == p).count()
    }

    pub fn context_text(&self) -> String {
        self.turns.join(" ")
    }
}

/// Whitespace-normalized form used for duplicate detection.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
