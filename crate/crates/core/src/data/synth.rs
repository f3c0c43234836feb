//! Deterministic desk-scale corpora.
//!
//! Separable: each session draws one topic; context turns and the gold
//! response mix that topic's words with shared filler, negatives come from
//! other topics.
//!
//! Comparison: the last context turn carries a cue token that selects one of
//! `KEYS` key tokens. The gold is a template drawn independently of the
//! context plus the selected key, so the key is the only link between them.
//! Negatives are the same template with other keys; the candidates differ in
//! one token only.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Candidate, Provenance, Session, TestSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Separable,
    Comparison,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Self::Separable),
            "comparison" => Ok(Self::Comparison),
            _ => Err(Error::Config(format!(
                "unknown corpus kind {s:?}, expected separable or comparison"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_topics: usize,
    /// Candidates per test sample.
    pub m: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::Separable,
            seed: 50,
            n_train: 2000,
            n_test: 500,
            n_topics: 10,
            m: 10,
        }
    }
}

const TOPIC_WORDS: usize = 12;
const FILLER_WORDS: usize = 60;
const TOPIC_P: f64 = 0.7;
const KEYS: usize = 20;

struct Gen {
    rng: ChaCha8Rng,
    n_topics: usize,
}

impl Gen {
    fn word(&mut self, topic: usize) -> String {
        if self.rng.random_bool(TOPIC_P) {
            format!("t{topic}w{}", self.rng.random_range(0..TOPIC_WORDS))
        } else {
            format!("f{}", self.rng.random_range(0..FILLER_WORDS))
        }
    }

    fn utterance(&mut self, topic: usize) -> Vec<String> {
        let len = self.rng.random_range(4..=8);
        (0..len).map(|_| self.word(topic)).collect()
    }

    fn utterance_len(&mut self, topic: usize, lo: usize, hi: usize) -> Vec<String> {
        let len = self.rng.random_range(lo..=hi);
        (0..len).map(|_| self.word(topic)).collect()
    }

    fn turns(&mut self, topic: usize) -> Vec<Vec<String>> {
        let n = self.rng.random_range(2..=4);
        (0..n).map(|_| self.utterance(topic)).collect()
    }

    fn other_topic(&mut self, topic: usize) -> usize {
        let t = self.rng.random_range(0..self.n_topics - 1);
        if t >= topic {
            t + 1
        } else {
            t
        }
    }
}

fn join(words: &[String]) -> String {
    words.join(" ")
}

/// Fraction of `a`'s tokens (as a multiset) that also occur in `b`.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let mut pool: HashMap<&str, usize> = HashMap::new();
    for t in b.split_whitespace() {
        *pool.entry(t).or_default() += 1;
    }
    let toks: Vec<&str> = a.split_whitespace().collect();
    if toks.is_empty() {
        return 0.0;
    }
    let mut hit = 0;
    for t in &toks {
        if let Some(c) = pool.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                hit += 1;
            }
        }
    }
    hit as f64 / toks.len() as f64
}

/// Builds train sessions and test samples. Same config, same output.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<Session>, Vec<TestSample>)> {
    if cfg.n_topics < 2 {
        return Err(Error::Config("n_topics must be at least 2".into()));
    }
    if cfg.m < 2 {
        return Err(Error::Config("m must be at least 2".into()));
    }
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        n_topics: cfg.n_topics,
    };
    if cfg.kind == SynthKind::Comparison && cfg.m > KEYS {
        return Err(Error::Config(format!("comparison corpus supports m <= {KEYS}")));
    }
    // Cue i selects key cue_to_key[i]; the token names carry no hint.
    let mut cue_to_key: Vec<usize> = (0..KEYS).collect();
    cue_to_key.shuffle(&mut g.rng);

    let mut train = Vec::with_capacity(cfg.n_train);
    let mut test = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_train + cfg.n_test {
        let topic = g.rng.random_range(0..cfg.n_topics);
        let mut turns = match cfg.kind {
            SynthKind::Separable => g.turns(topic),
            SynthKind::Comparison => {
                let n = g.rng.random_range(1..=2);
                (0..n).map(|_| g.utterance_len(topic, 3, 4)).collect()
            }
        };
        let (gold, negatives) = match cfg.kind {
            SynthKind::Separable => {
                let gold = join(&g.utterance(topic));
                let negs: Vec<String> = (1..cfg.m)
                    .map(|_| {
                        let t = g.other_topic(topic);
                        join(&g.utterance(t))
                    })
                    .collect();
                (gold, negs)
            }
            SynthKind::Comparison => {
                let cue = g.rng.random_range(0..KEYS);
                for turn in turns.iter_mut() {
                    let at = g.rng.random_range(0..=turn.len());
                    turn.insert(at, format!("c{cue}"));
                }
                let t = g.rng.random_range(0..cfg.n_topics);
                let template = g.utterance_len(t, 4, 4);
                let at = g.rng.random_range(0..=template.len());
                let with_key = |k: usize| {
                    let mut w = template.clone();
                    w.insert(at, format!("k{k}"));
                    join(&w)
                };
                let key = cue_to_key[cue];
                let mut others: Vec<usize> = (0..KEYS).filter(|&k| k != key).collect();
                others.shuffle(&mut g.rng);
                let negs = others[..cfg.m - 1].iter().map(|&k| with_key(k)).collect();
                (with_key(key), negs)
            }
        };
        let turns: Vec<String> = turns.iter().map(|t| join(t)).collect();
        if i < cfg.n_train {
            train.push(Session {
                turns,
                response: gold,
            });
            continue;
        }
        let mut candidates: Vec<Candidate> = std::iter::once((gold, 1))
            .chain(negatives.into_iter().map(|n| (n, 0)))
            .map(|(text, label)| Candidate {
                text,
                label,
                provenance: Provenance::Original,
            })
            .collect();
        candidates.shuffle(&mut g.rng);
        test.push(TestSample {
            id: test.len(),
            turns,
            candidates,
        });
    }
    Ok((train, test))
}
