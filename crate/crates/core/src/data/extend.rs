use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Candidate, LexicalIndex, Provenance, TestSample};
use crate::error::{Error, Result};

pub const EXTENDED_SIZES: [usize; 6] = [50, 100, 150, 200, 250, 300];

/// Appends BM25-mined negatives until the sample holds `target_m`
/// candidates. Existing candidate texts are excluded from mining.
pub fn extend_candidates(
    sample: &TestSample,
    index: &LexicalIndex,
    target_m: usize,
) -> Result<TestSample> {
    sample.check()?;
    if target_m <= sample.m() {
        return Err(Error::Config(format!(
            "target_m {target_m} must exceed the current {} candidates",
            sample.m()
        )));
    }
    let exclude = index.ids_of(sample.candidates.iter().map(|c| c.text.as_str()));
    let need = target_m - sample.m();
    let hits = index
        .query(&sample.context_text(), need, &exclude)
        .map_err(|e| Error::Data(format!("sample {}: pool too small: {e}", sample.id)))?;
    let mut out = sample.clone();
    out.candidates.extend(hits.into_iter().map(|h| Candidate {
        text: index.doc(h.id).to_string(),
        label: 0,
        provenance: Provenance::Mined,
    }));
    Ok(out)
}

/// Replaces one random negative with one random context turn.
pub fn make_adversarial<R: Rng + ?Sized>(sample: &TestSample, rng: &mut R) -> Result<TestSample> {
    let gold = sample.check()?;
    if sample.turns.is_empty() {
        return Err(Error::Data(format!("sample {} has no context turns", sample.id)));
    }
    let negatives: Vec<usize> = (0..sample.m()).filter(|&i| i != gold).collect();
    if negatives.is_empty() {
        return Err(Error::Data(format!("sample {} has no negatives", sample.id)));
    }
    let slot = negatives[rng.random_range(0..negatives.len())];
    let turn = &sample.turns[rng.random_range(0..sample.turns.len())];
    let mut out = sample.clone();
    out.candidates[slot] = Candidate {
        text: turn.clone(),
        label: 0,
        provenance: Provenance::Adversarial,
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedRecord {
    pub sample_id: usize,
    pub target_m: usize,
    pub candidates: Vec<String>,
    pub labels: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl MinedRecord {
    pub fn from_sample(s: &TestSample) -> Self {
        Self {
            sample_id: s.id,
            target_m: s.m(),
            candidates: s.candidates.iter().map(|c| c.text.clone()).collect(),
            labels: s.candidates.iter().map(|c| c.label).collect(),
            provenance: s.candidates.iter().map(|c| c.provenance).collect(),
        }
    }

    /// Rebuilds the extended sample on top of the original context.
    pub fn apply(&self, base: &TestSample) -> Result<TestSample> {
        let n = self.candidates.len();
        if base.id != self.sample_id
            || self.labels.len() != n
            || self.provenance.len() != n
            || n != self.target_m
        {
            return Err(Error::Data(format!(
                "mined record for sample {} does not fit sample {}",
                self.sample_id, base.id
            )));
        }
        let out = TestSample {
            id: base.id,
            turns: base.turns.clone(),
            candidates: (0..n)
                .map(|i| Candidate {
                    text: self.candidates[i].clone(),
                    label: self.labels[i],
                    provenance: self.provenance[i],
                })
                .collect(),
        };
        out.check()?;
        Ok(out)
    }
}

pub fn save_mined_cache(path: impl AsRef<Path>, samples: &[TestSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, &MinedRecord::from_sample(s))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_mined_cache(path: impl AsRef<Path>) -> Result<Vec<MinedRecord>> {
    let path = path.as_ref();
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn corpus() -> (LexicalIndex, Vec<TestSample>) {
        let (train, test) = generate_synthetic(&SynthConfig {
            n_train: 400,
            n_test: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        let idx = LexicalIndex::build(train.iter().map(|s| s.response.as_str()));
        (idx, test)
    }

    #[test]
    fn extension_to_fifty() {
        let (idx, test) = corpus();
        for s in &test {
            let e = extend_candidates(s, &idx, 50).unwrap();
            assert_eq!(e.m(), 50);
            assert_eq!(e.provenance_count(Provenance::Mined), 40);
            assert_eq!(e.provenance_count(Provenance::Original), 10);
            assert_eq!(e.candidates.iter().map(|c| c.label as usize).sum::<usize>(), 1);
            assert_eq!(e.candidates[..10], s.candidates[..]);
            let texts: HashSet<_> = e.candidates.iter().map(|c| &c.text).collect();
            assert_eq!(texts.len(), 50);
            assert_eq!(e, extend_candidates(s, &idx, 50).unwrap());
        }
    }

    #[test]
    fn extension_errors() {
        let (idx, test) = corpus();
        assert!(extend_candidates(&test[0], &idx, 10).is_err());
        let small = LexicalIndex::build(["a", "b"]);
        let err = extend_candidates(&test[0], &small, 50).unwrap_err();
        assert!(err.to_string().contains("pool too small"), "{err}");
    }

    #[test]
    fn adversarial_replaces_one_negative() {
        let (_, test) = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in &test {
            let a = make_adversarial(s, &mut rng).unwrap();
            assert_eq!(a.m(), 10);
            let g = s.gold_index().unwrap();
            assert_eq!(a.gold_index(), Some(g));
            assert_eq!(a.candidates[g], s.candidates[g]);
            assert_eq!(a.provenance_count(Provenance::Adversarial), 1);
            assert_eq!(a.provenance_count(Provenance::Original), 9);
            let adv = a.candidates.iter().find(|c| c.provenance == Provenance::Adversarial).unwrap();
            assert!(s.turns.contains(&adv.text));
        }
    }

    #[test]
    fn mined_cache_round_trip() {
        let (idx, test) = corpus();
        let ext: Vec<_> = test.iter().map(|s| extend_candidates(s, &idx, 50).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mined.jsonl");
        save_mined_cache(&p, &ext).unwrap();
        let recs = load_mined_cache(&p).unwrap();
        assert_eq!(recs.len(), ext.len());
        for ((r, base), e) in recs.iter().zip(&test).zip(&ext) {
            assert_eq!(&r.apply(base).unwrap(), e);
        }
        assert!(recs[0].apply(&test[1]).is_err());
    }
}
