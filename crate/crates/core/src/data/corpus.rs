use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use super::{Candidate, Provenance, Session, TestSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestSet {
    pub samples: Vec<TestSample>,
    /// Context groups dropped for not having exactly one positive.
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Corpus {
    Train(Vec<Session>),
    Test(TestSet),
}

struct Line {
    label: u8,
    turns: Vec<String>,
    response: String,
}

fn parse(path: &Path, text: &str) -> Result<Vec<Line>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let bad = |msg: &str| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 3 {
            return Err(bad("expected label, at least one turn and a response"));
        }
        let label = match fields[0] {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad("label must be 0 or 1")),
        };
        let response = fields[fields.len() - 1];
        if response.trim().is_empty() {
            return Err(bad("empty response"));
        }
        out.push(Line {
            label,
            turns: fields[1..fields.len() - 1].iter().map(|s| s.to_string()).collect(),
            response: response.to_string(),
        });
    }
    Ok(out)
}

/// Keeps only positive lines as sessions.
pub fn load_train(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    Ok(parse(path, &text)?
        .into_iter()
        .filter(|l| l.label == 1)
        .map(|l| Session {
            turns: l.turns,
            response: l.response,
        })
        .collect())
}

/// Groups consecutive lines with the same context into samples. Groups
/// without exactly one positive are dropped and counted.
pub fn load_test(path: impl AsRef<Path>) -> Result<TestSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut groups: Vec<(Vec<String>, Vec<Candidate>)> = Vec::new();
    for l in parse(path, &text)? {
        let cand = Candidate {
            text: l.response,
            label: l.label,
            provenance: Provenance::Original,
        };
        match groups.last_mut() {
            Some((turns, cands)) if *turns == l.turns => cands.push(cand),
            _ => groups.push((l.turns, vec![cand])),
        }
    }
    let mut samples = Vec::new();
    let mut dropped = 0;
    for (turns, candidates) in groups {
        let positives = candidates.iter().filter(|c| c.label == 1).count();
        if positives != 1 {
            dropped += 1;
            continue;
        }
        samples.push(TestSample {
            id: samples.len(),
            turns,
            candidates,
        });
    }
    if dropped > 0 {
        warn!(
            "{}: dropped {dropped} context groups without exactly one positive",
            path.display()
        );
    }
    Ok(TestSet { samples, dropped })
}

pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    match split {
        Split::Train => load_train(path).map(Corpus::Train),
        Split::Test => load_test(path).map(Corpus::Test),
    }
}

fn line(out: &mut String, label: u8, turns: &[String], response: &str) {
    write!(out, "{label}").unwrap();
    for t in turns {
        out.push('\t');
        out.push_str(t);
    }
    out.push('\t');
    out.push_str(response);
    out.push('\n');
}

pub fn save_train(path: impl AsRef<Path>, sessions: &[Session]) -> Result<()> {
    let mut out = String::new();
    for s in sessions {
        line(&mut out, 1, &s.turns, &s.response);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn save_test(path: impl AsRef<Path>, samples: &[TestSample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        for c in &s.candidates {
            line(&mut out, c.label, &s.turns, &c.text);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn single_line_session() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.tsv", "1\thi\thello\n");
        let s = load_train(&p).unwrap();
        assert_eq!(
            s,
            vec![Session {
                turns: vec!["hi".into()],
                response: "hello".into()
            }]
        );
    }

    #[test]
    fn train_split_keeps_positives_only() {
        let dir = tempfile::tempdir().unwrap();
        let body = "1\ta\tb\tr1\n0\ta\tb\tx\n1\tc\tr2\n0\tc\ty\n0\tc\tz\n1\td\tr3\n";
        let p = write(&dir, "t.tsv", body);
        let s = load_train(&p).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].turns, vec!["a", "b"]);
    }

    #[test]
    fn test_groups_with_two_positives_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let body = "1\tq\tr1\n1\tq\tr2\n0\tq\tr3\n1\tw\ts1\n0\tw\ts2\n";
        let p = write(&dir, "t.tsv", body);
        let set = load_test(&p).unwrap();
        assert_eq!(set.dropped, 1);
        assert_eq!(set.samples.len(), 1);
        assert_eq!(set.samples[0].turns, vec!["w"]);
        assert_eq!(set.samples[0].gold_index(), Some(0));
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.tsv", "1\ta\tb\n2\ta\tb\n");
        let err = load_train(&p).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }), "{err}");
        let p = write(&dir, "u.tsv", "1\tonly\n");
        assert!(matches!(load_test(&p).unwrap_err(), Error::Malformed { line: 1, .. }));
    }

    #[test]
    fn save_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let body = "0\tx y\tz\tneg one\n1\tx y\tz\tgold\n0\tx y\tz\tneg two\n1\tq\tok\n0\tq\tno\n";
        let p = write(&dir, "t.tsv", body);
        let set = load_test(&p).unwrap();
        let out = dir.path().join("o.tsv");
        save_test(&out, &set.samples).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), body);

        let train = "1\ta\tb\n1\tc\td\te\n";
        let p = write(&dir, "tr.tsv", train);
        let s = load_train(&p).unwrap();
        save_train(&out, &s).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), train);
    }
}
