//! Recall at k, MRR and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TestSample;
use crate::error::{Error, Result};
use crate::ranking::Model;

pub const RECALL_KS: [usize; 4] = [1, 2, 5, 10];

/// 1-based rank of the gold candidate. Negatives that tie the gold rank
/// ahead of it.
pub fn gold_rank(degrees: &[f64], gold: usize) -> Result<usize> {
    let g = *degrees.get(gold).ok_or(Error::Index {
        index: gold,
        len: degrees.len(),
    })?;
    if degrees.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite degree in gold_rank".into()));
    }
    Ok(1 + degrees
        .iter()
        .enumerate()
        .filter(|&(i, &d)| i != gold && d >= g)
        .count())
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mrr(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

/// Self-describing run header carried by every report.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: String,
    pub ablation: Option<String>,
    pub seed: u64,
    pub random_init: bool,
    pub config_hash: String,
    pub corpus_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    /// Candidates per sample.
    pub n: usize,
    pub samples: usize,
    pub recall: Vec<Recall>,
    pub mrr: f64,
    pub ranks: Vec<usize>,
}

impl EvalReport {
    /// Builds a report from per-sample ranks at a common candidate count.
    pub fn from_ranks(meta: RunMeta, n: usize, ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Data("no samples to report".into()));
        }
        let recall = RECALL_KS
            .iter()
            .filter(|&&k| k <= n)
            .map(|&k| Recall {
                k,
                value: recall_at_k(&ranks, k),
            })
            .collect();
        Ok(Self {
            meta,
            n,
            samples: ranks.len(),
            recall,
            mrr: mrr(&ranks),
            ranks,
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }

    /// Columns shown in the text table: R@10 only when n exceeds 10.
    fn table_ks(&self) -> Vec<usize> {
        self.recall
            .iter()
            .map(|r| r.k)
            .filter(|&k| k < 10 || self.n > 10)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        format_table(&[(self.meta.model.as_str(), self)])
    }
}

/// Aligned text table with one row per labeled report.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let ks = first.table_ks();
    let mut header = vec!["Model".to_string()];
    header.extend(ks.iter().map(|k| format!("R_{}@{k}", first.n)));
    header.push("MRR".into());
    let mut cells = vec![header];
    for (label, r) in rows {
        let mut row = vec![label.to_string()];
        row.extend(ks.iter().map(|&k| format!("{:.3}", r.recall(k).unwrap_or(f64::NAN))));
        row.push(format!("{:.3}", r.mrr));
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    out
}

/// Ranks from precomputed degrees. Every sample must hold one positive and
/// the same number of candidates.
pub fn evaluate_scores(samples: &[TestSample], degrees: &[Vec<f64>], meta: RunMeta) -> Result<EvalReport> {
    if samples.len() != degrees.len() {
        return Err(Error::dim("evaluate", &[samples.len()], &[degrees.len()]));
    }
    let n = samples.first().map(TestSample::m).unwrap_or(0);
    let mut ranks = Vec::with_capacity(samples.len());
    for (s, d) in samples.iter().zip(degrees) {
        let gold = s.check()?;
        if s.m() != n || d.len() != n {
            return Err(Error::Data(format!(
                "sample {} has {} candidates, expected {n}",
                s.id,
                s.m()
            )));
        }
        ranks.push(gold_rank(d, gold)?);
    }
    EvalReport::from_ranks(meta, n, ranks)
}

/// Full pass in eval mode.
pub fn evaluate(model: &Model, samples: &[TestSample], meta: RunMeta) -> Result<EvalReport> {
    for s in samples {
        s.check()?;
    }
    let degrees = model.score_samples(samples)?;
    evaluate_scores(samples, &degrees, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Candidate, Provenance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(gold_rank(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(gold_rank(&[0.9, 0.9, 0.3], 1).unwrap(), 2);
        assert_eq!(gold_rank(&[0.9, 0.9, 0.3], 0).unwrap(), 2);
        assert!(matches!(gold_rank(&[0.0], 1), Err(Error::Index { .. })));
        assert!(gold_rank(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(&[1, 1, 1], 1), 1.0);
        assert_eq!(mrr(&[1, 1]), 1.0);
        assert_eq!(recall_at_k(&[4], 2), 0.0);
        assert_eq!(recall_at_k(&[4], 5), 1.0);
        assert_eq!(mrr(&[4]), 0.25);
    }

    fn samples(n_samples: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<TestSample> {
        (0..n_samples)
            .map(|id| {
                let gold = rng.random_range(0..m);
                TestSample {
                    id,
                    turns: vec!["ctx".into()],
                    candidates: (0..m)
                        .map(|i| Candidate {
                            text: format!("c{i}"),
                            label: (i == gold) as u8,
                            provenance: Provenance::Original,
                        })
                        .collect(),
                }
            })
            .collect()
    }

    #[test]
    fn oracle_and_anti_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = samples(20, 10, &mut rng);
        let label = |sign: f64| -> Vec<Vec<f64>> {
            s.iter()
                .map(|x| x.candidates.iter().map(|c| sign * c.label as f64).collect())
                .collect()
        };
        let r = evaluate_scores(&s, &label(1.0), RunMeta::default()).unwrap();
        assert!(r.recall.iter().all(|x| x.value == 1.0) && r.mrr == 1.0);
        let r = evaluate_scores(&s, &label(-1.0), RunMeta::default()).unwrap();
        for x in &r.recall {
            assert_eq!(x.value, if x.k < 10 { 0.0 } else { 1.0 });
        }
        assert!((r.mrr - 0.1).abs() < 1e-15);
    }

    #[test]
    fn random_scorer_mrr_is_harmonic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ranks: Vec<usize> = (0..10_000)
            .map(|_| {
                let d: Vec<f64> = (0..10).map(|_| rng.random()).collect();
                gold_rank(&d, 0).unwrap()
            })
            .collect();
        let expect: f64 = (1..=10).map(|r| 1.0 / r as f64).sum::<f64>() / 10.0;
        assert!((expect - 0.2929).abs() < 1e-4);
        assert!((mrr(&ranks) - expect).abs() < 0.01);
    }

    #[test]
    fn report_shape_and_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = samples(5, 50, &mut rng);
        let d: Vec<Vec<f64>> = s.iter().map(|x| (0..x.m()).map(|_| rng.random()).collect()).collect();
        let mut meta = RunMeta::default();
        meta.model = "bi+scm".into();
        let r = evaluate_scores(&s, &d, meta).unwrap();
        assert_eq!(r.recall.iter().map(|x| x.k).collect::<Vec<_>>(), vec![1, 2, 5, 10]);
        let t = r.table();
        let header = t.lines().next().unwrap();
        assert!(header.contains("R_50@1") && header.contains("R_50@10") && header.ends_with("MRR"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);

        let s10 = samples(5, 10, &mut rng);
        let d10: Vec<Vec<f64>> = s10.iter().map(|_| vec![0.0; 10]).collect();
        let r10 = evaluate_scores(&s10, &d10, RunMeta::default()).unwrap();
        assert!(!r10.table().contains("R_10@10"));
        assert_eq!(r10.recall(10), Some(1.0));
    }

    #[test]
    fn mixed_candidate_counts_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = samples(2, 10, &mut rng);
        s[1].candidates.pop();
        s[1].candidates[0].label = 1;
        for c in s[1].candidates.iter_mut().skip(1) {
            c.label = 0;
        }
        let d = vec![vec![0.0; 10], vec![0.0; 9]];
        assert!(evaluate_scores(&s, &d, RunMeta::default()).is_err());
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(d in prop::collection::vec(prop::collection::vec(0u8..6, 10), 1..20), gold_seed in 0usize..1000) {
            let degrees: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let golds: Vec<usize> = (0..degrees.len()).map(|i| (gold_seed + 7 * i) % 10).collect();
            let ranks: Vec<usize> = degrees.iter().zip(&golds).map(|(r, &g)| gold_rank(r, g).unwrap()).collect();
            for (r, (row, &g)) in ranks.iter().zip(degrees.iter().zip(&golds)) {
                // Sort with the gold placed last among equals; its position is the rank.
                let mut idx: Vec<usize> = (0..10).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then((a == g).cmp(&(b == g))));
                prop_assert_eq!(*r, idx.iter().position(|&i| i == g).unwrap() + 1);
            }
            let monotone: Vec<f64> = RECALL_KS.iter().map(|&k| recall_at_k(&ranks, k)).collect();
            prop_assert!(monotone.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(recall_at_k(&ranks, 10), 1.0);
            prop_assert!(mrr(&ranks) >= recall_at_k(&ranks, 1) && mrr(&ranks) <= 1.0);
        }
    }
}
