//! Scoring, the listwise loss, in-batch training and selection.

mod model;

pub use model::{Model, ModelConfig, ModelKind, ScoreRequest};

use std::collections::HashSet;
use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, Session};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Tape, Tensor, Var, WarmupSchedule};

/// Degrees of `B` contexts against `m` candidates each, with gold columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub degrees: Tensor,
    pub gold: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_encoder: f64,
    pub lr_scm: f64,
    pub warmup_ratio: f64,
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 5,
            seed: 50,
            lr_encoder: 5e-5,
            lr_scm: 5e-4,
            warmup_ratio: 0.1,
            clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_encoder >= 0.0 && self.lr_scm >= 0.0 && self.clip > 0.0) {
            return Err(Error::Config("learning rates must be >= 0 and clip > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `degrees_i = f_i · u_c`. `uc` is either one `[d]` vector or one row per
/// candidate.
pub fn score(uc: &Tensor, f: &Tensor) -> Result<Tensor> {
    let d = f.cols();
    let per_row = uc.shape() == f.shape();
    if !per_row && uc.len() != d {
        return Err(Error::dim("score", uc.shape(), f.shape()));
    }
    let out = (0..f.rows())
        .map(|i| {
            let u = if per_row { uc.row(i) } else { uc.data() };
            f.row(i).iter().zip(u).map(|(a, b)| a * b).sum()
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// `-log softmax(degrees)[gold]`.
pub fn listwise_loss(degrees: &Tensor, gold: usize) -> Result<f64> {
    let m = degrees.len();
    if m < 2 {
        return Err(Error::Contract("listwise loss needs at least two candidates".into()));
    }
    let mut t = Tape::eval();
    let x = t.constant(degrees.clone().reshape(vec![1, m])?);
    let l = t.cross_entropy(x, &[gold])?;
    Ok(t.value(l).item())
}

/// Keeps the first of any sessions whose normalized responses collide.
pub fn dedup_batch<'a>(batch: &[&'a Session]) -> Vec<&'a Session> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(batch.len());
    for s in batch {
        if seen.insert(normalize(&s.response)) {
            out.push(*s);
        } else {
            warn!("dropping in-batch duplicate response {:?}", s.response);
        }
    }
    out
}

/// Scores every context of the batch against every gold response in it.
/// Returns the `[B × B]` degree variable; the gold of row `i` is column `i`.
pub fn in_batch_forward(model: &Model, tape: &mut Tape, batch: &[&Session]) -> Result<Var> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Contract("in-batch training needs at least two sessions".into()));
    }
    let distinct: HashSet<String> = batch.iter().map(|s| normalize(&s.response)).collect();
    if distinct.len() != b {
        return Err(Error::Data("duplicate gold responses within a batch".into()));
    }
    let req = ScoreRequest {
        contexts: batch.iter().map(|s| model.encode_context(&s.turns)).collect(),
        candidates: batch.iter().map(|s| model.encode_response(&s.response)).collect(),
        groups: vec![(0..b).collect(); b],
    };
    let deg = model.score_groups(tape, &req)?;
    tape.reshape(deg, &[b, b])
}

/// Value-level in-batch scores with dropout off.
pub fn in_batch_scores(model: &Model, batch: &[&Session]) -> Result<ScoreMatrix> {
    let mut t = Tape::eval();
    let v = in_batch_forward(model, &mut t, batch)?;
    Ok(ScoreMatrix {
        degrees: t.value(v).clone(),
        gold: (0..batch.len()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub curve: Vec<LossPoint>,
    pub epoch_means: Vec<f64>,
    pub skipped_batches: usize,
    pub steps: usize,
}

impl FitReport {
    /// `epoch,step,loss` lines with a header.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for p in &self.curve {
            writeln!(s, "{},{},{:.10}", p.epoch, p.step, p.loss).unwrap();
        }
        s
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains with in-batch negatives. `on_epoch` runs after every epoch (for
/// checkpointing). A non-finite loss aborts before the step is applied, so
/// the model keeps its last good parameters.
pub fn fit(
    model: &mut Model,
    sessions: &[Session],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let per_epoch = sessions.len().div_ceil(cfg.batch_size);
    let schedule = WarmupSchedule::new(per_epoch * cfg.epochs, cfg.warmup_ratio);
    let mut adam = Adam::new(&model.store, cfg.lr_encoder, cfg.lr_scm, cfg.clip, schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut report = FitReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Session> = chunk.iter().map(|&i| &sessions[i]).collect();
            let batch = dedup_batch(&batch);
            if batch.len() < 2 {
                report.skipped_batches += 1;
                continue;
            }
            let step = report.steps;
            let mut tape = Tape::train(step_seed(cfg.seed, step));
            let deg = in_batch_forward(model, &mut tape, &batch)?;
            let gold: Vec<usize> = (0..batch.len()).collect();
            let loss = tape.cross_entropy(deg, &gold)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at epoch {epoch} step {step}")));
            }
            tape.backward(loss)?;
            model.store.zero_grads();
            tape.accumulate_into(&mut model.store);
            adam.clip_and_step(&mut model.store, step)?;
            report.curve.push(LossPoint {
                epoch,
                step,
                loss: value,
            });
            report.steps += 1;
            total += value;
            count += 1;
        }
        let mean = if count > 0 { total / count as f64 } else { f64::NAN };
        info!("epoch {epoch}: mean loss {mean:.5} over {count} batches");
        report.epoch_means.push(mean);
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

/// Indices sorted by degree descending, ties by ascending index.
pub fn rank_by_degrees(degrees: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..degrees.len()).collect();
    idx.sort_by(|&a, &b| degrees[b].total_cmp(&degrees[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub ranking: Vec<usize>,
    pub degrees: Vec<f64>,
}

impl Selection {
    pub fn best(&self) -> usize {
        self.ranking[0]
    }
}

/// Ranks `candidates` for one context.
pub fn select<S: AsRef<str>>(model: &Model, turns: &[S], candidates: &[S]) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidates to select from".into()));
    }
    let req = ScoreRequest {
        contexts: vec![model.encode_context(turns)],
        candidates: candidates
            .iter()
            .map(|c| model.encode_response(c.as_ref()))
            .collect(),
        groups: vec![(0..candidates.len()).collect()],
    };
    let mut t = Tape::eval();
    let deg = model.score_groups(&mut t, &req)?;
    let degrees = t.value(deg).data().to_vec();
    if degrees.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite matching degree".into()));
    }
    Ok(Selection {
        ranking: rank_by_degrees(&degrees),
        degrees,
    })
}

#[cfg(test)]
mod tests;
