//! Train, evaluate, ablate and sweep: the pipeline behind each command.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    extend_candidates, load_mined_cache, load_test, load_train, make_adversarial,
    save_mined_cache, LexicalIndex, Session, TestSample,
};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, format_table, EvalReport, RunMeta};
use crate::persist::{corpus_hash, load_checkpoint, save_checkpoint, scm_name, RunConfig};
use crate::ranking::{fit, FitReport, Model, ModelKind};
use crate::scm::Ablation;

pub fn build_vocab(sessions: &[Session]) -> Vocabulary {
    Vocabulary::build(
        sessions
            .iter()
            .flat_map(|s| s.turns.iter().map(String::as_str).chain([s.response.as_str()])),
    )
}

pub fn run_meta(cfg: &RunConfig, corpus_hash: String, random_init: bool) -> RunMeta {
    RunMeta {
        model: cfg.model.tag(),
        ablation: cfg.model.scm.map(|a| a.as_str().to_string()),
        seed: cfg.train.seed,
        random_init,
        config_hash: cfg.config_hash(),
        corpus_hash,
    }
}

/// Fits a fresh model. With `ckpt_dir`, writes `epoch{e}.ckpt` after every
/// epoch, so a numeric abort leaves the last good epoch on disk.
pub fn train_on(
    cfg: &RunConfig,
    sessions: &[Session],
    ckpt_dir: Option<&Path>,
) -> Result<(Model, FitReport)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), build_vocab(sessions), cfg.train.seed)?;
    let report = fit(&mut model, sessions, &cfg.train, |epoch, m| {
        if let Some(dir) = ckpt_dir {
            save_checkpoint(dir.join(format!("epoch{epoch}.ckpt")), m, cfg)?;
        }
        Ok(())
    })?;
    Ok((model, report))
}

pub struct TrainOutcome {
    pub model: Model,
    pub fit: FitReport,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} corpus given")))
}

/// Trains on `cfg.train_path` and writes `model.ckpt` plus `loss.csv` into
/// `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = load_train(require(&cfg.train_path, "training")?)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let (model, report) = train_on(cfg, &train, Some(&cfg.out_dir))?;
    let checkpoint = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &model, cfg)?;
    let loss_curve = cfg.out_dir.join("loss.csv");
    fs::write(&loss_curve, report.curve_csv())?;
    info!("wrote {} and {}", checkpoint.display(), loss_curve.display());
    Ok(TrainOutcome {
        model,
        fit: report,
        checkpoint,
        loss_curve,
    })
}

/// Test-set transforms applied before scoring.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Grow every sample to this many candidates with mined negatives.
    pub extend: Option<usize>,
    /// Replace one negative per sample with a context turn.
    pub adversarial: bool,
    /// Response pool for mining; a training corpus file.
    pub pool: Option<PathBuf>,
    /// JSON-lines cache of mined candidate lists, read if present and
    /// written otherwise.
    pub mined_cache: Option<PathBuf>,
    pub seed: u64,
}

/// Applies `--extend` and `--adversarial` to `samples`.
pub fn prepare_samples(
    samples: &[TestSample],
    opts: &EvalOptions,
    pool: Option<&[Session]>,
) -> Result<Vec<TestSample>> {
    let mut out = samples.to_vec();
    if let Some(m) = opts.extend {
        let cached = match &opts.mined_cache {
            Some(p) if p.exists() => Some(load_mined_cache(p)?),
            _ => None,
        };
        out = match cached {
            Some(recs) => {
                if recs.len() != out.len() {
                    return Err(Error::Data(format!(
                        "mined cache holds {} records for {} samples",
                        recs.len(),
                        out.len()
                    )));
                }
                recs.iter()
                    .zip(&out)
                    .map(|(r, s)| {
                        if r.target_m != m {
                            return Err(Error::Data(format!(
                                "mined cache was built for m={}, not {m}",
                                r.target_m
                            )));
                        }
                        r.apply(s)
                    })
                    .collect::<Result<_>>()?
            }
            None => {
                let pool = pool.ok_or_else(|| {
                    Error::Config("extending candidates needs a response pool".into())
                })?;
                let index = LexicalIndex::build(pool.iter().map(|s| s.response.as_str()));
                let ext = out
                    .iter()
                    .map(|s| extend_candidates(s, &index, m))
                    .collect::<Result<Vec<_>>>()?;
                if let Some(p) = &opts.mined_cache {
                    save_mined_cache(p, &ext)?;
                }
                ext
            }
        };
    }
    if opts.adversarial {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        out = out
            .iter()
            .map(|s| make_adversarial(s, &mut rng))
            .collect::<Result<_>>()?;
    }
    Ok(out)
}

/// Loads a checkpoint and evaluates it on `test_path`.
pub fn cmd_eval(checkpoint: &Path, test_path: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let (model, cfg) = load_checkpoint(checkpoint)?;
    let set = load_test(test_path)?;
    let pool = match &opts.pool {
        Some(p) => Some(load_train(p)?),
        None => None,
    };
    let samples = prepare_samples(&set.samples, opts, pool.as_deref())?;
    let mut files = vec![test_path];
    if let Some(p) = &opts.pool {
        files.push(p);
    }
    let meta = run_meta(&cfg, corpus_hash(&files)?, false);
    evaluate(&model, &samples, meta)
}

/// Display name of the base encoder in comparison tables.
pub fn base_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Bi => "bi-encoder",
        ModelKind::Poly => "poly-encoder",
    }
}

/// Row label of an SCM setting in the ablation table.
pub fn ablation_label(kind: ModelKind, scm: Option<Ablation>) -> String {
    match scm {
        Some(Ablation::Full) => format!("{}+SCM", base_name(kind)),
        Some(Ablation::NoContextAware) => "-{context-aware}".to_string(),
        Some(Ablation::NoGate) => "-gated".to_string(),
        None => base_name(kind).to_string(),
    }
}

/// Rows of a comparison table, written as text and JSON.
#[derive(Clone, Debug)]
pub struct ComparisonTable {
    pub rows: Vec<(String, EvalReport)>,
}

impl ComparisonTable {
    pub fn text(&self) -> String {
        let rows: Vec<(&str, &EvalReport)> =
            self.rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
        format_table(&rows)
    }

    pub fn json(&self) -> Result<String> {
        let v: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|(l, r)| serde_json::json!({ "label": l, "report": r }))
            .collect();
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.txt")), self.text())?;
        fs::write(dir.join(format!("{stem}.json")), self.json()?)?;
        Ok(())
    }
}

struct Corpora {
    train: Vec<Session>,
    test: Vec<TestSample>,
    hash: String,
}

fn load_corpora(cfg: &RunConfig) -> Result<Corpora> {
    let train_path = require(&cfg.train_path, "training")?;
    let test_path = require(&cfg.test_path, "test")?;
    Ok(Corpora {
        train: load_train(train_path)?,
        test: load_test(test_path)?.samples,
        hash: corpus_hash(&[train_path, test_path])?,
    })
}

fn train_and_eval(cfg: &RunConfig, c: &Corpora) -> Result<EvalReport> {
    let (model, _) = train_on(cfg, &c.train, None)?;
    evaluate(&model, &c.test, run_meta(cfg, c.hash.clone(), false))
}

/// The four SCM settings in table order.
pub const ABLATION_ROWS: [Option<Ablation>; 4] = [
    Some(Ablation::Full),
    Some(Ablation::NoContextAware),
    Some(Ablation::NoGate),
    None,
];

/// Trains and evaluates full SCM, both ablations and the plain encoder under
/// one seed.
pub fn cmd_ablate(base: &RunConfig) -> Result<ComparisonTable> {
    let c = load_corpora(base)?;
    let mut rows = Vec::new();
    for scm in ABLATION_ROWS {
        let mut cfg = base.clone();
        cfg.model.scm = scm;
        info!("ablation variant {}", scm_name(scm));
        rows.push((ablation_label(cfg.model.kind, scm), train_and_eval(&cfg, &c)?));
    }
    let table = ComparisonTable { rows };
    table.write(&base.out_dir, "ablation")?;
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    N,
    NHead,
    DimFfd,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Self::N),
            "n_head" => Ok(Self::NHead),
            "dim_ffd" => Ok(Self::DimFfd),
            _ => Err(Error::Config(format!(
                "unsupported sweep axis {s:?}, expected n, n_head or dim_ffd"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::N => "n",
            Self::NHead => "n_head",
            Self::DimFfd => "dim_ffd",
        }
    }

    pub fn grid(self) -> &'static [usize] {
        match self {
            Self::N | Self::NHead => &[2, 4, 6, 8],
            Self::DimFfd => &[128, 512, 1024, 2048],
        }
    }

    /// Sets the swept value and pins the other two axes: n=4, n_head=8,
    /// dim_ffd=512.
    pub fn apply(self, cfg: &mut RunConfig, value: usize) {
        let m = &mut cfg.model;
        m.scm_layers = 4;
        m.scm_heads = 8;
        m.scm_ffd = 512;
        match self {
            Self::N => m.scm_layers = value,
            Self::NHead => m.scm_heads = value,
            Self::DimFfd => m.scm_ffd = value,
        }
    }

    /// Grid values usable at model width `d` (head counts must divide it).
    pub fn default_values(self, d: usize) -> Vec<usize> {
        self.grid()
            .iter()
            .copied()
            .filter(|&v| self != Self::NHead || d % v == 0)
            .collect()
    }
}

/// One train+eval per value; every run shares the base seed.
pub fn cmd_sweep(base: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<ComparisonTable> {
    if base.model.scm.is_none() {
        return Err(Error::Config("sweeps need scm enabled".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("no sweep values".into()));
    }
    let mut cfgs = Vec::new();
    for &v in values {
        if !axis.grid().contains(&v) {
            return Err(Error::Config(format!(
                "{}={v} is outside the supported grid {:?}",
                axis.name(),
                axis.grid()
            )));
        }
        let mut cfg = base.clone();
        axis.apply(&mut cfg, v);
        cfg.validate()?;
        cfgs.push((format!("{}={v}", axis.name()), cfg));
    }
    let c = load_corpora(base)?;
    let mut rows = Vec::new();
    for (label, cfg) in cfgs {
        info!("sweep {label}");
        rows.push((label, train_and_eval(&cfg, &c)?));
    }
    let table = ComparisonTable { rows };
    table.write(&base.out_dir, &format!("sweep_{}", axis.name()))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_labels_in_table_order() {
        let labels: Vec<String> =
            ABLATION_ROWS.iter().map(|&s| ablation_label(ModelKind::Poly, s)).collect();
        assert_eq!(labels, ["poly-encoder+SCM", "-{context-aware}", "-gated", "poly-encoder"]);
    }

    #[test]
    fn sweep_axes_pin_the_others() {
        let mut cfg = RunConfig::default();
        cfg.model.scm_ffd = 2048;
        SweepAxis::N.apply(&mut cfg, 6);
        assert_eq!((cfg.model.scm_layers, cfg.model.scm_heads, cfg.model.scm_ffd), (6, 8, 512));
        SweepAxis::DimFfd.apply(&mut cfg, 1024);
        assert_eq!((cfg.model.scm_layers, cfg.model.scm_heads, cfg.model.scm_ffd), (4, 8, 1024));
        assert_eq!(SweepAxis::NHead.default_values(64), vec![2, 4, 8]);
        assert_eq!(SweepAxis::NHead.default_values(48), vec![2, 4, 6, 8]);
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn sweep_rejects_off_grid_and_indivisible_values() {
        let cfg = RunConfig::default();
        let e = cmd_sweep(&cfg, SweepAxis::N, &[3]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        let e = cmd_sweep(&cfg, SweepAxis::NHead, &[6]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
    }
}
