use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ranking::{ModelConfig, ModelKind, TrainConfig};
use crate::scm::Ablation;

pub const SEED_ENV: &str = "SCM_SEED";

/// Keys that only make sense with the comparison module switched on.
const SCM_KEYS: [&str; 3] = ["n", "n_head", "dim_ffd"];

/// Everything a run needs. Built from defaults, then a key=value file, then
/// `SCM_SEED`, then command-line overrides, later sources winning.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_path: None,
            test_path: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

pub fn parse_scm(value: &str) -> Result<Option<Ablation>> {
    match value {
        "off" => Ok(None),
        other => other.parse().map(Some),
    }
}

pub fn scm_name(scm: Option<Ablation>) -> &'static str {
    scm.map_or("off", Ablation::as_str)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model" => m.kind = value.parse::<ModelKind>()?,
            "scm" => m.scm = parse_scm(value)?,
            "d" => m.d = parse(key, value)?,
            "enc_layers" => m.enc_layers = parse(key, value)?,
            "enc_heads" => m.enc_heads = parse(key, value)?,
            "enc_ffd" => m.enc_ffd = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "n" => m.scm_layers = parse(key, value)?,
            "n_head" => m.scm_heads = parse(key, value)?,
            "dim_ffd" => m.scm_ffd = parse(key, value)?,
            "poly_m" => m.poly_m = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "lr_encoder" => t.lr_encoder = parse(key, value)?,
            "lr_scm" => t.lr_scm = parse(key, value)?,
            "warmup_ratio" => t.warmup_ratio = parse(key, value)?,
            "clip" => t.clip = parse(key, value)?,
            "train" => self.train_path = Some(PathBuf::from(value)),
            "test" => self.test_path = Some(PathBuf::from(value)),
            "out" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in Self::parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Layers the sources in precedence order and rejects comparison-module
    /// settings when the module is off.
    pub fn resolve(
        file: Option<&Path>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            pairs.extend(Self::parse_pairs(&text)?);
        }
        if let Some(seed) = env_seed {
            pairs.push(("seed".to_string(), seed.to_string()));
        }
        pairs.extend(overrides.iter().cloned());
        let mut c = Self::default();
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        if c.model.scm.is_none() {
            if let Some((k, _)) = pairs.iter().find(|(k, _)| SCM_KEYS.contains(&k.as_str())) {
                return Err(Error::Config(format!("{k} is set but scm=off")));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text form. Paths are left out of checkpoints and hashes so
    /// the same experiment hashes the same on any machine.
    pub fn to_text(&self, with_paths: bool) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut lines = vec![
            format!("model={}", m.kind.as_str()),
            format!("scm={}", scm_name(m.scm)),
            format!("d={}", m.d),
            format!("enc_layers={}", m.enc_layers),
            format!("enc_heads={}", m.enc_heads),
            format!("enc_ffd={}", m.enc_ffd),
            format!("max_len={}", m.max_len),
            format!("n={}", m.scm_layers),
            format!("n_head={}", m.scm_heads),
            format!("dim_ffd={}", m.scm_ffd),
            format!("poly_m={}", m.poly_m),
            format!("dropout={}", m.dropout),
            format!("batch_size={}", t.batch_size),
            format!("epochs={}", t.epochs),
            format!("seed={}", t.seed),
            format!("lr_encoder={}", t.lr_encoder),
            format!("lr_scm={}", t.lr_scm),
            format!("warmup_ratio={}", t.warmup_ratio),
            format!("clip={}", t.clip),
        ];
        if with_paths {
            if let Some(p) = &self.train_path {
                lines.push(format!("train={}", p.display()));
            }
            if let Some(p) = &self.test_path {
                lines.push(format!("test={}", p.display()));
            }
            lines.push(format!("out={}", self.out_dir.display()));
        }
        lines.join("\n") + "\n"
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text(false).as_bytes()))
    }
}

/// SHA-256 over the given files' bytes, in order.
pub fn corpus_hash(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}
