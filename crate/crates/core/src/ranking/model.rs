use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TestSample;
use crate::encoders::{Encoder, EncoderDims, PolyHead, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};
use crate::scm::{scm_forward, Ablation, ScmDims, ScmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bi,
    Poly,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bi => "bi",
            Self::Poly => "poly",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(Self::Bi),
            "poly" => Ok(Self::Poly),
            _ => Err(Error::Config(format!("unknown model {s:?}, expected bi or poly"))),
        }
    }
}

/// Architecture hyperparameters. `scm = None` is the plain encoder baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub scm: Option<Ablation>,
    pub d: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_ffd: usize,
    pub max_len: usize,
    pub scm_layers: usize,
    pub scm_heads: usize,
    pub scm_ffd: usize,
    pub poly_m: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Bi,
            scm: Some(Ablation::Full),
            d: 64,
            enc_layers: 2,
            enc_heads: 4,
            enc_ffd: 128,
            max_len: 256,
            scm_layers: 4,
            scm_heads: 8,
            scm_ffd: 512,
            poly_m: 16,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.enc_layers == 0 || self.max_len < 3 {
            return bad("encoder needs d > 0, at least one layer and max_len >= 3".into());
        }
        if self.d % self.enc_heads.max(1) != 0 || self.enc_heads == 0 {
            return bad(format!("d={} not divisible by enc_heads={}", self.d, self.enc_heads));
        }
        if self.scm.is_some() {
            if self.scm_layers == 0 || self.scm_heads == 0 || self.scm_ffd == 0 {
                return bad("SCM needs positive layers, heads and dim_ffd".into());
            }
            if self.d % self.scm_heads != 0 {
                return bad(format!("d={} not divisible by scm heads={}", self.d, self.scm_heads));
            }
        }
        if self.kind == ModelKind::Poly && self.poly_m == 0 {
            return bad("poly model requires poly_m >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Short label such as `bi`, `poly+scm` or `bi+scm(no_gate)`.
    pub fn tag(&self) -> String {
        match self.scm {
            None => self.kind.as_str().to_string(),
            Some(Ablation::Full) => format!("{}+scm", self.kind.as_str()),
            Some(a) => format!("{}+scm({a})", self.kind.as_str()),
        }
    }
}

/// Encoders, optional poly head, optional SCM, all in one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub ctx_enc: Encoder,
    pub resp_enc: Encoder,
    pub poly: Option<PolyHead>,
    pub scm: Option<ScmParams>,
}

/// Token ids of one scoring request: contexts, a pool of candidates, and
/// for each context the pool indices of its candidate list.
#[derive(Clone, Debug)]
pub struct ScoreRequest {
    pub contexts: Vec<Vec<u32>>,
    pub candidates: Vec<Vec<u32>>,
    pub groups: Vec<Vec<usize>>,
}

impl Model {
    /// Registers every parameter in a fixed order from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            vocab: vocab.len(),
            d: config.d,
            layers: config.enc_layers,
            heads: config.enc_heads,
            ffd: config.enc_ffd,
            max_len: config.max_len,
        };
        let ctx_enc = Encoder::register(&mut store, "ctx", dims, config.dropout, &mut rng)?;
        let resp_enc = Encoder::register(&mut store, "resp", dims, config.dropout, &mut rng)?;
        let poly = match config.kind {
            ModelKind::Bi => None,
            ModelKind::Poly => Some(PolyHead::register(&mut store, config.poly_m, config.d, &mut rng)?),
        };
        let scm = match config.scm {
            None => None,
            Some(_) => Some(ScmParams::register(
                &mut store,
                ScmDims {
                    d: config.d,
                    layers: config.scm_layers,
                    heads: config.scm_heads,
                    ffd: config.scm_ffd,
                },
                config.dropout,
                &mut rng,
            )?),
        };
        Ok(Self {
            config,
            vocab,
            store,
            ctx_enc,
            resp_enc,
            poly,
            scm,
        })
    }

    pub fn encode_context<S: AsRef<str>>(&self, turns: &[S]) -> Vec<u32> {
        self.vocab.encode_turns(turns, self.config.max_len)
    }

    pub fn encode_response(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text, self.config.max_len)
    }

    /// Matching degrees for every (context, candidate) pair in `req`, packed
    /// row-wise in group order: shape `[Σ |groups[i]|]`.
    pub fn score_groups(&self, tape: &mut Tape, req: &ScoreRequest) -> Result<Var> {
        let n_ctx = req.contexts.len();
        if req.groups.len() != n_ctx {
            return Err(Error::dim("score_groups", &[n_ctx], &[req.groups.len()]));
        }
        let sizes: Vec<usize> = req.groups.iter().map(Vec::len).collect();
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Contract("empty candidate list".into()));
        }
        let flat: Vec<usize> = req.groups.iter().flatten().copied().collect();
        let ctx = self.ctx_enc.encode_batch(tape, &self.store, &req.contexts)?;
        let ur_pool = self.resp_enc.encode_pooled(tape, &self.store, &req.candidates)?;
        let ur = tape.gather_rows(ur_pool, &flat)?;
        let uc = match &self.poly {
            None => {
                let uc = self.ctx_enc.pool(tape, &ctx)?;
                let rep: Vec<usize> =
                    sizes.iter().enumerate().flat_map(|(i, &s)| std::iter::repeat_n(i, s)).collect();
                tape.gather_rows(uc, &rep)?
            }
            Some(head) => crate::encoders::poly_aggregate(
                tape,
                &self.store,
                head,
                &ctx,
                ur,
                &sizes,
                self.config.dropout,
            )?,
        };
        let f = match (&self.scm, self.config.scm) {
            (Some(p), Some(ablation)) => scm_forward(tape, &self.store, p, uc, ur, &sizes, ablation)?,
            _ => ur,
        };
        tape.row_dot(f, uc)
    }

    /// Degrees for each sample's candidate list, evaluated without dropout.
    pub fn score_samples(&self, samples: &[TestSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        let m = samples.iter().map(TestSample::m).max().unwrap_or(1).max(1);
        let chunk = (512 / m).max(1);
        for part in samples.chunks(chunk) {
            let mut req = ScoreRequest {
                contexts: Vec::with_capacity(part.len()),
                candidates: Vec::new(),
                groups: Vec::with_capacity(part.len()),
            };
            for s in part {
                req.contexts.push(self.encode_context(&s.turns));
                let start = req.candidates.len();
                req.candidates
                    .extend(s.candidates.iter().map(|c| self.encode_response(&c.text)));
                req.groups.push((start..req.candidates.len()).collect());
            }
            let mut tape = Tape::eval();
            let deg = self.score_groups(&mut tape, &req)?;
            let vals = tape.value(deg).data();
            let mut at = 0;
            for s in part {
                out.push(vals[at..at + s.m()].to_vec());
                at += s.m();
            }
        }
        Ok(out)
    }
}
