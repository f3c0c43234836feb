//! Toy transformer encoders producing context and response representations,
//! plus the poly-encoder aggregation head.

mod block;
mod poly;
mod vocab;

pub use block::{multi_head_attention, self_attention_layout, transformer_block, BlockParams};
pub use poly::{poly_aggregate, PolyHead};
pub use vocab::{pretokenize, Vocabulary, CLS, EOT, PAD, SEP, UNK};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamId, ParamStore, Tape, Var};

/// How a sequence is reduced to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Final-layer state at the `[CLS]` position.
    Cls,
    /// Mean over all positions; a debugging aid.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffd: usize,
    pub max_len: usize,
}

/// Parameter handles of one encoder. The context and response encoders are
/// two instances registered under different prefixes and never share ids.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub prefix: String,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub dims: EncoderDims,
    pub pooling: Pooling,
    pub dropout: f64,
}

/// Packed final-layer states of a batch of sequences.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub states: Var,
    pub lens: Vec<usize>,
    pub offsets: Vec<usize>,
}

pub const EMBED_STD: f64 = 0.02;
pub const POS_STD: f64 = 0.02;

impl Encoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: EncoderDims,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Encoder;
        let embed = store.add_normal(
            format!("{prefix}.embed"),
            &[dims.vocab, dims.d],
            EMBED_STD,
            g,
            rng,
        );
        let pos = store.add_normal(
            format!("{prefix}.pos"),
            &[dims.max_len, dims.d],
            POS_STD,
            g,
            rng,
        );
        let blocks = (0..dims.layers)
            .map(|l| {
                BlockParams::register(
                    store,
                    &format!("{prefix}.layer{l}"),
                    dims.d,
                    dims.heads,
                    dims.ffd,
                    g,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prefix: prefix.to_string(),
            embed,
            pos,
            blocks,
            dims,
            pooling: Pooling::Cls,
            dropout,
        })
    }

    /// Every parameter id owned by this encoder.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let pre = format!("{}.", self.prefix);
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with(&pre))
            .map(|(id, _)| id)
            .collect()
    }

    /// Runs all blocks over a batch of token-id sequences packed row-wise.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[Vec<u32>],
    ) -> Result<EncodedBatch> {
        if seqs.is_empty() {
            return Err(Error::Contract("encode of an empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        let mut offsets = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() || s.len() > self.dims.max_len {
                return Err(Error::Contract(format!(
                    "sequence length {} outside [1, {}]",
                    s.len(),
                    self.dims.max_len
                )));
            }
            offsets.push(ids.len());
            lens.push(s.len());
            ids.extend(s.iter().map(|&t| t as usize));
            positions.extend(0..s.len());
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::Index {
                index: bad,
                len: self.dims.vocab,
            });
        }
        let embed = tape.param(store, self.embed);
        let pos = tape.param(store, self.pos);
        let e = tape.gather_rows(embed, &ids)?;
        let p = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(e, p)?;
        x = tape.dropout(x, self.dropout);
        let layout = self_attention_layout(&lens, self.dims.d, self.dims.heads);
        for b in &self.blocks {
            x = transformer_block(tape, store, b, x, layout.clone(), self.dropout)?;
        }
        Ok(EncodedBatch {
            states: x,
            lens,
            offsets,
        })
    }

    /// One pooled vector per sequence, `[n × d]`.
    pub fn pool(&self, tape: &mut Tape, enc: &EncodedBatch) -> Result<Var> {
        match self.pooling {
            Pooling::Cls => tape.gather_rows(enc.states, &enc.offsets),
            Pooling::Mean => {
                let n = enc.lens.len();
                let total: usize = enc.lens.iter().sum();
                let mut w = vec![0.0; n * total];
                for (i, (&o, &l)) in enc.offsets.iter().zip(&enc.lens).enumerate() {
                    for r in o..o + l {
                        w[i * total + r] = 1.0 / l as f64;
                    }
                }
                let w = tape.constant(crate::numerics::Tensor::new(vec![n, total], w)?);
                tape.matmul(w, enc.states)
            }
        }
    }

    pub fn encode_pooled(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[Vec<u32>],
    ) -> Result<Var> {
        let enc = self.encode_batch(tape, store, seqs)?;
        self.pool(tape, &enc)
    }
}
