use std::rc::Rc;

use rand::Rng;

use super::EncodedBatch;
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, ParamGroup, ParamId, ParamStore, Segment, Tape, Var};

/// Learned context codes of the poly-encoder.
#[derive(Clone, Debug)]
pub struct PolyHead {
    pub codes: ParamId,
    pub m: usize,
}

impl PolyHead {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        m: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("poly-encoder needs at least one code".into()));
        }
        let codes = store.add_normal("poly.codes", &[m, d], 1.0, ParamGroup::Encoder, rng);
        Ok(Self { codes, m })
    }
}

/// Candidate-conditioned context vectors.
///
/// Each code attends over the token states of its context, giving `m` context
/// codes per context; each candidate row then attends over the codes of its
/// context. `cand_groups[i]` is the number of consecutive rows of `candidates`
/// that belong to context `i`. Both attentions use `1/sqrt(d)` scaling.
pub fn poly_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    head: &PolyHead,
    ctx: &EncodedBatch,
    candidates: Var,
    cand_groups: &[usize],
    dropout: f64,
) -> Result<Var> {
    let n_ctx = ctx.lens.len();
    if cand_groups.len() != n_ctx {
        return Err(Error::dim("poly_aggregate", &[n_ctx], &[cand_groups.len()]));
    }
    let d = tape.value(ctx.states).cols();
    let scale = 1.0 / (d as f64).sqrt();
    let codes = tape.param(store, head.codes);
    let rep: Vec<usize> = (0..n_ctx).flat_map(|_| 0..head.m).collect();
    let code_q = tape.gather_rows(codes, &rep)?;
    let layout = AttnLayout {
        segments: ctx
            .offsets
            .iter()
            .zip(&ctx.lens)
            .enumerate()
            .map(|(i, (&o, &l))| Segment {
                q_start: i * head.m,
                q_len: head.m,
                k_start: o,
                k_len: l,
            })
            .collect(),
        heads: 1,
        scale,
    };
    let ctx_codes = tape.attention(code_q, ctx.states, ctx.states, Rc::new(layout), dropout)?;

    let mut start = 0;
    let mut segments = Vec::with_capacity(n_ctx);
    for (i, &n) in cand_groups.iter().enumerate() {
        if n == 0 {
            return Err(Error::Contract(format!("context {i} has no candidates")));
        }
        segments.push(Segment {
            q_start: start,
            q_len: n,
            k_start: i * head.m,
            k_len: head.m,
        });
        start += n;
    }
    if start != tape.value(candidates).rows() {
        return Err(Error::dim(
            "poly_aggregate",
            tape.shape(candidates),
            &[start],
        ));
    }
    let layout = AttnLayout {
        segments,
        heads: 1,
        scale,
    };
    tape.attention(candidates, ctx_codes, ctx_codes, Rc::new(layout), dropout)
}
