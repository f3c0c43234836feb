use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, ParamGroup, ParamId, ParamStore, Tape, Var};

/// Weights of one post-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub heads: usize,
}

impl BlockParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        ffd: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Self::register_scaled(store, prefix, d, heads, ffd, group, 1.0, rng)
    }

    /// As `register`, with the init std of the two residual-branch output
    /// projections (`W^O` and the second FFN matrix) multiplied by
    /// `out_scale`. Deep stacks start closer to the identity this way.
    #[allow(clippy::too_many_arguments)]
    pub fn register_scaled<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        ffd: usize,
        group: ParamGroup,
        out_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let sd = (1.0 / d as f64).sqrt();
        let sf = (1.0 / ffd as f64).sqrt();
        let mut w = |name: &str, shape: &[usize], std: f64| {
            store.add_normal(format!("{prefix}.{name}"), shape, std, group, rng)
        };
        let wq = w("attn.wq", &[d, d], sd);
        let wk = w("attn.wk", &[d, d], sd);
        let wv = w("attn.wv", &[d, d], sd);
        let wo = w("attn.wo", &[d, d], sd * out_scale);
        let ff_w1 = w("ffn.w1", &[d, ffd], sd);
        let ff_w2 = w("ffn.w2", &[ffd, d], sf * out_scale);
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            ff_w1,
            ff_w2,
            ln1_gain: store.add_filled(format!("{prefix}.ln1.gain"), &[d], 1.0, group),
            ln1_bias: store.add_filled(format!("{prefix}.ln1.bias"), &[d], 0.0, group),
            ff_b1: store.add_filled(format!("{prefix}.ffn.b1"), &[ffd], 0.0, group),
            ff_b2: store.add_filled(format!("{prefix}.ffn.b2"), &[d], 0.0, group),
            ln2_gain: store.add_filled(format!("{prefix}.ln2.gain"), &[d], 1.0, group),
            ln2_bias: store.add_filled(format!("{prefix}.ln2.bias"), &[d], 0.0, group),
            heads,
        })
    }
}

/// `[h_1 | ... | h_k] W^O` with `h_i = Attention(q W_i^Q, k W_i^K, v W_i^V)`.
///
/// Head `i` uses columns `i*d/k..(i+1)*d/k` of each projection, which is the
/// same as separate per-head matrices. Rows only attend within their segment
/// of `layout`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BlockParams,
    q: Var,
    k: Var,
    v: Var,
    layout: Rc<AttnLayout>,
    dropout: f64,
) -> Result<Var> {
    let d = tape.value(q).cols();
    if d % p.heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {} heads",
            p.heads
        )));
    }
    let (wq, wk, wv, wo) = (
        tape.param(store, p.wq),
        tape.param(store, p.wk),
        tape.param(store, p.wv),
        tape.param(store, p.wo),
    );
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let heads = tape.attention(qp, kp, vp, layout, dropout)?;
    tape.matmul(heads, wo)
}

/// Attention layout for self-attention over packed sequences of the given lengths.
pub fn self_attention_layout(lens: &[usize], d: usize, heads: usize) -> Rc<AttnLayout> {
    let dk = (d / heads) as f64;
    Rc::new(AttnLayout::packed(lens, heads, 1.0 / dk.sqrt()))
}

/// One block over packed rows `x`:
///
/// ```text
/// y = MultiHead(x, x, x)
/// y = LayerNorm(x + y)
/// z = FFN(y)
/// z = LayerNorm(y + z)
/// ```
///
/// The FFN is `tanh(y W1 + b1) W2 + b2`.
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BlockParams,
    x: Var,
    layout: Rc<AttnLayout>,
    dropout: f64,
) -> Result<Var> {
    let a = multi_head_attention(tape, store, p, x, x, x, layout, dropout)?;
    let (g1, b1) = (tape.param(store, p.ln1_gain), tape.param(store, p.ln1_bias));
    let y = tape.layer_norm_residual(x, a, g1, b1)?;
    let (w1, fb1) = (tape.param(store, p.ff_w1), tape.param(store, p.ff_b1));
    let h = tape.linear(y, w1, Some(fb1))?;
    let h = tape.tanh(h);
    let h = tape.dropout(h, dropout);
    let (w2, fb2) = (tape.param(store, p.ff_w2), tape.param(store, p.ff_b2));
    let z = tape.linear(h, w2, Some(fb2))?;
    let (g2, b2) = (tape.param(store, p.ln2_gain), tape.param(store, p.ln2_bias));
    tape.layer_norm_residual(y, z, g2, b2)
}
