//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Every call on [`Tape`] appends one node whose inputs are earlier nodes, so
//! the record is topologically ordered by construction and the backward sweep
//! is a single reverse pass.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, AttnLayout, AttnShapes, LAYER_NORM_EPS};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Dropout(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttnLayout>,
        probs: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
    RowDot(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Persistent gradient of leaves; accumulates across backward calls.
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Computation record plus the values it produced.
pub struct Tape {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
    param_vars: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::eval()
    }
}

impl Tape {
    /// Inference tape: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            param_vars: Vec::new(),
        }
    }

    /// Training tape; dropout masks are drawn from a generator seeded with `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::eval()
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Leaf,
            true,
        );
        self.param_vars.push((id, v));
        v
    }

    /// Parameter leaves created on this tape.
    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.param_vars
    }

    /// Adds the leaf gradients of parameter nodes into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.param_vars {
            if let Some(g) = &self.nodes[v.0].grad {
                for (a, b) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap();
        if self.value(bias).len() != n {
            return Err(Error::dim("add_row_bias", sx, sb));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data();
        for row in t.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRowBias(x, bias), rg))
    }

    /// `x · w + b`, the fully connected layer used throughout the model.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                sa,
                sb,
            ));
        }
        let mut t = self.value(a).clone();
        let bd = self.value(b).data();
        match kind {
            Binary::Add => t.data_mut().iter_mut().zip(bd).for_each(|(x, y)| *x += y),
            Binary::Sub => t.data_mut().iter_mut().zip(bd).for_each(|(x, y)| *x -= y),
            Binary::Mul => t.data_mut().iter_mut().zip(bd).for_each(|(x, y)| *x *= y),
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let mut t = self.value(x).clone();
        match kind {
            Unary::Tanh => t.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
            Unary::Sigmoid => t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_last_axis", self.shape(first), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Row gather on the matrix view of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                index: bad,
                len: rows,
            });
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let t = self.value(x).select_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Per-row normalization over the last axis followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::Contract(format!(
                "layer norm over a degenerate row of width {d}"
            )));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xhat, rstd) = kernels::layer_norm_stats(self.value(x).data(), d, LAYER_NORM_EPS);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `LayerNorm(a + b)`: the residual form used after every sublayer.
    pub fn layer_norm_residual(&mut self, a: Var, b: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.add(a, b)?;
        self.layer_norm(s, gain, bias)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|a| a.is_nan()) {
            return Err(Error::Numeric("softmax over NaN input".into()));
        }
        let mut t = v.clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Inverted dropout; identity on an eval tape or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout(x, mask), rg)
    }

    /// Segmented multi-head scaled dot-product attention on pre-projected
    /// `q`, `k`, `v`. Heads split the feature axis evenly; output width equals
    /// the width of `v`. Dropout with probability `p` applies to the attention
    /// weights on a training tape.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttnLayout>,
        p: f64,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::dim("attention", sq, sk));
        }
        let h = layout.heads;
        if h == 0 || sq[1] % h != 0 || sv[1] % h != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {h} heads",
                sq[1]
            )));
        }
        for s in &layout.segments {
            if s.q_len == 0 || s.k_len == 0 || s.q_start + s.q_len > sq[0] || s.k_start + s.k_len > sk[0]
            {
                return Err(Error::Contract(format!("attention segment {s:?} out of range")));
            }
        }
        let sh = AttnShapes {
            dq: sq[1],
            dv: sv[1],
            nq: sq[0],
        };
        let plen = layout.prob_len();
        let mask = if self.train && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            Some(
                (0..plen)
                    .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let mut probs = vec![0.0; plen];
        let mut out = vec![0.0; sh.nq * sh.dv];
        kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &sh,
            &layout,
            mask.as_deref(),
            &mut probs,
            &mut out,
        );
        let t = Tensor::new(vec![sh.nq, sh.dv], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                mask,
            },
            rg,
        ))
    }

    /// Attention weights saved by an attention node (segment, head, query, key order).
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Saved weights of every attention node on the tape, in recording order.
    pub fn all_attention_weights(&self) -> Vec<&[f64]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, .. } => Some(probs.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Row-wise dot product of two equally shaped tensors; result has one entry per row.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("row_dot", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let out: Vec<f64> = va
            .data()
            .chunks(c)
            .zip(vb.data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let t = Tensor::vector(out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::RowDot(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over rows of `-log softmax(row)[gold]`.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let m = v.cols();
        let rows = v.rows();
        if gold.len() != rows {
            return Err(Error::dim("cross_entropy", v.shape(), &[gold.len()]));
        }
        if let Some(&g) = gold.iter().find(|&&g| g >= m) {
            return Err(Error::Index { index: g, len: m });
        }
        if !v.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(m).enumerate() {
            loss += kernels::log_sum_exp(row) - row[gold[r]];
            kernels::softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d`loss` to every reachable node and accumulates it into leaf
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: &Var| nodes[v.0].requires_grad;
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(a) {
                    let bd = nodes[b.0].value.data();
                    kernels::gemm(m, n, k, g, false, bd, true, 1.0, slot(grads, nodes, *a));
                }
                if want(b) {
                    let ad = nodes[a.0].value.data();
                    kernels::gemm(k, m, n, ad, true, g, false, 1.0, slot(grads, nodes, *b));
                }
            }
            Op::AddRowBias(x, b) => {
                if want(x) {
                    add_into(slot(grads, nodes, *x), g);
                }
                if want(b) {
                    let n = nodes[b.0].value.len();
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    if want(a) {
                        add_into(slot(grads, nodes, *a), g);
                    }
                    if want(b) {
                        add_into(slot(grads, nodes, *b), g);
                    }
                }
                Binary::Sub => {
                    if want(a) {
                        add_into(slot(grads, nodes, *a), g);
                    }
                    if want(b) {
                        let gb = slot(grads, nodes, *b);
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                    }
                }
                Binary::Mul => {
                    if want(a) {
                        let bd = nodes[b.0].value.data();
                        let ga = slot(grads, nodes, *a);
                        for ((x, y), z) in ga.iter_mut().zip(g).zip(bd) {
                            *x += y * z;
                        }
                    }
                    if want(b) {
                        let ad = nodes[a.0].value.data();
                        let gb = slot(grads, nodes, *b);
                        for ((x, y), z) in gb.iter_mut().zip(g).zip(ad) {
                            *x += y * z;
                        }
                    }
                }
            },
            Op::Scale(x, s) => {
                if want(x) {
                    let gx = slot(grads, nodes, *x);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::Unary(kind, x) => {
                if want(x) {
                    let out = node.value.data();
                    let gx = slot(grads, nodes, *x);
                    match kind {
                        Unary::Tanh => {
                            for ((a, b), y) in gx.iter_mut().zip(g).zip(out) {
                                *a += b * (1.0 - y * y);
                            }
                        }
                        Unary::Sigmoid => {
                            for ((a, b), y) in gx.iter_mut().zip(g).zip(out) {
                                *a += b * y * (1.0 - y);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let width = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if want(p) {
                        let gp = slot(grads, nodes, *p);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * width + off..r * width + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(x, idx) => {
                if want(x) {
                    let c = node.value.cols();
                    let gx = slot(grads, nodes, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Reshape(x) => {
                if want(x) {
                    add_into(slot(grads, nodes, *x), g);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                if want(gain) {
                    let gg = slot(grads, nodes, *gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, b), h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *a += b * h;
                        }
                    }
                }
                if want(bias) {
                    let gb = slot(grads, nodes, *bias);
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if want(x) {
                    let gain_v = nodes[gain.0].value.data();
                    let gx = slot(grads, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for ((o, b), gv) in dxhat.iter_mut().zip(grow).zip(gain_v) {
                            *o = b * gv;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let s = rstd[r];
                        for ((o, dh), h) in gx[r * d..(r + 1) * d].iter_mut().zip(&dxhat).zip(hrow)
                        {
                            *o += s * (dh - mean_d - h * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if want(x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let gx = slot(grads, nodes, *x);
                    for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gg), yy) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yy * (gg - inner);
                        }
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if want(x) {
                    let gx = slot(grads, nodes, *x);
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                mask,
            } => {
                let sh = AttnShapes {
                    dq: nodes[q.0].value.cols(),
                    dv: nodes[v.0].value.cols(),
                    nq: nodes[q.0].value.rows(),
                };
                // q, k and v may alias the same node; accumulate into scratch first.
                let mut dq = want(q).then(|| vec![0.0; nodes[q.0].value.len()]);
                let mut dk = want(k).then(|| vec![0.0; nodes[k.0].value.len()]);
                let mut dv = want(v).then(|| vec![0.0; nodes[v.0].value.len()]);
                kernels::attention_backward(
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                    &sh,
                    layout,
                    mask.as_deref(),
                    probs,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = d {
                        add_into(slot(grads, nodes, *var), &d);
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = nodes[a.0].value.cols();
                for (src, dst) in [(b, a), (a, b)] {
                    if want(dst) {
                        let sv = nodes[src.0].value.data();
                        let gd = slot(grads, nodes, *dst);
                        for (r, gr) in g.iter().enumerate() {
                            for (o, s) in gd[r * c..(r + 1) * c].iter_mut().zip(&sv[r * c..(r + 1) * c]) {
                                *o += gr * s;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    let gx = slot(grads, nodes, *x);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                if want(logits) {
                    let m = nodes[logits.0].value.cols();
                    let rows = gold.len();
                    let s = g[0] / rows as f64;
                    let gl = slot(grads, nodes, *logits);
                    for (r, (orow, prow)) in gl.chunks_mut(m).zip(probs.chunks(m)).enumerate() {
                        for (j, (o, p)) in orow.iter_mut().zip(prow).enumerate() {
                            let t = if j == gold[r] { 1.0 } else { 0.0 };
                            *o += s * (p - t);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
