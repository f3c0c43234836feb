//! Raw slice kernels shared by the tape and the value-level helpers.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `ta`/`tb` select the transposed storage of the operand, so `a` is stored as
/// `k×m` when `ta` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the `m×k`, `k×n` and `m×n` views of
    // buffers whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of a row, stabilized by the row maximum.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each `cols`-wide row of `x`. Returns `(xhat, rstd)`.
pub fn layer_norm_stats(x: &[f64], cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, rstd)
}

/// Row partition used by the segmented attention kernel. Query rows of a
/// segment only attend to key rows of the same segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Self-attention segment over `len` rows starting at `start`.
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub segments: Vec<Segment>,
    pub heads: usize,
    pub scale: f64,
}

impl AttnLayout {
    /// Consecutive self-attention segments of the given lengths.
    pub fn packed(lens: &[usize], heads: usize, scale: f64) -> Self {
        let mut start = 0;
        let segments = lens
            .iter()
            .map(|&l| {
                let s = Segment::square(start, l);
                start += l;
                s
            })
            .collect();
        Self {
            segments,
            heads,
            scale,
        }
    }

    pub fn prob_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.q_len * s.k_len)
            .sum::<usize>()
            * self.heads
    }
}

pub struct AttnShapes {
    pub dq: usize,
    pub dv: usize,
    pub nq: usize,
}

/// Forward pass. `probs` receives softmax weights (before dropout) laid out
/// segment-major, then head, then `q_len×k_len`. `mask` multiplies the weights
/// elementwise when present.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    sh: &AttnShapes,
    layout: &AttnLayout,
    mask: Option<&[f64]>,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let (dq, dv, h) = (sh.dq, sh.dv, layout.heads);
    let (hq, hv) = (dq / h, dv / h);
    let mut off = 0;
    for seg in &layout.segments {
        for head in 0..h {
            let p = &mut probs[off..off + seg.q_len * seg.k_len];
            for i in 0..seg.q_len {
                let qi = &q[(seg.q_start + i) * dq + head * hq..][..hq];
                let prow = &mut p[i * seg.k_len..(i + 1) * seg.k_len];
                for (j, pv) in prow.iter_mut().enumerate() {
                    let kj = &k[(seg.k_start + j) * dq + head * hq..][..hq];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *pv = dot * layout.scale;
                }
                softmax_in_place(prow);
                let o = &mut out[(seg.q_start + i) * dv + head * hv..][..hv];
                o.fill(0.0);
                for (j, &pv) in prow.iter().enumerate() {
                    let w = match mask {
                        Some(m) => pv * m[off + i * seg.k_len + j],
                        None => pv,
                    };
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &v[(seg.k_start + j) * dv + head * hv..][..hv];
                    for (oo, vv) in o.iter_mut().zip(vj) {
                        *oo += w * vv;
                    }
                }
            }
            off += seg.q_len * seg.k_len;
        }
    }
}

/// Accumulates gradients for `q`, `k`, `v` given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    sh: &AttnShapes,
    layout: &AttnLayout,
    mask: Option<&[f64]>,
    probs: &[f64],
    dout: &[f64],
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let (wq, wv, h) = (sh.dq, sh.dv, layout.heads);
    let (hq, hv) = (wq / h, wv / h);
    let mut off = 0;
    let mut dp = Vec::new();
    for seg in &layout.segments {
        for head in 0..h {
            let p = &probs[off..off + seg.q_len * seg.k_len];
            for i in 0..seg.q_len {
                let go = &dout[(seg.q_start + i) * wv + head * hv..][..hv];
                let prow = &p[i * seg.k_len..(i + 1) * seg.k_len];
                dp.clear();
                // dP' = dO · V^T ; dV += P'^T · dO
                for (j, &pv) in prow.iter().enumerate() {
                    let m = mask.map_or(1.0, |m| m[off + i * seg.k_len + j]);
                    let vj = &v[(seg.k_start + j) * wv + head * hv..][..hv];
                    let g: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dp.push(g * m);
                    if let Some(dv) = dv.as_deref_mut() {
                        let w = pv * m;
                        if w != 0.0 {
                            let dvj = &mut dv[(seg.k_start + j) * wv + head * hv..][..hv];
                            for (d, o) in dvj.iter_mut().zip(go) {
                                *d += w * o;
                            }
                        }
                    }
                }
                // softmax Jacobian
                let inner: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                let qi_start = (seg.q_start + i) * wq + head * hq;
                for (j, &pv) in prow.iter().enumerate() {
                    let ds = pv * (dp[j] - inner) * layout.scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_start = (seg.k_start + j) * wq + head * hq;
                    if let Some(dq) = dq.as_deref_mut() {
                        let kj = &k[kj_start..kj_start + hq];
                        for (d, kk) in dq[qi_start..qi_start + hq].iter_mut().zip(kj) {
                            *d += ds * kk;
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let qi = &q[qi_start..qi_start + hq];
                        for (d, qq) in dk[kj_start..kj_start + hq].iter_mut().zip(qi) {
                            *d += ds * qq;
                        }
                    }
                }
            }
            off += seg.q_len * seg.k_len;
        }
    }
}
