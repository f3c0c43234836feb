//! Self-attention comparison over a candidate set.
//!
//! Three stages turn per-candidate vectors into comparison-aware ones:
//!
//! 1. context-aware projection `H_i = tanh(W [u_c | u_{r_i}] + b)`,
//! 2. a stack of transformer blocks over the candidate axis with no position
//!    information, so the stage is permutation equivariant,
//! 3. a sigmoid gate `g_i` over `[u_{r_i} | u_c | O_i]` that mixes the original
//!    and compared vectors, followed by a layer norm.
//!
//! All functions operate on packed rows: row `r` of every input belongs to the
//! same candidate, and `groups` lists how many consecutive rows form one
//! candidate set. Comparison never crosses a group boundary.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoders::{self_attention_layout, transformer_block, BlockParams};
use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

/// Which SCM stages are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Comparison runs on the raw candidate vectors.
    NoContextAware,
    /// The comparison output is the final representation.
    NoGate,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoContextAware, Ablation::NoGate];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoContextAware => "no_context_aware",
            Ablation::NoGate => "no_gate",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_context_aware" => Ok(Ablation::NoContextAware),
            "no_gate" => Ok(Ablation::NoGate),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Init std multiplier on each comparison layer's residual-branch outputs
/// (W^O and the second FFN matrix). Starting the stack near identity lets
/// training discover the cross-candidate signal instead of drowning it.
pub const OUT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScmDims {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffd: usize,
}

#[derive(Clone, Debug)]
pub struct ScmParams {
    pub ctx_w: ParamId,
    pub ctx_b: ParamId,
    pub layers: Vec<BlockParams>,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub dims: ScmDims,
    pub dropout: f64,
}

impl ScmParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: ScmDims,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.layers == 0 {
            return Err(Error::Config("SCM needs at least one comparison layer".into()));
        }
        let g = ParamGroup::Scm;
        let d = dims.d;
        let ctx_w = store.add_normal("scm.ctx.w", &[2 * d, d], (1.0 / (2 * d) as f64).sqrt(), g, rng);
        let ctx_b = store.add_filled("scm.ctx.b", &[d], 0.0, g);
        let layers = (0..dims.layers)
            .map(|l| {
                BlockParams::register_scaled(
                    store,
                    &format!("scm.layer{l}"),
                    d,
                    dims.heads,
                    dims.ffd,
                    g,
                    OUT_SCALE,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gate_w = store.add_normal("scm.gate.w", &[3 * d, d], (1.0 / (3 * d) as f64).sqrt(), g, rng);
        let gate_b = store.add_filled("scm.gate.b", &[d], 0.0, g);
        let ln_gain = store.add_filled("scm.fuse.gain", &[d], 1.0, g);
        let ln_bias = store.add_filled("scm.fuse.bias", &[d], 0.0, g);
        Ok(Self {
            ctx_w,
            ctx_b,
            layers,
            gate_w,
            gate_b,
            ln_gain,
            ln_bias,
            dims,
            dropout,
        })
    }
}

fn check_rows(tape: &Tape, a: Var, b: Var, d: usize) -> Result<()> {
    if tape.shape(a) != tape.shape(b) || tape.value(a).cols() != d {
        return Err(Error::dim("scm", tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// `H = tanh([u_c | U_r] W + b)` row by row.
pub fn context_aware(
    tape: &mut Tape,
    store: &ParamStore,
    p: &ScmParams,
    uc: Var,
    ur: Var,
) -> Result<Var> {
    check_rows(tape, uc, ur, p.dims.d)?;
    let x = tape.concat_last(&[uc, ur])?;
    let (w, b) = (tape.param(store, p.ctx_w), tape.param(store, p.ctx_b));
    let h = tape.linear(x, w, Some(b))?;
    Ok(tape.tanh(h))
}

/// Transformer blocks over each candidate group, without positions.
pub fn compare(
    tape: &mut Tape,
    store: &ParamStore,
    p: &ScmParams,
    h: Var,
    groups: &[usize],
) -> Result<Var> {
    if groups.iter().any(|&g| g == 0) || groups.iter().sum::<usize>() != tape.value(h).rows() {
        return Err(Error::Contract(format!(
            "candidate groups {groups:?} do not tile {} rows",
            tape.value(h).rows()
        )));
    }
    let layout = self_attention_layout(groups, p.dims.d, p.dims.heads);
    let mut x = h;
    for b in &p.layers {
        x = transformer_block(tape, store, b, x, layout.clone(), p.dropout)?;
    }
    Ok(x)
}

/// `f_i = LayerNorm(g_i * u_{r_i} + (1 - g_i) * O_i)` with
/// `g_i = sigmoid([u_{r_i} | u_c | O_i] W + b)`.
pub fn gate_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    p: &ScmParams,
    uc: Var,
    ur: Var,
    o: Var,
) -> Result<Var> {
    check_rows(tape, uc, ur, p.dims.d)?;
    check_rows(tape, ur, o, p.dims.d)?;
    let x = tape.concat_last(&[ur, uc, o])?;
    let (w, b) = (tape.param(store, p.gate_w), tape.param(store, p.gate_b));
    let g = tape.linear(x, w, Some(b))?;
    let g = tape.sigmoid(g);
    // g*u + (1-g)*O, written so that u == O yields O exactly
    let diff = tape.sub(ur, o)?;
    let gd = tape.mul(g, diff)?;
    let mixed = tape.add(o, gd)?;
    let (lg, lb) = (tape.param(store, p.ln_gain), tape.param(store, p.ln_bias));
    tape.layer_norm(mixed, lg, lb)
}

/// Full module on packed rows. `uc` carries the context vector repeated (or
/// candidate-conditioned) for every candidate row.
pub fn scm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &ScmParams,
    uc: Var,
    ur: Var,
    groups: &[usize],
    ablation: Ablation,
) -> Result<Var> {
    match ablation {
        Ablation::Full => {
            let h = context_aware(tape, store, p, uc, ur)?;
            let o = compare(tape, store, p, h, groups)?;
            gate_fuse(tape, store, p, uc, ur, o)
        }
        Ablation::NoContextAware => {
            check_rows(tape, uc, ur, p.dims.d)?;
            let o = compare(tape, store, p, ur, groups)?;
            gate_fuse(tape, store, p, uc, ur, o)
        }
        Ablation::NoGate => {
            let h = context_aware(tape, store, p, uc, ur)?;
            compare(tape, store, p, h, groups)
        }
    }
}

/// Context representation for one candidate set.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextRep {
    /// One `[d]` vector shared by all candidates (bi-encoder).
    Shared(Tensor),
    /// One row per candidate, `[m × d]` (poly-encoder).
    PerCandidate(Tensor),
}

/// One context with its `m` stacked candidate vectors. Row `i` of
/// `candidates` is candidate `i` throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBatch {
    pub context: ContextRep,
    pub candidates: Tensor,
}

impl CandidateBatch {
    pub fn m(&self) -> usize {
        self.candidates.rows()
    }

    /// Context rows aligned with the candidates.
    pub fn context_rows(&self) -> Result<Tensor> {
        let m = self.m();
        let d = self.candidates.cols();
        match &self.context {
            ContextRep::Shared(u) => {
                if u.len() != d {
                    return Err(Error::dim("candidate_batch", u.shape(), self.candidates.shape()));
                }
                let row = Tensor::new(vec![1, d], u.data().to_vec())?;
                Ok(row.select_rows(&vec![0; m]))
            }
            ContextRep::PerCandidate(t) => {
                if t.shape() != self.candidates.shape() {
                    return Err(Error::dim("candidate_batch", t.shape(), self.candidates.shape()));
                }
                Ok(t.clone())
            }
        }
    }

    /// Applies a candidate permutation: new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            context: match &self.context {
                ContextRep::Shared(u) => ContextRep::Shared(u.clone()),
                ContextRep::PerCandidate(t) => ContextRep::PerCandidate(t.select_rows(perm)),
            },
            candidates: self.candidates.select_rows(perm),
        }
    }
}

/// Evaluates the module on one candidate set without recording gradients.
pub fn forward_values(
    store: &ParamStore,
    p: &ScmParams,
    batch: &CandidateBatch,
    ablation: Ablation,
) -> Result<Tensor> {
    let mut t = Tape::eval();
    let uc = t.constant(batch.context_rows()?);
    let ur = t.constant(batch.candidates.clone());
    let f = scm_forward(&mut t, store, p, uc, ur, &[batch.m()], ablation)?;
    Ok(t.value(f).clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::self_attention_layout;
    use crate::numerics;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(d: usize, layers: usize, heads: usize, seed: u64) -> (ParamStore, ScmParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ScmParams::register(&mut store, ScmDims { d, layers, heads, ffd: 2 * d }, 0.1, &mut rng)
            .unwrap();
        // randomize every bias/gain so nothing is trivially symmetric
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name.clone();
            if name.contains(".b") || name.contains("gain") || name.contains("bias") {
                let shape = store.value(id).shape().to_vec();
                let mut t = rand_tensor(&mut rng, &shape);
                if name.contains("gain") {
                    t.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.3 * *v);
                }
                *store.value_mut(id) = t;
            }
        }
        (store, p)
    }

    fn run<F>(f: F) -> Tensor
    where
        F: FnOnce(&mut Tape) -> Var,
    {
        let mut t = Tape::eval();
        let v = f(&mut t);
        t.value(v).clone()
    }

    #[test]
    fn zero_projection_gives_zero_context_aware_rows() {
        let (mut store, p) = params(4, 1, 2, 1);
        *store.value_mut(p.ctx_w) = Tensor::zeros(&[8, 4]);
        *store.value_mut(p.ctx_b) = Tensor::zeros(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let uc = rand_tensor(&mut rng, &[3, 4]);
        let ur = rand_tensor(&mut rng, &[3, 4]);
        let h = run(|t| {
            let (a, b) = (t.constant(uc), t.constant(ur));
            context_aware(t, &store, &p, a, b).unwrap()
        });
        assert!(h.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn context_aware_hand_case() {
        let (mut store, p) = params(2, 1, 1, 3);
        // sum of the two halves: W = [I; I]
        *store.value_mut(p.ctx_w) =
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        *store.value_mut(p.ctx_b) = Tensor::zeros(&[2]);
        let h = run(|t| {
            let a = t.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
            let b = t.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
            context_aware(t, &store, &p, a, b).unwrap()
        });
        for v in h.data() {
            assert!((v - 0.761_594_155_955_764_9).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_candidates_get_identical_rows() {
        let (store, p) = params(4, 1, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = rand_tensor(&mut rng, &[3, 4]);
        let ur = base.select_rows(&[0, 1, 0]);
        let uc = rand_tensor(&mut rng, &[1, 4]).select_rows(&[0, 0, 0]);
        let h = run(|t| {
            let (a, b) = (t.constant(uc.clone()), t.constant(ur.clone()));
            context_aware(t, &store, &p, a, b).unwrap()
        });
        assert_eq!(h.row(0), h.row(2));
        let f = run(|t| {
            let (a, b) = (t.constant(uc), t.constant(ur));
            scm_forward(t, &store, &p, a, b, &[3], Ablation::Full).unwrap()
        });
        assert_eq!(f.row(0), f.row(2));
    }

    #[test]
    fn single_candidate_comparison_is_single_key_attention() {
        let (store, p) = params(4, 2, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = rand_tensor(&mut rng, &[1, 4]);
        let mut t = Tape::eval();
        let hv = t.constant(h);
        let o = compare(&mut t, &store, &p, hv, &[1]).unwrap();
        assert_eq!(t.shape(o), &[1, 4]);
        // every attention node saw one key per query
        let weights: Vec<f64> = t.all_attention_weights().concat();
        assert_eq!(weights.len(), 2 * 2);
        assert!(weights.iter().all(|w| *w == 1.0));
    }

    #[test]
    fn comparison_equals_the_shared_transformer_block() {
        let (store, p) = params(4, 1, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = rand_tensor(&mut rng, &[3, 4]);
        let o = run(|t| {
            let hv = t.constant(h.clone());
            compare(t, &store, &p, hv, &[3]).unwrap()
        });
        let b = run(|t| {
            let hv = t.constant(h.clone());
            let layout = self_attention_layout(&[3], 4, 2);
            transformer_block(t, &store, &p.layers[0], hv, layout, 0.0).unwrap()
        });
        assert_eq!(o, b);
    }

    #[test]
    fn gate_with_equal_inputs_is_layer_norm_of_the_candidate() {
        let (store, p) = params(4, 1, 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ur = rand_tensor(&mut rng, &[3, 4]);
        let uc = rand_tensor(&mut rng, &[3, 4]);
        let f = run(|t| {
            let (a, b, c) = (t.constant(uc), t.constant(ur.clone()), t.constant(ur.clone()));
            gate_fuse(t, &store, &p, a, b, c).unwrap()
        });
        let zeros = Tensor::zeros(&[3, 4]);
        let expected =
            numerics::layer_norm_residual(&ur, &zeros, store.value(p.ln_gain), store.value(p.ln_bias))
                .unwrap();
        assert_eq!(f, expected);
    }

    #[test]
    fn saturated_gate_keeps_the_original_candidate() {
        let (mut store, p) = params(4, 1, 2, 12);
        *store.value_mut(p.gate_b) = Tensor::filled(&[4], 20.0);
        *store.value_mut(p.gate_w) = Tensor::zeros(&[12, 4]);
        *store.value_mut(p.ln_gain) = Tensor::filled(&[4], 1.0);
        *store.value_mut(p.ln_bias) = Tensor::zeros(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ur = rand_tensor(&mut rng, &[2, 4]);
        let uc = rand_tensor(&mut rng, &[2, 4]);
        let o = rand_tensor(&mut rng, &[2, 4]);
        let f = run(|t| {
            let (a, b, c) = (t.constant(uc), t.constant(ur.clone()), t.constant(o));
            gate_fuse(t, &store, &p, a, b, c).unwrap()
        });
        let zeros = Tensor::zeros(&[2, 4]);
        let expected = numerics::layer_norm_residual(
            &ur,
            &zeros,
            &Tensor::filled(&[4], 1.0),
            &Tensor::zeros(&[4]),
        )
        .unwrap();
        assert!(f.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn gate_hand_case_collapses_to_zero_row() {
        let (mut store, p) = params(2, 1, 1, 14);
        *store.value_mut(p.gate_w) = Tensor::zeros(&[6, 2]);
        *store.value_mut(p.gate_b) = Tensor::zeros(&[2]);
        *store.value_mut(p.ln_gain) = Tensor::filled(&[2], 1.0);
        *store.value_mut(p.ln_bias) = Tensor::zeros(&[2]);
        let f = run(|t| {
            let uc = t.constant(Tensor::from_rows(&[[0.3, 0.1]]).unwrap());
            let ur = t.constant(Tensor::from_rows(&[[2.0, 0.0]]).unwrap());
            let o = t.constant(Tensor::from_rows(&[[0.0, 2.0]]).unwrap());
            gate_fuse(t, &store, &p, uc, ur, o).unwrap()
        });
        assert_eq!(f.data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_is_the_composition_of_its_stages() {
        let (store, p) = params(4, 2, 2, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let uc = rand_tensor(&mut rng, &[5, 4]);
        let ur = rand_tensor(&mut rng, &[5, 4]);
        for ablation in Ablation::ALL {
            let full = run(|t| {
                let (a, b) = (t.constant(uc.clone()), t.constant(ur.clone()));
                scm_forward(t, &store, &p, a, b, &[5], ablation).unwrap()
            });
            let manual = run(|t| {
                let (a, b) = (t.constant(uc.clone()), t.constant(ur.clone()));
                let h = match ablation {
                    Ablation::NoContextAware => b,
                    _ => context_aware(t, &store, &p, a, b).unwrap(),
                };
                let o = compare(t, &store, &p, h, &[5]).unwrap();
                match ablation {
                    Ablation::NoGate => o,
                    _ => gate_fuse(t, &store, &p, a, b, o).unwrap(),
                }
            });
            assert_eq!(full, manual, "{ablation}");
        }
    }

    #[test]
    fn groups_do_not_interact() {
        let (store, p) = params(4, 1, 2, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let uc = rand_tensor(&mut rng, &[5, 4]);
        let ur = rand_tensor(&mut rng, &[5, 4]);
        let joint = run(|t| {
            let (a, b) = (t.constant(uc.clone()), t.constant(ur.clone()));
            scm_forward(t, &store, &p, a, b, &[2, 3], Ablation::Full).unwrap()
        });
        let second = run(|t| {
            let a = t.constant(uc.select_rows(&[2, 3, 4]));
            let b = t.constant(ur.select_rows(&[2, 3, 4]));
            scm_forward(t, &store, &p, a, b, &[3], Ablation::Full).unwrap()
        });
        assert!(joint.select_rows(&[2, 3, 4]).max_abs_diff(&second) < 1e-13);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("gated".parse::<Ablation>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permuting_candidates_permutes_outputs(m in 2usize..9, seed in any::<u64>(), poly in any::<bool>()) {
            let (store, p) = params(8, 2, 2, seed ^ 0x5eed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let candidates = rand_tensor(&mut rng, &[m, 8]);
            let context = if poly {
                ContextRep::PerCandidate(rand_tensor(&mut rng, &[m, 8]))
            } else {
                ContextRep::Shared(rand_tensor(&mut rng, &[8]))
            };
            let batch = CandidateBatch { context, candidates };
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            for ablation in Ablation::ALL {
                let f = forward_values(&store, &p, &batch, ablation).unwrap();
                let fp = forward_values(&store, &p, &batch.permuted(&perm), ablation).unwrap();
                prop_assert!(f.select_rows(&perm).max_abs_diff(&fp) < 1e-9);
            }
        }
    }
}
