use proptest::prelude::*;

use super::*;
use crate::data::{generate_synthetic, SynthConfig, TestSample};
use crate::encoders::Vocabulary;
use crate::numerics::ParamGroup;
use crate::scm::{forward_values, Ablation, CandidateBatch, ContextRep};

pub(crate) fn tiny_config(kind: ModelKind, scm: Option<Ablation>) -> ModelConfig {
    ModelConfig {
        kind,
        scm,
        d: 8,
        enc_layers: 1,
        enc_heads: 2,
        enc_ffd: 16,
        max_len: 48,
        scm_layers: 1,
        scm_heads: 2,
        scm_ffd: 16,
        poly_m: 4,
        dropout: 0.1,
    }
}

fn sessions(n: usize) -> Vec<Session> {
    generate_synthetic(&SynthConfig {
        n_train: n,
        n_test: 0,
        n_topics: 4,
        ..SynthConfig::default()
    })
    .unwrap()
    .0
}

fn model_for(cfg: ModelConfig, data: &[Session]) -> Model {
    let vocab = Vocabulary::build(
        data.iter()
            .flat_map(|s| s.turns.iter().map(String::as_str).chain([s.response.as_str()])),
    );
    Model::new(cfg, vocab, 7).unwrap()
}

#[test]
fn score_examples() {
    let f = Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
    let d = score(&Tensor::vector(vec![1.0, 0.0]), &f).unwrap();
    assert_eq!(d.data(), &[2.0, 0.0]);
    let d = score(&Tensor::vector(vec![0.0, 0.0]), &f).unwrap();
    assert_eq!(d.data(), &[0.0, 0.0]);
    assert!(score(&Tensor::vector(vec![1.0; 3]), &f).is_err());
}

#[test]
fn score_matches_loop_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, d) = (6, 5);
    let f: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let uc: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ft = Tensor::new(vec![m, d], f.clone()).unwrap();
    let ut = Tensor::new(vec![m, d], uc.clone()).unwrap();
    let got = score(&ut, &ft).unwrap();
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..d {
            s += f[i * d + j] * uc[i * d + j];
        }
        assert_eq!(got.data()[i], s);
    }
}

#[test]
fn loss_examples() {
    let uniform = Tensor::vector(vec![0.3; 10]);
    assert!((listwise_loss(&uniform, 4).unwrap() - 10f64.ln()).abs() < 1e-12);
    let mut v = vec![0.0; 10];
    v[2] = 30.0;
    assert!(listwise_loss(&Tensor::vector(v), 2).unwrap() < 1e-12);
    let l = listwise_loss(&Tensor::vector(vec![1.0, 0.0]), 0).unwrap();
    assert!((l - 0.313262).abs() < 1e-6);
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    assert!(matches!(
        listwise_loss(&Tensor::vector(vec![0.0, 1.0]), 2),
        Err(Error::Index { .. })
    ));
}

proptest! {
    #[test]
    fn loss_shift_invariant(v in prop::collection::vec(-5.0f64..5.0, 2..12), c in -50.0f64..50.0, g in 0usize..12) {
        let g = g % v.len();
        let a = listwise_loss(&Tensor::vector(v.clone()), g).unwrap();
        let b = listwise_loss(&Tensor::vector(v.iter().map(|x| x + c).collect()), g).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn ranking_ties_by_index() {
    assert_eq!(rank_by_degrees(&[0.2, 0.9, 0.9]), vec![1, 2, 0]);
    assert_eq!(rank_by_degrees(&[1.0]), vec![0]);
}

#[test]
fn in_batch_is_square_with_diagonal_gold() {
    let data = sessions(6);
    for scm in [None, Some(Ablation::Full), Some(Ablation::NoGate)] {
        for kind in [ModelKind::Bi, ModelKind::Poly] {
            let model = model_for(tiny_config(kind, scm), &data);
            for b in 2..=6 {
                let batch: Vec<&Session> = data[..b].iter().collect();
                let s = in_batch_scores(&model, &batch).unwrap();
                assert_eq!(s.degrees.shape(), &[b, b]);
                assert_eq!(s.gold, (0..b).collect::<Vec<_>>());
                assert!(s.degrees.all_finite());
            }
        }
    }
}

#[test]
fn in_batch_matches_separate_scm_calls() {
    let data = sessions(2);
    for ablation in Ablation::ALL {
        let model = model_for(tiny_config(ModelKind::Bi, Some(ablation)), &data);
        let batch: Vec<&Session> = data.iter().collect();
        let got = in_batch_scores(&model, &batch).unwrap();

        let mut t = Tape::eval();
        let ctx: Vec<_> = data.iter().map(|s| model.encode_context(&s.turns)).collect();
        let resp: Vec<_> = data.iter().map(|s| model.encode_response(&s.response)).collect();
        let uc = model.ctx_enc.encode_pooled(&mut t, &model.store, &ctx).unwrap();
        let ur = model.resp_enc.encode_pooled(&mut t, &model.store, &resp).unwrap();
        let (uc, ur) = (t.value(uc).clone(), t.value(ur).clone());
        for i in 0..2 {
            let u = Tensor::vector(uc.row(i).to_vec());
            let cb = CandidateBatch {
                context: ContextRep::Shared(u.clone()),
                candidates: ur.clone(),
            };
            let f = forward_values(&model.store, model.scm.as_ref().unwrap(), &cb, ablation).unwrap();
            let want = score(&u, &f).unwrap();
            for j in 0..2 {
                assert!((got.degrees.get2(i, j) - want.data()[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn duplicate_responses_rejected_and_deduped() {
    let mut data = sessions(3);
    data[2].response = format!("  {} ", data[0].response.replace(' ', "  "));
    let batch: Vec<&Session> = data.iter().collect();
    let model = model_for(tiny_config(ModelKind::Bi, None), &data);
    assert!(matches!(in_batch_scores(&model, &batch), Err(Error::Data(_))));
    let kept = dedup_batch(&batch);
    assert_eq!(kept.len(), 2);
    assert!(std::ptr::eq(kept[0], &data[0]));
}

#[test]
fn gradient_reaches_every_group() {
    let data = sessions(4);
    for kind in [ModelKind::Bi, ModelKind::Poly] {
        let mut model = model_for(tiny_config(kind, Some(Ablation::Full)), &data);
        let batch: Vec<&Session> = data.iter().collect();
        let mut t = Tape::train(3);
        let deg = in_batch_forward(&model, &mut t, &batch).unwrap();
        let loss = t.cross_entropy(deg, &[0, 1, 2, 3]).unwrap();
        t.backward(loss).unwrap();
        t.accumulate_into(&mut model.store);
        let norm = |pre: &str| -> f64 {
            model
                .store
                .iter()
                .filter(|(_, p)| p.name.starts_with(pre))
                .map(|(_, p)| p.grad.iter().map(|g| g * g).sum::<f64>())
                .sum()
        };
        for pre in ["ctx.", "resp.", "scm."] {
            assert!(norm(pre) > 0.0, "{kind:?} {pre}");
        }
        if kind == ModelKind::Poly {
            assert!(norm("poly.") > 0.0);
        }
        let groups: Vec<ParamGroup> = model.store.iter().map(|(_, p)| p.group).collect();
        assert!(groups.contains(&ParamGroup::Encoder) && groups.contains(&ParamGroup::Scm));
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = sessions(12);
    let mut model = model_for(tiny_config(ModelKind::Poly, Some(Ablation::Full)), &data);
    let before: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
    let cfg = TrainConfig {
        lr_encoder: 0.0,
        lr_scm: 0.0,
        ..small_train()
    };
    let rep = fit(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(rep.steps, 3);
    let after: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn same_seed_same_curve() {
    let data = sessions(12);
    let run = || {
        let mut model = model_for(tiny_config(ModelKind::Bi, Some(Ablation::Full)), &data);
        let rep = fit(&mut model, &data, &small_train(), |_, _| Ok(())).unwrap();
        (rep.curve_csv(), model.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.starts_with("epoch,step,loss\n0,0,"));
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn epoch_callback_runs_each_epoch() {
    let data = sessions(8);
    let mut model = model_for(tiny_config(ModelKind::Bi, None), &data);
    let mut seen = Vec::new();
    let cfg = TrainConfig {
        epochs: 3,
        ..small_train()
    };
    let rep = fit(&mut model, &data, &cfg, |e, _| {
        seen.push(e);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(rep.epoch_means.len(), 3);
    assert!(fit(&mut model, &[], &cfg, |_, _| Ok(())).is_err());
}

#[test]
fn select_contract() {
    let data = sessions(4);
    let model = model_for(tiny_config(ModelKind::Poly, Some(Ablation::Full)), &data);
    let one = select(&model, &data[0].turns, std::slice::from_ref(&data[0].response)).unwrap();
    assert_eq!(one.ranking, vec![0]);
    let empty: Vec<String> = Vec::new();
    assert!(select(&model, &data[0].turns, &empty).is_err());

    let cands: Vec<String> = data.iter().map(|s| s.response.clone()).collect();
    let sel = select(&model, &data[0].turns, &cands).unwrap();
    assert_eq!(sel.ranking, rank_by_degrees(&sel.degrees));
    let sample = TestSample {
        id: 0,
        turns: data[0].turns.clone(),
        candidates: cands
            .iter()
            .enumerate()
            .map(|(i, c)| crate::data::Candidate {
                text: c.clone(),
                label: (i == 0) as u8,
                provenance: crate::data::Provenance::Original,
            })
            .collect(),
    };
    let batched = model.score_samples(&[sample.clone(), sample]).unwrap();
    for row in batched {
        for (a, b) in row.iter().zip(&sel.degrees) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn config_validation() {
    let mut c = tiny_config(ModelKind::Poly, Some(Ablation::Full));
    c.poly_m = 0;
    assert!(c.validate().is_err());
    let mut c = tiny_config(ModelKind::Bi, Some(Ablation::Full));
    c.scm_heads = 3;
    assert!(c.validate().is_err());
    c.scm = None;
    assert!(c.validate().is_ok());
    assert_eq!(tiny_config(ModelKind::Bi, None).tag(), "bi");
    assert_eq!(tiny_config(ModelKind::Poly, Some(Ablation::NoGate)).tag(), "poly+scm(no_gate)");
    assert!(TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}
