//! Training contracts on a miniature decoder: loss gradients against
//! finite differences, reproducibility, resumption and the frozen encoder.

mod common;

use common::fixture;
use diffup_core::diffusion::{diffusion_loss, NoiseSchedule};
use diffup_core::rng::Rng;
use diffup_core::synthshapes::split_classes;
use diffup_core::trainer::{batch_loss, draw_sample, LossWeights, TrainEvent, Trainer};
use diffup_core::nn::Graph;
use diffup_core::uqdd::{ConditionComposite, UNet};
use diffup_core::{Error, Shape, Tensor};

#[test]
fn batch_loss_gradient_matches_finite_differences() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let bank = fixture::bank(&enc, &data);
    let cfg = fixture::train_cfg();
    let mcfg = fixture::model();
    let schedule = cfg.schedule().unwrap();
    let (base, _) = split_classes(0).unwrap();
    let batch: Vec<_> = (0..2)
        .map(|i| draw_sample(&cfg, &mcfg, &enc, Some(&bank), &data, &base, &schedule, i).unwrap())
        .collect();
    let (net, p32) = UNet::new::<f32>(&mcfg, 3).unwrap();
    let mut params = p32.cast::<f64>();
    // wake the zero-initialized output layers
    let mut rng = Rng::new(4);
    for e in params.entries_mut() {
        for v in &mut e.value.data {
            *v += 0.05 * rng.normal();
        }
    }
    let w = LossWeights { lambda_em: cfg.lambda_em, lambda_iou: cfg.lambda_iou };
    let mut grads = params.zero_grads();
    batch_loss(&net, &params, &batch, &schedule, w, Some(&mut grads)).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let p = rng.range(0, params.len());
        let i = rng.range(0, grads[p].len());
        let mut plus = params.clone();
        plus.entries_mut()[p].value.data[i] += h;
        let mut minus = params.clone();
        minus.entries_mut()[p].value.data[i] -= h;
        let lp = batch_loss(&net, &plus, &batch, &schedule, w, None).unwrap().total;
        let lm = batch_loss(&net, &minus, &batch, &schedule, w, None).unwrap().total;
        let num = (lp - lm) / (2.0 * h);
        let rel = (grads[p][i] - num).abs() / grads[p][i].abs().max(num.abs()).max(1e-4);
        worst = worst.max(rel);
        assert!(rel < 1e-3, "{} [{i}]: analytic {} numeric {num}", params.name(diffup_core::nn::ParamId(p)), grads[p][i]);
    }
    println!("batch loss worst relative error {worst:.2e}");
}

#[test]
fn loss_parts_follow_their_definitions() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let bank = fixture::bank(&enc, &data);
    let cfg = fixture::train_cfg();
    let mcfg = fixture::model();
    let schedule: NoiseSchedule = cfg.schedule().unwrap();
    let (base, _) = split_classes(0).unwrap();
    let batch: Vec<_> = (0..3)
        .map(|i| draw_sample(&cfg, &mcfg, &enc, Some(&bank), &data, &base, &schedule, 100 + i).unwrap())
        .collect();
    let (net, params) = UNet::new::<f32>(&mcfg, 5).unwrap();
    let w = LossWeights { lambda_em: 0.7, lambda_iou: 0.3 };
    let parts = batch_loss(&net, &params, &batch, &schedule, w, None).unwrap();
    // independent forward pass, then each loss term from its definition
    let size = mcfg.image_size;
    let p = size * size;
    let conds: Vec<&ConditionComposite> = batch.iter().map(|s| &s.inputs.cond).collect();
    let cond = ConditionComposite::gather(&conds, &[0, 1, 2]);
    let query = Tensor::stack(&batch.iter().map(|s| &s.inputs.query).collect::<Vec<_>>());
    let x_t = Tensor::from_vec(Shape::new(3, 1, size, size), batch.iter().flat_map(|s| s.targets.x_t.clone()).collect());
    let ts: Vec<usize> = batch.iter().map(|s| s.t).collect();
    let mut g = Graph::inference(&params);
    let out = net.forward_tensors(&mut g, x_t, &ts, cond, query).unwrap();
    let (v_hat, err, iou_hat) = (g.value(out.v).data.clone(), g.value(out.err).data.clone(), g.value(out.iou).data.clone());
    let diff = batch
        .iter()
        .enumerate()
        .map(|(i, s)| diffusion_loss(&v_hat[i * p..(i + 1) * p], &s.targets.v, s.t, &schedule))
        .sum::<f64>()
        / 3.0;
    let em = batch
        .iter()
        .enumerate()
        .flat_map(|(i, s)| err[i * p..(i + 1) * p].iter().zip(&s.targets.e_gt).map(|(e, g)| (*e as f64 - g).abs()))
        .sum::<f64>()
        / (3 * p) as f64;
    let iou = batch.iter().zip(&iou_hat).map(|(s, h)| (*h as f64 - s.targets.iou_gt as f64).abs()).sum::<f64>() / 3.0;
    assert!((parts.diff - diff).abs() < 1e-9 * diff.max(1.0), "{} vs {diff}", parts.diff);
    assert!((parts.em - em).abs() < 1e-9, "{} vs {em}", parts.em);
    assert!((parts.iou - iou).abs() < 1e-9, "{} vs {iou}", parts.iou);
    assert_eq!(parts.total, parts.diff + 0.7 * parts.em + 0.3 * parts.iou);
}

fn losses(trainer: &mut Trainer<'_>, n: usize) -> Vec<f64> {
    (0..n).map(|_| trainer.step().unwrap().loss.total).collect()
}

#[test]
fn fixed_seed_reproduces_first_steps() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let bank = fixture::bank(&enc, &data);
    let mut cfg = fixture::train_cfg();
    cfg.seed = 7;
    cfg.episodes_per_epoch = 40;
    let mut a = Trainer::new(cfg.clone(), fixture::model(), &enc, Some(&bank), &data).unwrap();
    let mut b = Trainer::new(cfg.clone(), fixture::model(), &enc, Some(&bank), &data).unwrap();
    let (la, lb) = (losses(&mut a, 10), losses(&mut b, 10));
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    cfg.seed = 8;
    let mut c = Trainer::new(cfg, fixture::model(), &enc, Some(&bank), &data).unwrap();
    assert_ne!(losses(&mut c, 10), la);
}

#[test]
fn resumed_run_continues_bit_identically() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let bank = fixture::bank(&enc, &data);
    let mut cfg = fixture::train_cfg();
    cfg.episodes_per_epoch = 40;
    let mut a = Trainer::new(cfg.clone(), fixture::model(), &enc, Some(&bank), &data).unwrap();
    losses(&mut a, 3);
    let snapshot = a.state.clone();
    let tail = losses(&mut a, 10);
    let (model, _) = UNet::new::<f32>(&fixture::model(), 0).unwrap();
    let mut b = Trainer::resume(cfg, model, snapshot, &enc, Some(&bank), &data).unwrap();
    assert_eq!(losses(&mut b, 10), tail);
    assert_eq!(a.state.params.digest(), b.state.params.digest());
}

#[test]
fn full_run_keeps_encoder_frozen_and_tracks_best() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let bank = fixture::bank(&enc, &data);
    let before = enc.weights_digest();
    let cfg = fixture::train_cfg();
    let mut t = Trainer::new(cfg.clone(), fixture::model(), &enc, Some(&bank), &data).unwrap();
    let (mut steps, mut epochs) = (0, 0);
    t.run(&mut |e| match e {
        TrainEvent::Step(_) => steps += 1,
        TrainEvent::Epoch { record, .. } => {
            epochs += 1;
            assert!(record.val_miou.is_some_and(|m| (0.0..=1.0).contains(&m)));
        }
    })
    .unwrap();
    assert_eq!(steps as u64, cfg.total_steps());
    assert_eq!(epochs, cfg.epochs);
    assert_eq!(t.state.history.len(), cfg.epochs);
    assert!(t.state.best_epoch.is_some());
    assert_eq!(enc.weights_digest(), before);
    assert!(t.is_finished());
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let bank = fixture::bank(&enc, &data);
    let mut t = Trainer::new(fixture::train_cfg(), fixture::model(), &enc, Some(&bank), &data).unwrap();
    t.step().unwrap();
    let last = t.state.params.len() - 1;
    t.state.params.entries_mut()[last].value.data.fill(f32::NAN);
    match t.step() {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn mismatched_diffusion_length_is_rejected() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let mut cfg = fixture::train_cfg();
    cfg.diffusion_steps = 100;
    assert!(Trainer::new(cfg, fixture::model(), &enc, None, &data).is_err());
}
