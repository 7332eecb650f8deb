//! Evaluation harness: leakage guard, sampler-call accounting, determinism
//! and report consistency, on an untrained miniature decoder.

mod common;

use common::fixture;
use diffup_core::evalkit::{evaluate, sweep, ClassPool, EvalContext, EvalSpec, Predictor, SweepAxis};
use diffup_core::synthshapes::{split_classes, AnnotationKind};
use diffup_core::uqdd::UNet;
use diffup_core::Error;

fn spec(shots: usize, kind: AnnotationKind, n: usize) -> EvalSpec {
    EvalSpec { n_steps: 3, n_ensemble: 2, ..EvalSpec::novel(0, shots, kind, n, 9) }
}

#[test]
fn harness_contracts() {
    let (data, enc) = (fixture::data(), fixture::encoder());
    let bank = fixture::bank(&enc, &data);
    let cfg = fixture::model();
    let (net, params) = UNet::new::<f32>(&cfg, 1).unwrap();
    let schedule = fixture::train_cfg().schedule().unwrap();

    let predictor = Predictor::new(&net, &params, &schedule);
    let ctx = EvalContext { predictor: &predictor, encoder: &enc, bank: Some(&bank), data: &data, checkpoint_digest: "x".into() };

    // base classes are refused unless explicitly allowed
    let mut base = spec(1, AnnotationKind::Mask, 2);
    base.pool = ClassPool::Base;
    assert!(matches!(evaluate(&ctx, &base), Err(Error::BaseClassLeak)));
    base.allow_base = true;
    let rep = evaluate(&ctx, &base).unwrap();
    let (base_ids, novel_ids) = split_classes(0).unwrap();
    assert!(rep.per_class.iter().all(|(c, _)| base_ids.contains(c)));

    // five shots still go through the sampler once per episode
    let before = predictor.sample_calls();
    let mut five = spec(5, AnnotationKind::Mask, 6);
    five.batch_episodes = 1;
    let rep = evaluate(&ctx, &five).unwrap();
    assert_eq!(predictor.sample_calls() - before, 6);
    assert_eq!(rep.sample_calls, 6);
    assert!(rep.episodes.iter().all(|e| e.sample_passes == 1));
    assert!(rep.per_class.iter().all(|(c, _)| novel_ids.contains(c)));
    assert!(rep.breakdown.iter().all(|b| b.shots == 5 && b.annotation == AnnotationKind::Mask));

    // batched episodes share calls but not passes
    five.batch_episodes = 4;
    let batched = evaluate(&ctx, &five).unwrap();
    assert_eq!(batched.sample_calls, 2);
    assert!(batched.episodes.iter().all(|e| e.sample_passes == 1));
    assert_eq!(batched.miou, rep.miou, "results depend on batch layout");

    // report consistency and determinism
    let one = spec(1, AnnotationKind::Scribble, 5);
    let a = evaluate(&ctx, &one).unwrap();
    let b = evaluate(&ctx, &one).unwrap();
    assert_eq!(a.miou.to_bits(), b.miou.to_bits());
    assert_eq!(a.episodes, b.episodes);
    let mean = a.per_class.iter().map(|(_, v)| v).sum::<f64>() / a.per_class.len() as f64;
    assert!((a.miou - mean).abs() < 1e-12);
    for v in [a.miou, a.fb_iou, a.baselines.background_miou, a.baselines.otsu_miou] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(a.baselines.background_miou, 0.0, "queries always contain the class");

    // zero shots fall back to the text cue alone
    let pts = sweep(&ctx, &spec(1, AnnotationKind::Mask, 2), SweepAxis::Shots, &[0, 2]).unwrap();
    assert_eq!(pts[0].1.spec.annotation, AnnotationKind::Text);
    assert_eq!(pts[1].1.spec.shots, 2);
    assert!(pts.iter().all(|(p, _)| p.episodes == 2));
}
