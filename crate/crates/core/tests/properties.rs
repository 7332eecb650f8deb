//! Property tests of the algebraic invariants.

use diffup_core::baft::{cosine_prior, masked_average_pool, ProtoSource, QueryContext};
use diffup_core::diffusion::{ddim_timesteps, q_sample, recover_eps, recover_x0, v_target, NoiseSchedule, ScheduleKind};
use diffup_core::encoders::{FeatureMap, FeaturePyramid};
use diffup_core::evalkit::{fb_iou, iou, miou, otsu_threshold};
use diffup_core::grid::{BinaryGrid, Map};
use diffup_core::trainer::{loss_from_outputs, make_targets, LossWeights};
use diffup_core::uapf::{mean_variance, SINGLE_PRIOR_VARIANCE};
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleKind::Cosine, 250).unwrap()
}

fn grid(h: usize, w: usize, bits: &[bool]) -> BinaryGrid {
    let mut g = BinaryGrid::new(h, w);
    for (i, b) in bits.iter().enumerate() {
        g.set(i / w, i % w, *b);
    }
    g
}

fn grids(max: usize) -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (1..max, 1..max).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w))
    })
}

fn feature_map(d: usize, h: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-3.0f32..3.0, d * h * h).prop_map(move |data| FeatureMap { d, h, w: h, data })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn v_prediction_inverts(x0 in -1.0f32..1.0, eps in -4.0f32..4.0, t in 1usize..=250) {
        let s = schedule();
        let xt = q_sample(&[x0], t, &[eps], &s);
        let v = v_target(&[x0], &[eps], t, &s);
        prop_assert!((recover_x0(&xt, &v, t, &s)[0] - x0).abs() < 1e-6);
        prop_assert!((recover_eps(&xt, &v, t, &s)[0] - eps).abs() < 1e-6);
    }

    #[test]
    fn error_target_restores_clean_mask(bits in prop::collection::vec(any::<bool>(), 16), eps in prop::collection::vec(-4.0f32..4.0, 16), t in 1usize..=250) {
        let x0: Vec<f32> = bits.iter().map(|b| if *b { 1.0 } else { -1.0 }).collect();
        let tg = make_targets(&x0, t, &eps, &schedule());
        for ((xt, e), x) in tg.x_t.iter().zip(&tg.e_gt).zip(&x0) {
            prop_assert_eq!(*xt as f64 + e, *x as f64);
        }
        prop_assert!((0.0..=1.0).contains(&tg.iou_gt));
    }

    #[test]
    fn total_loss_is_weighted_sum(
        v_hat in prop::collection::vec(-2.0f64..2.0, 8),
        err in prop::collection::vec(-2.0f64..2.0, 8),
        iou_hat in prop::collection::vec(0.0f64..1.0, 2),
        eps in prop::collection::vec(-2.0f32..2.0, 8),
        t in (1usize..=250, 1usize..=250),
        lambda in (0.0f64..3.0, 0.0f64..3.0),
    ) {
        let s = schedule();
        let x0 = [1.0f32, -1.0, -1.0, 1.0];
        let a = make_targets(&x0, t.0, &eps[..4], &s);
        let b = make_targets(&x0, t.1, &eps[4..], &s);
        let w = LossWeights { lambda_em: lambda.0, lambda_iou: lambda.1 };
        let (l, _) = loss_from_outputs(&v_hat, &err, &iou_hat, &[&a, &b], &[t.0, t.1], &s, w);
        prop_assert_eq!(l.total, l.diff + lambda.0 * l.em + lambda.1 * l.iou);
        prop_assert!(l.diff >= 0.0 && l.em >= 0.0 && l.iou >= 0.0);
    }

    #[test]
    fn ddim_visits_strictly_decreasing_steps(steps in 2usize..1000, n in 1usize..200) {
        let ts = ddim_timesteps(steps, n);
        prop_assert_eq!(ts[0], steps);
        prop_assert_eq!(*ts.last().unwrap(), 0);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        prop_assert_eq!(ts.len(), n.min(steps) + 1);
    }

    #[test]
    fn iou_matches_counting((h, w, a, b) in grids(9)) {
        let (ga, gb) = (grid(h, w, &a), grid(h, w, &b));
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        let brute = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got = iou(&ga, &gb).unwrap();
        prop_assert_eq!(got, brute);
        prop_assert_eq!(got, iou(&gb, &ga).unwrap());
        prop_assert_eq!(iou(&ga, &ga).unwrap(), 1.0);
        prop_assert_eq!(fb_iou(&[ga.clone()], &[ga]).unwrap(), 1.0);
    }

    #[test]
    fn miou_is_unweighted_mean(v in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let m = miou(&v).unwrap();
        prop_assert!((m - v.iter().sum::<f64>() / v.len() as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn fusion_is_order_free_and_nonnegative(maps in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 9), 1..6), rot in 0usize..6) {
        let maps: Vec<Map> = maps.into_iter().map(|data| Map { h: 3, w: 3, data }).collect();
        let refs: Vec<&Map> = maps.iter().collect();
        let mut turned = refs.clone();
        let k = turned.len();
        turned.rotate_left(rot % k);
        let (m1, v1) = mean_variance(&refs).unwrap();
        let (m2, v2) = mean_variance(&turned).unwrap();
        prop_assert!(m1.data.iter().zip(&m2.data).all(|(a, b)| (a - b).abs() < 1e-6));
        prop_assert!(v1.data.iter().zip(&v2.data).all(|(a, b)| (a - b).abs() < 1e-6));
        prop_assert!(v1.data.iter().all(|v| *v >= 0.0));
        if k == 1 {
            prop_assert!(v1.data.iter().all(|v| *v == SINGLE_PRIOR_VARIANCE));
        }
    }

    #[test]
    fn cosine_prior_is_bounded_and_scale_free(fm in feature_map(6, 4), proto in prop::collection::vec(0.1f32..2.0, 6), scale in 0.1f32..10.0) {
        let a = cosine_prior(&fm, &proto).unwrap();
        let scaled: Vec<f32> = proto.iter().map(|p| p * scale).collect();
        let b = cosine_prior(&fm, &scaled).unwrap();
        prop_assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn enhanced_prior_ignores_feature_scale(support in feature_map(5, 4), query in feature_map(5, 4), s in 0.2f32..5.0, q in 0.2f32..5.0) {
        let mut ann = BinaryGrid::new(16, 16);
        for r in 4..12 {
            for c in 2..10 {
                ann.set(r, c, true);
            }
        }
        let prior = |sup: &FeatureMap, qry: &FeatureMap| {
            let p = masked_average_pool(sup, &ann).unwrap();
            QueryContext::new(FeaturePyramid { levels: vec![qry.clone()] }).priors(&[p.data], ProtoSource::Visual).map(|c| c.levels[0].clone())
        };
        let scale = |fm: &FeatureMap, k: f32| FeatureMap { data: fm.data.iter().map(|v| v * k).collect(), ..fm.clone() };
        let (Ok(a), Ok(b)) = (prior(&support, &query), prior(&scale(&support, s), &scale(&query, q))) else {
            return Ok(());
        };
        prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn otsu_threshold_lies_in_range(v in prop::collection::vec(-1.0f32..1.0, 2..200)) {
        let t = otsu_threshold(&v);
        let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
        prop_assert!(t >= lo && t <= hi, "{t} outside [{lo}, {hi}]");
    }
}
