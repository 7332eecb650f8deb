//! Decoder building blocks: AdaIN statistics, modulation at init, finite
//! difference gradients, edge channels and the assembled UNet.

mod common;

use common::{check_multi, perturb, randn};
use diffup_core::grid::{Image, Map};
use diffup_core::nn::{Graph, ParamSet, Var};
use diffup_core::rng::Rng;
use diffup_core::uqdd::{adain, edge_channels, sobel, Dqm, ModelConfig, Scm, UNet, STD_EPS};
use diffup_core::{Shape, Tensor};

/// Per-(sample, channel) population mean and standard deviation.
fn channel_stats(t: &Tensor<f64>, n: usize, c: usize) -> (f64, f64) {
    let p = t.plane(n, c);
    let m = p.iter().sum::<f64>() / p.len() as f64;
    let v = p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / p.len() as f64;
    (m, v.sqrt())
}

fn run_adain(x: &Tensor<f64>, style: &Tensor<f64>) -> Tensor<f64> {
    let params = ParamSet::new();
    let mut g = Graph::inference(&params);
    let xv = g.input(x.clone());
    let sv = g.input(style.clone());
    let y = adain(&mut g, xv, sv);
    g.value(y).clone()
}

/// Style tensor `[n, 2c, 1, 1]` from per-channel target (mean, std).
fn style_of(targets: &[Vec<(f64, f64)>]) -> Tensor<f64> {
    let n = targets.len();
    let c = targets[0].len();
    let mut data = Vec::new();
    for t in targets {
        data.extend(t.iter().map(|(_, s)| s - 1.0));
        data.extend(t.iter().map(|(m, _)| *m));
    }
    Tensor::from_vec(Shape::vector(n, 2 * c), data)
}

#[test]
fn adain_output_matches_style_statistics() {
    let mut rng = Rng::new(3);
    let x = Tensor::from_vec(
        Shape::new(2, 3, 6, 5),
        (0..180).map(|i| 3.0 + 2.0 * rng.normal() + (i % 7) as f64 * 0.1).collect(),
    );
    let targets: Vec<Vec<(f64, f64)>> = (0..2)
        .map(|_| (0..3).map(|_| (rng.uniform_in(-2.0, 2.0), rng.uniform_in(0.2, 2.0))).collect())
        .collect();
    let y = run_adain(&x, &style_of(&targets));
    for n in 0..2 {
        for c in 0..3 {
            let (m, s) = channel_stats(&y, n, c);
            assert!((m - targets[n][c].0).abs() < 1e-5, "mean {m} vs {}", targets[n][c].0);
            assert!((s - targets[n][c].1).abs() < 1e-5, "std {s} vs {}", targets[n][c].1);
        }
    }
}

#[test]
fn adain_unit_style_standardizes() {
    // channel with mean 3 and std 2, style (0, 1)
    let data: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { 5.0 }).collect();
    let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), data);
    assert_eq!(channel_stats(&x, 0, 0), (3.0, 2.0));
    let y = run_adain(&x, &style_of(&[vec![(0.0, 1.0)]]));
    let (m, s) = channel_stats(&y, 0, 0);
    assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5, "{m} {s}");
}

#[test]
fn adain_with_input_statistics_is_identity() {
    let mut rng = Rng::new(4);
    let x = randn(Shape::new(1, 2, 5, 5), &mut rng);
    let own: Vec<(f64, f64)> = (0..2).map(|c| channel_stats(&x, 0, c)).collect();
    let y = run_adain(&x, &style_of(&[own]));
    assert!(y.max_abs_diff(&x) < 1e-5);
}

#[test]
fn adain_constant_channel_maps_to_style_mean() {
    let x = Tensor::full(Shape::new(1, 1, 3, 3), 0.7);
    let y = run_adain(&x, &style_of(&[vec![(-1.25, 1.5)]]));
    assert!(y.data.iter().all(|v| (v + 1.25).abs() < 1e-12));
}

fn standardize(t: &Tensor<f64>) -> Tensor<f64> {
    let mut out = t.clone();
    for n in 0..t.shape.n {
        for c in 0..t.shape.c {
            let p = t.plane(n, c);
            let m = p.iter().sum::<f64>() / p.len() as f64;
            let v = p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / p.len() as f64;
            let r = 1.0 / (v + STD_EPS).sqrt();
            for (o, x) in out.plane_mut(n, c).iter_mut().zip(p) {
                *o = (x - m) * r;
            }
        }
    }
    out
}

#[test]
fn scm_is_plain_normalization_at_init() {
    let mut rng = Rng::new(5);
    let mut params = ParamSet::new();
    let scm = Scm::new(&mut params, "scm", 4, 6, 8, &mut rng);
    let f = randn(Shape::new(2, 6, 4, 4), &mut rng);
    let cond = randn(Shape::new(2, 4, 4, 4), &mut rng);
    let emb = randn(Shape::vector(2, 8), &mut rng);
    let mut g = Graph::inference(&params);
    let (fv, ev, cv) = (g.input(f.clone()), g.input(emb), g.input(cond));
    let y = scm.forward(&mut g, fv, ev, cv);
    assert_eq!(g.shape(y), f.shape);
    assert!(g.value(y).max_abs_diff(&standardize(&f)) < 1e-12);
}

#[test]
fn adain_gradient_matches_finite_differences() {
    let mut rng = Rng::new(6);
    let params = ParamSet::new();
    let x = randn(Shape::new(2, 3, 3, 4), &mut rng);
    let s = randn(Shape::vector(2, 6), &mut rng);
    let worst = check_multi(&params, &[x, s], &|g, v| vec![adain(g, v[0], v[1])], 1e-3);
    println!("adain worst relative error {worst:.2e}");
}

#[test]
fn scm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(7);
    let mut params = ParamSet::new();
    let scm = Scm::new(&mut params, "scm", 3, 4, 6, &mut rng);
    perturb(&mut params, 0.3, 70);
    let inputs = [
        randn(Shape::new(2, 4, 4, 4), &mut rng),
        randn(Shape::vector(2, 6), &mut rng),
        randn(Shape::new(2, 3, 4, 4), &mut rng),
    ];
    let worst = check_multi(&params, &inputs, &|g, v| vec![scm.forward(g, v[0], v[1], v[2])], 1e-3);
    println!("scm worst relative error {worst:.2e}");
}

fn micro_config(per_level_dqm: bool) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch: 2,
        base_width: 4,
        mults: vec![1, 2],
        res_blocks: 1,
        groups: 2,
        emb_dim: 8,
        k_extra: 0,
        head_width: 4,
        per_level_dqm,
        diffusion_steps: 10,
    }
}

#[test]
fn dqm_gradient_matches_finite_differences() {
    let cfg = micro_config(false);
    let mut rng = Rng::new(8);
    let mut params = ParamSet::new();
    let dqm = Dqm::new(&mut params, &cfg, &[4], &mut rng);
    perturb(&mut params, 0.3, 80);
    let inputs = [
        randn(Shape::new(2, 1, 8, 8), &mut rng),
        Tensor::from_vec(Shape::new(2, 3, 8, 8), (0..384).map(|_| rng.uniform()).collect()),
        randn(Shape::new(2, 4, 4, 4), &mut rng),
    ];
    let worst = check_multi(
        &params,
        &inputs,
        &|g, v| {
            let q = dqm.heads(g, v[0], v[1]);
            let f = dqm.modulate(g, 0, v[2], &q);
            vec![f, q.err, q.iou]
        },
        1e-3,
    );
    println!("dqm worst relative error {worst:.2e}");
}

#[test]
fn dqm_shapes_and_iou_range() {
    let cfg = micro_config(false);
    let mut rng = Rng::new(9);
    let mut params = ParamSet::<f64>::new();
    let dqm = Dqm::new(&mut params, &cfg, &[4], &mut rng);
    perturb(&mut params, 2.0, 90);
    let mut g = Graph::inference(&params);
    let x = g.input(randn(Shape::new(3, 1, 8, 8), &mut rng));
    let q = g.input(randn(Shape::new(3, 3, 8, 8), &mut rng));
    let out = dqm.heads(&mut g, x, q);
    assert_eq!(g.shape(out.err), Shape::new(3, 1, 8, 8));
    assert_eq!(g.shape(out.iou), Shape::vector(3, 1));
    assert!(g.value(out.iou).data.iter().all(|v| (0.0..=1.0).contains(v)));
}

fn micro_inputs(cfg: &ModelConfig, n: usize, rng: &mut Rng) -> Vec<Tensor<f64>> {
    let s = cfg.image_size;
    let mut v = vec![
        randn(Shape::new(n, 1, s, s), rng),
        Tensor::from_vec(Shape::vector(n, 1), (0..n).map(|i| 1.0 + 3.0 * i as f64).collect()),
        Tensor::from_vec(Shape::new(n, 3, s, s), (0..n * 3 * s * s).map(|_| rng.uniform()).collect()),
    ];
    for l in cfg.level_sizes() {
        v.push(randn(Shape::new(n, cfg.cond_channels(), l, l), rng));
    }
    v
}

fn unet_outputs(net: &UNet, g: &mut Graph<'_, f64>, v: &[Var]) -> Vec<Var> {
    let out = net.forward(g, v[0], v[1], &v[3..], v[2]).unwrap();
    vec![out.v, out.err, out.iou]
}

#[test]
fn micro_unet_gradient_matches_finite_differences() {
    for per_level in [false, true] {
        let cfg = micro_config(per_level);
        let (net, mut params) = UNet::new::<f64>(&cfg, 11).unwrap();
        perturb(&mut params, 0.2, 110);
        let mut rng = Rng::new(12);
        let inputs = micro_inputs(&cfg, 2, &mut rng);
        let worst = check_multi(&params, &inputs, &|g, v| unet_outputs(&net, g, v), 1e-3);
        println!("micro unet (per-level dqm {per_level}) worst relative error {worst:.2e}");
    }
}

#[test]
fn unet_output_is_zero_at_init_and_deterministic() {
    let cfg = micro_config(false);
    let (net, params) = UNet::new::<f64>(&cfg, 13).unwrap();
    let mut rng = Rng::new(14);
    let inputs = micro_inputs(&cfg, 2, &mut rng);
    let run = || {
        let mut g = Graph::inference(&params);
        let v: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = net.forward(&mut g, v[0], v[1], &v[3..], v[2]).unwrap();
        (g.value(out.v).clone(), g.value(out.err).clone(), g.value(out.iou).clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0.shape, inputs[0].shape);
    // zero-initialized output head
    assert!(a.0.data.iter().all(|v| *v == 0.0));
}

#[test]
fn unet_rejects_mismatched_condition() {
    let cfg = micro_config(false);
    let (net, params) = UNet::new::<f64>(&cfg, 15).unwrap();
    let mut rng = Rng::new(16);
    let mut inputs = micro_inputs(&cfg, 1, &mut rng);
    inputs[3] = randn(Shape::new(1, cfg.cond_channels() + 1, 4, 4), &mut rng);
    let mut g = Graph::inference(&params);
    let v: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    assert!(net.forward(&mut g, v[0], v[1], &v[3..], v[2]).is_err());
}

#[test]
fn desk_model_fits_parameter_budget() {
    for cfg in [ModelConfig::default(), ModelConfig::desk()] {
        let (_, params) = UNet::new::<f32>(&cfg, 0).unwrap();
        assert!(params.num_scalars() <= 4_200_000, "{}", params.num_scalars());
    }
}

fn image_from_gray(m: &Map) -> Image {
    let mut img = Image::new(m.h, m.w);
    for c in 0..3 {
        for r in 0..m.h {
            for col in 0..m.w {
                img.set(c, r, col, m.get(r, col));
            }
        }
    }
    img
}

#[test]
fn constant_image_has_no_edges() {
    let img = image_from_gray(&Map::full(16, 16, 0.4));
    for ch in edge_channels(&img) {
        assert!(ch.data.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn vertical_step_excites_only_sobel_x() {
    let (h, w, step) = (12, 12, 6);
    let mut m = Map::zeros(h, w);
    for r in 0..h {
        for c in step..w {
            m.data[r * w + c] = 0.8;
        }
    }
    let (gx, gy) = sobel(&m);
    // direct 3x3 correlation, replicated borders
    let k = [[-1.0f32, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    let rr = (r as isize + i as isize - 1).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + j as isize - 1).clamp(0, w as isize - 1) as usize;
                    acc += kv * m.get(rr, cc);
                }
            }
            assert!((gx.get(r, c) - acc).abs() < 1e-6);
            assert_eq!(gy.get(r, c), 0.0);
        }
    }
    let edges = edge_channels(&image_from_gray(&m));
    for r in 0..h {
        for c in 0..w {
            let on_edge = c == step - 1 || c == step;
            assert_eq!(edges[1].get(r, c) > 0.0, on_edge, "sobel-x at ({r}, {c})");
            assert_eq!(edges[2].get(r, c), 0.0);
        }
    }
    // canny marks the step and nothing far from it
    assert!((0..h).all(|r| edges[0].get(r, step - 1) + edges[0].get(r, step) >= 1.0));
    assert!((0..h).all(|r| (0..w).filter(|c| c.abs_diff(step) > 2).all(|c| edges[0].get(r, c) == 0.0)));
    for ch in &edges {
        assert!(ch.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
