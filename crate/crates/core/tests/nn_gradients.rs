//! Central finite-difference checks for every differentiable op at f64.

use diffup_core::nn::{Activation, Graph, ParamSet};
use diffup_core::rng::Rng;
use diffup_core::{Shape, Tensor};

mod common;

use common::{check, randn};

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = Rng::new(1);
    let mut params = ParamSet::new();
    let w = params.add("w", randn(Shape::new(3, 2, 3, 3), &mut rng));
    let b = params.add("b", randn(Shape::new(1, 3, 1, 1), &mut rng));
    let x = randn(Shape::new(2, 2, 5, 4), &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check(
            &params,
            std::slice::from_ref(&x),
            &|g, v| {
                let (wv, bv) = (g.param(w), g.param(b));
                g.conv2d(v[0], wv, Some(bv), stride, pad)
            },
            1e-6,
        );
    }
    // pointwise kernels, on maps and on vectors
    let w1 = params.add("w1", randn(Shape::new(3, 2, 1, 1), &mut rng));
    for x in [randn(Shape::new(2, 2, 3, 2), &mut rng), randn(Shape::new(3, 2, 1, 1), &mut rng)] {
        check(
            &params,
            std::slice::from_ref(&x),
            &|g, v| {
                let (wv, bv) = (g.param(w1), g.param(b));
                g.conv2d(v[0], wv, Some(bv), 1, 0)
            },
            1e-6,
        );
    }
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = Rng::new(2);
    let params = ParamSet::new();
    let a = randn(Shape::new(2, 3, 2, 2), &mut rng);
    let c = randn(Shape::new(1, 3, 1, 1), &mut rng);
    let d = randn(Shape::new(2, 3, 1, 1), &mut rng);
    let e = randn(Shape::new(2, 1, 2, 2), &mut rng);
    check(
        &params,
        &[a, c, d, e],
        &|g, v| {
            let x = g.mul(v[0], v[1]);
            let x = g.add(x, v[2]);
            let x = g.mul(x, v[3]);
            let x = g.affine(x, 0.7, 0.1);
            let s = g.act(x, Activation::Silu);
            let t = g.act(s, Activation::Tanh);
            let u = g.act(t, Activation::Sigmoid);
            let r = g.act(x, Activation::Relu);
            g.concat(&[u, r, s])
        },
        1e-6,
    );
}

#[test]
fn norm_and_reshape_gradients() {
    let mut rng = Rng::new(3);
    let params = ParamSet::new();
    let a = randn(Shape::new(2, 4, 4, 4), &mut rng);
    check(
        &params,
        &[a],
        &|g, v| {
            let n = g.group_norm(v[0], 2, 1e-5);
            let i = g.group_norm(v[0], 4, 1e-5);
            let s = g.space_to_depth(n, 2);
            let d = g.depth_to_space(s, 2);
            let p = g.avg_pool(d, 2);
            let up = g.upsample_nearest(p, 2);
            let sum = g.add(up, i);
            let nar = g.narrow(sum, 1, 2);
            let gap = g.global_avg_pool(nar);
            let sq = g.mul(nar, nar);
            let o = g.add(sq, gap);
            g.concat(&[o, nar])
        },
        1e-5,
    );
}

#[test]
fn sinusoidal_gradient() {
    let params = ParamSet::new();
    let t = Tensor::from_vec(Shape::vector(3, 1), vec![0.1, 0.5, 0.93]);
    check(&params, &[t], &|g, v| g.sinusoidal(v[0], 8, 3.0), 1e-6);
}

#[test]
fn s2d_roundtrip_is_identity() {
    let mut rng = Rng::new(4);
    let x = randn(Shape::new(2, 3, 8, 8), &mut rng);
    let y = diffup_core::nn::space_to_depth(&x, 4);
    assert_eq!(y.shape, Shape::new(2, 48, 2, 2));
    assert_eq!(diffup_core::nn::depth_to_space(&y, 4), x);
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = Rng::new(5);
    // (kernel, stride, pad, h, w)
    for (k, stride, pad, h, w) in [(3, 2, 1, 6, 5), (3, 1, 1, 4, 4), (3, 1, 0, 5, 5), (1, 1, 0, 3, 2), (1, 1, 0, 1, 1)] {
        let mut params = ParamSet::new();
        let wid = params.add("w", randn(Shape::new(2, 3, k, k), &mut rng));
        let x = randn(Shape::new(2, 3, h, w), &mut rng);
        let mut g = Graph::inference(&params);
        let xv = g.input(x.clone());
        let wv = g.param(wid);
        let y = g.conv2d(xv, wv, None, stride, pad);
        let y = g.value(y);
        let wt = params.get(wid);
        for n in 0..2 {
            for co in 0..2 {
                for oy in 0..y.shape.h {
                    for ox in 0..y.shape.w {
                        let mut acc = 0.0;
                        for ci in 0..3 {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += wt.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        assert!((acc - y.at(n, co, oy, ox)).abs() < 1e-12, "k={k} stride={stride} pad={pad}");
                    }
                }
            }
        }
    }
}
