//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

use diffup_core::nn::{Graph, ParamSet, Var};
use diffup_core::rng::Rng;
use diffup_core::{Shape, Tensor};

pub fn randn(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_vec(shape, rng.normal_vec(shape.len()))
}

/// Adds `N(0, scale^2)` noise to every parameter so zero-initialized
/// layers take part in the check.
pub fn perturb(params: &mut ParamSet<f64>, scale: f64, seed: u64) {
    let mut rng = Rng::new(seed);
    for e in params.entries_mut() {
        for v in &mut e.value.data {
            *v += scale * rng.normal();
        }
    }
}

type Outputs<'a> = &'a dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Vec<Var>;

fn probes(g: &Graph<'_, f64>, ys: &[Var]) -> Vec<Vec<f64>> {
    ys.iter()
        .enumerate()
        .map(|(k, y)| Rng::derived(99, "probe", k as u64).normal_vec::<f64>(g.shape(*y).len()))
        .collect()
}

/// Builds `loss = sum_k sum(r_k * y_k)` with fixed random `r_k` and checks
/// d loss / d inputs and d loss / d params against central differences.
/// Returns the largest relative error seen.
pub fn check_multi(params: &ParamSet<f64>, inputs: &[Tensor<f64>], f: Outputs<'_>, tol: f64) -> f64 {
    let eval = |params: &ParamSet<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let ys = f(&mut g, &vars);
        let rs = probes(&g, &ys);
        ys.iter()
            .zip(&rs)
            .map(|(y, r)| g.value(*y).data.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let ys = f(&mut g, &vars);
    let rs = probes(&g, &ys);
    let seeds: Vec<(Var, &[f64])> = ys.iter().zip(&rs).map(|(y, r)| (*y, r.as_slice())).collect();
    let grads = g.backward(&seeds);
    let mut pg = params.zero_grads();
    grads.accumulate_params(&mut pg);
    let h = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs().max(n.abs()).max(1e-3));
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].data.len()]);
        for i in 0..inputs[k].data.len() {
            let mut plus = inputs.to_vec();
            plus[k].data[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data[i] -= h;
            let num = (eval(params, &plus) - eval(params, &minus)) / (2.0 * h);
            let e = rel(analytic[i], num);
            worst = worst.max(e);
            assert!(e < tol, "input {k}[{i}]: analytic {} numeric {num}", analytic[i]);
        }
    }
    for (p, pgrad) in pg.iter().enumerate() {
        for i in 0..pgrad.len() {
            let mut plus = params.clone();
            plus.entries_mut()[p].value.data[i] += h;
            let mut minus = params.clone();
            minus.entries_mut()[p].value.data[i] -= h;
            let num = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * h);
            let e = rel(pgrad[i], num);
            worst = worst.max(e);
            assert!(e < tol, "param {} [{i}]: analytic {} numeric {num}", params.name(diffup_core::nn::ParamId(p)), pgrad[i]);
        }
    }
    worst
}

/// Single-output form of [`check_multi`].
pub fn check(params: &ParamSet<f64>, inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var, tol: f64) -> f64 {
    check_multi(params, inputs, &|g, v| vec![f(g, v)], tol)
}

pub mod fixture {
    use diffup_core::encoders::{fit_text_bank, Encoder, TextProtoBank};
    use diffup_core::synthshapes::{split_classes, Dataset};
    use diffup_core::trainer::TrainConfig;
    use diffup_core::uqdd::ModelConfig;

    pub fn data() -> Dataset {
        Dataset::generate(0, 64, 8, 0, 2).unwrap()
    }

    pub fn encoder() -> Encoder {
        Encoder::random_projection("rp-8", 1, [8, 16, 32], 64)
    }

    pub fn bank(enc: &Encoder, data: &Dataset) -> TextProtoBank {
        let (base, _) = split_classes(0).unwrap();
        fit_text_bank(enc, data, &base, 64).unwrap()
    }

    /// Smallest decoder that accepts 64 px episodes.
    pub fn model() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            patch: 8,
            base_width: 4,
            mults: vec![1, 2],
            res_blocks: 1,
            groups: 2,
            emb_dim: 8,
            k_extra: 4,
            head_width: 4,
            per_level_dqm: false,
            diffusion_steps: 50,
        }
    }

    pub fn train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            episodes_per_epoch: 8,
            batch_size: 2,
            diffusion_steps: 50,
            val_every: 1,
            val_episodes: 2,
            val_ddim_steps: 2,
            val_ensemble: 1,
            ..TrainConfig::default()
        }
    }
}
