use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{normalize_images, Encoder, Net};
use crate::grid::Image;
use crate::nn::{clip_grad_norm, Activation, Adam, Conv2d, Graph, Init, Linear, ParamSet, Var};
use crate::rng::{derive_seed, tag, Rng};
use crate::synthshapes::{gen_sample, ClassDef, GenParams};
use crate::Result;

#[derive(Clone, Debug)]
pub(crate) struct CnnNet {
    convs: [Conv2d; 5],
    head: Linear,
}

pub(crate) fn build(seed: u64, dims: [usize; 3], num_classes: usize) -> (ParamSet<f32>, CnnNet) {
    let mut params = ParamSet::new();
    let mut rng = Rng::derived(seed, "tiny_cnn", 0);
    let specs = [(3, 16, 1), (16, 32, 2), (32, dims[0], 2), (dims[0], dims[1], 2), (dims[1], dims[2], 2)];
    let mut i = 0;
    let convs = specs.map(|(cin, cout, stride)| {
        i += 1;
        Conv2d::new(&mut params, &alloc::format!("cnn.conv{i}"), cin, cout, 3, stride, Init::Default, &mut rng)
    });
    let head = Linear::new(&mut params, "cnn.head", dims[2], num_classes, Init::Default, &mut rng);
    (params, CnnNet { convs, head })
}

impl CnnNet {
    pub(crate) fn forward_taps(&self, g: &mut Graph<'_, f32>, x: Var) -> [Var; 3] {
        let mut h = x;
        let mut taps = Vec::with_capacity(3);
        for (i, c) in self.convs.iter().enumerate() {
            let y = c.forward(g, h);
            h = g.act(y, Activation::Relu);
            if i >= 2 {
                taps.push(h);
            }
        }
        [taps[0], taps[1], taps[2]]
    }

    fn logits(&self, g: &mut Graph<'_, f32>, x: Var) -> Var {
        let taps = self.forward_taps(g, x);
        let pooled = g.global_avg_pool(taps[2]);
        self.head.forward(g, pooled)
    }
}

/// Classifier pretraining settings. Two recipes that differ in seed and
/// schedule give the "pretraining adjustment" encoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecipe {
    pub seed: u64,
    pub epochs: usize,
    pub images_per_class: usize,
    pub batch: usize,
    pub lr: f64,
    /// Random horizontal flips.
    pub flip: bool,
    pub heldout_per_class: usize,
}

impl PretrainRecipe {
    pub fn recipe_a() -> Self {
        Self { seed: 11, epochs: 6, images_per_class: 48, batch: 32, lr: 2e-3, flip: false, heldout_per_class: 20 }
    }

    pub fn recipe_b() -> Self {
        Self { seed: 23, epochs: 8, images_per_class: 48, batch: 24, lr: 1e-3, flip: true, heldout_per_class: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: f64,
    pub weights_hash: String,
}

fn base_image(class: &ClassDef, seed: u64, size: usize) -> Result<Image> {
    let params = GenParams { size, clutter: 0, distractors: &[] };
    Ok(gen_sample(class, seed, &params)?.0)
}

fn softmax_xent(logits: &[f32], classes: usize, labels: &[usize]) -> (f64, Vec<f32>, usize) {
    let b = labels.len();
    let mut loss = 0.0;
    let mut grad = alloc::vec![0.0f32; logits.len()];
    let mut correct = 0;
    for (n, y) in labels.iter().enumerate() {
        let row = &logits[n * classes..(n + 1) * classes];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|v| num_traits::Float::exp((*v - m) as f64)).collect();
        let z: f64 = exps.iter().sum();
        loss += num_traits::Float::ln(z) - (row[*y] - m) as f64;
        let argmax = (0..classes).fold(0, |a, k| if row[k] > row[a] { k } else { a });
        correct += (argmax == *y) as usize;
        for k in 0..classes {
            let p = exps[k] / z;
            grad[n * classes + k] = ((p - (k == *y) as u8 as f64) / b as f64) as f32;
        }
    }
    (loss / b as f64, grad, correct)
}

/// Trains the tiny CNN as a classifier over `base` classes on clutter-free
/// renders, then freezes it. The classifier head stays in the weight file
/// but is never used by `encode`.
pub fn pretrain_tiny_cnn(
    name: &str,
    base: &[ClassDef],
    dims: [usize; 3],
    input_size: usize,
    recipe: &PretrainRecipe,
) -> Result<(Encoder, PretrainReport)> {
    let mut enc = Encoder::tiny_cnn_untrained(name, recipe.seed, dims, base.len(), input_size);
    let net = match enc.net() {
        Net::TinyCnn(n) => n.clone(),
        Net::RandomProjection(_) => unreachable!("constructed as tiny cnn"),
    };
    let mut params = enc.params().clone();
    let mut opt = Adam::new(&params, recipe.lr);
    let classes = base.len();
    let mut epoch_losses = Vec::with_capacity(recipe.epochs);
    for epoch in 0..recipe.epochs {
        let mut rng = Rng::derived(recipe.seed, "pretrain_order", epoch as u64);
        let mut items: Vec<(usize, u64)> = (0..classes)
            .flat_map(|c| {
                (0..recipe.images_per_class).map(move |i| {
                    let s = derive_seed(derive_seed(recipe.seed, tag("pretrain"), epoch as u64), c as u64, i as u64);
                    (c, s)
                })
            })
            .collect();
        rng.shuffle(&mut items);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in items.chunks(recipe.batch) {
            let mut images = Vec::with_capacity(chunk.len());
            for (c, s) in chunk {
                let im = base_image(&base[*c], *s, input_size)?;
                images.push(if recipe.flip && rng.uniform() < 0.5 { im.hflip() } else { im });
            }
            let refs: Vec<&Image> = images.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|(c, _)| *c).collect();
            let mut grads = params.zero_grads();
            {
                let mut g = Graph::new(&params);
                let x = g.input(normalize_images(&refs));
                let logits = net.logits(&mut g, x);
                let (loss, seed, _) = softmax_xent(&g.value(logits).data, classes, &labels);
                total += loss;
                g.backward(&[(logits, &seed)]).accumulate_params(&mut grads);
            }
            clip_grad_norm(&mut grads, 5.0);
            opt.step(&mut params, &grads);
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let mut correct = 0;
    let mut count = 0;
    for c in 0..classes {
        let images: Vec<Image> = (0..recipe.heldout_per_class)
            .map(|i| base_image(&base[c], derive_seed(recipe.seed, tag("heldout"), (c * 10_000 + i) as u64), input_size))
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let g_params = &params;
        let mut g = Graph::inference(g_params);
        let x = g.input(normalize_images(&refs));
        let logits = net.logits(&mut g, x);
        let labels = alloc::vec![c; images.len()];
        let (_, _, ok) = softmax_xent(&g.value(logits).data, classes, &labels);
        correct += ok;
        count += images.len();
    }
    enc.set_params(params);
    let report = PretrainReport {
        epoch_losses,
        heldout_accuracy: correct as f64 / count as f64,
        weights_hash: enc.id().weights_hash.clone(),
    };
    Ok((enc, report))
}
