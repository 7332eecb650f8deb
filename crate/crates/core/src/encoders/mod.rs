//! Frozen feature extractors behind one pyramid contract (three levels at
//! 1/4, 1/8 and 1/16 of the input), plus the attribute text bank.

mod random_projection;
mod text_bank;
mod tiny_cnn;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use text_bank::{fit_text_bank, text_encode, TextProtoBank};
pub use tiny_cnn::{pretrain_tiny_cnn, PretrainRecipe, PretrainReport};

use crate::grid::Image;
use crate::nn::{hex, Graph, ParamSet, Var};
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Spatial reduction of each pyramid level relative to the input.
pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];

/// One `d x h x w` feature map, channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    /// Feature vector at cell `i` (row-major over `h x w`).
    pub fn vector(&self, i: usize) -> Vec<f32> {
        let p = self.h * self.w;
        (0..self.d).map(|k| self.data[k * p + i]).collect()
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    RandomProjection,
    TinyCnn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderId {
    pub name: String,
    pub family: EncoderFamily,
    pub dims: [usize; 3],
    pub weights_hash: String,
}

#[derive(Clone, Debug)]
pub(crate) enum Net {
    RandomProjection(random_projection::RpNet),
    TinyCnn(tiny_cnn::CnnNet),
}

/// A frozen encoder. `encode` takes `&self`; nothing mutates the weights
/// after construction.
#[derive(Clone, Debug)]
pub struct Encoder {
    id: EncoderId,
    input_size: usize,
    params: ParamSet<f32>,
    net: Net,
}

pub(crate) fn normalize_images(images: &[&Image]) -> Tensor<f32> {
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        data.extend(im.data.iter().map(|v| (v - 0.5) / 0.25));
    }
    Tensor::from_vec(Shape::new(images.len(), 3, h, w), data)
}

impl Encoder {
    /// Fixed random convolutional stack drawn from `seed`.
    pub fn random_projection(name: &str, seed: u64, dims: [usize; 3], input_size: usize) -> Self {
        let (params, net) = random_projection::build(seed, dims);
        Self::assemble(name, EncoderFamily::RandomProjection, dims, input_size, params, Net::RandomProjection(net))
    }

    /// Tiny CNN with freshly initialized weights (see [`pretrain_tiny_cnn`]).
    pub fn tiny_cnn_untrained(name: &str, seed: u64, dims: [usize; 3], num_classes: usize, input_size: usize) -> Self {
        let (params, net) = tiny_cnn::build(seed, dims, num_classes);
        Self::assemble(name, EncoderFamily::TinyCnn, dims, input_size, params, Net::TinyCnn(net))
    }

    /// Rebuilds an encoder from stored weights. Tensor names and shapes
    /// must match what the family constructor creates.
    pub fn from_weights(
        name: &str,
        family: EncoderFamily,
        dims: [usize; 3],
        num_classes: usize,
        input_size: usize,
        weights: &ParamSet<f32>,
    ) -> Result<Self> {
        let (mut params, net) = match family {
            EncoderFamily::RandomProjection => {
                let (p, n) = random_projection::build(0, dims);
                (p, Net::RandomProjection(n))
            }
            EncoderFamily::TinyCnn => {
                let (p, n) = tiny_cnn::build(0, dims, num_classes);
                (p, Net::TinyCnn(n))
            }
        };
        params.load_from(weights).map_err(Error::ShapeMismatch)?;
        Ok(Self::assemble(name, family, dims, input_size, params, net))
    }

    fn assemble(name: &str, family: EncoderFamily, dims: [usize; 3], input_size: usize, params: ParamSet<f32>, net: Net) -> Self {
        let weights_hash = hex(&params.digest());
        Self { id: EncoderId { name: name.into(), family, dims, weights_hash }, input_size, params, net }
    }

    pub fn id(&self) -> &EncoderId {
        &self.id
    }

    pub fn dims(&self) -> [usize; 3] {
        self.id.dims
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    /// Digest of the current weights (recomputed, not cached).
    pub fn weights_digest(&self) -> String {
        hex(&self.params.digest())
    }

    pub(crate) fn net(&self) -> &Net {
        &self.net
    }

    pub(crate) fn set_params(&mut self, params: ParamSet<f32>) {
        self.params = params;
        self.id.weights_hash = hex(&self.params.digest());
    }

    pub fn encode(&self, image: &Image) -> Result<FeaturePyramid> {
        Ok(self.encode_batch(&[image])?.pop().expect("one pyramid"))
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<FeaturePyramid>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for im in images {
            if im.h != self.input_size || im.w != self.input_size {
                return Err(Error::ResolutionMismatch {
                    got_h: im.h,
                    got_w: im.w,
                    want_h: self.input_size,
                    want_w: self.input_size,
                });
            }
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(normalize_images(images));
        let taps = self.forward_taps(&mut g, x);
        let mut out: Vec<FeaturePyramid> = (0..images.len()).map(|_| FeaturePyramid { levels: Vec::with_capacity(3) }).collect();
        for t in taps {
            let v = g.value(t);
            let s = v.shape;
            let per = s.c * s.plane();
            for (n, p) in out.iter_mut().enumerate() {
                p.levels.push(FeatureMap { d: s.c, h: s.h, w: s.w, data: v.data[n * per..(n + 1) * per].to_vec() });
            }
        }
        Ok(out)
    }

    pub(crate) fn forward_taps(&self, g: &mut Graph<'_, f32>, x: Var) -> [Var; 3] {
        match &self.net {
            Net::RandomProjection(n) => n.forward(g, x),
            Net::TinyCnn(n) => n.forward_taps(g, x),
        }
    }
}

