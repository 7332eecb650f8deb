use alloc::format;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Real, Shape, Tensor};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    Default,
    /// All zeros (weights and bias).
    Zeros,
}

fn uniform<T: Real>(shape: Shape, bound: f64, rng: &mut Rng) -> Tensor<T> {
    let data = (0..shape.len()).map(|_| T::from_f64(rng.uniform_in(-bound, bound))).collect();
    Tensor::from_vec(shape, data)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding for odd `k` at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        Self::with_pad(params, name, cin, cout, k, stride, k / 2, init, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_pad<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let ws = Shape::new(cout, cin, k, k);
        let bs = Shape::new(1, cout, 1, 1);
        let (w, b) = match init {
            Init::Default => {
                let bound = 1.0 / ((cin * k * k) as f64).sqrt();
                (uniform(ws, bound, rng), uniform(bs, bound, rng))
            }
            Init::Zeros => (Tensor::zeros(ws), Tensor::zeros(bs)),
        };
        let weight = params.add(format!("{name}.weight"), w);
        let bias = Some(params.add(format!("{name}.bias"), b));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Dense layer on `[n, c, 1, 1]` vectors (a 1x1 convolution).
#[derive(Clone, Copy, Debug)]
pub struct Linear(pub Conv2d);

impl Linear {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, init: Init, rng: &mut Rng) -> Self {
        Self(Conv2d::with_pad(params, name, cin, cout, 1, 1, 0, init, rng))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        self.0.forward(g, x)
    }
}

/// Group normalization with a learned per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels);
        assert!(channels % groups == 0, "{channels} channels into {groups} groups");
        let s = Shape::new(1, channels, 1, 1);
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(s, T::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(s)),
            groups,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, eps: T) -> Var {
        let n = g.group_norm(x, self.groups, eps);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(n, gamma);
        g.add(y, beta)
    }
}
