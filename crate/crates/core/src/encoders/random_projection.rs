use crate::nn::{Activation, Conv2d, Graph, Init, ParamSet, Var};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

#[derive(Clone, Debug)]
pub(crate) struct RpNet {
    stages: [Conv2d; 3],
}

/// Gain on the `1/sqrt(fan_in)` normal init; keeps tanh out of saturation
/// while leaving the features non-linear.
const GAIN: f64 = 1.5;

pub(crate) fn build(seed: u64, dims: [usize; 3]) -> (ParamSet<f32>, RpNet) {
    let mut params = ParamSet::new();
    let mut rng = Rng::derived(seed, "random_projection", 0);
    let specs = [(3, dims[0], 4, 4, 0), (dims[0], dims[1], 3, 2, 1), (dims[1], dims[2], 3, 2, 1)];
    let mut stage = 0;
    let stages = specs.map(|(cin, cout, k, stride, pad)| {
        stage += 1;
        let name = alloc::format!("rp.stage{stage}");
        let conv = Conv2d::with_pad(&mut params, &name, cin, cout, k, stride, pad, Init::Zeros, &mut rng);
        let std = GAIN / ((cin * k * k) as f64).sqrt();
        let w = params.get_mut(conv.weight);
        for v in w.data.iter_mut() {
            *v = (std * rng.normal()) as f32;
        }
        let b = params.get_mut(conv.bias.expect("bias"));
        *b = Tensor::from_vec(Shape::new(1, cout, 1, 1), rng.normal_vec::<f32>(cout).iter().map(|v| 0.1 * v).collect());
        conv
    });
    (params, RpNet { stages })
}

impl RpNet {
    pub(crate) fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> [Var; 3] {
        let a = self.stages[0].forward(g, x);
        let a = g.act(a, Activation::Tanh);
        let b = self.stages[1].forward(g, a);
        let b = g.act(b, Activation::Tanh);
        let c = self.stages[2].forward(g, b);
        let c = g.act(c, Activation::Tanh);
        [a, b, c]
    }
}
