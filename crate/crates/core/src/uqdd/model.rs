//! Patch-grid UNet denoiser with condition modulation after every block
//! and the error-map / IoU quality branch at the last decoder level.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::condition::cond_channels;
use crate::nn::{Activation, Conv2d, Graph, GroupNorm, Init, Linear, ParamSet, Var};
use crate::rng::Rng;
use crate::tensor::{Real, Shape, Tensor};
use crate::{Error, Result};

/// Epsilon of the group normalizations inside residual blocks.
pub const NORM_EPS: f64 = 1e-5;

/// Variance floor of the per-channel standardization used by AdaIN and the
/// modulations: `(x - mean) / sqrt(var + STD_EPS)`, i.e. a standard
/// deviation floor of 1e-5.
pub const STD_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Mask and query side length.
    pub image_size: usize,
    /// Space-to-depth factor between the mask and the top UNet level.
    pub patch: usize,
    pub base_width: usize,
    pub mults: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    /// Sinusoidal and MLP width of the time and IoU embeddings.
    pub emb_dim: usize,
    pub k_extra: usize,
    /// Width of the error-map and IoU heads.
    pub head_width: usize,
    /// Apply the quality modulation after every decoder level, not only the last.
    pub per_level_dqm: bool,
    /// Diffusion length; the predicted IoU is scaled by it before embedding.
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            base_width: 32,
            mults: alloc::vec![1, 2, 4],
            res_blocks: 2,
            groups: 8,
            emb_dim: 128,
            k_extra: 4,
            head_width: 32,
            per_level_dqm: false,
            diffusion_steps: 250,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and one block per level: the CPU-sized variant used
    /// for desk-scale training and evaluation.
    pub fn desk() -> Self {
        Self { base_width: 16, res_blocks: 1, head_width: 16, ..Self::default() }
    }

    /// Spatial side of each UNet level, top first.
    pub fn level_sizes(&self) -> Vec<usize> {
        let top = self.image_size / self.patch;
        (0..self.mults.len()).map(|l| top >> l).collect()
    }

    pub fn cond_channels(&self) -> usize {
        cond_channels(self.k_extra)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.mults.len();
        if levels == 0 || self.res_blocks == 0 || self.patch == 0 {
            return Err(Error::InvalidConfig("model needs at least one level, block and a patch factor".into()));
        }
        if self.image_size % (self.patch << (levels - 1)) != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch {} times 2^{}",
                self.image_size,
                self.patch,
                levels - 1
            )));
        }
        if self.emb_dim % 2 != 0 {
            return Err(Error::InvalidConfig("embedding width must be even".into()));
        }
        for m in &self.mults {
            if (self.base_width * m) % self.groups.min(self.base_width * m) != 0 {
                return Err(Error::InvalidConfig(format!("width {} not divisible into {} groups", self.base_width * m, self.groups)));
            }
        }
        Ok(())
    }
}

/// Two-layer embedding MLP on a sinusoidal code.
#[derive(Clone, Debug)]
struct EmbedMlp {
    l1: Linear,
    l2: Linear,
    dim: usize,
    scale: f64,
}

impl EmbedMlp {
    fn new<T: Real>(p: &mut ParamSet<T>, name: &str, dim: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            l1: Linear::new(p, &format!("{name}.l1"), dim, dim, Init::Default, rng),
            l2: Linear::new(p, &format!("{name}.l2"), dim, dim, Init::Default, rng),
            dim,
            scale,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let s = g.sinusoidal(x, self.dim, T::from_f64(self.scale));
        let h = self.l1.forward(g, s);
        let h = g.silu(h);
        self.l2.forward(g, h)
    }
}

/// Adaptive instance normalization: per-sample, per-channel
/// standardization of `x` followed by `std_s * . + mean_s`. `style` is
/// `[n, 2c, 1, 1]` holding `std_s - 1` then `mean_s`.
pub fn adain<T: Real>(g: &mut Graph<'_, T>, x: Var, style: Var) -> Var {
    let c = g.shape(x).c;
    assert_eq!(g.shape(style).c, 2 * c, "adain style width");
    let n = g.group_norm(x, c, T::from_f64(STD_EPS));
    let raw = g.narrow(style, 0, c);
    let std = g.affine(raw, T::one(), T::one());
    let mean = g.narrow(style, c, c);
    let y = g.mul(n, std);
    g.add(y, mean)
}

/// `(1 + dgamma) * IN(f) + beta` with `(dgamma, beta)` split from `gb`.
fn modulate<T: Real>(g: &mut Graph<'_, T>, f: Var, gb: Var) -> Var {
    let c = g.shape(f).c;
    let n = g.group_norm(f, c, T::from_f64(STD_EPS));
    let dg = g.narrow(gb, 0, c);
    let beta = g.narrow(gb, c, c);
    let scaled = g.mul(n, dg);
    let y = g.add(n, scaled);
    g.add(y, beta)
}

/// Self-conditioned modulation of a `features`-channel map by
/// `concat(x_t resized, condition)`, styled by an embedding.
#[derive(Clone, Debug)]
pub struct Scm {
    style: Linear,
    conv: Conv2d,
}

impl Scm {
    pub fn new<T: Real>(p: &mut ParamSet<T>, name: &str, cond: usize, features: usize, emb: usize, rng: &mut Rng) -> Self {
        Self {
            style: Linear::new(p, &format!("{name}.style"), emb, 2 * cond, Init::Default, rng),
            conv: Conv2d::new(p, &format!("{name}.gamma_beta"), cond, 2 * features, 3, 1, Init::Zeros, rng),
        }
    }

    /// `emb_act` is the already activated embedding `silu(emb)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, emb_act: Var, cond: Var) -> Var {
        let style = self.style.forward(g, emb_act);
        let styled = adain(g, cond, style);
        let gb = self.conv.forward(g, styled);
        modulate(g, f, gb)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, emb: usize, groups: usize, rng: &mut Rng) -> Self {
        Self {
            gn1: GroupNorm::new(p, &format!("{name}.gn1"), cin, groups),
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, cout, 3, 1, Init::Default, rng),
            emb: Linear::new(p, &format!("{name}.emb"), emb, cout, Init::Default, rng),
            gn2: GroupNorm::new(p, &format!("{name}.gn2"), cout, groups),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), cout, cout, 3, 1, Init::Default, rng),
            skip: (cin != cout).then(|| Conv2d::new(p, &format!("{name}.skip"), cin, cout, 1, 1, Init::Default, rng)),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, emb_act: Var) -> Var {
        let eps = T::from_f64(NORM_EPS);
        let h = self.gn1.forward(g, x, eps);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let e = self.emb.forward(g, emb_act);
        let h = g.add(h, e);
        let h = self.gn2.forward(g, h, eps);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Error-map and IoU heads plus the quality modulations they drive.
#[derive(Clone, Debug)]
pub struct Dqm {
    err: [Conv2d; 3],
    iou_conv: Conv2d,
    iou_l1: Linear,
    iou_l2: Linear,
    iou_embed: EmbedMlp,
    /// One modulation per hosted decoder level, top level first.
    mods: Vec<Scm>,
    patch: usize,
}

/// Outputs of the quality branch.
pub struct DqmOut {
    /// `[n, 1, H, W]` estimated error map.
    pub err: Var,
    /// `[n, 1, 1, 1]` predicted IoU in `[0, 1]`.
    pub iou: Var,
    /// Activated IoU embedding, reused by every hosted modulation.
    pub iou_emb_act: Var,
}

impl Dqm {
    pub fn new<T: Real>(p: &mut ParamSet<T>, cfg: &ModelConfig, hosted: &[usize], rng: &mut Rng) -> Self {
        let pp = cfg.patch * cfg.patch;
        let w = cfg.head_width;
        Self {
            err: [
                Conv2d::new(p, "dqm.err1", 4 * pp, w, 3, 1, Init::Default, rng),
                Conv2d::new(p, "dqm.err2", w, w, 3, 1, Init::Default, rng),
                Conv2d::new(p, "dqm.err3", w, pp, 3, 1, Init::Default, rng),
            ],
            iou_conv: Conv2d::new(p, "dqm.iou_conv", 5 * pp, w, 3, 1, Init::Default, rng),
            iou_l1: Linear::new(p, "dqm.iou_l1", w, w, Init::Default, rng),
            iou_l2: Linear::new(p, "dqm.iou_l2", w, 1, Init::Default, rng),
            iou_embed: EmbedMlp::new(p, "dqm.iou_embed", cfg.emb_dim, cfg.diffusion_steps as f64, rng),
            mods: hosted
                .iter()
                .map(|&c| Scm::new(p, &format!("dqm.mod{c}"), 1, c, cfg.emb_dim, rng))
                .collect(),
            patch: cfg.patch,
        }
    }

    /// Predicts `(E_t, iou)` from the noisy mask and the query image.
    pub fn heads<T: Real>(&self, g: &mut Graph<'_, T>, x_t: Var, query: Var) -> DqmOut {
        let xq = g.concat(&[x_t, query]);
        let h = g.space_to_depth(xq, self.patch);
        let h = self.err[0].forward(g, h);
        let h = g.silu(h);
        let h = self.err[1].forward(g, h);
        let h = g.silu(h);
        let h = self.err[2].forward(g, h);
        let err = g.depth_to_space(h, self.patch);

        let xqe = g.concat(&[x_t, query, err]);
        let h = g.space_to_depth(xqe, self.patch);
        let h = self.iou_conv.forward(g, h);
        let h = g.silu(h);
        let h = g.global_avg_pool(h);
        let h = self.iou_l1.forward(g, h);
        let h = g.silu(h);
        let h = self.iou_l2.forward(g, h);
        let iou = g.act(h, Activation::Sigmoid);
        let e = self.iou_embed.forward(g, iou);
        let iou_emb_act = g.silu(e);
        DqmOut { err, iou, iou_emb_act }
    }

    /// Quality modulation `k` of decoder features `f` (side `s`).
    pub fn modulate<T: Real>(&self, g: &mut Graph<'_, T>, k: usize, f: Var, out: &DqmOut) -> Var {
        let s = g.shape(f).h;
        let full = g.shape(out.err).h;
        let e = g.avg_pool(out.err, full / s);
        self.mods[k].forward(g, f, out.iou_emb_act, e)
    }
}

/// Handles of one UNet forward pass.
pub struct UNetOut {
    pub v: Var,
    pub err: Var,
    pub iou: Var,
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<(ResBlock, Scm)>,
}

/// The denoiser. Layer descriptors only; weights live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: ModelConfig,
    time: EmbedMlp,
    stem: Conv2d,
    enc: Vec<Level>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    dec: Vec<Level>,
    up: Vec<Conv2d>,
    dqm: Dqm,
    out_gn: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    /// Builds the layer graph and a freshly initialized parameter set.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        cfg.validate()?;
        let mut p = ParamSet::new();
        let mut rng = Rng::derived(seed, "unet_init", 0);
        let rng = &mut rng;
        let pp = cfg.patch * cfg.patch;
        let e = cfg.emb_dim;
        let cc = cfg.cond_channels() + 1;
        let widths: Vec<usize> = cfg.mults.iter().map(|m| cfg.base_width * m).collect();
        let time = EmbedMlp::new(&mut p, "time", e, 1.0, rng);
        let stem = Conv2d::new(&mut p, "stem", 4 * pp, widths[0], 3, 1, Init::Default, rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut skips = Vec::new();
        let mut ch = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let name = format!("enc{l}.{b}");
                blocks.push((
                    ResBlock::new(&mut p, &name, ch, w, e, cfg.groups, rng),
                    Scm::new(&mut p, &format!("{name}.scm"), cc, w, e, rng),
                ));
                ch = w;
                skips.push(w);
            }
            enc.push(Level { blocks });
            if l + 1 < widths.len() {
                down.push(Conv2d::new(&mut p, &format!("down{l}"), ch, ch, 3, 2, Init::Default, rng));
            }
        }
        let mid = ResBlock::new(&mut p, "mid", ch, ch, e, cfg.groups, rng);
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for (l, &w) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let skip = skips.pop().expect("one skip per encoder block");
                let name = format!("dec{l}.{b}");
                blocks.push((
                    ResBlock::new(&mut p, &name, ch + skip, w, e, cfg.groups, rng),
                    Scm::new(&mut p, &format!("{name}.scm"), cc, w, e, rng),
                ));
                ch = w;
            }
            dec.push(Level { blocks });
            if l > 0 {
                up.push(Conv2d::new(&mut p, &format!("up{l}"), ch, ch, 3, 1, Init::Default, rng));
            }
        }
        let hosted: Vec<usize> = if cfg.per_level_dqm { widths.iter().rev().copied().collect() } else { alloc::vec![widths[0]] };
        let dqm = Dqm::new(&mut p, cfg, &hosted, rng);
        let out_gn = GroupNorm::new(&mut p, "out.gn", ch, cfg.groups);
        let out_conv = Conv2d::new(&mut p, "out.conv", ch, pp, 3, 1, Init::Zeros, rng);
        Ok((Self { cfg: cfg.clone(), time, stem, enc, down, mid, dec, up, dqm, out_gn, out_conv }, p))
    }

    /// One denoising pass. `x_t` is `[n, 1, H, W]`, `t` is `[n, 1, 1, 1]`
    /// (timesteps as reals), `cond[l]` is `[n, C_cond, s_l, s_l]` and
    /// `query` is `[n, 3, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x_t: Var, t: Var, cond: &[Var], query: Var) -> Result<UNetOut> {
        let cfg = &self.cfg;
        let n = g.shape(x_t).n;
        let hw = cfg.image_size;
        let sizes = cfg.level_sizes();
        if g.shape(x_t) != Shape::new(n, 1, hw, hw) {
            return Err(Error::ShapeMismatch(format!("x_t is {:?}, expected [{n}, 1, {hw}, {hw}]", g.shape(x_t))));
        }
        if g.shape(query) != Shape::new(n, 3, hw, hw) {
            return Err(Error::ShapeMismatch(format!("query is {:?}", g.shape(query))));
        }
        if cond.len() != sizes.len() {
            return Err(Error::ShapeMismatch(format!("{} condition levels for {} UNet levels", cond.len(), sizes.len())));
        }
        for (c, s) in cond.iter().zip(&sizes) {
            if g.shape(*c) != Shape::new(n, cfg.cond_channels(), *s, *s) {
                return Err(Error::ShapeMismatch(format!("condition {:?} at level side {s}", g.shape(*c))));
            }
        }
        let temb = self.time.forward(g, t);
        let temb = g.silu(temb);
        // combined condition per level: resized x_t first
        let chat: Vec<Var> = cond
            .iter()
            .zip(&sizes)
            .map(|(c, s)| {
                let xr = g.avg_pool(x_t, hw / s);
                g.concat(&[xr, *c])
            })
            .collect();

        let xq = g.concat(&[x_t, query]);
        let h0 = g.space_to_depth(xq, cfg.patch);
        let mut h = self.stem.forward(g, h0);
        let mut skips = Vec::new();
        for (l, level) in self.enc.iter().enumerate() {
            for (rb, scm) in &level.blocks {
                h = rb.forward(g, h, temb);
                h = scm.forward(g, h, temb, chat[l]);
                skips.push(h);
            }
            if l < self.down.len() {
                h = self.down[l].forward(g, h);
            }
        }
        h = self.mid.forward(g, h, temb);
        let quality = self.dqm.heads(g, x_t, query);
        let levels = self.dec.len();
        for (i, level) in self.dec.iter().enumerate() {
            let l = levels - 1 - i;
            for (rb, scm) in &level.blocks {
                let s = skips.pop().expect("skip");
                let cat = g.concat(&[h, s]);
                h = rb.forward(g, cat, temb);
                h = scm.forward(g, h, temb, chat[l]);
            }
            if cfg.per_level_dqm {
                h = self.dqm.modulate(g, i, h, &quality);
            } else if l == 0 {
                h = self.dqm.modulate(g, 0, h, &quality);
            }
            if l > 0 {
                let u = g.upsample_nearest(h, 2);
                h = self.up[i].forward(g, u);
            }
        }
        let o = self.out_gn.forward(g, h, T::from_f64(NORM_EPS));
        let o = g.silu(o);
        let o = self.out_conv.forward(g, o);
        let v = g.depth_to_space(o, cfg.patch);
        Ok(UNetOut { v, err: quality.err, iou: quality.iou })
    }

    /// Convenience wrapper building the graph inputs from tensors.
    pub fn forward_tensors<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x_t: Tensor<T>,
        t: &[usize],
        cond: Vec<Tensor<T>>,
        query: Tensor<T>,
    ) -> Result<UNetOut> {
        let tt = Tensor::from_vec(Shape::vector(t.len(), 1), t.iter().map(|v| T::from_f64(*v as f64)).collect());
        let x = g.input(x_t);
        let tv = g.input(tt);
        let cv: Vec<Var> = cond.into_iter().map(|c| g.input(c)).collect();
        let q = g.input(query);
        self.forward(g, x, tv, &cv, q)
    }
}
