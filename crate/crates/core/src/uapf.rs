//! Mean/variance fusion of cue priors, single-shot view expansion and the
//! fixed-size extras slot.

use alloc::vec::Vec;

use crate::baft::{compute_episode_priors, priors_from_pyramids, CuePriors, ProtoSource, QueryContext};
use crate::encoders::{Encoder, FeaturePyramid, TextProtoBank};
use crate::grid::{Image, Map};
use crate::rng::Rng;
use crate::synthshapes::{Annotation, ClassDef, Episode};
use crate::{Error, Result};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

pub const K_EXTRA: usize = 4;
/// Variance channel when only one prior is available.
pub const SINGLE_PRIOR_VARIANCE: f32 = 1.0;
pub const VARIANCE_CLIP: f32 = 2.0;
/// Side of the random crops, as a fraction of the image.
pub const CROP_SCALE: f64 = 0.9;

/// Fused conditioning of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStack {
    pub mean: Map,
    pub variance: Map,
    pub extras: Vec<Map>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorStack {
    pub levels: Vec<LevelStack>,
}

/// Two-pass mean and unbiased variance of equally sized maps.
pub fn mean_variance(maps: &[&Map]) -> Result<(Map, Map)> {
    let first = maps.first().ok_or(Error::NoPriors)?;
    let (h, w) = (first.h, first.w);
    if maps.iter().any(|m| m.h != h || m.w != w) {
        return Err(Error::ShapeMismatch("priors at one level differ in size".into()));
    }
    let k = maps.len();
    let mut mean = Map::zeros(h, w);
    let mut var = Map::full(h, w, SINGLE_PRIOR_VARIANCE);
    for i in 0..h * w {
        let mu = maps.iter().map(|m| m.data[i] as f64).sum::<f64>() / k as f64;
        mean.data[i] = mu as f32;
        if k >= 2 {
            let ss: f64 = maps.iter().map(|m| (m.data[i] as f64 - mu) * (m.data[i] as f64 - mu)).sum();
            var.data[i] = ((ss / (k - 1) as f64) as f32).clamp(0.0, VARIANCE_CLIP);
        }
    }
    Ok((mean, var))
}

/// Exactly `k_extra` maps: the given order truncated, zero-padded.
pub fn select_extras(priors: &[&Map], k_extra: usize, h: usize, w: usize) -> Vec<Map> {
    let mut out: Vec<Map> = priors.iter().take(k_extra).map(|m| (*m).clone()).collect();
    while out.len() < k_extra {
        out.push(Map::zeros(h, w));
    }
    out
}

/// Canonical order: textual cues first, then visual ones, each group in
/// its input order.
pub fn canonical_order(priors: &[CuePriors]) -> Vec<&CuePriors> {
    let mut out: Vec<&CuePriors> = priors.iter().filter(|p| p.source == ProtoSource::Textual).collect();
    out.extend(priors.iter().filter(|p| p.source == ProtoSource::Visual));
    out
}

pub fn fuse(priors: &[CuePriors], k_extra: usize) -> Result<PriorStack> {
    if priors.is_empty() {
        return Err(Error::NoPriors);
    }
    let ordered = canonical_order(priors);
    let n_levels = priors[0].levels.len();
    let levels = (0..n_levels)
        .map(|l| {
            let maps: Vec<&Map> = ordered.iter().map(|p| &p.levels[l]).collect();
            let (mean, variance) = mean_variance(&maps)?;
            let extras = select_extras(&maps, k_extra, mean.h, mean.w);
            Ok(LevelStack { mean, variance, extras })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorStack { levels })
}

/// A flipped or cropped copy of the support pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum View {
    Identity,
    Flip,
    Crop { r0: usize, c0: usize, side: usize },
}

fn transform(image: &Image, ann: &Annotation, view: View) -> Option<(Image, Annotation)> {
    let grid = ann.to_grid(image.h, image.w);
    match view {
        View::Identity => Some((image.clone(), ann.clone())),
        View::Flip => Some((image.hflip(), grid.map_or(Annotation::None, |g| Annotation::Mask(g.hflip())))),
        View::Crop { r0, c0, side } => {
            let im = image.crop_resize(r0, c0, side, side);
            match grid {
                None => Some((im, Annotation::None)),
                Some(g) => {
                    let g = g.crop_resize(r0, c0, side, side);
                    (g.count() > 0).then_some((im, Annotation::Mask(g)))
                }
            }
        }
    }
}

/// The four views of a single support: identity, horizontal flip and two
/// random crops (resized back). A crop that loses the whole annotation is
/// redrawn a few times, then replaced by the identity view.
pub fn augmented_views(image: &Image, ann: &Annotation, seed: u64) -> Vec<(Image, Annotation)> {
    let mut rng = Rng::derived(seed, "augment_single", 0);
    let side = (CROP_SCALE * image.h as f64).round() as usize;
    let mut out = Vec::with_capacity(4);
    for view in [View::Identity, View::Flip] {
        out.push(transform(image, ann, view).expect("identity and flip keep the annotation"));
    }
    for _ in 0..2 {
        let mut done = false;
        for _ in 0..8 {
            let view = View::Crop { r0: rng.range(0, image.h - side + 1), c0: rng.range(0, image.w - side + 1), side };
            if let Some(v) = transform(image, ann, view) {
                out.push(v);
                done = true;
                break;
            }
        }
        if !done {
            out.push((image.clone(), ann.clone()));
        }
    }
    out
}

/// Expanded cue priors of a one-shot episode: text cue (if any) then the
/// four support views.
pub fn augment_single(
    encoder: &Encoder,
    bank: Option<&TextProtoBank>,
    classes: &[ClassDef],
    episode: &Episode,
    seed: u64,
) -> Result<Vec<CuePriors>> {
    if episode.supports.len() != 1 {
        return Err(Error::InvalidConfig(alloc::format!("augment_single needs K=1, got {}", episode.supports.len())));
    }
    let (img, ann) = &episode.supports[0];
    let views = augmented_views(img, ann, seed);
    let mut images: Vec<&Image> = alloc::vec![&episode.query];
    images.extend(views.iter().map(|(im, _)| im));
    let mut pyrs = encoder.encode_batch(&images)?;
    let view_pyrs = pyrs.split_off(1);
    let ctx = QueryContext::new(pyrs.pop().expect("query pyramid"));
    let supports: Vec<(&FeaturePyramid, &Annotation)> = view_pyrs.iter().zip(views.iter().map(|(_, a)| a)).collect();
    let text = episode.text.map(|c| &classes[c]);
    priors_from_pyramids(&ctx, &supports, text, bank, encoder.dims(), encoder.input_size())
}

/// Cue priors for any shot count: one-shot episodes go through
/// [`augment_single`], all others through [`compute_episode_priors`].
pub fn expand_priors(
    encoder: &Encoder,
    bank: Option<&TextProtoBank>,
    classes: &[ClassDef],
    episode: &Episode,
    seed: u64,
) -> Result<Vec<CuePriors>> {
    if episode.supports.len() == 1 {
        augment_single(encoder, bank, classes, episode, seed)
    } else {
        compute_episode_priors(encoder, bank, classes, episode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_scalar_priors() {
        let a = Map::full(1, 1, 0.2);
        let b = Map::full(1, 1, 0.4);
        let (m, v) = mean_variance(&[&a, &b]).unwrap();
        assert!((m.data[0] - 0.3).abs() < 1e-7);
        assert!((v.data[0] - 0.02).abs() < 1e-7);
    }

    #[test]
    fn extras_are_padded_and_truncated() {
        let maps: Vec<Map> = (0..6).map(|i| Map::full(2, 2, i as f32 * 0.1)).collect();
        let refs: Vec<&Map> = maps.iter().collect();
        let two = select_extras(&refs[..2], 4, 2, 2);
        assert_eq!(two.len(), 4);
        assert!(two[2].data.iter().chain(&two[3].data).all(|v| *v == 0.0));
        let six = select_extras(&refs, 4, 2, 2);
        assert_eq!(six, maps[..4].to_vec());
        for n in 0..=6 {
            assert_eq!(select_extras(&refs[..n], 3, 2, 2).len(), 3);
        }
    }
}
