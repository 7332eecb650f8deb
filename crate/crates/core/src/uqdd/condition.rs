use alloc::vec::Vec;

use super::edges::edge_channels;
use crate::encoders::{Encoder, TextProtoBank};
use crate::grid::Map;
use crate::synthshapes::{ClassDef, Episode};
use crate::tensor::{Shape, Tensor};
use crate::uapf::{expand_priors, fuse, PriorStack};
use crate::{Error, Result};

pub const EDGE_CHANNELS: usize = 3;

/// Condition channels per UNet level for `k_extra` extras:
/// 3 encoder levels x (mean, variance, extras) + edges.
pub const fn cond_channels(k_extra: usize) -> usize {
    3 * (2 + k_extra) + EDGE_CHANNELS
}

/// One `[1, C_cond, s, s]` tensor per UNet level.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionComposite {
    pub levels: Vec<Tensor<f32>>,
}

/// Channel order at every UNet level: for encoder levels 0, 1, 2 in turn
/// `mean, variance, extra_0 .. extra_{k-1}`, then `canny, sobel_x, sobel_y`.
/// Every map is bilinearly resized to the level size.
pub fn assemble_condition(stack: &PriorStack, edges: &[Map; 3], level_sizes: &[usize]) -> Result<ConditionComposite> {
    if stack.levels.len() != 3 {
        return Err(Error::ShapeMismatch(alloc::format!("expected 3 prior levels, got {}", stack.levels.len())));
    }
    let k_extra = stack.levels[0].extras.len();
    if stack.levels.iter().any(|l| l.extras.len() != k_extra) {
        return Err(Error::ShapeMismatch("extras count differs across levels".into()));
    }
    let mut maps: Vec<&Map> = Vec::with_capacity(cond_channels(k_extra));
    for l in &stack.levels {
        maps.push(&l.mean);
        maps.push(&l.variance);
        maps.extend(l.extras.iter());
    }
    maps.extend(edges.iter());
    let levels = level_sizes
        .iter()
        .map(|&s| {
            let mut data = Vec::with_capacity(maps.len() * s * s);
            for m in &maps {
                data.extend(m.resize_bilinear(s, s).data);
            }
            Tensor::from_vec(Shape::new(1, maps.len(), s, s), data)
        })
        .collect();
    Ok(ConditionComposite { levels })
}

impl ConditionComposite {
    /// Batches compositions row-wise, repeating row `i` as given by `rows`.
    pub fn gather(items: &[&ConditionComposite], rows: &[usize]) -> Vec<Tensor<f32>> {
        let n_levels = items[0].levels.len();
        (0..n_levels)
            .map(|l| {
                let parts: Vec<&Tensor<f32>> = rows.iter().map(|r| &items[*r].levels[l]).collect();
                Tensor::stack(&parts)
            })
            .collect()
    }
}

/// Everything the decoder consumes for one episode, plus the targets.
#[derive(Clone, Debug)]
pub struct EpisodeInputs {
    pub cond: ConditionComposite,
    /// `[1, 3, H, W]` query image.
    pub query: Tensor<f32>,
    /// Ground-truth mask in `{-1, +1}`, row-major.
    pub x0: Vec<f32>,
    /// Fused mean prior averaged over encoder levels at mask resolution,
    /// the input of the thresholding baseline.
    pub prior_mean: Map,
    pub class_id: usize,
}

/// Priors (with single-shot expansion), fusion, edge channels and condition
/// assembly for one episode.
pub fn prepare_episode(
    encoder: &Encoder,
    bank: Option<&TextProtoBank>,
    classes: &[ClassDef],
    episode: &Episode,
    k_extra: usize,
    level_sizes: &[usize],
    seed: u64,
) -> Result<EpisodeInputs> {
    let priors = expand_priors(encoder, bank, classes, episode, seed)?;
    let stack = fuse(&priors, k_extra)?;
    let edges = edge_channels(&episode.query);
    let cond = assemble_condition(&stack, &edges, level_sizes)?;
    let (h, w) = (episode.query.h, episode.query.w);
    let mut prior_mean = Map::zeros(h, w);
    for l in &stack.levels {
        let up = l.mean.resize_bilinear(h, w);
        for (a, b) in prior_mean.data.iter_mut().zip(&up.data) {
            *a += b / stack.levels.len() as f32;
        }
    }
    let x0 = episode.query_gt.data.iter().map(|v| if *v != 0 { 1.0 } else { -1.0 }).collect();
    Ok(EpisodeInputs {
        cond,
        query: Tensor::from_vec(Shape::new(1, 3, h, w), episode.query.data.clone()),
        x0,
        prior_mean,
        class_id: episode.class_id,
    })
}
