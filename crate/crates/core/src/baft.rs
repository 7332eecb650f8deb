//! Prototype matching: masked average pooling, cosine prior maps and
//! self-affinity smoothing. Everything downstream of this module sees only
//! dimensionless maps in `[-1, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::{text_encode, Encoder, FeatureMap, FeaturePyramid, TextProtoBank};
use crate::grid::{BinaryGrid, Image, Map};
use crate::synthshapes::{Annotation, ClassDef, Episode};
use crate::tensor::{gemm, MatRef};
use crate::{Error, Result, EPS_NUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoSource {
    Visual,
    Textual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub data: Vec<f32>,
    pub source: ProtoSource,
}

/// Weighted mean of feature vectors; `None` if the weights sum to zero.
pub fn weighted_pool(fm: &FeatureMap, weights: &[f32]) -> Option<Vec<f32>> {
    let p = fm.cells();
    assert_eq!(weights.len(), p);
    let total: f64 = weights.iter().map(|w| *w as f64).sum();
    if total <= 0.0 {
        return None;
    }
    Some(
        (0..fm.d)
            .map(|k| {
                let row = &fm.data[k * p..(k + 1) * p];
                (row.iter().zip(weights).map(|(f, w)| *f as f64 * *w as f64).sum::<f64>() / total) as f32
            })
            .collect(),
    )
}

/// Annotation weights at feature resolution: area average, then 0.5 threshold.
pub fn downsample_annotation(ann: &BinaryGrid, h: usize, w: usize) -> Result<BinaryGrid> {
    if ann.h % h != 0 || ann.w % w != 0 || ann.h / h != ann.w / w {
        return Err(Error::ShapeMismatch(alloc::format!("annotation {}x{} onto {h}x{w}", ann.h, ann.w)));
    }
    Ok(ann.to_map().area_downsample(ann.h / h).threshold(0.5))
}

/// Masked average pooling with the strict (thresholded) annotation.
pub fn masked_average_pool(fm: &FeatureMap, ann: &BinaryGrid) -> Result<Prototype> {
    let cells = downsample_annotation(ann, fm.h, fm.w)?;
    let weights: Vec<f32> = cells.data.iter().map(|v| *v as f32).collect();
    weighted_pool(fm, &weights)
        .map(|data| Prototype { data, source: ProtoSource::Visual })
        .ok_or(Error::EmptyAnnotation)
}

/// [`masked_average_pool`], falling back to per-cell foreground fractions
/// when no cell survives the threshold (thin scribbles, small shapes).
pub fn masked_average_pool_or_soft(fm: &FeatureMap, ann: &BinaryGrid) -> Result<Prototype> {
    match masked_average_pool(fm, ann) {
        Err(Error::EmptyAnnotation) => {
            if ann.h % fm.h != 0 || ann.h / fm.h != ann.w / fm.w {
                return Err(Error::ShapeMismatch(alloc::format!("annotation {}x{} onto {}x{}", ann.h, ann.w, fm.h, fm.w)));
            }
            let soft = ann.to_map().area_downsample(ann.h / fm.h);
            weighted_pool(fm, &soft.data)
                .map(|data| Prototype { data, source: ProtoSource::Visual })
                .ok_or(Error::EmptyAnnotation)
        }
        other => other,
    }
}

fn norm(v: &[f32]) -> f64 {
    num_traits::Float::sqrt(v.iter().map(|x| *x as f64 * *x as f64).sum::<f64>())
}

fn cell_norms(fm: &FeatureMap) -> Vec<f64> {
    let p = fm.cells();
    let mut sq = vec![0.0f64; p];
    for k in 0..fm.d {
        for (s, v) in sq.iter_mut().zip(&fm.data[k * p..(k + 1) * p]) {
            *s += *v as f64 * *v as f64;
        }
    }
    sq.into_iter().map(num_traits::Float::sqrt).collect()
}

/// Cosine similarity of every query cell to `proto`.
pub fn cosine_prior(fm: &FeatureMap, proto: &[f32]) -> Result<Map> {
    if proto.len() != fm.d {
        return Err(Error::DimMismatch(alloc::format!("prototype has {} dims, features {}", proto.len(), fm.d)));
    }
    let pn = norm(proto);
    if pn == 0.0 {
        return Err(Error::ZeroPrototype);
    }
    let p = fm.cells();
    let mut dot = vec![0.0f64; p];
    for (k, pk) in proto.iter().enumerate() {
        for (d, v) in dot.iter_mut().zip(&fm.data[k * p..(k + 1) * p]) {
            *d += *v as f64 * *pk as f64;
        }
    }
    let norms = cell_norms(fm);
    let data = dot
        .iter()
        .zip(&norms)
        .map(|(d, n)| (d / (n * pn + EPS_NUM)).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Map { h: fm.h, w: fm.w, data })
}

/// Dense `(hw) x (hw)` cosine self-similarity, row-major.
pub fn self_affinity(fm: &FeatureMap) -> Vec<f32> {
    let p = fm.cells();
    // rows of `feat` are feature channels, so feat^T * feat gives cell dots
    let mut dots = vec![0.0f32; p * p];
    gemm(MatRef::t(&fm.data, p, fm.d), MatRef::new(&fm.data, fm.d, p), &mut dots, false);
    let norms = cell_norms(fm);
    for i in 0..p {
        for j in 0..p {
            let v = dots[i * p + j] as f64 / (norms[i] * norms[j] + EPS_NUM);
            dots[i * p + j] = v.clamp(-1.0, 1.0) as f32;
        }
    }
    dots
}

/// Row-normalized non-negative affinity. Rows with no positive mass keep
/// their own cell only.
pub fn normalize_affinity(a: &[f32], p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; p * p];
    for i in 0..p {
        let row = &a[i * p..(i + 1) * p];
        let sum: f64 = row.iter().map(|v| v.max(0.0) as f64).sum();
        if sum < EPS_NUM {
            out[i * p + i] = 1.0;
            continue;
        }
        for (o, v) in out[i * p..(i + 1) * p].iter_mut().zip(row) {
            *o = (v.max(0.0) as f64 / sum) as f32;
        }
    }
    out
}

/// Smooths a prior with a normalized affinity (from [`normalize_affinity`]).
pub fn apply_affinity(norm_a: &[f32], prior: &Map) -> Map {
    let p = prior.data.len();
    assert_eq!(norm_a.len(), p * p, "affinity does not match prior");
    let data = (0..p)
        .map(|i| {
            let s: f64 = norm_a[i * p..(i + 1) * p]
                .iter()
                .zip(&prior.data)
                .map(|(a, v)| *a as f64 * *v as f64)
                .sum();
            (s as f32).clamp(-1.0, 1.0)
        })
        .collect();
    Map { h: prior.h, w: prior.w, data }
}

/// `reshape(relu(A) / rowsum * flatten(prior))`.
pub fn affinity_enhance(a: &[f32], prior: &Map) -> Map {
    let p = prior.data.len();
    apply_affinity(&normalize_affinity(a, p), prior)
}

/// Priors of one cue at each pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct CuePriors {
    pub source: ProtoSource,
    pub levels: Vec<Map>,
}

/// Query-side state shared by every cue of an episode.
pub struct QueryContext {
    pub pyramid: FeaturePyramid,
    affinity: Vec<Vec<f32>>,
}

impl QueryContext {
    pub fn new(pyramid: FeaturePyramid) -> Self {
        let affinity = pyramid
            .levels
            .iter()
            .map(|fm| normalize_affinity(&self_affinity(fm), fm.cells()))
            .collect();
        Self { pyramid, affinity }
    }

    /// Cosine prior of `protos` (one per level) against the query, enhanced.
    pub fn priors(&self, protos: &[Vec<f32>], source: ProtoSource) -> Result<CuePriors> {
        let levels = self
            .pyramid
            .levels
            .iter()
            .zip(protos)
            .zip(&self.affinity)
            .map(|((fm, proto), a)| Ok(apply_affinity(a, &cosine_prior(fm, proto)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CuePriors { source, levels })
    }
}

/// Per-level visual prototypes of a support image from a pixel annotation.
pub fn support_prototypes(support: &FeaturePyramid, ann: &BinaryGrid) -> Result<Vec<Vec<f32>>> {
    support
        .levels
        .iter()
        .map(|fm| masked_average_pool_or_soft(fm, ann).map(|p| p.data))
        .collect()
}

/// Prototypes of an unannotated support: the text prior on the support's
/// own features picks the cells above the midpoint of its mean and max.
pub fn pseudo_prototypes(support: &FeaturePyramid, text_protos: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
    support
        .levels
        .iter()
        .zip(text_protos)
        .map(|(fm, tp)| {
            let a = normalize_affinity(&self_affinity(fm), fm.cells());
            let prior = apply_affinity(&a, &cosine_prior(fm, tp)?);
            let cut = 0.5 * (prior.mean() as f32 + prior.max());
            let weights: Vec<f32> = prior.data.iter().map(|v| (*v >= cut) as u8 as f32).collect();
            weighted_pool(fm, &weights).ok_or(Error::EmptyAnnotation)
        })
        .collect()
}

/// Text cue first (when present), then one entry per support in order.
pub fn priors_from_pyramids(
    ctx: &QueryContext,
    supports: &[(&FeaturePyramid, &Annotation)],
    text: Option<&ClassDef>,
    bank: Option<&TextProtoBank>,
    dims: [usize; 3],
    image_size: usize,
) -> Result<Vec<CuePriors>> {
    let text_protos = match (text, bank) {
        (Some(c), Some(b)) => Some(text_encode(b, dims, c)?),
        _ => None,
    };
    let mut out = Vec::with_capacity(supports.len() + 1);
    if let Some(tp) = &text_protos {
        out.push(ctx.priors(tp, ProtoSource::Textual)?);
    }
    for (pyr, ann) in supports {
        let protos = match ann.to_grid(image_size, image_size) {
            Some(grid) => support_prototypes(pyr, &grid)?,
            None => {
                let tp = text_protos.as_ref().ok_or_else(|| {
                    Error::InsufficientData("a support without annotation needs a text cue and a text bank".into())
                })?;
                pseudo_prototypes(pyr, tp)?
            }
        };
        out.push(ctx.priors(&protos, ProtoSource::Visual)?);
    }
    if out.is_empty() {
        return Err(Error::NoPriors);
    }
    Ok(out)
}

/// Encodes the episode and returns its cue priors (text first, then supports).
pub fn compute_episode_priors(
    encoder: &Encoder,
    bank: Option<&TextProtoBank>,
    classes: &[ClassDef],
    episode: &Episode,
) -> Result<Vec<CuePriors>> {
    let mut images: Vec<&Image> = vec![&episode.query];
    images.extend(episode.supports.iter().map(|(im, _)| im));
    let mut pyrs = encoder.encode_batch(&images)?;
    let supports_pyr = pyrs.split_off(1);
    let ctx = QueryContext::new(pyrs.pop().expect("query pyramid"));
    let supports: Vec<(&FeaturePyramid, &Annotation)> =
        supports_pyr.iter().zip(episode.supports.iter().map(|(_, a)| a)).collect();
    let text = episode.text.map(|c| &classes[c]);
    priors_from_pyramids(&ctx, &supports, text, bank, encoder.dims(), encoder.input_size())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(d: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap { d, h, w, data }
    }

    #[test]
    fn analytic_cosine() {
        // one cell with f = (1, 1)
        let f = fm(2, 1, 1, vec![1.0, 1.0]);
        let p = cosine_prior(&f, &[1.0, 0.0]).unwrap();
        assert!((p.data[0] - core::f32::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert_eq!(cosine_prior(&f, &[0.0, 0.0]), Err(Error::ZeroPrototype));
    }

    #[test]
    fn orthogonal_cells_give_identity_affinity() {
        let f = fm(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(self_affinity(&f), vec![1.0, 0.0, 0.0, 1.0]);
        let prior = Map { h: 2, w: 1, data: vec![0.3, -0.4] };
        assert_eq!(affinity_enhance(&self_affinity(&f), &prior), prior);
    }

    #[test]
    fn identical_features_average_the_prior() {
        let f = fm(2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let a = self_affinity(&f);
        assert!(a.iter().all(|v| (*v - 1.0).abs() < 1e-6));
        let prior = Map { h: 2, w: 2, data: vec![0.1, 0.2, 0.3, 0.6] };
        let out = affinity_enhance(&a, &prior);
        assert!(out.data.iter().all(|v| (*v - 0.3).abs() < 1e-6));
    }
}
