//! Segmentation metrics, batched episode prediction, the evaluation loop
//! with its reference baselines, and the stitching and sweep tables.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, NoiseSchedule, SampleOutput, SamplerConfig};
use crate::encoders::{Encoder, EncoderId, TextProtoBank};
use crate::grid::{BinaryGrid, Map};
use crate::nn::{Graph, ParamSet};
use crate::rng::{derive_seed, tag};
use crate::synthshapes::{sample_episode, split_classes, AnnotationKind, Dataset, EpisodeRequest, Split};
use crate::tensor::{Shape, Tensor};
use crate::uqdd::{prepare_episode, ConditionComposite, EpisodeInputs, UNet};
use crate::{Error, Result};

/// Probability threshold turning the ensemble map into a mask.
pub const PRED_THRESHOLD: f32 = 0.5;
pub const DEFAULT_EPISODES: usize = 600;

fn check_same(a: &BinaryGrid, b: &BinaryGrid) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch(alloc::format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

/// Intersection and union pixel counts of one prediction.
pub fn overlap(pred: &BinaryGrid, gt: &BinaryGrid) -> Result<(u64, u64)> {
    check_same(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (*p != 0, *g != 0);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

/// `|pred & gt| / |pred | gt|`; 1 when both are empty.
pub fn iou(pred: &BinaryGrid, gt: &BinaryGrid) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Unweighted mean of per-class IoUs.
pub fn miou(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::EmptyInput("no classes".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Mean of foreground and background IoU, each pooled over all pairs.
pub fn fb_iou(preds: &[BinaryGrid], gts: &[BinaryGrid]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::EmptyInput(alloc::format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let mut acc = FbAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.value())
}

/// Running pooled foreground and background counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FbAccumulator {
    fg: (u64, u64),
    bg: (u64, u64),
}

impl FbAccumulator {
    pub fn add(&mut self, pred: &BinaryGrid, gt: &BinaryGrid) -> Result<()> {
        check_same(pred, gt)?;
        for (p, g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (*p != 0, *g != 0);
            self.fg.0 += (p && g) as u64;
            self.fg.1 += (p || g) as u64;
            self.bg.0 += (!p && !g) as u64;
            self.bg.1 += (!p || !g) as u64;
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        let r = |(i, u): (u64, u64)| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        0.5 * (r(self.fg) + r(self.bg))
    }
}

/// Per-class pooled IoU: intersections and unions summed over a class's
/// episodes before dividing.
#[derive(Clone, Debug, Default)]
pub struct ClassAccumulator {
    counts: BTreeMap<usize, (u64, u64)>,
    fb: FbAccumulator,
}

impl ClassAccumulator {
    pub fn add(&mut self, class_id: usize, pred: &BinaryGrid, gt: &BinaryGrid) -> Result<()> {
        let (i, u) = overlap(pred, gt)?;
        let e = self.counts.entry(class_id).or_default();
        e.0 += i;
        e.1 += u;
        self.fb.add(pred, gt)
    }

    pub fn per_class(&self) -> Vec<(usize, f64)> {
        self.counts
            .iter()
            .map(|(c, (i, u))| (*c, if *u == 0 { 1.0 } else { *i as f64 / *u as f64 }))
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let v: Vec<f64> = self.per_class().into_iter().map(|(_, x)| x).collect();
        miou(&v)
    }

    pub fn fb_iou(&self) -> f64 {
        self.fb.value()
    }
}

/// Otsu threshold of a sample of values: the cut over a 256-bin histogram
/// of `[min, max]` that maximizes the between-class variance. Returns the
/// lower edge of the first bin of the upper class.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    const BINS: usize = 256;
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || hi <= lo {
        return lo;
    }
    let width = (hi - lo) as f64 / BINS as f64;
    let mut hist = [0u64; BINS];
    for v in values {
        let b = (((*v - lo) as f64 / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_k) = (-1.0f64, 1usize);
    for k in 1..BINS {
        w0 += hist[k - 1] as f64;
        sum0 += (k - 1) as f64 * hist[k - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    (lo as f64 + best_k as f64 * width) as f32
}

/// Ensemble DDIM prediction with a trained decoder. Counts every call to
/// the sampler and every episode passed through it.
pub struct Predictor<'a> {
    pub model: &'a UNet,
    pub params: &'a ParamSet<f32>,
    pub schedule: &'a NoiseSchedule,
    sample_calls: Cell<u64>,
    episodes_sampled: Cell<u64>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a UNet, params: &'a ParamSet<f32>, schedule: &'a NoiseSchedule) -> Self {
        Self { model, params, schedule, sample_calls: Cell::new(0), episodes_sampled: Cell::new(0) }
    }

    pub fn sample_calls(&self) -> u64 {
        self.sample_calls.get()
    }

    pub fn episodes_sampled(&self) -> u64 {
        self.episodes_sampled.get()
    }

    /// One sampler pass over a batch of episodes; `seeds[i]` drives the
    /// ensemble noise of `inputs[i]`.
    pub fn predict(&self, inputs: &[&EpisodeInputs], seeds: &[u64], cfg: &SamplerConfig) -> Result<Vec<SampleOutput>> {
        if inputs.len() != seeds.len() || inputs.is_empty() {
            return Err(Error::EmptyInput(alloc::format!("{} episodes, {} seeds", inputs.len(), seeds.len())));
        }
        let size = self.model.cfg.image_size;
        let sizes = self.model.cfg.level_sizes();
        for e in inputs {
            if e.query.shape != Shape::new(1, 3, size, size) || e.cond.levels.len() != sizes.len() {
                return Err(Error::ShapeMismatch("episode inputs do not match the model".into()));
            }
        }
        let m = cfg.n_ensemble.max(1);
        let rows: Vec<usize> = (0..inputs.len() * m).map(|i| i / m).collect();
        let conds: Vec<&ConditionComposite> = inputs.iter().map(|e| &e.cond).collect();
        let cond_b = ConditionComposite::gather(&conds, &rows);
        let queries: Vec<&Tensor<f32>> = rows.iter().map(|r| &inputs[*r].query).collect();
        let query_b = Tensor::stack(&queries);
        let denoise = |x: &Tensor<f32>, t: &[usize], _rows: &[usize]| -> Tensor<f32> {
            let mut g = Graph::inference(self.params);
            let out = self
                .model
                .forward_tensors(&mut g, x.clone(), t, cond_b.clone(), query_b.clone())
                .expect("shapes validated before sampling");
            g.value(out.v).clone()
        };
        self.sample_calls.set(self.sample_calls.get() + 1);
        self.episodes_sampled.set(self.episodes_sampled.get() + inputs.len() as u64);
        sample(&denoise, self.schedule, (size, size), seeds, cfg)
    }
}

/// Which classes of a fold an evaluation draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPool {
    Novel,
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub fold: usize,
    pub pool: ClassPool,
    pub allow_base: bool,
    pub split: Split,
    pub shots: usize,
    pub annotation: AnnotationKind,
    /// Attach the class text cue to visual episodes.
    pub with_text: bool,
    pub n_episodes: usize,
    pub seed: u64,
    pub n_steps: usize,
    pub n_ensemble: usize,
    /// Episodes per sampler call.
    pub batch_episodes: usize,
}

impl EvalSpec {
    pub fn novel(fold: usize, shots: usize, annotation: AnnotationKind, n_episodes: usize, seed: u64) -> Self {
        Self {
            fold,
            pool: ClassPool::Novel,
            allow_base: false,
            split: Split::Test,
            shots,
            annotation,
            with_text: true,
            n_episodes,
            seed,
            n_steps: SamplerConfig::default().n_steps,
            n_ensemble: SamplerConfig::default().n_ensemble,
            batch_episodes: 4,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { n_steps: self.n_steps, n_ensemble: self.n_ensemble, eta: 0.0 }
    }

    pub fn episode_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, tag("eval_episode"), i as u64)
    }

    pub fn sample_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, tag("eval_sample"), i as u64)
    }

    pub fn class_ids(&self) -> Result<Vec<usize>> {
        let (base, novel) = split_classes(self.fold)?;
        match self.pool {
            ClassPool::Novel => Ok(novel),
            ClassPool::Base if self.allow_base => Ok(base),
            ClassPool::Base => Err(Error::BaseClassLeak),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub class_id: usize,
    pub iou: f64,
    pub otsu_iou: f64,
    pub ensemble_variance: f64,
    /// Sampler passes this episode went through.
    pub sample_passes: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub annotation: AnnotationKind,
    pub shots: usize,
    pub episodes: usize,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    /// Empty prediction on every episode.
    pub background_miou: f64,
    pub background_fb_iou: f64,
    /// Fused mean prior thresholded at its own Otsu point.
    pub otsu_miou: f64,
    pub otsu_fb_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: EvalSpec,
    pub encoder: EncoderId,
    pub checkpoint_digest: String,
    pub per_class: Vec<(usize, f64)>,
    pub miou: f64,
    pub fb_iou: f64,
    pub breakdown: Vec<BreakdownRow>,
    pub baselines: BaselineScores,
    pub episodes: Vec<EpisodeRecord>,
    pub sample_calls: u64,
}

/// Everything an evaluation reads besides its `EvalSpec`.
pub struct EvalContext<'a> {
    pub predictor: &'a Predictor<'a>,
    pub encoder: &'a Encoder,
    pub bank: Option<&'a TextProtoBank>,
    pub data: &'a Dataset,
    pub checkpoint_digest: String,
}

/// Episodes of a spec, prepared for the decoder.
pub fn prepare_eval_episodes(ctx: &EvalContext<'_>, spec: &EvalSpec) -> Result<Vec<(EpisodeInputs, BinaryGrid)>> {
    let pool = spec.class_ids()?;
    let cfg = &ctx.predictor.model.cfg;
    let sizes = cfg.level_sizes();
    (0..spec.n_episodes)
        .map(|i| {
            let seed = spec.episode_seed(i);
            let ep = sample_episode(
                ctx.data,
                &EpisodeRequest {
                    split: spec.split,
                    pool: &pool,
                    shots: spec.shots,
                    kind: spec.annotation,
                    with_text: spec.with_text,
                    seed,
                },
            )?;
            let inputs = prepare_episode(ctx.encoder, ctx.bank, &ctx.data.classes, &ep, cfg.k_extra, &sizes, seed)?;
            Ok((inputs, ep.query_gt))
        })
        .collect()
}

/// Runs the decoder over `spec.n_episodes` episodes, one sampler pass per
/// episode, and scores it against both reference baselines on the same
/// episodes.
pub fn evaluate(ctx: &EvalContext<'_>, spec: &EvalSpec) -> Result<EvalReport> {
    if spec.n_episodes == 0 {
        return Err(Error::EmptyInput("zero evaluation episodes".into()));
    }
    let episodes = prepare_eval_episodes(ctx, spec)?;
    let size = ctx.predictor.model.cfg.image_size;
    let mut model_acc = ClassAccumulator::default();
    let mut otsu_acc = ClassAccumulator::default();
    let mut bg_acc = ClassAccumulator::default();
    let mut records = Vec::with_capacity(episodes.len());
    let mut passes = alloc::vec![0u32; episodes.len()];
    let calls_before = ctx.predictor.sample_calls();
    let chunk = spec.batch_episodes.max(1);
    let empty = BinaryGrid::new(size, size);
    for start in (0..episodes.len()).step_by(chunk) {
        let end = (start + chunk).min(episodes.len());
        let inputs: Vec<&EpisodeInputs> = episodes[start..end].iter().map(|(e, _)| e).collect();
        let seeds: Vec<u64> = (start..end).map(|i| spec.sample_seed(i)).collect();
        let outs = ctx.predictor.predict(&inputs, &seeds, &spec.sampler())?;
        for (k, out) in outs.iter().enumerate() {
            let i = start + k;
            passes[i] += 1;
            let (inp, gt) = &episodes[i];
            let pred = Map { h: size, w: size, data: out.prob.clone() }.threshold(PRED_THRESHOLD);
            let otsu = inp.prior_mean.threshold(otsu_threshold(&inp.prior_mean.data));
            model_acc.add(inp.class_id, &pred, gt)?;
            otsu_acc.add(inp.class_id, &otsu, gt)?;
            bg_acc.add(inp.class_id, &empty, gt)?;
            records.push(EpisodeRecord {
                index: i,
                class_id: inp.class_id,
                iou: iou(&pred, gt)?,
                otsu_iou: iou(&otsu, gt)?,
                ensemble_variance: out.ensemble_variance,
                sample_passes: 0,
            });
        }
    }
    for r in &mut records {
        r.sample_passes = passes[r.index];
    }
    let miou = model_acc.miou()?;
    Ok(EvalReport {
        spec: spec.clone(),
        encoder: ctx.encoder.id().clone(),
        checkpoint_digest: ctx.checkpoint_digest.clone(),
        per_class: model_acc.per_class(),
        miou,
        fb_iou: model_acc.fb_iou(),
        breakdown: alloc::vec![BreakdownRow {
            annotation: spec.annotation,
            shots: spec.shots,
            episodes: records.len(),
            miou,
        }],
        baselines: BaselineScores {
            background_miou: bg_acc.miou()?,
            background_fb_iou: bg_acc.fb_iou(),
            otsu_miou: otsu_acc.miou()?,
            otsu_fb_iou: otsu_acc.fb_iou(),
        },
        episodes: records,
        sample_calls: ctx.predictor.sample_calls() - calls_before,
    })
}

/// One row of the encoder-upgrade table: the decoder evaluated with the
/// encoder it was trained with and with a replacement it never saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchRow {
    pub upgrade: String,
    pub before: String,
    pub after: String,
    pub before_miou: f64,
    pub after_miou: f64,
    pub delta: f64,
}

impl StitchRow {
    pub fn new(upgrade: &str, before: &EvalReport, after: &EvalReport) -> Self {
        Self {
            upgrade: upgrade.into(),
            before: before.encoder.name.clone(),
            after: after.encoder.name.clone(),
            before_miou: before.miou,
            after_miou: after.miou,
            delta: after.miou - before.miou,
        }
    }
}

/// Plain-text rendering of the upgrade table.
pub fn format_stitch_table(rows: &[StitchRow]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "{:<22} {:<14} {:<14} {:>8} {:>8} {:>8}", "upgrade", "before", "after", "before", "after", "delta");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<22} {:<14} {:<14} {:>8.2} {:>8.2} {:>+8.2}",
            r.upgrade,
            r.before,
            r.after,
            100.0 * r.before_miou,
            100.0 * r.after_miou,
            100.0 * r.delta
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DdimSteps,
    Shots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub miou: f64,
    pub fb_iou: f64,
    pub sample_calls: u64,
    pub episodes: usize,
}

/// Re-evaluates `base` once per value of `axis`.
pub fn sweep(ctx: &EvalContext<'_>, base: &EvalSpec, axis: SweepAxis, values: &[usize]) -> Result<Vec<(SweepPoint, EvalReport)>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("no sweep values".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut spec = base.clone();
            match axis {
                SweepAxis::DdimSteps => spec.n_steps = v,
                SweepAxis::Shots => {
                    spec.shots = v;
                    if v == 0 {
                        spec.annotation = AnnotationKind::Text;
                    }
                }
            }
            let report = evaluate(ctx, &spec)?;
            let point = SweepPoint {
                value: v,
                miou: report.miou,
                fb_iou: report.fb_iou,
                sample_calls: report.sample_calls,
                episodes: report.episodes.len(),
            };
            Ok((point, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, bits: &[u8]) -> BinaryGrid {
        BinaryGrid { h: bits.len() / w, w, data: bits.to_vec() }
    }

    #[test]
    fn half_overlap_is_one_third() {
        let a = grid(2, &[1, 1, 0, 0]);
        let b = grid(2, &[0, 1, 1, 0]);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let e = grid(2, &[0, 0, 0, 0]);
        let a = grid(2, &[1, 0, 0, 0]);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&a, &e).unwrap(), 0.0);
        assert!(miou(&[]).is_err());
        assert!(iou(&a, &grid(1, &[1, 0, 0, 0])).is_err());
    }

    #[test]
    fn otsu_separates_two_clusters() {
        let v: Vec<f32> = (0..100).map(|i| if i < 60 { 0.1 + i as f32 * 1e-3 } else { 0.8 + i as f32 * 1e-3 }).collect();
        let t = otsu_threshold(&v);
        assert!(v.iter().all(|x| (*x >= t) == (*x >= 0.8)), "{t}");
    }
}
