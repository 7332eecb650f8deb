//! Episodic training of the decoder: episode sampling, the three-term loss
//! with hand-seeded output gradients, clipped Adam steps, validation on
//! held-out base-class episodes and early stopping.
//!
//! Every random draw is indexed by the global step, so a run resumed from
//! a saved [`TrainState`] continues exactly where it left off.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, v_target, NoiseSchedule, ScheduleKind, MIN_SNR_GAMMA};
use crate::encoders::{Encoder, TextProtoBank};
use crate::evalkit::{evaluate, ClassPool, EvalContext, EvalSpec, Predictor};
use crate::nn::{clip_grad_norm, hex, Adam, AdamState, Graph, ParamSet};
use crate::rng::{derive_seed, tag, Rng};
use crate::synthshapes::{sample_episode, split_classes, AnnotationKind, Dataset, EpisodeRequest, Split};
use crate::tensor::{Real, Shape, Tensor};
use crate::uqdd::{prepare_episode, ConditionComposite, EpisodeInputs, ModelConfig, UNet};
use crate::{Error, Result};

/// Sampling weights over the five annotation kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMix {
    pub mask: f64,
    pub bbox: f64,
    pub scribble: f64,
    pub text: f64,
    pub image_only: f64,
}

impl Default for AnnotationMix {
    fn default() -> Self {
        Self { mask: 0.4, bbox: 0.2, scribble: 0.2, text: 0.1, image_only: 0.1 }
    }
}

impl AnnotationMix {
    pub fn weights(&self) -> [f64; 5] {
        [self.mask, self.bbox, self.scribble, self.text, self.image_only]
    }

    pub fn only(kind: AnnotationKind) -> Self {
        let mut w = [0.0; 5];
        w[AnnotationKind::ALL.iter().position(|k| *k == kind).unwrap_or(0)] = 1.0;
        Self { mask: w[0], bbox: w[1], scribble: w[2], text: w[3], image_only: w[4] }
    }

    pub fn draw(&self, rng: &mut Rng) -> AnnotationKind {
        AnnotationKind::ALL[rng.weighted(&self.weights())]
    }
}

/// Support-set size `shots[i]` drawn with probability `probs[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotDistribution {
    pub shots: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Default for ShotDistribution {
    fn default() -> Self {
        Self { shots: alloc::vec![1, 5], probs: alloc::vec![0.7, 0.3] }
    }
}

impl ShotDistribution {
    pub fn draw(&self, rng: &mut Rng) -> usize {
        self.shots[rng.weighted(&self.probs)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub fold: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_em: f64,
    pub lambda_iou: f64,
    pub grad_clip: f64,
    pub annotation_mix: AnnotationMix,
    pub shot_distribution: ShotDistribution,
    /// Chance that a visual episode also carries its class text cue.
    pub text_prob: f64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    /// Validate every this many epochs.
    pub val_every: usize,
    pub val_episodes: usize,
    pub val_ddim_steps: usize,
    pub val_ensemble: usize,
    /// Validations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fold: 0,
            epochs: 100,
            episodes_per_epoch: 200,
            batch_size: 1,
            lr: 1e-4,
            lambda_em: 1.0,
            lambda_iou: 0.1,
            grad_clip: 1.0,
            annotation_mix: AnnotationMix::default(),
            shot_distribution: ShotDistribution::default(),
            text_prob: 0.5,
            diffusion_steps: 250,
            schedule: ScheduleKind::Cosine,
            val_every: 5,
            val_episodes: 60,
            val_ddim_steps: 10,
            val_ensemble: 2,
            patience: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.fold >= crate::synthshapes::NUM_FOLDS {
            return Err(Error::InvalidFold(self.fold));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, episodes_per_epoch and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(alloc::format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lambda_em >= 0.0 && self.lambda_iou >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        let w = self.annotation_mix.weights();
        if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(alloc::format!("annotation_mix {w:?} must be non-negative and sum to 1"));
        }
        let d = &self.shot_distribution;
        if d.shots.is_empty()
            || d.shots.len() != d.probs.len()
            || d.shots.contains(&0)
            || d.probs.iter().any(|p| !(*p >= 0.0))
            || (d.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("shot_distribution needs positive shot counts with probabilities summing to 1".into());
        }
        if !(0.0..=1.0).contains(&self.text_prob) {
            return bad("text_prob must lie in [0, 1]".into());
        }
        if self.diffusion_steps < 2 {
            return Err(Error::InvalidT(self.diffusion_steps));
        }
        if self.val_every == 0 || self.val_episodes == 0 || self.val_ddim_steps == 0 || self.val_ensemble == 0 {
            return bad("validation settings must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.episodes_per_epoch.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs as u64
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.diffusion_steps)
    }
}

/// Regression targets of one noised sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub x_t: Vec<f32>,
    pub v: Vec<f32>,
    /// `x0 - x_t`, formed in f64 so that `x_t + e_gt == x0` holds exactly.
    pub e_gt: Vec<f64>,
    /// IoU of `x_t > 0` against `x0 > 0`.
    pub iou_gt: f32,
}

pub fn make_targets(x0: &[f32], t: usize, eps: &[f32], s: &NoiseSchedule) -> Targets {
    let x_t = q_sample(x0, t, eps, s);
    let v = v_target(x0, eps, t, s);
    let e_gt = x0.iter().zip(&x_t).map(|(a, b)| *a as f64 - *b as f64).collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in x0.iter().zip(&x_t) {
        let (p, g) = (*b > 0.0, *a > 0.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    let iou_gt = if union == 0 { 1.0 } else { inter as f32 / union as f32 };
    Targets { x_t, v, e_gt, iou_gt }
}

/// One training example: prepared episode, timestep and noise.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub inputs: EpisodeInputs,
    pub t: usize,
    pub targets: Targets,
    pub kind: AnnotationKind,
    pub shots: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub diff: f64,
    pub em: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.diff.is_finite() && self.em.is_finite() && self.iou.is_finite() && self.total.is_finite()
    }
}

/// Loss weights plus the schedule the diffusion term is weighted by.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_em: f64,
    pub lambda_iou: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batch losses from decoder outputs (`[b, p]` row-major `v_hat`, `err`,
/// `[b]` `iou`) and their gradients with respect to those outputs.
///
/// `L_diff` is the batch mean of the min-SNR weighted per-sample MSE,
/// `L_em` the mean absolute error-map residual over all pixels and `L_iou`
/// the mean absolute IoU residual.
pub fn loss_from_outputs<T: Real>(
    v_hat: &[T],
    err: &[T],
    iou: &[T],
    samples: &[&Targets],
    ts: &[usize],
    schedule: &NoiseSchedule,
    w: LossWeights,
) -> (LossParts, [Vec<T>; 3]) {
    let b = samples.len();
    let p = samples[0].v.len();
    let mut gv = alloc::vec![T::zero(); b * p];
    let mut ge = alloc::vec![T::zero(); b * p];
    let mut gi = alloc::vec![T::zero(); b];
    let (mut diff, mut em, mut il) = (0.0, 0.0, 0.0);
    for (i, tg) in samples.iter().enumerate() {
        let wt = schedule.min_snr_weight(ts[i], MIN_SNR_GAMMA);
        let rows = i * p..(i + 1) * p;
        let mut sq = 0.0;
        for ((k, vh), v) in rows.clone().zip(&v_hat[rows.clone()]).zip(&tg.v) {
            let d = vh.as_f64() - *v as f64;
            sq += d * d;
            gv[k] = T::from_f64(2.0 * wt * d / (b * p) as f64);
        }
        diff += wt * sq / p as f64;
        for ((k, e), g) in rows.clone().zip(&err[rows]).zip(&tg.e_gt) {
            let d = e.as_f64() - *g;
            em += d.abs();
            ge[k] = T::from_f64(w.lambda_em * sign(d) / (b * p) as f64);
        }
        let d = iou[i].as_f64() - tg.iou_gt as f64;
        il += d.abs();
        gi[i] = T::from_f64(w.lambda_iou * sign(d) / b as f64);
    }
    let diff = diff / b as f64;
    let em = em / (b * p) as f64;
    let iou_l = il / b as f64;
    let total = diff + w.lambda_em * em + w.lambda_iou * iou_l;
    (LossParts { diff, em, iou: iou_l, total }, [gv, ge, gi])
}

/// Forward pass over a batch, the losses, and (when `grads` is set) the
/// parameter gradients accumulated into it.
pub fn batch_loss<T: Real>(
    model: &UNet,
    params: &ParamSet<T>,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    w: LossWeights,
    grads: Option<&mut [Vec<T>]>,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty training batch".into()));
    }
    let size = model.cfg.image_size;
    let b = batch.len();
    let rows: Vec<usize> = (0..b).collect();
    let conds: Vec<&ConditionComposite> = batch.iter().map(|s| &s.inputs.cond).collect();
    let cond: Vec<Tensor<T>> = ConditionComposite::gather(&conds, &rows).iter().map(|c| c.cast()).collect();
    let queries: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.inputs.query).collect();
    let query = Tensor::stack(&queries).cast();
    let x_t = Tensor::from_vec(
        Shape::new(b, 1, size, size),
        batch.iter().flat_map(|s| s.targets.x_t.iter().map(|v| T::from_f64(*v as f64))).collect(),
    );
    let ts: Vec<usize> = batch.iter().map(|s| s.t).collect();
    let mut g = if grads.is_some() { Graph::new(params) } else { Graph::inference(params) };
    let out = model.forward_tensors(&mut g, x_t, &ts, cond, query)?;
    let targets: Vec<&Targets> = batch.iter().map(|s| &s.targets).collect();
    let (parts, [gv, ge, gi]) = loss_from_outputs(
        &g.value(out.v).data,
        &g.value(out.err).data,
        &g.value(out.iou).data,
        &targets,
        &ts,
        schedule,
        w,
    );
    if let Some(acc) = grads {
        let back = g.backward(&[(out.v, &gv), (out.err, &ge), (out.iou, &gi)]);
        back.accumulate_params(acc);
    }
    Ok(parts)
}

/// Draws and prepares training sample `index` of a run.
pub fn draw_sample(
    cfg: &TrainConfig,
    model: &ModelConfig,
    encoder: &Encoder,
    bank: Option<&TextProtoBank>,
    data: &Dataset,
    base: &[usize],
    schedule: &NoiseSchedule,
    index: u64,
) -> Result<TrainSample> {
    let seed = derive_seed(cfg.seed, tag("train_sample"), index);
    let mut rng = Rng::new(seed);
    let kind = cfg.annotation_mix.draw(&mut rng);
    let shots = cfg.shot_distribution.draw(&mut rng);
    let with_text = rng.uniform() < cfg.text_prob;
    let t = rng.range(1, schedule.steps + 1);
    let ep_seed = rng.next_u64();
    let ep = sample_episode(
        data,
        &EpisodeRequest { split: Split::Train, pool: base, shots, kind, with_text, seed: ep_seed },
    )?;
    let inputs = prepare_episode(encoder, bank, &data.classes, &ep, model.k_extra, &model.level_sizes(), ep_seed)?;
    let eps = rng.normal_vec::<f32>(inputs.x0.len());
    let targets = make_targets(&inputs.x0, t, &eps, schedule);
    Ok(TrainSample { inputs, t, targets, kind, shots: ep.shots() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossParts,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossParts,
    pub val_miou: Option<f64>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub adam: AdamState,
    /// Optimizer steps taken.
    pub step: u64,
    pub history: Vec<EpochRecord>,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamSet<f32>>,
    pub stale_validations: usize,
    pub stopped_early: bool,
    /// Losses of the epoch in progress.
    pub epoch_losses: Vec<LossParts>,
}

/// Progress notifications; the driver decides what to log or persist.
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch { record: &'a EpochRecord, improved: bool, state: &'a TrainState },
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: UNet,
    pub schedule: NoiseSchedule,
    pub state: TrainState,
    encoder: &'a Encoder,
    bank: Option<&'a TextProtoBank>,
    data: &'a Dataset,
    base: Vec<usize>,
    adam: Adam,
}

impl<'a> Trainer<'a> {
    /// Fresh run with parameters initialised from `cfg.seed`.
    pub fn new(
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        encoder: &'a Encoder,
        bank: Option<&'a TextProtoBank>,
        data: &'a Dataset,
    ) -> Result<Self> {
        let (model, params) = UNet::new::<f32>(&model_cfg, derive_seed(cfg.seed, tag("decoder"), 0))?;
        let adam = Adam::new(&params, cfg.lr);
        let state = TrainState {
            params,
            adam: adam.state.clone(),
            step: 0,
            history: Vec::new(),
            best_miou: None,
            best_epoch: None,
            best_params: None,
            stale_validations: 0,
            stopped_early: false,
            epoch_losses: Vec::new(),
        };
        Self::resume(cfg, model, state, encoder, bank, data)
    }

    /// Continues from a saved state.
    pub fn resume(
        cfg: TrainConfig,
        model: UNet,
        state: TrainState,
        encoder: &'a Encoder,
        bank: Option<&'a TextProtoBank>,
        data: &'a Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        model.cfg.validate()?;
        if model.cfg.diffusion_steps != cfg.diffusion_steps {
            return Err(Error::InvalidConfig(alloc::format!(
                "model embeds T={} but training uses T={}",
                model.cfg.diffusion_steps,
                cfg.diffusion_steps
            )));
        }
        if model.cfg.image_size != data.size {
            return Err(Error::InvalidConfig(alloc::format!(
                "model expects {} px images, dataset has {}",
                model.cfg.image_size,
                data.size
            )));
        }
        let (base, _) = split_classes(cfg.fold)?;
        let schedule = cfg.schedule()?;
        let mut adam = Adam::new(&state.params, cfg.lr);
        if state.adam.m.len() == state.params.len() {
            adam.state = state.adam.clone();
        }
        Ok(Self { cfg, model, schedule, state, encoder, bank, data, base, adam })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_em: self.cfg.lambda_em, lambda_iou: self.cfg.lambda_iou }
    }

    pub fn epoch(&self) -> usize {
        (self.state.step / self.cfg.steps_per_epoch()) as usize
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped_early || self.state.step >= self.cfg.total_steps()
    }

    /// The batch used at optimizer step `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<TrainSample>> {
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|j| {
                draw_sample(
                    &self.cfg,
                    &self.model.cfg,
                    self.encoder,
                    self.bank,
                    self.data,
                    &self.base,
                    &self.schedule,
                    step * b + j,
                )
            })
            .collect()
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let batch = self.batch(step)?;
        let mut grads = self.state.params.zero_grads();
        let loss = batch_loss(&self.model, &self.state.params, &batch, &self.schedule, self.weights(), Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: alloc::format!(
                    "diff={} em={} iou={} timesteps={:?}",
                    loss.diff,
                    loss.em,
                    loss.iou,
                    batch.iter().map(|s| s.t).collect::<Vec<_>>()
                ),
            });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: alloc::format!("gradient norm {grad_norm}") });
        }
        self.adam.step(&mut self.state.params, &grads);
        self.state.step += 1;
        self.state.adam.clone_from(&self.adam.state);
        self.state.epoch_losses.push(loss);
        Ok(StepRecord { step, loss, grad_norm })
    }

    /// Mask 1-shot mIoU on held-out base-class episodes.
    pub fn validate(&self) -> Result<f64> {
        let schedule = &self.schedule;
        let predictor = Predictor::new(&self.model, &self.state.params, schedule);
        let ctx = EvalContext {
            predictor: &predictor,
            encoder: self.encoder,
            bank: self.bank,
            data: self.data,
            checkpoint_digest: hex(&self.state.params.digest()),
        };
        let mut spec = EvalSpec::novel(
            self.cfg.fold,
            1,
            AnnotationKind::Mask,
            self.cfg.val_episodes,
            derive_seed(self.cfg.seed, tag("validation"), 0),
        );
        spec.pool = ClassPool::Base;
        spec.allow_base = true;
        spec.n_steps = self.cfg.val_ddim_steps;
        spec.n_ensemble = self.cfg.val_ensemble;
        Ok(evaluate(&ctx, &spec)?.miou)
    }

    /// Closes the current epoch: mean losses, validation when due, best
    /// weights and early stopping.
    pub fn end_epoch(&mut self, on_event: &mut dyn FnMut(TrainEvent<'_>)) -> Result<()> {
        let epoch = self.epoch();
        let n = self.state.epoch_losses.len().max(1) as f64;
        let mut mean = LossParts::default();
        for l in &self.state.epoch_losses {
            mean.diff += l.diff / n;
            mean.em += l.em / n;
            mean.iou += l.iou / n;
            mean.total += l.total / n;
        }
        self.state.epoch_losses.clear();
        let last = self.state.step >= self.cfg.total_steps();
        let val_miou = if epoch % self.cfg.val_every == 0 || last { Some(self.validate()?) } else { None };
        let mut improved = false;
        if let Some(m) = val_miou {
            if self.state.best_miou.is_none_or(|b| m > b) {
                self.state.best_miou = Some(m);
                self.state.best_epoch = Some(epoch);
                self.state.best_params = Some(self.state.params.clone());
                self.state.stale_validations = 0;
                improved = true;
            } else {
                self.state.stale_validations += 1;
                if self.cfg.patience > 0 && self.state.stale_validations >= self.cfg.patience {
                    self.state.stopped_early = true;
                }
            }
        }
        let record = EpochRecord { epoch, mean_loss: mean, val_miou };
        self.state.history.push(record.clone());
        on_event(TrainEvent::Epoch { record: &record, improved, state: &self.state });
        Ok(())
    }

    /// Runs until the configured epochs are done or validation stalls.
    pub fn run(&mut self, on_event: &mut dyn FnMut(TrainEvent<'_>)) -> Result<()> {
        let per_epoch = self.cfg.steps_per_epoch();
        while !self.is_finished() {
            let rec = self.step()?;
            on_event(TrainEvent::Step(&rec));
            if self.state.step % per_epoch == 0 {
                self.end_epoch(on_event)?;
            }
        }
        Ok(())
    }

    /// Parameters to ship: the best validated ones, else the latest.
    pub fn best_params(&self) -> &ParamSet<f32> {
        self.state.best_params.as_ref().unwrap_or(&self.state.params)
    }
}
