//! End-to-end steps shared by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use diffup_core::diffusion::{ddim_step, ddim_timesteps, recover_x0, NoiseSchedule};
use diffup_core::encoders::{fit_text_bank, Encoder, TextProtoBank};
use diffup_core::evalkit::{evaluate, sweep, EvalContext, EvalReport, EvalSpec, Predictor, StitchRow, SweepAxis, SweepPoint};
use diffup_core::nn::{hex, Graph, ParamSet};
use diffup_core::rng::Rng;
use diffup_core::synthshapes::{split_classes, Dataset};
use diffup_core::trainer::{StepRecord, TrainEvent, Trainer};
use diffup_core::uqdd::{EpisodeInputs, UNet};
use diffup_core::{Shape, Tensor};

use crate::checkpoint::{save_decoder, DecoderCheckpoint};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::registry::Registry;
use crate::report::LossLog;

/// Text bank for `encoder` on the base classes of `fold`, cached as JSON
/// under `cache_dir` when one is given.
pub fn text_bank(
    encoder: &Encoder,
    data: &Dataset,
    fold: usize,
    per_class: usize,
    cache_dir: Option<&Path>,
) -> Result<(TextProtoBank, Option<PathBuf>)> {
    let file = format!("{}-{}-fold{fold}.json", encoder.id().name, &encoder.id().weights_hash[..12]);
    let path = cache_dir.map(|d| d.join(file));
    if let Some(p) = path.as_ref().filter(|p| p.is_file()) {
        let text = std::fs::read_to_string(p).at(p)?;
        let bank: TextProtoBank = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        return Ok((bank, path));
    }
    let (base, _) = split_classes(fold)?;
    let bank = fit_text_bank(encoder, data, &base, per_class)?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        crate::report::write_json(p, &bank)?;
    }
    Ok((bank, path))
}

/// An encoder plus its text bank.
pub struct EncoderSetup {
    pub encoder: Encoder,
    pub bank: TextProtoBank,
    pub bank_path: Option<PathBuf>,
}

pub fn setup_encoder(cfg: &RunConfig, registry: &Registry, name: &str, data: &Dataset, cache: Option<&Path>) -> Result<EncoderSetup> {
    let encoder = registry.build(name, data.size, &data.classes)?;
    let (bank, bank_path) = text_bank(&encoder, data, cfg.training.fold, cfg.encoder.text_bank_images, cache)?;
    Ok(EncoderSetup { encoder, bank, bank_path })
}

pub struct TrainOutcome {
    /// Final state including optimizer buffers.
    pub last: DecoderCheckpoint,
    /// Inference checkpoint with the best validated weights.
    pub best: DecoderCheckpoint,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    pub elapsed: Duration,
    pub losses: Vec<StepRecord>,
}

/// Where training writes its files.
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

/// Trains (or resumes) a decoder. With `out`, writes the loss log, the
/// latest state after every epoch and the best weights on improvement.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    setup: &EncoderSetup,
    resume: Option<&DecoderCheckpoint>,
    out: Option<&TrainOutputs>,
    max_steps: Option<u64>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let before = setup.encoder.weights_digest();
    let bank_ref = setup.bank_path.as_ref().map(|p| p.display().to_string());
    let mut trainer = match resume {
        Some(ck) => {
            let (model, _) = ck.model()?;
            Trainer::resume(ck.meta.train.clone(), model, ck.train_state()?, &setup.encoder, Some(&setup.bank), data)?
        }
        None => Trainer::new(cfg.training.clone(), cfg.model.clone(), &setup.encoder, Some(&setup.bank), data)?,
    };
    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).at(&o.dir)?;
            Some(LossLog::create(&o.loss_log())?)
        }
        None => None,
    };
    let mut losses = Vec::new();
    let per_epoch = trainer.cfg.steps_per_epoch();
    let limit = max_steps.unwrap_or(u64::MAX);
    while !trainer.is_finished() && trainer.state.step < limit {
        let rec = trainer.step()?;
        on_step(&rec);
        if let Some(l) = log.as_mut() {
            l.push(&rec)?;
        }
        losses.push(rec);
        if trainer.state.step % per_epoch != 0 {
            continue;
        }
        let mut improved = false;
        trainer.end_epoch(&mut |e| {
            if let TrainEvent::Epoch { improved: i, .. } = e {
                improved = i;
            }
        })?;
        if let Some(o) = out {
            if let Some(l) = log.as_mut() {
                l.flush()?;
            }
            let ck = DecoderCheckpoint::from_state(&trainer.model.cfg, &trainer.cfg, setup.encoder.id(), bank_ref.clone(), &trainer.state);
            save_decoder(&o.last(), &ck)?;
            if improved {
                save_decoder(&o.best(), &ck.for_inference(trainer.state.params.clone()))?;
            }
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    let last = DecoderCheckpoint::from_state(&trainer.model.cfg, &trainer.cfg, setup.encoder.id(), bank_ref, &trainer.state);
    let best = last.for_inference(trainer.best_params().clone());
    if let Some(o) = out {
        save_decoder(&o.last(), &last)?;
        save_decoder(&o.best(), &best)?;
    }
    Ok(TrainOutcome {
        last,
        best,
        encoder_digest_before: before,
        encoder_digest_after: setup.encoder.weights_digest(),
        elapsed: start.elapsed(),
        losses,
    })
}

/// A loaded decoder ready for sampling.
pub struct Decoder {
    pub model: UNet,
    pub params: ParamSet<f32>,
    pub schedule: NoiseSchedule,
    pub digest: String,
}

impl Decoder {
    pub fn from_checkpoint(ck: &DecoderCheckpoint) -> Result<Self> {
        let (model, params) = ck.model()?;
        let schedule = NoiseSchedule::new(ck.meta.schedule.kind, ck.meta.schedule.steps)?;
        let digest = hex(&params.digest());
        Ok(Self { model, params, schedule, digest })
    }

    pub fn predictor(&self) -> Predictor<'_> {
        Predictor::new(&self.model, &self.params, &self.schedule)
    }

    pub fn evaluate(&self, setup: &EncoderSetup, data: &Dataset, spec: &EvalSpec) -> Result<EvalReport> {
        let predictor = self.predictor();
        let ctx = EvalContext {
            predictor: &predictor,
            encoder: &setup.encoder,
            bank: Some(&setup.bank),
            data,
            checkpoint_digest: self.digest.clone(),
        };
        Ok(evaluate(&ctx, spec)?)
    }

    pub fn sweep(&self, setup: &EncoderSetup, data: &Dataset, spec: &EvalSpec, axis: SweepAxis, values: &[usize]) -> Result<Vec<(SweepPoint, EvalReport)>> {
        let predictor = self.predictor();
        let ctx = EvalContext {
            predictor: &predictor,
            encoder: &setup.encoder,
            bank: Some(&setup.bank),
            data,
            checkpoint_digest: self.digest.clone(),
        };
        Ok(sweep(&ctx, spec, axis, values)?)
    }
}

/// One evaluation per encoder, no weight updates. The decoder digest is
/// checked after every evaluation.
pub struct StitchResult {
    pub reports: Vec<EvalReport>,
    pub digest_before: String,
    pub digest_after: String,
}

pub fn stitch_eval(decoder: &Decoder, setups: &[&EncoderSetup], data: &Dataset, spec: &EvalSpec) -> Result<StitchResult> {
    let digest_before = hex(&decoder.params.digest());
    let mut reports = Vec::with_capacity(setups.len());
    for s in setups {
        reports.push(decoder.evaluate(s, data, spec)?);
    }
    let digest_after = hex(&decoder.params.digest());
    if digest_after != digest_before {
        return Err(Error::Format("decoder weights changed during stitched evaluation".into()));
    }
    Ok(StitchResult { reports, digest_before, digest_after })
}

/// Upgrade rows from reports keyed by encoder name.
pub fn stitch_rows(reports: &[EvalReport], upgrades: &[(&str, &str, &str)]) -> Vec<StitchRow> {
    let find = |n: &str| reports.iter().find(|r| r.encoder.name == n);
    upgrades
        .iter()
        .filter_map(|(label, a, b)| Some(StitchRow::new(label, find(a)?, find(b)?)))
        .collect()
}

/// Snapshot of one DDIM step for visualisation.
pub struct TrajectoryFrame {
    pub t: usize,
    pub x_t: Vec<f32>,
    pub x0_hat: Vec<f32>,
}

/// Single deterministic DDIM trajectory, keeping every frame.
pub fn trajectory(decoder: &Decoder, inputs: &EpisodeInputs, n_steps: usize, seed: u64) -> Result<Vec<TrajectoryFrame>> {
    let size = decoder.model.cfg.image_size;
    let p = size * size;
    let mut x = Rng::derived(seed, "ensemble", 0).normal_vec::<f32>(p);
    let mut frames = Vec::new();
    for pair in ddim_timesteps(decoder.schedule.steps, n_steps).windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let mut g = Graph::inference(&decoder.params);
        let out = decoder.model.forward_tensors(
            &mut g,
            Tensor::from_vec(Shape::new(1, 1, size, size), x.clone()),
            &[t],
            inputs.cond.levels.clone(),
            inputs.query.clone(),
        )?;
        let v = g.value(out.v).data.clone();
        frames.push(TrajectoryFrame { t, x_t: x.clone(), x0_hat: recover_x0(&x, &v, t, &decoder.schedule) });
        x = ddim_step(&x, &v, t, t_prev, &decoder.schedule, 0.0, None)?;
    }
    frames.push(TrajectoryFrame { t: 0, x_t: x.clone(), x0_hat: x });
    Ok(frames)
}
