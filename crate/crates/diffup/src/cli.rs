//! Command-line front end. Usage errors (bad flags, bad config, unknown
//! encoders, guarded evaluations) exit 2; runtime failures exit 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffup_core::evalkit::{prepare_eval_episodes, EvalContext, EvalSpec, SweepAxis};
use diffup_core::synthshapes::{AnnotationKind, Dataset};
use diffup_core::trainer::StepRecord;

use crate::checkpoint::{load_decoder, DecoderCheckpoint};
use crate::config::RunConfig;
use crate::dataset_io::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::manifest::{Run, RunStatus};
use crate::pipeline::{self, Decoder, EncoderSetup, TrainOutputs};
use crate::registry::{Registry, UPGRADES};
use crate::report::{self, Panel};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "diffup", version, about = "Few-shot segmentation by conditional mask diffusion over prior maps")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed of the command's stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub fold: Option<usize>,
    #[arg(long, global = true)]
    pub encoder: Option<String>,
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    /// mask, bbox, scribble, text or image_only.
    #[arg(long, global = true, value_parser = parse_annotation)]
    pub annotation: Option<AnnotationKind>,
    /// Parent of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Permit evaluation on base classes.
    #[arg(long, global = true)]
    pub allow_base: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into the dataset root.
    GenData {
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain tiny-CNN encoders whose weight files are missing.
    PretrainEncoder {
        /// Registered names; defaults to every tiny CNN in the registry.
        names: Vec<String>,
        /// Retrain even if weights exist.
        #[arg(long)]
        force: bool,
    },
    /// Fit the text prototype bank of an encoder.
    FitTextBank,
    /// Train a decoder.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint on novel-class episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate one checkpoint with several encoders, no retraining.
    StitchEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma separated; defaults to every encoder in the upgrade table.
        #[arg(long, value_delimiter = ',')]
        encoders: Vec<String>,
    },
    /// Sensitivity sweep over sampler steps or shot counts.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma separated; defaults to 5,10,25,50 steps or 0,1,2,5 shots.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Grid image of the noisy states along one sampling trajectory.
    SampleVis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Run the analytic invariant suite.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    DdimSteps,
    Shots,
}

fn parse_annotation(s: &str) -> std::result::Result<AnnotationKind, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown annotation kind {s:?}; expected mask, bbox, scribble, text or image_only"))
}

/// Exit status of a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::UnknownEncoder { .. } | Error::Config(_) => 2,
        Error::Core(diffup_core::Error::BaseClassLeak) => 2,
        _ => 1,
    }
}

impl Common {
    /// The config file (or defaults) with the flags applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
                e => e,
            })?,
            None => RunConfig::default(),
        };
        if let Some(f) = self.fold {
            cfg.training.fold = f;
        }
        if let Some(e) = &self.encoder {
            cfg.encoder.name = e.clone();
        }
        if let Some(k) = self.shots {
            cfg.eval.shots = k;
        }
        if let Some(a) = self.annotation {
            cfg.eval.annotation = a;
        }
        cfg.eval.allow_base |= self.allow_base;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn seeds(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("dataset".to_string(), cfg.dataset.seed),
        ("training".to_string(), cfg.training.seed),
        ("eval".to_string(), cfg.eval.seed),
    ])
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::PretrainEncoder { .. } => "pretrain-encoder",
        Command::FitTextBank => "fit-text-bank",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::StitchEval { .. } => "stitch-eval",
        Command::Sweep { .. } => "sweep",
        Command::SampleVis { .. } => "sample-vis",
        Command::Selftest => "selftest",
    }
}

/// Runs the parsed command and returns its exit code.
pub fn run(cli: Cli, argv: Vec<String>) -> i32 {
    match execute(cli, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<i32> {
    let mut cfg = cli.common.resolve()?;
    // --seed drives the stochastic stage the command owns
    if let Some(s) = cli.common.seed {
        match cli.command {
            Command::GenData { .. } => cfg.dataset.seed = s,
            Command::PretrainEncoder { .. } | Command::FitTextBank | Command::Selftest => {}
            Command::Train { .. } => cfg.training.seed = s,
            _ => cfg.eval.seed = s,
        }
    }
    let registry = Registry::load(&cfg.registry_path())?;
    // unknown names are usage errors, caught before any work
    let mut names = vec![cfg.encoder.name.clone()];
    match &cli.command {
        Command::PretrainEncoder { names: n, .. } => names.extend(n.iter().cloned()),
        Command::StitchEval { encoders, .. } => names.extend(encoders.iter().cloned()),
        _ => {}
    }
    for n in &names {
        registry.recipe(n)?;
    }
    let name = command_name(&cli.command);
    let mut run = Run::start(&cli.common.out_dir, name, argv, &cfg, seeds(&cfg))?;
    eprintln!("run directory {}", run.dir.display());
    let result = dispatch(&cli.command, &cli.common, &cfg, &registry, &mut run);
    let status = match &result {
        Ok(0) => RunStatus::Finished,
        Ok(code) => RunStatus::Failed(format!("exit {code}")),
        Err(e) => RunStatus::Failed(e.to_string()),
    };
    run.finish(status)?;
    result
}

fn text_bank_cache(cfg: &RunConfig) -> Option<PathBuf> {
    let root = cfg.data_root();
    dataset_io::exists(&root).then(|| root.join("text_banks"))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg.data_root();
    if !dataset_io::exists(&root) {
        eprintln!("no dataset at {}, generating in memory", root.display());
    }
    dataset_io::load_or_generate(&cfg.dataset)
}

fn setup(cfg: &RunConfig, registry: &Registry, name: &str, data: &Dataset) -> Result<EncoderSetup> {
    pipeline::setup_encoder(cfg, registry, name, data, text_bank_cache(cfg).as_deref())
}

struct Loaded {
    ckpt: DecoderCheckpoint,
    decoder: Decoder,
    /// Eval spec on the checkpoint's fold unless `--fold` was given.
    spec: EvalSpec,
    encoder: String,
}

fn load_for_eval(path: &Path, cfg: &RunConfig, common: &Common) -> Result<Loaded> {
    let ckpt = load_decoder(path)?;
    let decoder = Decoder::from_checkpoint(&ckpt)?;
    let mut spec = cfg.eval_spec();
    spec.fold = common.fold.unwrap_or(ckpt.meta.train.fold);
    let encoder = common.encoder.clone().unwrap_or_else(|| ckpt.meta.encoder.name.clone());
    Ok(Loaded { ckpt, decoder, spec, encoder })
}

fn dispatch(cmd: &Command, common: &Common, cfg: &RunConfig, registry: &Registry, run: &mut Run) -> Result<i32> {
    match cmd {
        Command::GenData { force } => gen_data(cfg, *force, run),
        Command::PretrainEncoder { names, force } => pretrain(cfg, registry, names, *force, run),
        Command::FitTextBank => {
            let data = load_data(cfg)?;
            let enc = registry.build(&cfg.encoder.name, data.size, &data.classes)?;
            let (bank, cached) = pipeline::text_bank(&enc, &data, cfg.training.fold, cfg.encoder.text_bank_images, text_bank_cache(cfg).as_deref())?;
            let out = run.path("text_bank.json");
            report::write_json(&out, &bank)?;
            run.record([out].into_iter().chain(cached))?;
            eprintln!("text bank for {} on fold {}", cfg.encoder.name, cfg.training.fold);
            Ok(0)
        }
        Command::Train { resume, max_steps } => train(cfg, registry, resume.as_deref(), *max_steps, run),
        Command::Eval { checkpoint } => {
            let l = load_for_eval(checkpoint, cfg, common)?;
            l.spec.class_ids()?;
            let data = load_data(cfg)?;
            let s = setup(cfg, registry, &l.encoder, &data)?;
            let rep = l.decoder.evaluate(&s, &data, &l.spec)?;
            let files = report::write_eval(&run.dir, "eval", &rep)?;
            run.record(files)?;
            println!(
                "{} {:?} {}-shot fold {}: mIoU {:.4} FB-IoU {:.4} (background {:.4}, prior threshold {:.4}) over {} episodes",
                rep.encoder.name, rep.spec.annotation, rep.spec.shots, rep.spec.fold, rep.miou, rep.fb_iou,
                rep.baselines.background_miou, rep.baselines.otsu_miou, rep.spec.n_episodes
            );
            Ok(0)
        }
        Command::StitchEval { checkpoint, encoders } => {
            let l = load_for_eval(checkpoint, cfg, common)?;
            l.spec.class_ids()?;
            let mut names: Vec<String> = if encoders.is_empty() {
                UPGRADES.iter().flat_map(|(_, a, b)| [a.to_string(), b.to_string()]).collect()
            } else {
                encoders.clone()
            };
            if !names.contains(&l.ckpt.meta.encoder.name) {
                names.insert(0, l.ckpt.meta.encoder.name.clone());
            }
            let mut seen = Vec::new();
            names.retain(|n| !seen.contains(n) && {
                seen.push(n.clone());
                true
            });
            let data = load_data(cfg)?;
            let setups = names.iter().map(|n| setup(cfg, registry, n, &data)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&EncoderSetup> = setups.iter().collect();
            let res = pipeline::stitch_eval(&l.decoder, &refs, &data, &l.spec)?;
            for r in &res.reports {
                let files = report::write_eval(&run.dir, &format!("eval_{}", r.encoder.name), r)?;
                run.record(files)?;
                println!("{:<8} mIoU {:.4}  background {:.4}", r.encoder.name, r.miou, r.baselines.background_miou);
            }
            let rows = pipeline::stitch_rows(&res.reports, &UPGRADES);
            let (csv, txt) = (run.path("stitch.csv"), run.path("stitch.txt"));
            report::write_stitch_csv(&csv, &rows)?;
            report::write_stitch_text(&txt, &rows)?;
            run.record([csv, txt])?;
            print!("{}", diffup_core::evalkit::format_stitch_table(&rows));
            println!("decoder digest {} unchanged", res.digest_after);
            Ok(0)
        }
        Command::Sweep { checkpoint, axis, values } => {
            let l = load_for_eval(checkpoint, cfg, common)?;
            l.spec.class_ids()?;
            let (ax, label, defaults) = match axis {
                Axis::DdimSteps => (SweepAxis::DdimSteps, "ddim_steps", vec![5, 10, 25, 50]),
                Axis::Shots => (SweepAxis::Shots, "shots", vec![0, 1, 2, 5]),
            };
            let values = if values.is_empty() { defaults } else { values.clone() };
            let data = load_data(cfg)?;
            let s = setup(cfg, registry, &l.encoder, &data)?;
            let out = l.decoder.sweep(&s, &data, &l.spec, ax, &values)?;
            let points: Vec<_> = out.iter().map(|(p, _)| p.clone()).collect();
            let (csv, png) = (run.path("sweep.csv"), run.path("sweep.png"));
            report::write_sweep_csv(&csv, label, &points)?;
            report::line_plot(&png, &[points.iter().map(|p| p.miou).collect(), points.iter().map(|p| p.fb_iou).collect()])?;
            run.record([csv, png])?;
            for p in &points {
                println!("{label} {:>3}: mIoU {:.4} FB-IoU {:.4} ({} sampler calls)", p.value, p.miou, p.fb_iou, p.sample_calls);
            }
            Ok(0)
        }
        Command::SampleVis { checkpoint, episode, steps } => {
            let l = load_for_eval(checkpoint, cfg, common)?;
            l.spec.class_ids()?;
            let data = load_data(cfg)?;
            let s = setup(cfg, registry, &l.encoder, &data)?;
            let predictor = l.decoder.predictor();
            let ctx = EvalContext { predictor: &predictor, encoder: &s.encoder, bank: Some(&s.bank), data: &data, checkpoint_digest: l.decoder.digest.clone() };
            let spec = EvalSpec { n_episodes: episode + 1, ..l.spec.clone() };
            let (inputs, gt) = prepare_eval_episodes(&ctx, &spec)?.pop().expect("one episode");
            let frames = pipeline::trajectory(&l.decoder, &inputs, *steps, spec.sample_seed(*episode))?;
            let gt_map = gt.to_map();
            let size = l.decoder.model.cfg.image_size;
            let head = vec![
                Panel::Rgb(&inputs.query.data),
                Panel::Gray { data: &gt_map.data, lo: 0.0, hi: 1.0 },
                Panel::Gray { data: &inputs.prior_mean.data, lo: -1.0, hi: 1.0 },
            ];
            let noisy: Vec<Panel<'_>> = frames.iter().map(|f| Panel::Gray { data: &f.x_t, lo: -2.5, hi: 2.5 }).collect();
            let clean: Vec<Panel<'_>> = frames.iter().map(|f| Panel::Gray { data: &f.x0_hat, lo: -1.0, hi: 1.0 }).collect();
            let png = run.path("trajectory.png");
            report::image_grid(&png, &[head, noisy, clean], size, 2)?;
            let ts: Vec<usize> = frames.iter().map(|f| f.t).collect();
            let meta = run.path("trajectory.json");
            report::write_json(&meta, &serde_json::json!({ "episode": episode, "class_id": inputs.class_id, "timesteps": ts,
                "rows": ["query, ground truth, fused mean prior", "x_t per timestep", "predicted x0 per timestep"] }))?;
            run.record([png, meta])?;
            println!("trajectory over timesteps {ts:?}");
            Ok(0)
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {} {:<40} {} ({:.2?})", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name, c.detail, c.elapsed);
            }
            let out = run.path("selftest.json");
            report::write_json(&out, &checks)?;
            run.record([out])?;
            Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
        }
    }
}

fn gen_data(cfg: &RunConfig, force: bool, run: &mut Run) -> Result<i32> {
    let root = cfg.data_root();
    if dataset_io::exists(&root) && !force {
        let m = dataset_io::read_manifest(&root)?;
        if m == DatasetManifest::from_config(&cfg.dataset) {
            eprintln!("dataset at {} is up to date", root.display());
            run.record([root.join("dataset.json")])?;
            return Ok(0);
        }
        return Err(Error::Config(format!("{} holds a different dataset; pass --force to replace it", root.display())));
    }
    let data = dataset_io::generate(&cfg.dataset)?;
    dataset_io::save(&root, &data, &DatasetManifest::from_config(&cfg.dataset))?;
    run.record(["dataset.json", "classes.json", "splits.json", "images", "masks"].map(|f| root.join(f)))?;
    eprintln!("wrote {} classes to {}", data.classes.len(), root.display());
    Ok(0)
}

fn pretrain(cfg: &RunConfig, registry: &Registry, names: &[String], force: bool, run: &mut Run) -> Result<i32> {
    let names: Vec<String> = if names.is_empty() {
        registry
            .encoders
            .iter()
            .filter(|(_, r)| r.family == diffup_core::encoders::EncoderFamily::TinyCnn)
            .map(|(n, _)| n.clone())
            .collect()
    } else {
        names.to_vec()
    };
    let data = load_data(cfg)?;
    for n in &names {
        let Some(path) = registry.weights_path(n)? else {
            eprintln!("{n} has no trainable weights, skipping");
            continue;
        };
        if force && path.is_file() {
            std::fs::remove_file(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        }
        let enc = registry.build(n, data.size, &data.classes)?;
        eprintln!("{n}: weights {}", &enc.weights_digest()[..16]);
        run.record([path])?;
    }
    Ok(0)
}

fn train(cfg: &RunConfig, registry: &Registry, resume: Option<&Path>, max_steps: Option<u64>, run: &mut Run) -> Result<i32> {
    let data = load_data(cfg)?;
    let s = setup(cfg, registry, &cfg.encoder.name, &data)?;
    let resume = resume.map(load_decoder).transpose()?;
    let out = TrainOutputs { dir: run.dir.clone() };
    run.record([out.loss_log(), out.last(), out.best()])?;
    let mut avg = 0.0;
    let mut on_step = |r: &StepRecord| {
        avg += r.loss.total;
        if (r.step + 1) % 50 == 0 {
            eprintln!("step {:>6}  loss {:.4}  |g| {:.3}", r.step + 1, avg / 50.0, r.grad_norm);
            avg = 0.0;
        }
    };
    let outcome = pipeline::train(cfg, &data, &s, resume.as_ref(), Some(&out), max_steps, &mut on_step)?;
    let history = &outcome.last.meta.history;
    let val: Vec<f64> = history.iter().filter_map(|e| e.val_miou).collect();
    let losses: Vec<f64> = history.iter().map(|e| e.mean_loss.total.min(1.0)).collect();
    let png = run.path("curves.png");
    report::line_plot(&png, &[losses, val])?;
    run.record([png])?;
    println!(
        "trained {} steps in {:.1?}; best validation mIoU {:?} at epoch {:?}; encoder digest unchanged: {}",
        outcome.last.meta.adam_step,
        outcome.elapsed,
        outcome.last.meta.best_miou,
        outcome.last.meta.best_epoch,
        outcome.encoder_digest_before == outcome.encoder_digest_after
    );
    Ok(0)
}
