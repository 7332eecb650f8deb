//! End-to-end runs of the binary on a miniature configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use diffup::checkpoint::{load_decoder, read_container, save_decoder};
use diffup::manifest::{read_manifest, RunStatus};

const BIN: &str = env!("CARGO_BIN_EXE_diffup");

fn config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"
[dataset]
root = "{root}"
train_per_class = 64
test_per_class = 8

[encoder]
name = "rp-8"

[model]
image_size = 64
patch = 8
base_width = 4
mults = [1, 2]
res_blocks = 1
groups = 2
emb_dim = 8
head_width = 4

[diffusion]
steps = 50

[training]
epochs = 2
episodes_per_epoch = 12
batch_size = 2
val_every = 1
val_episodes = 2
val_ddim_steps = 2
val_ensemble = 1

[eval]
episodes = 4
ddim_steps = 3
ensemble = 2
"#,
        root = dir.join("data").display()
    );
    let registry = "[encoders.rp-8]\nfamily = \"random_projection\"\nseed = 1\ndims = [8, 16, 32]\n\n\
                    [encoders.rp-16]\nfamily = \"random_projection\"\nseed = 2\ndims = [16, 32, 64]\n";
    std::fs::create_dir_all(dir.join("data")).unwrap();
    std::fs::write(dir.join("data/encoders.toml"), registry).unwrap();
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn diffup(dir: &Path, args: &[&str]) -> Output {
    let cfg = config(dir);
    let out = Command::new(BIN)
        .current_dir(dir)
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("runs"))
        .args(args)
        .output()
        .unwrap();
    eprintln!("$ diffup {}\n{}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    out
}

/// Run directory named in the command's stderr.
fn run_dir(out: &Output) -> PathBuf {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().find_map(|l| l.strip_prefix("run directory ")).expect("run directory line");
    PathBuf::from(line)
}

fn first_losses(dir: &Path, n: usize) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("loss.csv")).unwrap();
    text.lines().skip(1).take(n).map(String::from).collect()
}

#[test]
fn selftest_passes_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = diffup(tmp.path(), &["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(start.elapsed() < Duration::from_secs(120));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 8);
    let m = read_manifest(&run_dir(&out)).unwrap();
    assert_eq!(m.status, RunStatus::Finished);
    assert!(m.artifacts.iter().all(|a| a.is_file()));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = diffup(tmp.path(), &["stitch-eval", "--checkpoint", "none.ckpt", "--encoders", "rp-8,vit-huge"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("vit-huge") && err.contains("rp-8") && err.contains("rp-16") && err.contains("cnn-a"), "{err}");
    assert_eq!(diffup(tmp.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(diffup(tmp.path(), &["eval", "--checkpoint", "x", "--annotation", "polygon"]).status.code(), Some(2));
    // a missing checkpoint is a runtime failure
    assert_eq!(diffup(tmp.path(), &["eval", "--checkpoint", "missing.ckpt"]).status.code(), Some(1));
}

#[test]
fn workflow_from_data_to_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = diffup(dir, &["gen-data"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.join("data/images/train/0/63.png").is_file());
    assert!(dir.join("data/masks/test/19/7.png").is_file());

    let out = diffup(dir, &["fit-text-bank"]);
    assert_eq!(out.status.code(), Some(0));

    // same seed, same first ten losses
    let a = diffup(dir, &["train", "--seed", "7", "--max-steps", "10"]);
    let b = diffup(dir, &["train", "--seed", "7", "--max-steps", "10"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let (ra, rb) = (run_dir(&a), run_dir(&b));
    assert_eq!(first_losses(&ra, 10).len(), 10);
    assert_eq!(first_losses(&ra, 10), first_losses(&rb, 10));
    let m = read_manifest(&ra).unwrap();
    assert_eq!(m.seeds["training"], 7);
    assert_eq!(m.config.training.seed, 7);
    assert!(m.artifacts.iter().any(|p| p.ends_with("best.ckpt")));

    // resume the 10-step run to the end and compare with an uninterrupted one
    let last = ra.join("last.ckpt");
    let resumed = diffup(dir, &["train", "--seed", "7", "--resume", last.to_str().unwrap()]);
    let full = diffup(dir, &["train", "--seed", "7"]);
    assert_eq!(resumed.status.code(), Some(0));
    assert_eq!(full.status.code(), Some(0));
    let tail: Vec<String> = first_losses(&run_dir(&full), 24).split_off(10);
    assert_eq!(first_losses(&run_dir(&resumed), 14), tail);
    let done_a = load_decoder(&run_dir(&resumed).join("last.ckpt")).unwrap();
    let done_b = load_decoder(&run_dir(&full).join("last.ckpt")).unwrap();
    assert_eq!(done_a.weights_digest(), done_b.weights_digest());

    // save -> load -> save keeps the digest and the bytes
    let ck = run_dir(&full).join("best.ckpt");
    let loaded = load_decoder(&ck).unwrap();
    let (once, twice) = (dir.join("once.ckpt"), dir.join("twice.ckpt"));
    save_decoder(&once, &loaded).unwrap();
    let reloaded = load_decoder(&once).unwrap();
    save_decoder(&twice, &reloaded).unwrap();
    assert_eq!(reloaded.weights_digest(), loaded.weights_digest());
    assert!(std::fs::read(&once).unwrap() == std::fs::read(&twice).unwrap(), "re-saved checkpoint differs");
    assert_eq!(read_container(&ck).unwrap().meta["train"]["seed"], 7);
    let ck = ck.to_str().unwrap();

    let out = diffup(dir, &["eval", "--checkpoint", ck]);
    assert_eq!(out.status.code(), Some(0));
    let eval_dir = run_dir(&out);
    let m = read_manifest(&eval_dir).unwrap();
    assert!(m.artifacts.iter().any(|p| p.ends_with("eval.json")) && m.artifacts.iter().all(|p| p.is_file()));
    let rerun = diffup(dir, &["eval", "--checkpoint", ck]);
    assert_eq!(
        std::fs::read_to_string(eval_dir.join("eval_episodes.csv")).unwrap(),
        std::fs::read_to_string(run_dir(&rerun).join("eval_episodes.csv")).unwrap()
    );

    let out = diffup(dir, &["stitch-eval", "--checkpoint", ck, "--encoders", "rp-8,rp-16"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(run_dir(&out).join("eval_rp-16.json").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("unchanged"));

    let out = diffup(dir, &["sweep", "--checkpoint", ck, "--axis", "shots", "--values", "0,1"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::metadata(run_dir(&out).join("sweep.png")).unwrap().len() > 0);

    let out = diffup(dir, &["sample-vis", "--checkpoint", ck, "--steps", "4"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::metadata(run_dir(&out).join("trajectory.png")).unwrap().len() > 0);
}
