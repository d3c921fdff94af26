use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use breen::teacher::{load_feature_grid, save_feature_grid, GridSource, TeacherFeatureGrid};
use breen::trainpipe::load_checkpoint;
use breen_cli::{Preset, RunConfig};

fn breen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_breen"))
        .args(args)
        .env_remove("BREEN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_on_every_command() {
    for cmd in ["gen-data", "train", "verify", "pool", "viz", "eval-loss", "config"] {
        let o = breen(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{cmd}");
    }
}

#[test]
fn gen_data_is_deterministic_and_rejects_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.brds");
    let b = dir.path().join("b.brds");
    for p in [&a, &b] {
        let o = breen(&["gen-data", "--seed", "7", "--n", "32", "--mode", "caption", "--out", s(p)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(breen::synthdata::load_dataset(&a).unwrap().len(), 32);

    let o = breen(&["gen-data", "--seed", "7", "--n", "0", "--mode", "caption", "--out", s(&a)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let o = breen(&["gen-data", "--seed", "1", "--n", "1", "--mode", "qa", "--out", "/nonexistent/dir/x.brds"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn pool_writes_pooled_grid_and_rejects_bad_strides() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("g.brtf");
    let grid = TeacherFeatureGrid::new(24, 4, (0..24 * 24 * 4).map(|i| i as f32).collect(), GridSource::File).unwrap();
    save_feature_grid(&grid, &input).unwrap();
    let out = dir.path().join("t.brtf");
    let o = breen(&["pool", "--in", s(&input), "--stride", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("64 tokens"));
    let pooled = load_feature_grid(&out).unwrap();
    assert_eq!((pooled.grid_size(), pooled.dim()), (8, 4));

    let o = breen(&["pool", "--in", s(&input), "--stride", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = breen(&["pool", "--in", s(&dir.path().join("missing.brtf")), "--stride", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn verify_pool_suite_prints_a_table() {
    let o = breen(&["verify", "--suite", "pool"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS"));
}

#[test]
fn config_round_trips_and_validates() {
    for p in [Preset::Desk, Preset::Paper] {
        let c = RunConfig::preset(p);
        let back = RunConfig::parse(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse(&back.to_json()).unwrap(), back);
    }
    let partial = RunConfig::parse(r#"{"model": {"seed": 3}, "checkpoint_every": null}"#).unwrap();
    assert_eq!(partial.model.seed, 3);
    assert_eq!(partial.model.d_model, 64);
    assert_eq!(partial.checkpoint_every, None);
    let paper = RunConfig::parse(r#"{"defaults": "paper"}"#).unwrap();
    assert_eq!(paper.stages[0].lr, 4e-4);
    assert_eq!(paper.stages[2].batch_size, 256);

    assert!(RunConfig::parse(r#"{"bogus": 1}"#).is_err());
    let mut c = RunConfig::preset(Preset::Desk);
    c.stages.swap(0, 1);
    assert!(RunConfig::parse(&c.to_json()).is_err());
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn small_run(steps: [u64; 3], lr: f64) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cap = root.join("cap.brds");
    let qa = root.join("qa.brds");
    assert_eq!(code(&breen(&["gen-data", "--seed", "1", "--n", "4", "--mode", "caption", "--out", s(&cap)])), 0);
    assert_eq!(code(&breen(&["gen-data", "--seed", "2", "--n", "4", "--mode", "qa", "--out", s(&qa)])), 0);
    let mut c = RunConfig::preset(Preset::Desk);
    for (spec, n) in c.stages.iter_mut().zip(steps) {
        spec.steps = n;
        spec.batch_size = 2;
        spec.lr = lr;
    }
    c.paths.dataset = cap;
    c.paths.sft_dataset = qa;
    c.paths.checkpoints = root.join("ck");
    c.paths.metrics = root.join("metrics.jsonl");
    c.paths.heatmaps = root.join("hm");
    c.checkpoint_every = Some(2);
    let config = root.join("run.json");
    std::fs::write(&config, c.to_json()).unwrap();
    Run { _dir: dir, root, config }
}

#[test]
fn staged_training_viz_and_eval() {
    let run = small_run([4, 2, 2], 1e-3);
    let cfg = s(&run.config);

    let o = breen(&["train", "--config", cfg, "--stage", "sft"]);
    assert_eq!(code(&o), 2, "sft without a pretrain checkpoint");

    let o = breen(&["train", "--config", cfg, "--stage", "prealign"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("frozen groups unchanged"), "{text}");
    let ck = run.root.join("ck");
    assert!(ck.join("prealign.brck").exists() && ck.join("prealign-step2.brck").exists());

    // Resuming the step-2 checkpoint reproduces the final one exactly.
    let (full, _) = load_checkpoint(&ck.join("prealign.brck")).unwrap();
    let o = breen(&["train", "--config", cfg, "--stage", "prealign", "--resume", s(&ck.join("prealign-step2.brck"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (resumed, st) = load_checkpoint(&ck.join("prealign.brck")).unwrap();
    assert_eq!(st.step, 4);
    assert_eq!(resumed.params, full.params);

    for stage in ["pretrain", "sft"] {
        let o = breen(&["train", "--config", cfg, "--stage", stage]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let lines = std::fs::read_to_string(run.root.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4 + 2 + 2 + 2);

    let out = run.root.join("hm").join("s0");
    let o = breen(&[
        "viz", "--ckpt", s(&ck.join("sft.brck")), "--data", s(&run.root.join("qa.brds")), "--sample", "0",
        "--all-layers", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let files = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(files.contains("s0-query-s3.pgm") && files.contains("s0-image.pgm"), "{files}");
    assert_eq!(files.lines().filter(|l| l.contains("-image-layer")).count(), 4 * 2);
    for l in files.lines() {
        assert!(Path::new(l).exists(), "{l}");
    }

    let o = breen(&["eval-loss", "--ckpt", s(&ck.join("sft.brck")), "--data", s(&run.root.join("qa.brds"))]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["qa_accuracy"].is_number() && v["losses"]["lm"].is_number());
}

#[test]
fn exploding_training_exits_4() {
    let run = small_run([3, 0, 0], 1e30);
    let o = breen(&["train", "--config", s(&run.config), "--stage", "prealign"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn bad_thread_count_and_missing_data() {
    let run = small_run([1, 0, 0], 1e-3);
    let o = Command::new(env!("CARGO_BIN_EXE_breen"))
        .args(["train", "--config", s(&run.config), "--stage", "prealign"])
        .env("BREEN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    std::fs::remove_file(run.root.join("cap.brds")).unwrap();
    let o = breen(&["train", "--config", s(&run.config), "--stage", "prealign"]);
    assert_eq!(code(&o), 3);
}
