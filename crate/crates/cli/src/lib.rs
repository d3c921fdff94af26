//! Command implementations behind the `breen` binary.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use breen::introspect::{attention_to_image, attention_to_queries, emit_heatmap, middle_layer, reconstruct_heatmap};
use breen::losses::LossBreakdown;
use breen::model::{BreenModel, Group};
use breen::sequence::Stage;
use breen::synthdata::{gen_dataset, load_dataset, mix_seed, Mode, Vocab};
use breen::teacher::{load_feature_grid, make_teacher, save_feature_grid, TeacherSpec};
use breen::trainpipe::{
    evaluate, load_checkpoint, load_for_resume, prepare, qa_accuracy, run_stage, RunOptions, TrainState,
};
use breen::verify::{run_suites, Check};
use breen::{Error, Result};

pub use config::{Paths, Preset, RunConfig, VerifyFlags};

pub const EXIT_FAILED_CHECKS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Checksum { .. } => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_USAGE,
    }
}

/// Worker threads from `BREEN_THREADS`; one when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("BREEN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Input(format!("BREEN_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn cmd_gen_data(seed: u64, n: usize, mode: Mode, out: &Path, teacher: &TeacherSpec) -> Result<usize> {
    let t = make_teacher(teacher, 3)?;
    let ds = gen_dataset(seed, n, mode, &Vocab::default(), t.as_ref(), out)?;
    Ok(ds.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    One(Stage),
    All,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub steps: usize,
    pub first: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn frozen_digests(model: &BreenModel, state: &TrainState) -> BTreeMap<Group, String> {
    Group::ALL
        .into_iter()
        .filter(|&g| !state.spec.is_trainable(g))
        .map(|g| (g, model.params.group_digest(g)))
        .collect()
}

/// Starting model and state for the first selected stage.
fn initial_state(cfg: &RunConfig, first: Stage, resume: Option<&Path>, from_scratch: bool) -> Result<(BreenModel, TrainState)> {
    let spec = cfg.stage(first)?.clone();
    if let Some(path) = resume {
        let (model, state) = load_for_resume(path, &cfg.model)?;
        if state.spec.stage != first {
            return Err(Error::Input(format!(
                "{} is a {} checkpoint, cannot resume {first}",
                path.display(),
                state.spec.stage
            )));
        }
        return Ok((model, state));
    }
    let prev = Stage::ALL.iter().copied().take_while(|&s| s != first).last();
    match prev {
        Some(p) if !from_scratch => {
            let path = cfg.checkpoint_for(p);
            if !path.exists() {
                return Err(Error::Input(format!(
                    "{first} needs the {p} checkpoint at {} (or pass --from-scratch)",
                    path.display()
                )));
            }
            let (model, state) = load_for_resume(&path, &cfg.model)?;
            Ok((model.clone(), state.next_stage(&model, spec)))
        }
        _ => {
            let model = BreenModel::new(cfg.model.clone())?;
            let state = TrainState::new(&model, spec, mix_seed(cfg.model.seed, 4));
            Ok((model, state))
        }
    }
}

/// Train the selected stage(s), writing `<stage>.brck` and metrics. Frozen
/// groups are hashed before and after each stage and must not move.
pub fn cmd_train(
    cfg: &RunConfig,
    select: StageSelect,
    resume: Option<&Path>,
    from_scratch: bool,
    threads: usize,
    log: &mut dyn FnMut(String),
) -> Result<Vec<StageOutcome>> {
    for suite in &cfg.verify.before_train {
        let failed: Vec<Check> = run_suites(suite)?.into_iter().filter(|c| !c.passed).collect();
        if let Some(c) = failed.first() {
            return Err(Error::Contract(format!("pre-train check {} failed: {}", c.name, c.detail)));
        }
    }
    let stages: Vec<Stage> = match select {
        StageSelect::One(s) => vec![s],
        StageSelect::All => cfg.stages.iter().map(|s| s.stage).collect(),
    };
    std::fs::create_dir_all(&cfg.paths.checkpoints).map_err(|e| Error::io(&cfg.paths.checkpoints, e))?;
    create_parent(&cfg.paths.metrics)?;

    let (mut model, mut state) = initial_state(cfg, stages[0], resume, from_scratch)?;
    let mut outcomes = Vec::new();
    for (i, &stage) in stages.iter().enumerate() {
        if i > 0 {
            state = state.next_stage(&model, cfg.stage(stage)?.clone());
        }
        let ds = load_dataset(cfg.dataset_for(stage))?;
        let data = prepare(&model, &ds.samples, stage)?;
        let before = frozen_digests(&model, &state);
        let checkpoint = cfg.checkpoint_for(stage);
        log(format!(
            "{stage}: steps {}..{} on {} examples",
            state.step,
            state.spec.steps,
            data.len()
        ));
        let losses = run_stage(
            &mut model,
            &mut state,
            &data,
            &RunOptions {
                metrics: Some(cfg.paths.metrics.clone()),
                checkpoint: Some(checkpoint.clone()),
                checkpoint_every: cfg.checkpoint_every,
                threads,
                stop_after: None,
            },
        )?;
        let after = frozen_digests(&model, &state);
        if before != after {
            let moved: Vec<&str> = before
                .iter()
                .filter(|(g, d)| after.get(g) != Some(d))
                .map(|(g, _)| g.as_str())
                .collect();
            return Err(Error::Contract(format!("frozen groups changed: {}", moved.join(", "))));
        }
        if !before.is_empty() {
            let names: Vec<&str> = before.keys().map(|g| g.as_str()).collect();
            log(format!("{stage}: frozen groups unchanged ({})", names.join(", ")));
        }
        let outcome = StageOutcome {
            stage,
            steps: losses.len(),
            first: losses.first().copied(),
            last: losses.last().copied(),
            checkpoint,
        };
        if let (Some(f), Some(l)) = (outcome.first, outcome.last) {
            log(format!(
                "{stage}: align {:.4} -> {:.4}, lm {:.4} -> {:.4}",
                f.align_total, l.align_total, f.lm, l.lm
            ));
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

pub fn cmd_verify(suite: &str) -> Result<Vec<Check>> {
    run_suites(suite)
}

pub fn format_checks(checks: &[Check]) -> String {
    let w = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| format!("{}  {:w$}  {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect()
}

/// Pool a BRTF grid and write the result as a BRTF grid of side `G/s`.
pub fn cmd_pool(input: &Path, stride: usize, out: &Path) -> Result<usize> {
    let grid = load_feature_grid(input)?;
    let pooled = grid.pooled(stride)?;
    save_feature_grid(&pooled, out)?;
    Ok(pooled.grid_size() * pooled.grid_size())
}

#[derive(Debug, Clone)]
pub struct VizRequest {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub sample: usize,
    pub layer: Option<usize>,
    /// `fine`, `coarse`, or a stride.
    pub granularity: String,
    pub token: Option<usize>,
    pub all_layers: bool,
    pub out: PathBuf,
}

fn resolve_stride(strides: &[usize], g: &str) -> Result<usize> {
    let pick = match g {
        "fine" => strides.iter().min().copied(),
        "coarse" => strides.iter().max().copied(),
        s => s.parse().ok().filter(|s| strides.contains(s)),
    };
    pick.ok_or_else(|| Error::Input(format!("granularity {g:?} not among strides {strides:?}")))
}

/// Query and image heatmaps for one sample; returns every written file.
pub fn cmd_viz(req: &VizRequest) -> Result<Vec<PathBuf>> {
    let (model, _) = load_checkpoint(&req.ckpt)?;
    let ds = load_dataset(&req.data)?;
    let sample = ds.samples.get(req.sample).ok_or_else(|| {
        Error::Input(format!("sample {} out of range; dataset has {}", req.sample, ds.len()))
    })?;
    let stage = if sample.mode == Mode::Qa { Stage::Sft } else { Stage::Pretrain };
    let ex = prepare(&model, std::slice::from_ref(sample), stage)?.remove(0);
    let token = req
        .token
        .or(ex.answer.map(|(pos, _)| pos))
        .unwrap_or(ex.seq.len() - 1);
    let image = ex.image();
    let out = model.forward(Some(&image), &ex.seq, true)?;
    let c = &model.config;
    let layer = req.layer.unwrap_or_else(|| middle_layer(c.n_layers));
    create_parent(&req.out)?;
    let stem = |suffix: &str| {
        let mut s = req.out.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let mut written = Vec::new();
    if !c.strides.is_empty() {
        let stride = resolve_stride(&c.strides, &req.granularity)?;
        let scores = attention_to_queries(&out, token, layer, stride)?;
        let h = reconstruct_heatmap(&scores, stride, c.teacher_grid, c.teacher_patch())?;
        written.extend(emit_heatmap(&h, &stem(&format!("-query-s{stride}")), Some(&image))?);
    }
    let (rows, cols) = (ex.height / c.patch, ex.width / c.patch);
    let h = attention_to_image(&out, token, layer, rows, cols, c.patch)?;
    written.extend(emit_heatmap(&h, &stem("-image"), Some(&image))?);
    if req.all_layers {
        for l in 0..c.n_layers {
            let h = attention_to_image(&out, token, l, rows, cols, c.patch)?;
            written.extend(emit_heatmap(&h, &stem(&format!("-image-layer{l}")), None)?);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub stage: Stage,
    pub examples: usize,
    pub losses: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qa_accuracy: Option<f64>,
}

/// Mean losses of a checkpoint on a dataset; qa data is scored in the SFT
/// layout and also reports answer accuracy.
pub fn cmd_eval_loss(ckpt: &Path, data: &Path, alpha: Option<f64>, beta: Option<f64>) -> Result<EvalReport> {
    let (model, state) = load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let qa = ds.samples.iter().all(|s| s.mode == Mode::Qa);
    let stage = if qa { Stage::Sft } else { Stage::Pretrain };
    let examples = prepare(&model, &ds.samples, stage)?;
    let (a, b) = (alpha.unwrap_or(state.spec.alpha), beta.unwrap_or(state.spec.beta));
    let losses = evaluate(&model, &examples, a, b)?;
    let qa_accuracy = if qa { Some(qa_accuracy(&model, &examples)?) } else { None };
    Ok(EvalReport {
        stage,
        examples: examples.len(),
        losses,
        qa_accuracy,
    })
}
