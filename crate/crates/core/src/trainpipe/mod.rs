//! Three-stage training: freeze policies, AdamW, deterministic batching,
//! checkpoints and JSONL metrics.

mod checkpoint;
mod optim;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_for_resume, save_checkpoint, CheckpointHeader,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{clip_global_norm, AdamW, Moments};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{tape_losses, LossBreakdown};
use crate::model::{BreenModel, Group};
use crate::numcore::{Array, Tape};
use crate::sequence::{AssembledSequence, Stage};
use crate::synthdata::{mix_seed, Mode, Sample};
use crate::teacher::pool_grid;

/// Loss records kept in a [`TrainState`].
pub const HISTORY_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear decay from `lr` to zero over the stage.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: Stage,
    pub trainable: BTreeSet<Group>,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub optimizer: AdamW,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_clip() -> f64 {
    1.0
}

/// Parameter groups updated in each stage.
pub fn freeze_policy(stage: Stage) -> BTreeSet<Group> {
    match stage {
        Stage::Prealign => [Group::Queries, Group::PatchMlp, Group::ImageFfn, Group::QueryProj].into(),
        Stage::Pretrain | Stage::Sft => Group::ALL.into(),
    }
}

impl StageSpec {
    /// Learning rates, batch sizes and loss weights of the original recipe.
    pub fn paper(stage: Stage) -> Self {
        let (alpha, lr, batch_size) = match stage {
            Stage::Prealign => (1.0, 4e-4, 512),
            Stage::Pretrain => (1.0, 4e-5, 512),
            Stage::Sft => (0.5, 4e-5, 256),
        };
        Self {
            stage,
            trainable: freeze_policy(stage),
            alpha,
            beta: 1.0,
            lr,
            batch_size,
            steps: 0,
            schedule: Schedule::Constant,
            optimizer: AdamW::default(),
            clip: 1.0,
        }
    }

    /// The recipe sized for one CPU core.
    pub fn desk(stage: Stage) -> Self {
        let (lr, steps) = match stage {
            Stage::Prealign => (3e-3, 300),
            Stage::Pretrain => (2e-3, 1000),
            Stage::Sft => (1e-3, 500),
        };
        Self {
            lr,
            batch_size: 8,
            steps,
            ..Self::paper(stage)
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::LinearDecay => self.lr * (1.0 - step as f64 / self.steps.max(1) as f64).max(0.0),
        }
    }

    pub fn is_trainable(&self, g: Group) -> bool {
        self.trainable.contains(&g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input(format!("{} batch_size must be positive", self.stage)));
        }
        if !(self.lr >= 0.0 && self.alpha >= 0.0 && self.beta >= 0.0 && self.clip > 0.0) {
            return Err(Error::Input(format!("{} needs lr, alpha, beta ≥ 0 and clip > 0", self.stage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub spec: StageSpec,
    /// Seed of the batch order; batches are a pure function of it and the step.
    pub data_seed: u64,
    /// Keyed by parameter name; present exactly for trainable parameters.
    pub moments: BTreeMap<String, Moments>,
    pub history: VecDeque<LossBreakdown>,
}

impl TrainState {
    pub fn new(model: &BreenModel, spec: StageSpec, data_seed: u64) -> Self {
        let moments = model
            .params
            .iter()
            .filter(|p| spec.is_trainable(p.group))
            .map(|p| (p.name.clone(), Moments::zeros(p.value.shape())))
            .collect();
        Self {
            step: 0,
            spec,
            data_seed,
            moments,
            history: VecDeque::new(),
        }
    }

    /// State for the following stage: moments of parameters that stay
    /// trainable carry over, newly trainable ones start at zero.
    pub fn next_stage(&self, model: &BreenModel, spec: StageSpec) -> Self {
        let mut next = TrainState::new(model, spec, self.data_seed);
        for (name, m) in next.moments.iter_mut() {
            if let Some(prev) = self.moments.get(name) {
                *m = prev.clone();
            }
        }
        next
    }

    fn record(&mut self, b: LossBreakdown) {
        if self.history.len() == HISTORY_CAP {
            self.history.pop_front();
        }
        self.history.push_back(b);
    }
}

/// A sample laid out for one stage, with its pooled targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub seq: AssembledSequence,
    /// `(stride, (G/s)² × D_t)` for every supervised stride.
    pub targets: Vec<(usize, Array<f32>)>,
    /// Sequence position whose next-token prediction is the qa answer, and
    /// the answer id.
    pub answer: Option<(usize, u32)>,
}

impl Example {
    pub fn image(&self) -> Image {
        let data = self.pixels.iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(self.height, self.width, 3, data).expect("example geometry is valid")
    }
}

/// Lay out samples for `stage`. Pre-align and pretrain use captions; SFT
/// uses the qa instruction and response.
pub fn prepare(model: &BreenModel, samples: &[Sample], stage: Stage) -> Result<Vec<Example>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n_img = model.image_tokens(s.height, s.width)?;
            let (seq, answer) = match stage {
                Stage::Sft => {
                    if s.mode != Mode::Qa {
                        return Err(Error::Input(format!("sample {i} is not a qa sample; sft needs qa data")));
                    }
                    let seq = model.assemble_sft(n_img, &s.instr_ids, &s.resp_ids)?;
                    let start = seq.len() - s.resp_ids.len();
                    (seq, s.answer_id().map(|a| (start, a)))
                }
                _ => (model.assemble_pretrain(n_img, &s.caption_ids, stage)?, None),
            };
            let targets = model
                .layout
                .targets
                .iter()
                .map(|t| Ok((t.stride, pool_grid(&s.teacher, t.stride)?)))
                .collect::<Result<Vec<_>>>()?;
            if let Some((_, tok)) = targets.first() {
                if tok.cols() != model.config.teacher_dim {
                    return Err(Error::Contract(format!(
                        "teacher features have {} dims, model projects to {}",
                        tok.cols(),
                        model.config.teacher_dim
                    )));
                }
            }
            Ok(Example {
                pixels: s.pixels.clone(),
                height: s.height,
                width: s.width,
                seq,
                targets,
                answer,
            })
        })
        .collect()
}

/// Dataset indices for one step: consecutive slices of a per-epoch
/// permutation derived from `(seed, stage, epoch)`.
pub fn batch_indices(seed: u64, stage: Stage, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let flat = step * batch as u64 + j;
        let (epoch, pos) = (flat / n as u64, (flat % n as u64) as usize);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, stage as u64), epoch));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos]);
    }
    out
}

/// Forward and backward for one example. The loss is scaled by `weight`
/// before differentiation; gradients are returned for trainable parameters.
pub fn example_gradients(
    model: &BreenModel,
    ex: &Example,
    spec: &StageSpec,
    weight: f64,
) -> Result<(LossBreakdown, Vec<Option<Array<f32>>>)> {
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape, &|g| spec.is_trainable(g));
    let image = ex.image();
    let out = model.forward_on(&mut tape, &vars, Some(&image), &ex.seq, false)?;
    let aligned = aligned_pairs(&out.predictions, &ex.targets)?;
    let losses = tape_losses(&mut tape, aligned, out.logits, &ex.seq.lm_labels, spec.alpha, spec.beta)?;
    let breakdown = losses.breakdown(&tape, spec.alpha, spec.beta);
    let scaled = tape.scale(losses.total, weight as f32);
    tape.backward(scaled)?;
    let grads = model
        .params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| {
            if spec.is_trainable(p.group) {
                Some(tape.take_grad(v).unwrap_or_else(|| Array::zeros(p.value.shape())))
            } else {
                None
            }
        })
        .collect();
    Ok((breakdown, grads))
}

fn aligned_pairs<V: Copy>(
    predictions: &[(usize, V)],
    targets: &[(usize, Array<f32>)],
) -> Result<Vec<(usize, V, Array<f32>)>> {
    predictions
        .iter()
        .map(|&(s, v)| {
            let t = targets
                .iter()
                .find(|(ts, _)| *ts == s)
                .ok_or_else(|| Error::Contract(format!("no target for stride {s}")))?;
            Ok((s, v, t.1.clone()))
        })
        .collect()
}

fn first_non_finite(b: &LossBreakdown) -> Option<&'static str> {
    [("align_fine", b.align_fine), ("align_coarse", b.align_coarse), ("lm", b.lm)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
}

/// Per-example gradients for a batch, in batch order, on up to `threads`
/// worker threads.
fn batch_gradients(
    model: &BreenModel,
    batch: &[&Example],
    spec: &StageSpec,
    threads: usize,
) -> Vec<Result<(LossBreakdown, Vec<Option<Array<f32>>>)>> {
    let weight = 1.0 / batch.len() as f64;
    let threads = threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return batch.iter().map(|ex| example_gradients(model, ex, spec, weight)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|ex| example_gradients(model, ex, spec, weight))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// One optimizer step on a batch. Gradients are summed in batch order, so
/// the result does not depend on `threads`.
pub fn train_step(model: &mut BreenModel, state: &mut TrainState, batch: &[&Example], threads: usize) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let spec = state.spec.clone();
    let mut parts = Vec::with_capacity(batch.len());
    let mut total: Vec<Option<Array<f32>>> = vec![None; model.params.len()];
    for res in batch_gradients(model, batch, &spec, threads) {
        let (b, grads) = res?;
        if let Some(component) = first_non_finite(&b) {
            return Err(Error::NonFinite {
                step: state.step,
                component: component.into(),
            });
        }
        parts.push(b);
        for (acc, g) in total.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    for (p, g) in model.params.iter().zip(&total) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: state.step,
                    component: format!("gradient of {}", p.name),
                });
            }
        }
    }
    clip_global_norm(&mut total, spec.clip);
    let lr = spec.lr_at(state.step);
    for (i, g) in total.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = model.params.at_mut(i);
        let mom = state
            .moments
            .get_mut(&p.name)
            .ok_or_else(|| Error::Contract(format!("no optimizer moments for {}", p.name)))?;
        spec.optimizer.update(&mut p.value, g, mom, lr);
    }
    let breakdown = LossBreakdown::mean(&parts)?;
    state.record(breakdown);
    state.step += 1;
    Ok(breakdown)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSONL metrics file; appended to.
    pub metrics: Option<PathBuf>,
    /// Final checkpoint path; periodic ones go next to it.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    pub threads: usize,
    /// Stop early once this many steps are done (the checkpoint is still written).
    pub stop_after: Option<u64>,
}

/// `dir/name.brck` → `dir/name-step<N>.brck`
pub fn periodic_path(path: &Path, step: u64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("brck");
    path.with_file_name(format!("{stem}-step{step}.{ext}"))
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    step: u64,
    stage: &'a str,
    align_fine: f64,
    align_coarse: f64,
    lm: f64,
    total: f64,
}

/// Run the remaining steps of `state.spec`, returning this call's losses.
pub fn run_stage(model: &mut BreenModel, state: &mut TrainState, data: &[Example], opts: &RunOptions) -> Result<Vec<LossBreakdown>> {
    state.spec.validate()?;
    if data.is_empty() && state.step < state.spec.steps {
        return Err(Error::Input("training data is empty".into()));
    }
    if let Some(bad) = data.iter().position(|ex| ex.seq.stage != state.spec.stage) {
        return Err(Error::Contract(format!(
            "example {bad} is laid out for {}, stage is {}",
            data[bad].seq.stage, state.spec.stage
        )));
    }
    let mut metrics = match &opts.metrics {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    let end = opts.stop_after.map_or(state.spec.steps, |s| s.min(state.spec.steps));
    let mut out = Vec::new();
    while state.step < end {
        let idx = batch_indices(state.data_seed, state.spec.stage, state.step, state.spec.batch_size, data.len());
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        let step = state.step;
        let b = train_step(model, state, &batch, opts.threads.max(1))?;
        if let (Some(w), Some(p)) = (metrics.as_mut(), &opts.metrics) {
            let rec = MetricsRecord {
                step,
                stage: state.spec.stage.as_str(),
                align_fine: b.align_fine,
                align_coarse: b.align_coarse,
                lm: b.lm,
                total: b.total,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(p, e))?;
        }
        out.push(b);
        if let (Some(every), Some(path)) = (opts.checkpoint_every, &opts.checkpoint) {
            if every > 0 && state.step % every == 0 && state.step < state.spec.steps {
                save_checkpoint(model, state, &periodic_path(path, state.step))?;
            }
        }
    }
    if let (Some(w), Some(p)) = (metrics.as_mut(), &opts.metrics) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(model, state, path)?;
    }
    Ok(out)
}

/// Mean losses over `data` without updating anything.
pub fn evaluate(model: &BreenModel, data: &[Example], alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let mut parts = Vec::with_capacity(data.len());
    for ex in data {
        let mut tape = Tape::<f32>::new();
        let vars = model.bind(&mut tape, &|_| false);
        let image = ex.image();
        let out = model.forward_on(&mut tape, &vars, Some(&image), &ex.seq, false)?;
        let aligned = aligned_pairs(&out.predictions, &ex.targets)?;
        let l = tape_losses(&mut tape, aligned, out.logits, &ex.seq.lm_labels, alpha, beta)?;
        parts.push(l.breakdown(&tape, alpha, beta));
    }
    LossBreakdown::mean(&parts)
}

/// Fraction of qa examples whose answer token is the arg-max prediction at
/// the response start.
pub fn qa_accuracy(model: &BreenModel, data: &[Example]) -> Result<f64> {
    Ok(qa_scores(model, data)?.answer)
}

/// Held-out qa scores from one forward pass per example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaScores {
    /// Arg-max at the answer position equals the answer word.
    pub answer: f64,
    /// Arg-max accuracy over every supervised response token, end-of-sequence included.
    pub response_tokens: f64,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

pub fn qa_scores(model: &BreenModel, data: &[Example]) -> Result<QaScores> {
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut tok_ok, mut tok_n) = (0usize, 0usize);
    for ex in data {
        let Some((pos, answer)) = ex.answer else { continue };
        let out = model.forward(Some(&ex.image()), &ex.seq, false)?;
        correct += (argmax(out.logits.row(pos)) as u32 == answer) as usize;
        total += 1;
        for (i, &label) in ex.seq.lm_labels.iter().enumerate() {
            if label >= 0 {
                tok_ok += (argmax(out.logits.row(i)) as i64 == label) as usize;
                tok_n += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Input("no qa examples to score".into()));
    }
    Ok(QaScores {
        answer: correct as f64 / total as f64,
        response_tokens: tok_ok as f64 / tok_n.max(1) as f64,
    })
}
