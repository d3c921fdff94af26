//! The desk-scale learning run: synthetic data, three stages, held-out qa.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LossBreakdown;
use crate::model::{BreenConfig, BreenModel};
use crate::sequence::Stage;
use crate::synthdata::{mix_seed, Dataset, Mode, Vocab};
use crate::teacher::{make_teacher, TeacherSpec};
use crate::trainpipe::{evaluate, prepare, qa_scores, run_stage, RunOptions, StageSpec, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskRecipe {
    pub config: BreenConfig,
    pub stages: Vec<StageSpec>,
    pub teacher: TeacherSpec,
    pub n_caption: usize,
    pub n_qa: usize,
    pub n_heldout: usize,
    /// Training examples scored before and after each stage.
    pub n_probe: usize,
    pub threads: usize,
}

impl DeskRecipe {
    pub fn new(seed: u64) -> Self {
        Self {
            config: BreenConfig {
                seed,
                ..BreenConfig::desk()
            },
            stages: Stage::ALL.iter().map(|&s| StageSpec::desk(s)).collect(),
            teacher: TeacherSpec::synthetic(0x7eac, 32),
            n_caption: 512,
            n_qa: 256,
            n_heldout: 64,
            n_probe: 32,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub before: LossBreakdown,
    pub after: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub qa_accuracy: f64,
    /// Includes the trivially predictable end-of-sequence token.
    pub response_token_accuracy: f64,
}

impl DeskReport {
    pub fn stage(&self, s: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|r| r.stage == s)
    }
}

/// Generate the data for `seed`, train every stage in order, then score
/// held-out qa samples.
pub fn run_desk(recipe: &DeskRecipe) -> Result<(BreenModel, DeskReport)> {
    let seed = recipe.config.seed;
    let vocab = Vocab::default();
    let teacher = make_teacher(&recipe.teacher, recipe.config.channels)?;
    let captions = Dataset::generate(mix_seed(seed, 1), recipe.n_caption, Mode::Caption, &vocab, teacher.as_ref())?;
    let qa = Dataset::generate(mix_seed(seed, 2), recipe.n_qa, Mode::Qa, &vocab, teacher.as_ref())?;
    let heldout = Dataset::generate(mix_seed(seed, 3), recipe.n_heldout, Mode::Qa, &vocab, teacher.as_ref())?;

    let mut model = BreenModel::new(recipe.config.clone())?;
    let mut state: Option<TrainState> = None;
    let mut reports = Vec::new();
    for spec in &recipe.stages {
        let samples = if spec.stage == Stage::Sft { &qa.samples } else { &captions.samples };
        let data = prepare(&model, samples, spec.stage)?;
        let probe = &data[..recipe.n_probe.min(data.len())];
        let before = evaluate(&model, probe, spec.alpha, spec.beta)?;
        let mut st = match &state {
            Some(prev) => prev.next_stage(&model, spec.clone()),
            None => TrainState::new(&model, spec.clone(), mix_seed(seed, 4)),
        };
        let t = Instant::now();
        run_stage(
            &mut model,
            &mut st,
            &data,
            &RunOptions {
                threads: recipe.threads,
                ..RunOptions::default()
            },
        )?;
        let seconds = t.elapsed().as_secs_f64();
        let after = evaluate(&model, probe, spec.alpha, spec.beta)?;
        reports.push(StageReport {
            stage: spec.stage,
            before,
            after,
            seconds,
        });
        state = Some(st);
    }
    let held = prepare(&model, &heldout.samples, Stage::Sft)?;
    let scores = qa_scores(&model, &held)?;
    Ok((
        model,
        DeskReport {
            seed,
            stages: reports,
            qa_accuracy: scores.answer,
            response_token_accuracy: scores.response_tokens,
        },
    ))
}
