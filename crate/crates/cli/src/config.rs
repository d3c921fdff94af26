//! JSON run configuration with `paper` / `desk` presets.

use std::path::{Path, PathBuf};

use breen::model::BreenConfig;
use breen::recipe::DeskRecipe;
use breen::sequence::Stage;
use breen::trainpipe::StageSpec;
use breen::teacher::TeacherSpec;
use breen::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Learning rates, batch sizes and loss weights of the original recipe,
    /// kept for reference; step counts are left at zero.
    Paper,
    /// The single-core recipe.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Caption dataset for pre-align and pretrain.
    pub dataset: PathBuf,
    /// QA dataset for SFT.
    pub sft_dataset: PathBuf,
    /// Directory receiving `<stage>.brck` and periodic checkpoints.
    pub checkpoints: PathBuf,
    /// JSONL metrics log, appended to.
    pub metrics: PathBuf,
    pub heatmaps: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyFlags {
    /// Suites that must pass before training starts.
    #[serde(default)]
    pub before_train: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub defaults: Preset,
    pub model: BreenConfig,
    pub stages: Vec<StageSpec>,
    pub teacher: TeacherSpec,
    pub paths: Paths,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub verify: VerifyFlags,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = DeskRecipe::new(0);
        let stages = match p {
            Preset::Desk => desk.stages,
            Preset::Paper => Stage::ALL.iter().map(|&s| StageSpec::paper(s)).collect(),
        };
        Self {
            defaults: p,
            model: desk.config,
            stages,
            teacher: desk.teacher,
            paths: Paths {
                dataset: "data/caption.brds".into(),
                sft_dataset: "data/qa.brds".into(),
                checkpoints: "runs/checkpoints".into(),
                metrics: "runs/metrics.jsonl".into(),
                heatmaps: "runs/heatmaps".into(),
            },
            checkpoint_every: Some(100),
            verify: VerifyFlags::default(),
        }
    }

    /// Parse JSON; fields left out are taken from the preset named by
    /// `defaults` (desk when absent). Objects merge key by key, arrays are
    /// replaced whole.
    pub fn parse(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        if !user.is_object() {
            return Err(Error::Input("config must be a JSON object".into()));
        }
        let preset = match user.get("defaults") {
            None => Preset::Desk,
            Some(v) => serde_json::from_value(v.clone())?,
        };
        let mut merged = serde_json::to_value(Self::preset(preset))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Input("config has no stages".into()));
        }
        for w in self.stages.windows(2) {
            if w[0].stage >= w[1].stage {
                return Err(Error::Input(format!(
                    "stages must be in order prealign < pretrain < sft, found {} before {}",
                    w[0].stage, w[1].stage
                )));
            }
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.teacher.dim != self.model.teacher_dim {
            return Err(Error::Input(format!(
                "teacher dim {} differs from model teacher_dim {}",
                self.teacher.dim, self.model.teacher_dim
            )));
        }
        Ok(())
    }

    pub fn stage(&self, s: Stage) -> Result<&StageSpec> {
        self.stages
            .iter()
            .find(|x| x.stage == s)
            .ok_or_else(|| Error::Input(format!("config has no {s} stage")))
    }

    pub fn checkpoint_for(&self, s: Stage) -> PathBuf {
        self.paths.checkpoints.join(format!("{s}.brck"))
    }

    pub fn dataset_for(&self, s: Stage) -> &Path {
        match s {
            Stage::Sft => &self.paths.sft_dataset,
            _ => &self.paths.dataset,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
