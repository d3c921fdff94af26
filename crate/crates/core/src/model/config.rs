use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::teacher::{GranularityOrder, TEACHER_PATCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreenConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of each gated FFN expert.
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    /// Student patch side `P`.
    pub patch: usize,
    pub channels: usize,
    pub canvas: usize,
    /// Teacher grid side `G`.
    pub teacher_grid: usize,
    pub teacher_dim: usize,
    /// Pooling strides of the supervised granularities; empty disables
    /// queries and the alignment loss altogether.
    pub strides: Vec<usize>,
    #[serde(default)]
    pub order: GranularityOrder,
    #[serde(default = "default_scheme")]
    pub align_scheme: String,
    #[serde(default = "yes")]
    pub image_expert: bool,
    #[serde(default)]
    pub per_granularity_proj: bool,
    /// Rotary position encoding on queries and keys.
    #[serde(default = "yes")]
    pub rope: bool,
    pub rope_base: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

fn default_scheme() -> String {
    "concat".into()
}

fn yes() -> bool {
    true
}

impl BreenConfig {
    /// Small model that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 128,
            vocab_size: 64,
            patch: 28,
            channels: 3,
            canvas: 336,
            teacher_grid: 24,
            teacher_dim: 32,
            strides: vec![3, 4],
            order: GranularityOrder::FineFirst,
            align_scheme: default_scheme(),
            image_expert: true,
            per_granularity_proj: false,
            rope: true,
            rope_base: 100.0,
            alpha: 1.0,
            beta: 1.0,
            seed: 0,
        }
    }

    /// Tiny geometry for 64-bit gradient checks: a 8×16 image with `P = 4`
    /// gives 8 image tokens, and a `G = 12` teacher grid.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 24,
            vocab_size: 16,
            patch: 4,
            channels: 3,
            canvas: 16,
            teacher_grid: 12,
            teacher_dim: 8,
            strides: vec![3, 4],
            rope_base: 100.0,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.ffn_hidden == 0 || self.vocab_size == 0 || self.teacher_dim == 0 || self.channels == 0 {
            return bad("ffn_hidden, vocab_size, teacher_dim and channels must be positive".into());
        }
        if self.patch == 0 || self.canvas % self.patch != 0 {
            return Err(Error::Geometry(format!("patch {} does not divide canvas {}", self.patch, self.canvas)));
        }
        for &s in &self.strides {
            if s == 0 || self.teacher_grid % s != 0 {
                return Err(Error::Geometry(format!("stride {s} does not divide teacher grid {}", self.teacher_grid)));
            }
        }
        let mut sorted = self.strides.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.strides.len() {
            return bad(format!("duplicate strides in {:?}", self.strides));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("loss weights must be non-negative, got α={} β={}", self.alpha, self.beta));
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }

    /// Canvas pixels per teacher cell; 14 for the 336 / 24 geometry.
    pub fn teacher_patch(&self) -> usize {
        if self.teacher_grid == 0 {
            TEACHER_PATCH
        } else {
            (self.canvas / self.teacher_grid).max(1)
        }
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
