use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::BreenConfig;
use super::scheme::QueryLayout;
use crate::error::{Error, Result};
use crate::numcore::{Array, Real};

pub const INIT_STD: f64 = 0.02;

/// Parameter groups; freeze policies are stated in these terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    TokenEmbedding,
    PatchMlp,
    Queries,
    Attention,
    Norms,
    TextFfn,
    ImageFfn,
    QueryProj,
    LmHead,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::TokenEmbedding,
        Group::PatchMlp,
        Group::Queries,
        Group::Attention,
        Group::Norms,
        Group::TextFfn,
        Group::ImageFfn,
        Group::QueryProj,
        Group::LmHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::TokenEmbedding => "token_embedding",
            Group::PatchMlp => "patch_mlp",
            Group::Queries => "queries",
            Group::Attention => "attention",
            Group::Norms => "norms",
            Group::TextFfn => "text_ffn",
            Group::ImageFfn => "image_ffn",
            Group::QueryProj => "query_proj",
            Group::LmHead => "lm_head",
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Array<T>,
}

/// Named parameters in a fixed creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, group: Group, value: Array<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over the names, shapes and exact values of one group.
    pub fn group_digest(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replace values by name; every stored parameter must be supplied with
    /// its existing shape.
    pub fn load_from(&mut self, named: Vec<(String, Array<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} arrays, found {}", self.params.len(), named.len()),
            ));
        }
        for (name, value) in named {
            let p = self
                .get_mut(&name)
                .ok_or_else(|| Error::format("parameters", format!("unknown parameter {name}")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::format(
                    "parameters",
                    format!("{name} has shape {:?}, expected {:?}", value.shape(), p.value.shape()),
                ));
            }
            p.value = value;
        }
        Ok(())
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const FFN_PARTS: [&str; 3] = ["w_gate", "w_up", "w_down"];

pub fn query_name(stride: usize) -> String {
    format!("queries.s{stride}")
}

pub fn proj_prefix(config: &BreenConfig, stride: usize) -> String {
    if config.per_granularity_proj {
        format!("query_proj.s{stride}")
    } else {
        "query_proj".into()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Array<f32> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0f32, std as f32).expect("valid std");
        Array::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut self.rng)).collect()).expect("shape matches")
    }
}

/// Scaled-normal initialization; the image expert then copies the text FFN.
pub fn init_params(config: &BreenConfig, layout: &QueryLayout) -> ParamStore<f32> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let d = config.d_model;
    let h = config.ffn_hidden;
    let out_std = INIT_STD / ((2 * config.n_layers.max(1)) as f64).sqrt();
    let patch_in = config.patch * config.patch * config.channels;
    let mut p = ParamStore::new();

    p.push("tok_emb", Group::TokenEmbedding, init.normal(&[config.vocab_size, d], INIT_STD));
    p.push("patch.w1", Group::PatchMlp, init.normal(&[patch_in, d], INIT_STD));
    p.push("patch.b1", Group::PatchMlp, Array::zeros(&[d]));
    p.push("patch.w2", Group::PatchMlp, init.normal(&[d, d], INIT_STD));
    p.push("patch.b2", Group::PatchMlp, Array::zeros(&[d]));
    for b in &layout.blocks {
        p.push(query_name(b.stride), Group::Queries, init.normal(&[b.len, d], INIT_STD));
    }
    for l in 0..config.n_layers {
        let pre = format!("layers.{l}");
        p.push(format!("{pre}.attn_norm"), Group::Norms, Array::filled(&[d], 1.0));
        for w in ["wq", "wk", "wv"] {
            p.push(format!("{pre}.{w}"), Group::Attention, init.normal(&[d, d], INIT_STD));
        }
        p.push(format!("{pre}.wo"), Group::Attention, init.normal(&[d, d], out_std));
        p.push(format!("{pre}.ffn_norm"), Group::Norms, Array::filled(&[d], 1.0));
        let gate = init.normal(&[d, h], INIT_STD);
        let up = init.normal(&[d, h], INIT_STD);
        let down = init.normal(&[h, d], out_std);
        for (part, w) in FFN_PARTS.iter().zip([&gate, &up, &down]) {
            p.push(format!("{pre}.text_ffn.{part}"), Group::TextFfn, w.clone());
        }
        if config.image_expert {
            // Filled from the text FFN by `init_image_expert` below.
            for (part, w) in FFN_PARTS.iter().zip([gate, up, down]) {
                p.push(format!("{pre}.image_ffn.{part}"), Group::ImageFfn, Array::zeros(w.shape()));
            }
        }
    }
    p.push("final_norm", Group::Norms, Array::filled(&[d], 1.0));
    let mut heads: Vec<usize> = layout.blocks.iter().map(|b| b.stride).collect();
    if !config.per_granularity_proj {
        heads.truncate(1);
    }
    for s in heads {
        let pre = proj_prefix(config, s);
        p.push(format!("{pre}.w"), Group::QueryProj, init.normal(&[d, config.teacher_dim], INIT_STD));
        p.push(format!("{pre}.b"), Group::QueryProj, Array::zeros(&[config.teacher_dim]));
    }
    p.push("lm_head", Group::LmHead, init.normal(&[d, config.vocab_size], INIT_STD));
    if config.image_expert {
        init_image_expert(&mut p, config.n_layers).expect("both experts exist");
    }
    p
}

/// Copy every layer's text FFN into its image expert.
pub fn init_image_expert<T: Real>(params: &mut ParamStore<T>, n_layers: usize) -> Result<()> {
    for l in 0..n_layers {
        for part in FFN_PARTS {
            let src = params
                .get(&format!("layers.{l}.text_ffn.{part}"))
                .ok_or_else(|| Error::Contract(format!("layer {l} has no text FFN")))?
                .value
                .clone();
            let dst = params
                .get_mut(&format!("layers.{l}.image_ffn.{part}"))
                .ok_or_else(|| Error::Contract(format!("layer {l} has no image expert")))?;
            dst.value = src;
        }
    }
    Ok(())
}
