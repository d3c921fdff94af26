//! The BREEN toy transformer.
//!
//! Image patches go through a two-layer MLP, learnable query blocks sit
//! between image and text, and every decoder layer routes image and query
//! positions to a separate FFN expert. Projected query outputs are what the
//! alignment loss compares against pooled teacher features.

mod config;
mod params;
mod scheme;

pub use config::BreenConfig;
pub use params::{
    init_image_expert, init_params, proj_prefix, query_name, Group, Param, ParamStore, FFN_PARTS, INIT_STD,
};
pub use scheme::{query_layout, scheme_registry, AlignScheme, AvgPool, Concat, QueryLayout, SchemeCtor, TargetSource};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numcore::{Array, Real, Tape, Var, NORM_EPS};
use crate::sequence::{
    assemble_pretrain, assemble_sft, modality_route_mask, AssembledSequence, QuerySlot, Role, Segment, Stage,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BreenModel<T = f32> {
    pub config: BreenConfig,
    pub layout: QueryLayout,
    pub params: ParamStore<T>,
}

/// Forward results that are still nodes on the caller's tape.
pub struct TapeOutput<T> {
    /// `L × vocab`
    pub logits: Var,
    /// Projected query outputs, one per query block, as `(stride, node)`.
    pub query_out: Vec<(usize, Var)>,
    /// The prediction compared with each stride's target.
    pub predictions: Vec<(usize, Var)>,
    /// `[layer][head]` attention weights when captured.
    pub attentions: Option<Vec<Vec<Array<T>>>>,
    /// Residual stream after each layer when captured.
    pub hidden: Option<Vec<Array<T>>>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<T = f32> {
    pub logits: Array<T>,
    pub query_out: Vec<(usize, Array<T>)>,
    pub predictions: Vec<(usize, Array<T>)>,
    pub attentions: Option<Vec<Vec<Array<T>>>>,
    pub hidden: Option<Vec<Array<T>>>,
    pub roles: Vec<Role>,
    pub query_slots: Vec<QuerySlot>,
}

/// Split an `H × W × C` image into row-major `P × P` patches, each flattened
/// in `(y, x, c)` order.
pub fn patchify<T: Real>(image: &Image, p: usize) -> Result<Array<T>> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Geometry(format!("patch {p} does not tile a {h}x{w} image")));
    }
    let (rows, cols) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * c);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..p {
                let start = ((pr * p + y) * w + pc * p) * c;
                out.extend(image.data()[start..start + p * c].iter().map(|&v| T::lit(v as f64)));
            }
        }
    }
    Array::new(vec![rows * cols, p * p * c], out)
}

impl BreenModel<f32> {
    pub fn new(config: BreenConfig) -> Result<Self> {
        config.validate()?;
        let layout = query_layout(&config)?;
        let params = init_params(&config, &layout);
        Ok(Self { config, layout, params })
    }
}

impl<T: Real> BreenModel<T> {
    pub fn cast<U: Real>(&self) -> BreenModel<U> {
        BreenModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// The same network with the image expert removed; every position then
    /// runs the text FFN.
    pub fn without_image_expert(&self) -> Self {
        let mut params = ParamStore::new();
        for p in self.params.iter().filter(|p| p.group != Group::ImageFfn) {
            params.push(p.name.clone(), p.group, p.value.clone());
        }
        Self {
            config: BreenConfig {
                image_expert: false,
                ..self.config.clone()
            },
            layout: self.layout.clone(),
            params,
        }
    }

    pub fn image_tokens(&self, height: usize, width: usize) -> Result<usize> {
        let p = self.config.patch;
        if height % p != 0 || width % p != 0 {
            return Err(Error::Geometry(format!("patch {p} does not tile a {height}x{width} image")));
        }
        Ok((height / p) * (width / p))
    }

    pub fn assemble_pretrain(&self, image_tokens: usize, caption: &[u32], stage: Stage) -> Result<AssembledSequence> {
        assemble_pretrain(image_tokens, &self.layout.blocks, caption, stage)
    }

    pub fn assemble_sft(&self, image_tokens: usize, instr: &[u32], resp: &[u32]) -> Result<AssembledSequence> {
        assemble_sft(image_tokens, &self.layout.blocks, instr, resp)
    }

    /// Put every parameter on the tape as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &dyn Fn(Group) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(p.group)))
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
    }

    /// Text-only sequences carry no queries; anything else must hold
    /// exactly the configured query blocks.
    fn check_layout(&self, seq: &AssembledSequence) -> Result<()> {
        if seq.query_slots.is_empty() && seq.image_positions().is_empty() {
            return Ok(());
        }
        let got: Vec<(usize, usize)> = seq.query_slots.iter().map(|s| (s.stride, s.range.len())).collect();
        let want: Vec<(usize, usize)> = self.layout.blocks.iter().map(|b| (b.stride, b.len)).collect();
        if got != want {
            return Err(Error::Contract(format!(
                "sequence query slots {got:?} do not match the configured blocks {want:?}"
            )));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape<T>, vars: &[Var], image: Option<&Image>, seq: &AssembledSequence) -> Result<Var> {
        let mut parts = Vec::with_capacity(seq.segments.len());
        for seg in &seq.segments {
            let part = match seg {
                Segment::Image { len } => {
                    let image = image.ok_or_else(|| Error::Contract("sequence has image tokens but no image".into()))?;
                    let patches = patchify::<T>(image, self.config.patch)?;
                    if patches.rows() != *len {
                        return Err(Error::Contract(format!(
                            "image yields {} patches, sequence expects {len}",
                            patches.rows()
                        )));
                    }
                    self.patch_embed(tape, vars, patches)?
                }
                Segment::Query { stride, .. } => self.var(vars, &query_name(*stride))?,
                Segment::Text { ids, .. } => {
                    let vocab = self.config.vocab_size;
                    if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
                        return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab}")));
                    }
                    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                    let emb = self.var(vars, "tok_emb")?;
                    tape.gather_rows(emb, &idx)?
                }
            };
            parts.push(part);
        }
        tape.concat_rows(&parts)
    }

    /// Two affine maps with a SiLU in between, applied to each patch row.
    pub fn patch_embed(&self, tape: &mut Tape<T>, vars: &[Var], patches: Array<T>) -> Result<Var> {
        let x = tape.constant(patches);
        let h = tape.matmul(x, self.var(vars, "patch.w1")?)?;
        let h = tape.add_row(h, self.var(vars, "patch.b1")?)?;
        let h = tape.silu(h);
        let h = tape.matmul(h, self.var(vars, "patch.w2")?)?;
        tape.add_row(h, self.var(vars, "patch.b2")?)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        layer: usize,
        capture: Option<&mut Vec<Vec<Array<T>>>>,
    ) -> Result<Var> {
        let pre = format!("layers.{layer}");
        let c = &self.config;
        let q = tape.matmul(x, self.var(vars, &format!("{pre}.wq"))?)?;
        let k = tape.matmul(x, self.var(vars, &format!("{pre}.wk"))?)?;
        let v = tape.matmul(x, self.var(vars, &format!("{pre}.wv"))?)?;
        let (q, k) = if c.rope {
            (tape.rope(q, c.n_heads, c.rope_base)?, tape.rope(k, c.n_heads, c.rope_base)?)
        } else {
            (q, k)
        };
        let o = tape.causal_attention(q, k, v, c.n_heads)?;
        if let Some(out) = capture {
            out.push(tape.attention_weights(o).expect("attention node"));
        }
        tape.matmul(o, self.var(vars, &format!("{pre}.wo"))?)
    }

    /// Gated FFN: `(silu(x·W_gate) ⊙ x·W_up)·W_down`.
    fn ffn(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, prefix: &str) -> Result<Var> {
        let g = tape.matmul(x, self.var(vars, &format!("{prefix}.w_gate"))?)?;
        let u = tape.matmul(x, self.var(vars, &format!("{prefix}.w_up"))?)?;
        let g = tape.silu(g);
        let a = tape.mul(g, u)?;
        tape.matmul(a, self.var(vars, &format!("{prefix}.w_down"))?)
    }

    /// Evaluate exactly one expert per position.
    pub fn ffn_route(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, layer: usize, route: &[bool]) -> Result<Var> {
        let pre = format!("layers.{layer}");
        let text = format!("{pre}.text_ffn");
        if !self.config.image_expert {
            return self.ffn(tape, vars, x, &text);
        }
        let image = format!("{pre}.image_ffn");
        let (img_idx, txt_idx): (Vec<usize>, Vec<usize>) = (0..route.len()).partition(|&i| route[i]);
        if txt_idx.is_empty() {
            return self.ffn(tape, vars, x, &image);
        }
        if img_idx.is_empty() {
            return self.ffn(tape, vars, x, &text);
        }
        let xi = tape.gather_rows(x, &img_idx)?;
        let xt = tape.gather_rows(x, &txt_idx)?;
        let yi = self.ffn(tape, vars, xi, &image)?;
        let yt = self.ffn(tape, vars, xt, &text)?;
        tape.scatter_rows(vec![(yi, img_idx), (yt, txt_idx)], route.len())
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        image: Option<&Image>,
        seq: &AssembledSequence,
        capture: bool,
    ) -> Result<TapeOutput<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract("parameter bindings do not match the model".into()));
        }
        if seq.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        self.check_layout(seq)?;
        let route = modality_route_mask(&seq.roles);
        let mut attentions = capture.then(Vec::new);
        let mut hidden = capture.then(Vec::new);
        let mut x = self.embed(tape, vars, image, seq)?;
        for l in 0..self.config.n_layers {
            let pre = format!("layers.{l}");
            let h = tape.rms_norm(x, self.var(vars, &format!("{pre}.attn_norm"))?, NORM_EPS)?;
            let a = self.attention(tape, vars, h, l, attentions.as_mut())?;
            x = tape.add(x, a)?;
            let h = tape.rms_norm(x, self.var(vars, &format!("{pre}.ffn_norm"))?, NORM_EPS)?;
            let f = self.ffn_route(tape, vars, h, l, &route)?;
            x = tape.add(x, f)?;
            if let Some(hs) = hidden.as_mut() {
                hs.push(tape.value(x).clone());
            }
        }
        let xf = tape.rms_norm(x, self.var(vars, "final_norm")?, NORM_EPS)?;
        let logits = tape.matmul(xf, self.var(vars, "lm_head")?)?;

        let mut query_out = Vec::with_capacity(seq.query_slots.len());
        for slot in &seq.query_slots {
            let idx: Vec<usize> = slot.range.clone().collect();
            let rows = tape.gather_rows(xf, &idx)?;
            let pre = proj_prefix(&self.config, slot.stride);
            let y = tape.matmul(rows, self.var(vars, &format!("{pre}.w"))?)?;
            let y = tape.add_row(y, self.var(vars, &format!("{pre}.b"))?)?;
            query_out.push((slot.stride, y));
        }
        let mut predictions = Vec::with_capacity(self.layout.targets.len());
        for t in self.layout.targets.iter().filter(|_| !query_out.is_empty()) {
            let (_, out) = query_out[t.block];
            let pred = if t.pool == 1 {
                out
            } else {
                let side = self.config.teacher_grid / self.layout.blocks[t.block].stride;
                tape.pool_tokens(out, side, t.pool)?
            };
            predictions.push((t.stride, pred));
        }
        Ok(TapeOutput {
            logits,
            query_out,
            predictions,
            attentions,
            hidden,
        })
    }

    /// Inference forward on a private tape.
    pub fn forward(&self, image: Option<&Image>, seq: &AssembledSequence, capture: bool) -> Result<ModelOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, &|_| false);
        let out = self.forward_on(&mut tape, &vars, image, seq, capture)?;
        let take = |v: &[(usize, Var)]| v.iter().map(|&(s, n)| (s, tape.value(n).clone())).collect();
        Ok(ModelOutput {
            logits: tape.value(out.logits).clone(),
            query_out: take(&out.query_out),
            predictions: take(&out.predictions),
            attentions: out.attentions,
            hidden: out.hidden,
            roles: seq.roles.clone(),
            query_slots: seq.query_slots.clone(),
        })
    }
}
