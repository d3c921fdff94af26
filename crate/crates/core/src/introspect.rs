//! Attention heatmaps: scores from one output position to the query tokens
//! or the image tokens, unflattened and block-expanded into pixel space.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize, Image};
use crate::model::ModelOutput;
use crate::numcore::Real;
use crate::sequence::Role;
use crate::teacher::{decode_float_grid, encode_float_grid, letterbox, HEATMAP_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    MinMax,
}

/// A `rows × cols` score grid whose cells each cover `factor × factor`
/// pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<f32>,
    pub factor: usize,
    pub normalization: Normalization,
}

impl Heatmap {
    pub fn new(rows: usize, cols: usize, grid: Vec<f32>, factor: usize) -> Result<Self> {
        if rows * cols != grid.len() || rows == 0 || cols == 0 || factor == 0 {
            return Err(Error::Geometry(format!(
                "{} scores do not form a {rows}x{cols} grid with factor {factor}",
                grid.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            grid,
            factor,
            normalization: Normalization::None,
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.grid[r * self.cols + c]
    }

    pub fn height(&self) -> usize {
        self.rows * self.factor
    }

    pub fn width(&self) -> usize {
        self.cols * self.factor
    }

    /// Nearest-neighbour block expansion, row-major `height × width`.
    pub fn upsampled(&self) -> Vec<f32> {
        let w = self.width();
        let mut out = Vec::with_capacity(self.height() * w);
        for y in 0..self.height() {
            let r = y / self.factor;
            out.extend((0..w).map(|x| self.at(r, x / self.factor)));
        }
        out
    }

    /// Rescale to `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max(&self) -> Heatmap {
        let lo = self.grid.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.grid.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        let grid = if range > 0.0 {
            self.grid.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.grid.len()]
        };
        Heatmap {
            grid,
            normalization: Normalization::MinMax,
            ..self.clone()
        }
    }
}

/// The layer the visualizations default to.
pub fn middle_layer(n_layers: usize) -> usize {
    n_layers / 2
}

fn head_mean<T: Real>(out: &ModelOutput<T>, token_idx: usize, layer: usize) -> Result<Vec<f64>> {
    let maps = out
        .attentions
        .as_ref()
        .ok_or_else(|| Error::Contract("attention was not captured in this forward".into()))?;
    let heads = maps
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range; model has {}", maps.len())))?;
    let l = out.roles.len();
    if token_idx >= l {
        return Err(Error::Input(format!("token {token_idx} out of range for length {l}")));
    }
    let mut acc = vec![0.0; l];
    for h in heads {
        for (a, &v) in acc.iter_mut().zip(h.row(token_idx)) {
            *a += v.as_f64();
        }
    }
    let n = heads.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

fn check_visibility<T: Real>(out: &ModelOutput<T>, token_idx: usize) -> Result<()> {
    let first = out
        .query_slots
        .iter()
        .map(|s| s.range.start)
        .min()
        .ok_or_else(|| Error::Contract("sequence has no query tokens".into()))?;
    if token_idx < first {
        return Err(Error::Contract(format!(
            "causal visibility: token {token_idx} precedes the first query at {first}"
        )));
    }
    Ok(())
}

/// Head-averaged attention from `token_idx` to the queries of `stride`, in
/// pooled-grid row-major order.
pub fn attention_to_queries<T: Real>(out: &ModelOutput<T>, token_idx: usize, layer: usize, stride: usize) -> Result<Vec<f32>> {
    check_visibility(out, token_idx)?;
    let slot = out
        .query_slots
        .iter()
        .find(|s| s.stride == stride)
        .ok_or_else(|| Error::Input(format!("no query block for stride {stride}")))?;
    let row = head_mean(out, token_idx, layer)?;
    Ok(row[slot.range.clone()].iter().map(|&v| v as f32).collect())
}

/// Unflatten `(G/s)²` scores, expand each by `s` onto the `G × G` teacher
/// grid, with `teacher_patch` pixels per teacher cell.
pub fn reconstruct_heatmap(scores: &[f32], stride: usize, teacher_grid: usize, teacher_patch: usize) -> Result<Heatmap> {
    if stride == 0 || teacher_grid % stride != 0 {
        return Err(Error::Geometry(format!("stride {stride} does not divide grid {teacher_grid}")));
    }
    let side = teacher_grid / stride;
    if scores.len() != side * side {
        return Err(Error::Geometry(format!(
            "{} scores cannot be a {side}x{side} grid for stride {stride}",
            scores.len()
        )));
    }
    let mut grid = Vec::with_capacity(teacher_grid * teacher_grid);
    for r in 0..teacher_grid {
        grid.extend((0..teacher_grid).map(|c| scores[(r / stride) * side + c / stride]));
    }
    Heatmap::new(teacher_grid, teacher_grid, grid, teacher_patch)
}

/// Head-averaged attention from `token_idx` to every image token, laid out
/// on the `(H/P) × (W/P)` patch grid and expanded by `P`.
pub fn attention_to_image<T: Real>(
    out: &ModelOutput<T>,
    token_idx: usize,
    layer: usize,
    patch_rows: usize,
    patch_cols: usize,
    patch: usize,
) -> Result<Heatmap> {
    if out.query_slots.is_empty() {
        // Without queries the output must at least see every image token.
        let last = out.roles.iter().rposition(|r| *r == Role::Image);
        if last.map_or(true, |l| token_idx < l) {
            return Err(Error::Contract(format!(
                "causal visibility: token {token_idx} does not see the whole image"
            )));
        }
    } else {
        check_visibility(out, token_idx)?;
    }
    let row = head_mean(out, token_idx, layer)?;
    let scores: Vec<f32> = out
        .roles
        .iter()
        .zip(&row)
        .filter(|(r, _)| **r == Role::Image)
        .map(|(_, &v)| v as f32)
        .collect();
    Heatmap::new(patch_rows, patch_cols, scores, patch)
}

/// One image heatmap per layer.
pub fn attention_to_image_all_layers<T: Real>(
    out: &ModelOutput<T>,
    token_idx: usize,
    patch_rows: usize,
    patch_cols: usize,
    patch: usize,
) -> Result<Vec<Heatmap>> {
    let n = out.attentions.as_ref().map_or(0, |a| a.len());
    (0..n)
        .map(|l| attention_to_image(out, token_idx, l, patch_rows, patch_cols, patch))
        .collect()
}

pub fn encode_heatmap_grid(h: &Heatmap) -> Result<Vec<u8>> {
    if h.rows != h.cols {
        return Err(Error::Geometry(format!("BRHM stores square grids, got {}x{}", h.rows, h.cols)));
    }
    Ok(encode_float_grid(HEATMAP_MAGIC, h.rows, 1, &h.grid))
}

/// Read a BRHM grid back; `factor` is not stored in the file.
pub fn decode_heatmap_grid(bytes: &[u8], factor: usize) -> Result<Heatmap> {
    let (side, depth, values) = decode_float_grid(HEATMAP_MAGIC, bytes)?;
    if depth != 1 {
        return Err(Error::format("depth", format!("heatmaps have depth 1, found {depth}")));
    }
    Heatmap::new(side, side, values, factor)
}

/// Min-max normalized 8-bit greyscale of the upsampled map.
pub fn heatmap_pgm(h: &Heatmap) -> Result<Vec<u8>> {
    let norm = h.min_max();
    let data = norm.upsampled();
    Image::new(h.height(), h.width(), 1, data)?.to_pnm()
}

/// Half-and-half blend of a red heat layer over `image`, which is
/// letterboxed to the heatmap size first.
pub fn heatmap_overlay(h: &Heatmap, image: &Image) -> Result<Image> {
    if h.height() != h.width() {
        return Err(Error::Geometry("overlay needs a square heatmap".into()));
    }
    let (canvas, _) = letterbox(image, h.height())?;
    let heat = h.min_max().upsampled();
    let mut out = Image::zeros(canvas.height(), canvas.width(), 3);
    for y in 0..canvas.height() {
        for x in 0..canvas.width() {
            let src = canvas.pixel(y, x);
            let rgb = if src.len() >= 3 { [src[0], src[1], src[2]] } else { [src[0]; 3] };
            let v = heat[y * canvas.width() + x];
            let dst = out.pixel_mut(y, x);
            dst[0] = 0.5 * rgb[0] + 0.5 * v;
            dst[1] = 0.5 * rgb[1];
            dst[2] = 0.5 * rgb[2];
        }
    }
    Ok(out)
}

/// Write `<stem>.pgm` and `<stem>.brhm`, plus `<stem>.overlay.ppm` when an
/// image is given. Returns the written paths.
pub fn emit_heatmap(h: &Heatmap, stem: &Path, overlay: Option<&Image>) -> Result<Vec<PathBuf>> {
    let with_ext = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let mut written = Vec::new();
    let pgm = with_ext(".pgm");
    std::fs::write(&pgm, heatmap_pgm(h)?).map_err(|e| Error::io(&pgm, e))?;
    written.push(pgm);
    let brhm = with_ext(".brhm");
    std::fs::write(&brhm, encode_heatmap_grid(h)?).map_err(|e| Error::io(&brhm, e))?;
    written.push(brhm);
    if let Some(img) = overlay {
        let ppm = with_ext(".overlay.ppm");
        heatmap_overlay(h, img)?.save_pnm(&ppm)?;
        written.push(ppm);
    }
    Ok(written)
}

/// 8-bit value the PGM export assigns to a normalized score.
pub fn pgm_level(v: f32) -> u8 {
    quantize(v)
}
