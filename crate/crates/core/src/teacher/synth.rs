use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::grid::{GridSource, TeacherFeatureGrid, TEACHER_PATCH};
use crate::error::{Error, Result};
use crate::image::Image;

/// Deterministic stand-in for a frozen patch encoder: a fixed random
/// projection of each 14×14 pixel block plus a sinusoidal cell code,
/// L2-normalized per cell.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    dim: usize,
    channels: usize,
    /// `dim × (196·channels)`, row-major.
    projection: Vec<f32>,
}

impl SyntheticTeacher {
    pub fn new(seed: u64, dim: usize, channels: usize) -> Self {
        let fan_in = TEACHER_PATCH * TEACHER_PATCH * channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, (1.0 / fan_in as f32).sqrt()).expect("valid std");
        let projection = (0..dim * fan_in).map(|_| normal.sample(&mut rng)).collect();
        Self {
            dim,
            channels,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unnormalized content part `R · block` of cell `(row, col)`.
    pub fn content(&self, canvas: &Image, row: usize, col: usize) -> Vec<f32> {
        let block = canvas.block(row * TEACHER_PATCH, col * TEACHER_PATCH, TEACHER_PATCH);
        self.projection
            .chunks(block.len())
            .map(|w| w.iter().zip(&block).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn grid(&self, canvas: &Image) -> Result<TeacherFeatureGrid> {
        if canvas.height() != canvas.width() || canvas.width() % TEACHER_PATCH != 0 {
            return Err(Error::Geometry(format!(
                "teacher canvas must be square and a multiple of {TEACHER_PATCH}, got {}x{}",
                canvas.height(),
                canvas.width()
            )));
        }
        if canvas.channels() != self.channels {
            return Err(Error::Input(format!(
                "teacher built for {} channels, image has {}",
                self.channels,
                canvas.channels()
            )));
        }
        let g = canvas.width() / TEACHER_PATCH;
        let mut features = Vec::with_capacity(g * g * self.dim);
        for r in 0..g {
            for c in 0..g {
                let mut v = self.content(canvas, r, c);
                for (x, p) in v.iter_mut().zip(position_code(r, c, self.dim)) {
                    *x += p;
                }
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                features.extend(v.iter().map(|x| x / n));
            }
        }
        TeacherFeatureGrid::new(g, self.dim, features, GridSource::Synthetic)
    }
}

/// Sinusoidal code of a cell: interleaved `(sin, cos)` of row then column
/// at geometrically spaced frequencies. Trailing dims beyond a multiple of
/// four are zero.
pub fn position_code(row: usize, col: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dim];
    let bands = dim / 4;
    for i in 0..bands {
        let freq = 1.0 / 100f64.powf(i as f64 / bands.max(1) as f64);
        let (r, c) = (row as f64 * freq, col as f64 * freq);
        out[4 * i] = r.sin() as f32;
        out[4 * i + 1] = r.cos() as f32;
        out[4 * i + 2] = c.sin() as f32;
        out[4 * i + 3] = c.cos() as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(seed: u32) -> Image {
        let data = (0..56 * 56 * 3)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 256) as f32 / 255.0)
            .collect();
        Image::new(56, 56, 3, data).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let img = checker(1);
        let a = SyntheticTeacher::new(7, 16, 3).grid(&img).unwrap();
        let b = SyntheticTeacher::new(7, 16, 3).grid(&img).unwrap();
        assert_eq!(a, b);
        let c = SyntheticTeacher::new(8, 16, 3).grid(&img).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blank_image_gives_position_code() {
        let t = SyntheticTeacher::new(3, 16, 3);
        let g = t.grid(&Image::zeros(56, 56, 3)).unwrap();
        assert_eq!(g.grid_size(), 4);
        for r in 0..4 {
            for c in 0..4 {
                let p = position_code(r, c, 16);
                let n = p.iter().map(|x| x * x).sum::<f32>().sqrt();
                for (a, b) in g.cell(r, c).iter().zip(&p) {
                    assert!((a - b / n).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn swapping_blocks_swaps_content() {
        let t = SyntheticTeacher::new(5, 8, 3);
        let img = checker(9);
        let mut swapped = img.clone();
        for dy in 0..14 {
            for dx in 0..14 {
                let a = img.pixel(dy, dx).to_vec();
                let b = img.pixel(28 + dy, 14 + dx).to_vec();
                swapped.pixel_mut(dy, dx).copy_from_slice(&b);
                swapped.pixel_mut(28 + dy, 14 + dx).copy_from_slice(&a);
            }
        }
        assert_eq!(t.content(&swapped, 0, 0), t.content(&img, 2, 1));
        assert_eq!(t.content(&swapped, 2, 1), t.content(&img, 0, 0));
        assert_eq!(t.content(&swapped, 3, 3), t.content(&img, 3, 3));
    }

    #[test]
    fn rejects_off_grid_canvas() {
        let t = SyntheticTeacher::new(1, 4, 3);
        assert!(t.grid(&Image::zeros(50, 50, 3)).is_err());
    }
}
