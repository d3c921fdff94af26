use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Array;

/// Pixel size of one teacher cell (ViT-L/14 patch).
pub const TEACHER_PATCH: usize = 14;
/// Side of the teacher grid for a 336-pixel canvas.
pub const DEFAULT_GRID: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSource {
    File,
    Synthetic,
}

/// `G × G × D_t` teacher patch features, row-major over cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatureGrid {
    grid_size: usize,
    dim: usize,
    features: Vec<f32>,
    source: GridSource,
}

impl TeacherFeatureGrid {
    pub fn new(grid_size: usize, dim: usize, features: Vec<f32>, source: GridSource) -> Result<Self> {
        if grid_size == 0 || dim == 0 {
            return Err(Error::Geometry(format!("teacher grid {grid_size}x{grid_size}x{dim}")));
        }
        if features.len() != grid_size * grid_size * dim {
            return Err(Error::Geometry(format!(
                "teacher grid {grid_size}x{grid_size}x{dim} needs {} values, got {}",
                grid_size * grid_size * dim,
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("teacher feature {i} is not finite")));
        }
        Ok(Self {
            grid_size,
            dim,
            features,
            source,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn source(&self) -> GridSource {
        self.source
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.grid_size + col) * self.dim;
        &self.features[o..o + self.dim]
    }

    /// Pooled grid of side `G/s`, kept in grid form.
    pub fn pooled(&self, stride: usize) -> Result<Self> {
        let tokens = pool_grid(self, stride)?;
        Self::new(self.grid_size / stride, self.dim, tokens.into_data(), self.source)
    }
}

/// Non-overlapping `s × s` mean pooling, flattened row-major: token `k`
/// covers window `(k / (G/s), k % (G/s))`.
pub fn pool_grid(grid: &TeacherFeatureGrid, stride: usize) -> Result<Array<f32>> {
    let g = grid.grid_size;
    if stride == 0 || g % stride != 0 {
        return Err(Error::Geometry(format!(
            "stride {stride} does not divide teacher grid size {g}"
        )));
    }
    let side = g / stride;
    let d = grid.dim;
    let inv = 1.0 / (stride * stride) as f32;
    let mut out = vec![0.0f32; side * side * d];
    for r in 0..side {
        for c in 0..side {
            let dst = &mut out[(r * side + c) * d..(r * side + c + 1) * d];
            for a in 0..stride {
                for b in 0..stride {
                    for (o, &v) in dst.iter_mut().zip(grid.cell(r * stride + a, c * stride + b)) {
                        *o += v;
                    }
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
    }
    Array::new(vec![side * side, d], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityOrder {
    /// Smaller stride first, i.e. nearest the image tokens.
    #[default]
    FineFirst,
    CoarseFirst,
}

impl GranularityOrder {
    /// Sort strides into sequence order.
    pub fn arrange(self, strides: &[usize]) -> Vec<usize> {
        let mut s = strides.to_vec();
        s.sort_unstable();
        if self == GranularityOrder::CoarseFirst {
            s.reverse();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEntry {
    pub stride: usize,
    /// `(G/s)² × D_t`
    pub tokens: Array<f32>,
}

impl TargetEntry {
    pub fn side(&self) -> usize {
        (self.tokens.rows() as f64).sqrt().round() as usize
    }
}

/// Pooled teacher targets, one entry per granularity in sequence order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTarget {
    pub entries: Vec<TargetEntry>,
    pub order: GranularityOrder,
}

impl AlignmentTarget {
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.tokens.rows()).sum()
    }

    pub fn entry(&self, stride: usize) -> Option<&TargetEntry> {
        self.entries.iter().find(|e| e.stride == stride)
    }
}

pub fn build_alignment_target(
    grid: &TeacherFeatureGrid,
    strides: &[usize],
    order: GranularityOrder,
) -> Result<AlignmentTarget> {
    if strides.is_empty() {
        return Err(Error::Contract("alignment target needs at least one stride".into()));
    }
    let entries = order
        .arrange(strides)
        .into_iter()
        .map(|stride| {
            Ok(TargetEntry {
                stride,
                tokens: pool_grid(grid, stride)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentTarget { entries, order })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_grid(seed: u64, g: usize, d: usize) -> TeacherFeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..g * g * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TeacherFeatureGrid::new(g, d, data, GridSource::Synthetic).unwrap()
    }

    /// Window average computed straight from the definition.
    fn oracle(grid: &TeacherFeatureGrid, s: usize) -> Vec<f64> {
        let side = grid.grid_size() / s;
        let mut out = Vec::new();
        for k in 0..side * side {
            let (wr, wc) = (k / side, k % side);
            for ch in 0..grid.dim() {
                let mut acc = 0.0f64;
                for r in wr * s..(wr + 1) * s {
                    for c in wc * s..(wc + 1) * s {
                        acc += grid.cell(r, c)[ch] as f64;
                    }
                }
                out.push(acc / (s * s) as f64);
            }
        }
        out
    }

    #[test]
    fn paper_geometry_token_counts() {
        let g = random_grid(1, 24, 4);
        assert_eq!(pool_grid(&g, 3).unwrap().rows(), 64);
        assert_eq!(pool_grid(&g, 4).unwrap().rows(), 36);
        assert_eq!(pool_grid(&g, 2).unwrap().rows(), 144);
        assert!(matches!(pool_grid(&g, 5), Err(Error::Geometry(_))));
    }

    #[test]
    fn constant_grid_pools_to_constant() {
        let g = TeacherFeatureGrid::new(24, 3, vec![0.25; 24 * 24 * 3], GridSource::File).unwrap();
        for s in [2, 3, 4, 6] {
            assert!(pool_grid(&g, s).unwrap().data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn row_index_grid() {
        let g = 24;
        let data = (0..g).flat_map(|r| std::iter::repeat(r as f32).take(g * 2)).collect();
        let grid = TeacherFeatureGrid::new(g, 2, data, GridSource::Synthetic).unwrap();
        let pooled = pool_grid(&grid, 3).unwrap();
        let expect = oracle(&grid, 3);
        for (k, row) in pooled.data().chunks(2).enumerate() {
            let r = k / 8;
            assert_eq!(row, &[(3 * r + 1) as f32; 2]);
            assert_eq!(row[0] as f64, expect[k * 2]);
        }
    }

    #[test]
    fn alignment_target_lengths() {
        let g = random_grid(2, 24, 4);
        let t = build_alignment_target(&g, &[4, 3], GranularityOrder::FineFirst).unwrap();
        let lens: Vec<usize> = t.entries.iter().map(|e| e.tokens.rows()).collect();
        assert_eq!(lens, vec![64, 36]);
        assert_eq!(t.total_len(), 100);
        let t = build_alignment_target(&g, &[2], GranularityOrder::FineFirst).unwrap();
        assert_eq!(t.total_len(), 144);
        let t = build_alignment_target(&g, &[4, 2], GranularityOrder::CoarseFirst).unwrap();
        let lens: Vec<usize> = t.entries.iter().map(|e| e.tokens.rows()).collect();
        assert_eq!(lens, vec![36, 144]);
        assert!(build_alignment_target(&g, &[], GranularityOrder::FineFirst).is_err());
        assert!(build_alignment_target(&g, &[3, 5], GranularityOrder::FineFirst).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pooling_matches_window_oracle(seed in any::<u64>(), g in 1usize..=24, d in 1usize..4) {
            let grid = random_grid(seed, g, d);
            for s in (1..=g).filter(|s| g % s == 0) {
                let pooled = pool_grid(&grid, s).unwrap();
                let expect = oracle(&grid, s);
                for (a, b) in pooled.data().iter().zip(&expect) {
                    prop_assert!((*a as f64 - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn pooling_preserves_mean(seed in any::<u64>(), s in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 24])) {
            let grid = random_grid(seed, 24, 3);
            let pooled = pool_grid(&grid, s).unwrap();
            let full: f64 = grid.features().iter().map(|&v| v as f64).sum::<f64>() / grid.features().len() as f64;
            let pm: f64 = pooled.data().iter().map(|&v| v as f64).sum::<f64>() / pooled.len() as f64;
            prop_assert!((full - pm).abs() < 1e-5);
        }
    }
}
