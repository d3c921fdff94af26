//! Procedural scenes: up to three shapes on a 3×3 cell grid.

use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::{COLORS, POSITIONS, SHAPES};

pub const CELL: usize = 112;
pub const GRID_CELLS: usize = 3;
pub const IMAGE_SIDE: usize = CELL * GRID_CELLS;

/// 8-bit RGB of each entry of [`COLORS`].
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [255, 255, 255],
    [255, 128, 0],
];

const MAX_JITTER: i32 = 10;
const MIN_HALF: i32 = 30;
const MAX_HALF: i32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedShape {
    /// Raster index into the 3×3 grid.
    pub cell: usize,
    pub shape: usize,
    pub color: usize,
    pub dx: i32,
    pub dy: i32,
    /// Half extent in pixels.
    pub half: i32,
}

impl PlacedShape {
    pub fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }

    pub fn position_name(&self) -> &'static str {
        POSITIONS[self.cell]
    }

    pub fn center(&self) -> (i32, i32) {
        let (row, col) = ((self.cell / GRID_CELLS) as i32, (self.cell % GRID_CELLS) as i32);
        let c = CELL as i32 / 2;
        (col * CELL as i32 + c + self.dx, row * CELL as i32 + c + self.dy)
    }

    /// Pixel-center coverage test.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center();
        let px = x as f64 + 0.5 - cx as f64;
        let py = y as f64 + 0.5 - cy as f64;
        let h = self.half as f64;
        match SHAPES[self.shape] {
            "circle" => px * px + py * py <= h * h,
            "square" => px.abs() <= h && py.abs() <= h,
            _ => {
                // Apex up, base at the bottom edge.
                if py < -h || py > h {
                    return false;
                }
                px.abs() <= h * (py + h) / (2.0 * h)
            }
        }
    }
}

/// Shapes sorted by cell (raster order). Shape kinds are distinct within a
/// scene, so a kind names exactly one object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub shapes: Vec<PlacedShape>,
}

impl Scene {
    pub fn random(rng: &mut impl Rng) -> Self {
        let count = rng.gen_range(1..=3);
        let mut cells: Vec<usize> = (0..GRID_CELLS * GRID_CELLS).collect();
        cells.shuffle(rng);
        let mut kinds: Vec<usize> = (0..SHAPES.len()).collect();
        kinds.shuffle(rng);
        let mut shapes: Vec<PlacedShape> = (0..count)
            .map(|i| PlacedShape {
                cell: cells[i],
                shape: kinds[i],
                color: rng.gen_range(0..COLORS.len()),
                dx: rng.gen_range(-MAX_JITTER..=MAX_JITTER),
                dy: rng.gen_range(-MAX_JITTER..=MAX_JITTER),
                half: rng.gen_range(MIN_HALF..=MAX_HALF),
            })
            .collect();
        shapes.sort_by_key(|s| s.cell);
        Self { shapes }
    }

    /// `IMAGE_SIDE × IMAGE_SIDE × 3` bytes on a black background.
    pub fn render(&self) -> Vec<u8> {
        let mut px = vec![0u8; IMAGE_SIDE * IMAGE_SIDE * 3];
        for s in &self.shapes {
            let (row, col) = (s.cell / GRID_CELLS, s.cell % GRID_CELLS);
            for y in row * CELL..(row + 1) * CELL {
                for x in col * CELL..(col + 1) * CELL {
                    if s.covers(x, y) {
                        let o = (y * IMAGE_SIDE + x) * 3;
                        px[o..o + 3].copy_from_slice(&PALETTE[s.color]);
                    }
                }
            }
        }
        px
    }

    pub fn caption(&self) -> String {
        self.shapes
            .iter()
            .map(|s| format!("a {} {} at {}", s.color_name(), s.shape_name(), s.position_name()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
