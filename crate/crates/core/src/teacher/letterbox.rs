use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Teacher input resolution.
pub const CANVAS: usize = 336;

/// Geometry of an aspect-preserving resize onto a square canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxMap {
    pub orig_w: usize,
    pub orig_h: usize,
    pub scale: f64,
    pub content_w: usize,
    pub content_h: usize,
    pub pad_left: usize,
    pub pad_top: usize,
    pub canvas: usize,
}

impl LetterboxMap {
    pub fn new(orig_w: usize, orig_h: usize, canvas: usize) -> Result<Self> {
        if orig_w == 0 || orig_h == 0 || canvas == 0 {
            return Err(Error::Input(format!(
                "cannot letterbox a {orig_w}x{orig_h} image onto {canvas}"
            )));
        }
        let scale = canvas as f64 / orig_w.max(orig_h) as f64;
        let content_w = ((orig_w as f64 * scale).round() as usize).clamp(1, canvas);
        let content_h = ((orig_h as f64 * scale).round() as usize).clamp(1, canvas);
        Ok(Self {
            orig_w,
            orig_h,
            scale,
            content_w,
            content_h,
            pad_left: (canvas - content_w) / 2,
            pad_top: (canvas - content_h) / 2,
            canvas,
        })
    }

    /// Original pixel coordinate → canvas coordinate.
    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x * self.scale + self.pad_left as f64,
            y * self.scale + self.pad_top as f64,
        )
    }

    /// Canvas coordinate → original pixel coordinate; `None` more than half
    /// a pixel outside the content region.
    pub fn to_original(&self, cx: f64, cy: f64) -> Option<(f64, f64)> {
        let x = cx - self.pad_left as f64;
        let y = cy - self.pad_top as f64;
        if x < -0.5 || y < -0.5 || x > self.content_w as f64 + 0.5 || y > self.content_h as f64 + 0.5 {
            return None;
        }
        Some((x / self.scale, y / self.scale))
    }
}

/// Bilinear resize to `canvas` on the longer side, centered, zero padding.
pub fn letterbox(image: &Image, canvas: usize) -> Result<(Image, LetterboxMap)> {
    let map = LetterboxMap::new(image.width(), image.height(), canvas)?;
    let ch = image.channels();
    let mut out = Image::zeros(canvas, canvas, ch);
    let same = map.content_w == image.width() && map.content_h == image.height();
    for y in 0..map.content_h {
        for x in 0..map.content_w {
            let dst_y = y + map.pad_top;
            let dst_x = x + map.pad_left;
            if same {
                out.pixel_mut(dst_y, dst_x).copy_from_slice(image.pixel(y, x));
                continue;
            }
            let sx = ((x as f64 + 0.5) * image.width() as f64 / map.content_w as f64 - 0.5)
                .clamp(0.0, (image.width() - 1) as f64);
            let sy = ((y as f64 + 0.5) * image.height() as f64 / map.content_h as f64 - 0.5)
                .clamp(0.0, (image.height() - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(image.width() - 1), (y0 + 1).min(image.height() - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let dst = out.pixel_mut(dst_y, dst_x);
            for c in 0..ch {
                let top = image.pixel(y0, x0)[c] * (1.0 - fx) + image.pixel(y0, x1)[c] * fx;
                let bot = image.pixel(y1, x0)[c] * (1.0 - fx) + image.pixel(y1, x1)[c] * fx;
                dst[c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok((out, map))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn square_input_is_identity() {
        let data: Vec<f32> = (0..336 * 336).map(|i| (i % 7) as f32 / 7.0).collect();
        let img = Image::new(336, 336, 1, data).unwrap();
        let (out, map) = letterbox(&img, CANVAS).unwrap();
        assert_eq!(out, img);
        assert_eq!((map.scale, map.pad_left, map.pad_top), (1.0, 0, 0));
    }

    #[test]
    fn exact_halving() {
        let img = Image::new(336, 672, 3, vec![1.0; 336 * 672 * 3]).unwrap();
        let (out, map) = letterbox(&img, CANVAS).unwrap();
        assert_eq!(map.scale, 0.5);
        assert_eq!((map.content_w, map.content_h), (336, 168));
        assert_eq!((map.pad_left, map.pad_top), (0, 84));
        assert_eq!(out.pixel(83, 10), &[0.0; 3]);
        assert_eq!(out.pixel(84, 10), &[1.0; 3]);
        assert_eq!(out.pixel(251, 10), &[1.0; 3]);
        assert_eq!(out.pixel(252, 10), &[0.0; 3]);
    }

    #[test]
    fn rounding_rule_for_500_by_300() {
        let map = LetterboxMap::new(500, 300, CANVAS).unwrap();
        let h = (300.0f64 * 336.0 / 500.0).round() as usize;
        assert_eq!(h, 202);
        assert_eq!(map.content_h, h);
        assert_eq!(map.pad_top, (336 - h) / 2);
        assert_eq!(map.pad_top, 67);
        assert_eq!(map.content_w + 2 * map.pad_left, 336);
    }

    #[test]
    fn empty_is_an_input_error() {
        assert!(matches!(LetterboxMap::new(0, 5, CANVAS), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn back_projection_within_a_pixel(w in 1usize..1200, h in 1usize..1200, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let map = LetterboxMap::new(w, h, CANVAS).unwrap();
            prop_assert!(map.content_w + 2 * map.pad_left >= CANVAS - 1);
            prop_assert!(map.content_h + 2 * map.pad_top >= CANVAS - 1);
            let (x, y) = ((fx * w as f64).floor(), (fy * h as f64).floor());
            let (cx, cy) = map.to_canvas(x, y);
            let (bx, by) = map.to_original(cx.round(), cy.round()).expect("inside content");
            // Error measured in canvas pixels.
            prop_assert!((bx - x).abs() * map.scale <= 1.0 && (by - y).abs() * map.scale <= 1.0, "{x},{y} -> {bx},{by}");
        }
    }
}
