//! Grayscale rasters and drawing primitives.
//!
//! Intensities live in [0,1]. Content (shapes, textures) stays in a low
//! band; option and reference markers are drawn in reserved high-intensity
//! bands so they remain distinguishable from content at low resolution.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Upper bound of the content band; marker intensities sit above it.
pub const CONTENT_MAX: f64 = 0.55;
/// Marker intensities for option letters A..D.
pub const MARK_LETTER: [f64; 4] = [0.60, 1.00, 0.73, 0.86];
/// Marker intensity for the REF point.
pub const MARK_REF: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(h: usize, w: usize) -> Raster {
        Raster { h, w, data: vec![0.0; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.data.clone()).unwrap()
    }

    pub fn fill_rect(&mut self, y0: i64, x0: i64, y1: i64, x1: i64, v: f64) {
        for y in y0.max(0)..y1.min(self.h as i64) {
            for x in x0.max(0)..x1.min(self.w as i64) {
                self.set(y as usize, x as usize, v);
            }
        }
    }

    pub fn fill_disk(&mut self, cy: f64, cx: f64, r: f64, v: f64) {
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize + 1).min(self.h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize + 1).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r * r {
                    self.set(y, x, v);
                }
            }
        }
    }

    /// Ellipse inscribed in the half-open box [y0,y1)×[x0,x1), touching all
    /// four sides.
    pub fn fill_ellipse_in_box(&mut self, y0: i64, x0: i64, y1: i64, x1: i64, v: f64) {
        let cy = (y0 + y1 - 1) as f64 / 2.0;
        let cx = (x0 + x1 - 1) as f64 / 2.0;
        let ry = (y1 - y0) as f64 / 2.0 - 0.25;
        let rx = (x1 - x0) as f64 / 2.0 - 0.25;
        for y in y0.max(0)..y1.min(self.h as i64) {
            for x in x0.max(0)..x1.min(self.w as i64) {
                let ny = (y as f64 - cy) / ry;
                let nx = (x as f64 - cx) / rx;
                if ny * ny + nx * nx <= 1.0 {
                    self.set(y as usize, x as usize, v);
                }
            }
        }
    }

    /// Triangle with base on the bottom edge of the box and apex on its top
    /// edge; touches all four box sides.
    pub fn fill_triangle_in_box(&mut self, y0: i64, x0: i64, y1: i64, x1: i64, apex_x: i64, v: f64) {
        let apex = (y0, apex_x.clamp(x0, x1 - 1));
        let left = ((y1 - 1) as f64, x0 as f64);
        let right = ((y1 - 1) as f64, (x1 - 1) as f64);
        let a = (apex.0 as f64, apex.1 as f64);
        let sign = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| -> f64 {
            (p.1 - r.1) * (q.0 - r.0) - (q.1 - r.1) * (p.0 - r.0)
        };
        for y in y0.max(0)..y1.min(self.h as i64) {
            for x in x0.max(0)..x1.min(self.w as i64) {
                let pt = (y as f64, x as f64);
                let d1 = sign(pt, a, left);
                let d2 = sign(pt, left, right);
                let d3 = sign(pt, right, a);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                if !(has_neg && has_pos) {
                    self.set(y as usize, x as usize, v);
                }
            }
        }
    }

    /// Two-pixel rectangle outline just inside the half-open box. Thick
    /// enough to survive patch-level pooling at low resolution.
    pub fn draw_box_outline(&mut self, y0: i64, x0: i64, y1: i64, x1: i64, v: f64) {
        for t in 0..2i64 {
            let (iy0, ix0, iy1, ix1) = (y0 + t, x0 + t, y1 - t, x1 - t);
            if iy0 >= iy1 || ix0 >= ix1 {
                break;
            }
            for x in ix0.max(0)..ix1.min(self.w as i64) {
                if iy0 >= 0 && iy0 < self.h as i64 {
                    self.set(iy0 as usize, x as usize, v);
                }
                if iy1 - 1 >= 0 && iy1 - 1 < self.h as i64 {
                    self.set((iy1 - 1) as usize, x as usize, v);
                }
            }
            for y in iy0.max(0)..iy1.min(self.h as i64) {
                if ix0 >= 0 && ix0 < self.w as i64 {
                    self.set(y as usize, ix0 as usize, v);
                }
                if ix1 - 1 >= 0 && ix1 - 1 < self.w as i64 {
                    self.set(y as usize, (ix1 - 1) as usize, v);
                }
            }
        }
    }

    /// Ring (annulus) of radius `r`, one pixel thick, leaving the interior
    /// untouched.
    pub fn draw_ring(&mut self, cy: f64, cx: f64, r: f64, v: f64) {
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 1.0).ceil() as usize + 1).min(self.h);
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 1.0).ceil() as usize + 1).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let d = (dy * dy + dx * dx).sqrt();
                if (d - r).abs() <= 0.5 {
                    self.set(y, x, v);
                }
            }
        }
    }

    /// Copy a rectangular block out of the raster (row-major).
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x0 + w]);
        }
        out
    }

    /// Paste a row-major block at (y0, x0).
    pub fn paste(&mut self, y0: usize, x0: usize, h: usize, w: usize, block: &[f64]) {
        for y in 0..h {
            let dst = (y0 + y) * self.w + x0;
            self.data[dst..dst + w].copy_from_slice(&block[y * w..(y + 1) * w]);
        }
    }
}

/// 4-connected flood fill count of components whose intensity lies in
/// [lo, hi]. This is the independent counting oracle: it looks only at
/// pixels, never at generator bookkeeping.
pub fn count_components(r: &Raster, lo: f64, hi: f64) -> usize {
    let mut seen = vec![false; r.h * r.w];
    let inside = |y: usize, x: usize| {
        let v = r.get(y, x);
        v >= lo && v <= hi
    };
    let mut count = 0;
    for sy in 0..r.h {
        for sx in 0..r.w {
            if seen[sy * r.w + sx] || !inside(sy, sx) {
                continue;
            }
            count += 1;
            let mut stack = vec![(sy, sx)];
            seen[sy * r.w + sx] = true;
            while let Some((y, x)) = stack.pop() {
                let mut push = |ny: usize, nx: usize, stack: &mut Vec<(usize, usize)>| {
                    if !seen[ny * r.w + nx] && inside(ny, nx) {
                        seen[ny * r.w + nx] = true;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut stack);
                }
                if y + 1 < r.h {
                    push(y + 1, x, &mut stack);
                }
                if x > 0 {
                    push(y, x - 1, &mut stack);
                }
                if x + 1 < r.w {
                    push(y, x + 1, &mut stack);
                }
            }
        }
    }
    count
}
