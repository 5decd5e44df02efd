//! Visual correspondence task: which candidate point in the warped panel
//! matches the REF point in the source panel?
//!
//! The source panel is a textured raster; the target panel is the source
//! warped by a random affine-plus-perspective homography. The true candidate
//! is the homography image of REF; three distractors keep a minimum distance
//! from it and from each other. Panels are concatenated horizontally.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TaskKind, Vocabulary};

use super::raster::{Raster, MARK_LETTER, MARK_REF};
use super::{apply_homography, TaskExample, TaskMeta, SCENE_BUDGET};

pub const PANEL: usize = 32;
pub const MIN_SEPARATION: f64 = 7.0;
const SAFE_LO: i64 = 6;
const SAFE_HI: i64 = 26;

fn paint_texture(r: &mut Raster, rng: &mut ChaCha8Rng) {
    let f1 = (rng.random::<f64>() * 0.7 + 0.25, rng.random::<f64>() * 0.7 + 0.25);
    let f2 = (rng.random::<f64>() * 0.7 + 0.25, rng.random::<f64>() * 0.7 + 0.25);
    let (p1, p2) = (rng.random::<f64>() * 6.28, rng.random::<f64>() * 6.28);
    for y in 0..r.h {
        for x in 0..r.w {
            let v = 0.33
                + 0.11 * (f1.0 * x as f64 + f1.1 * y as f64 + p1).sin()
                + 0.09 * (f2.0 * x as f64 - f2.1 * y as f64 + p2).sin();
            r.set(y, x, v.clamp(0.15, 0.55));
        }
    }
    for _ in 0..rng.random_range(4..=6usize) {
        let v = rng.random::<f64>() * 0.37 + 0.18;
        let cy = rng.random_range(3..PANEL as i64 - 3) as f64;
        let cx = rng.random_range(3..PANEL as i64 - 3) as f64;
        r.fill_disk(cy, cx, rng.random::<f64>() * 2.5 + 1.5, v);
    }
}

/// Random similarity transform about the panel center plus translation and a
/// mild perspective term. Row-major 3×3, mapping source (x, y) to target.
fn random_homography(rng: &mut ChaCha8Rng) -> [f64; 9] {
    let theta = (rng.random::<f64>() - 0.5) * 0.5;
    let s = 0.9 + rng.random::<f64>() * 0.2;
    let (tx, ty) = (
        (rng.random::<f64>() - 0.5) * 6.0,
        (rng.random::<f64>() - 0.5) * 6.0,
    );
    let (g, hp) = (
        (rng.random::<f64>() - 0.5) * 0.006,
        (rng.random::<f64>() - 0.5) * 0.006,
    );
    let c = PANEL as f64 / 2.0;
    let (cos, sin) = (theta.cos() * s, theta.sin() * s);
    // T(c) · R·S · T(-c), then translation and perspective.
    [
        cos,
        -sin,
        c - cos * c + sin * c + tx,
        sin,
        cos,
        c - sin * c - cos * c + ty,
        g,
        hp,
        1.0,
    ]
}

fn invert3(h: &[f64; 9]) -> Option<[f64; 9]> {
    let det = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
        + h[2] * (h[3] * h[7] - h[4] * h[6]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        (h[4] * h[8] - h[5] * h[7]) * inv_det,
        (h[2] * h[7] - h[1] * h[8]) * inv_det,
        (h[1] * h[5] - h[2] * h[4]) * inv_det,
        (h[5] * h[6] - h[3] * h[8]) * inv_det,
        (h[0] * h[8] - h[2] * h[6]) * inv_det,
        (h[2] * h[3] - h[0] * h[5]) * inv_det,
        (h[3] * h[7] - h[4] * h[6]) * inv_det,
        (h[1] * h[6] - h[0] * h[7]) * inv_det,
        (h[0] * h[4] - h[1] * h[3]) * inv_det,
    ])
}

/// Inverse-warp `src` through `h` with bilinear sampling; out-of-bounds
/// source coordinates read as 0.
fn warp(src: &Raster, h: &[f64; 9]) -> Option<Raster> {
    let inv = invert3(h)?;
    let mut out = Raster::new(src.h, src.w);
    let sample = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y > (src.h - 1) as f64 || x > (src.w - 1) as f64 {
            return 0.0;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(src.h - 1), (x0 + 1).min(src.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        src.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + src.get(y0, x1) * (1.0 - fy) * fx
            + src.get(y1, x0) * fy * (1.0 - fx)
            + src.get(y1, x1) * fy * fx
    };
    for y in 0..out.h {
        for x in 0..out.w {
            let (sx, sy) = apply_homography(&inv, x as f64, y as f64);
            out.set(y, x, sample(sy, sx));
        }
    }
    Some(out)
}

fn in_safe(p: (f64, f64)) -> bool {
    p.0 >= SAFE_LO as f64 && p.0 < SAFE_HI as f64 && p.1 >= SAFE_LO as f64 && p.1 < SAFE_HI as f64
}

pub fn generate(
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: u64,
    vocab: &Vocabulary,
) -> Result<TaskExample> {
    for _ in 0..SCENE_BUDGET {
        let mut source = Raster::new(PANEL, PANEL);
        paint_texture(&mut source, rng);
        let h = random_homography(rng);
        let Some(target) = warp(&source, &h) else { continue };

        // REF point whose warp lands in the target safe region.
        let mut found = None;
        for _ in 0..100 {
            let rp = (
                rng.random_range(SAFE_LO..SAFE_HI) as f64,
                rng.random_range(SAFE_LO..SAFE_HI) as f64,
            );
            let (tx, ty) = apply_homography(&h, rp.1, rp.0); // (x, y) order
            if in_safe((ty, tx)) {
                found = Some((rp, (tx.round(), ty.round())));
                break;
            }
        }
        let Some(((ref_y, ref_x), (true_x, true_y))) = found else { continue };

        // Three distractors, far from the true point and from each other.
        let mut points: Vec<(f64, f64)> = vec![(true_x, true_y)]; // (x, y)
        let mut ok = true;
        for _ in 0..3 {
            let mut placed = false;
            for _ in 0..200 {
                let cand = (
                    rng.random_range(SAFE_LO..SAFE_HI) as f64,
                    rng.random_range(SAFE_LO..SAFE_HI) as f64,
                );
                let far = points.iter().all(|&(px, py)| {
                    ((px - cand.0).powi(2) + (py - cand.1).powi(2)).sqrt() >= MIN_SEPARATION
                });
                if far {
                    points.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }

        // Randomly assign the four points to option letters.
        let mut order = [0usize, 1, 2, 3];
        for i in (1..4).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        // candidates[letter] = point; answer letter is where point 0 landed.
        let mut candidates = [(0.0, 0.0); 4];
        let mut answer_letter = 0;
        for (point_idx, &letter) in order.iter().enumerate() {
            candidates[letter] = points[point_idx];
            if point_idx == 0 {
                answer_letter = letter;
            }
        }

        // Compose panels side by side and draw markers.
        let mut image = Raster::new(PANEL, 2 * PANEL);
        image.paste(0, 0, PANEL, PANEL, &source.data);
        image.paste(0, PANEL, PANEL, PANEL, &target.data);
        image.draw_ring(ref_y, ref_x, 2.0, MARK_REF);
        for (letter, &(x, y)) in candidates.iter().enumerate() {
            image.draw_ring(y, x + PANEL as f64, 2.0, MARK_LETTER[letter]);
        }

        return Ok(TaskExample {
            kind: TaskKind::Correspondence,
            seed,
            index,
            image,
            prompt_tokens: vocab.encode_prompt(TaskKind::Correspondence)?,
            answer_tokens: vocab.encode_mcq_answer(answer_letter),
            meta: TaskMeta::Correspondence {
                homography: h,
                ref_point: (ref_x, ref_y),
                candidates,
                answer_letter,
            },
        });
    }
    Err(Error::TaskGen("correspondence: sampling budget exhausted".into()))
}
