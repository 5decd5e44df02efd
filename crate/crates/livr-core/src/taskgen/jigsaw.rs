//! Jigsaw task: which patch completes the masked canvas?
//!
//! A textured canvas of fixed width and random even height (height/width
//! preserves the 0.425–0.575 ratio of the source construction) has its
//! bottom-right quadrant blacked out. The true quadrant content and a
//! non-overlapping same-size crop are composed side by side beneath the
//! canvas; left is option A, right is option B.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TaskKind, Vocabulary};

use super::raster::Raster;
use super::{BBox, TaskExample, TaskMeta, SCENE_BUDGET};

pub const SIZE: usize = 32;
/// Distractor center must be at least this fraction of the canvas diagonal
/// away from the gold quadrant center.
pub const DISTRACTOR_CENTER_FRAC: f64 = 0.25;
const HEIGHTS: [usize; 3] = [14, 16, 18];

fn paint_texture(r: &mut Raster, rng: &mut ChaCha8Rng, h: usize, w: usize) {
    let f1 = (rng.random::<f64>() * 0.7 + 0.2, rng.random::<f64>() * 0.7 + 0.2);
    let f2 = (rng.random::<f64>() * 0.7 + 0.2, rng.random::<f64>() * 0.7 + 0.2);
    let (p1, p2) = (rng.random::<f64>() * 6.28, rng.random::<f64>() * 6.28);
    for y in 0..h {
        for x in 0..w {
            let v = 0.33
                + 0.12 * (f1.0 * x as f64 + f1.1 * y as f64 + p1).sin()
                + 0.09 * (f2.0 * x as f64 - f2.1 * y as f64 + p2).sin();
            r.set(y, x, v.clamp(0.15, 0.55));
        }
    }
    for _ in 0..rng.random_range(4..=7usize) {
        let v = rng.random::<f64>() * 0.37 + 0.18;
        if rng.random::<bool>() {
            let cy = rng.random_range(0..h) as f64;
            let cx = rng.random_range(0..w) as f64;
            let rad = rng.random::<f64>() * 3.0 + 1.5;
            r.fill_disk(cy, cx, rad, v);
        } else {
            let y0 = rng.random_range(0..h as i64);
            let x0 = rng.random_range(0..w as i64);
            let bh = rng.random_range(2..=6i64);
            let bw = rng.random_range(2..=6i64);
            r.fill_rect(y0, x0, (y0 + bh).min(h as i64), (x0 + bw).min(w as i64), v);
        }
    }
}

pub fn generate(
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: u64,
    vocab: &Vocabulary,
) -> Result<TaskExample> {
    for _ in 0..SCENE_BUDGET {
        let h = HEIGHTS[rng.random_range(0..HEIGHTS.len())];
        let (qh, qw) = (h / 2, SIZE / 2);
        let mut canvas = Raster::new(h, SIZE);
        paint_texture(&mut canvas, rng, h, SIZE);

        let gold_rect =
            BBox::new(qw as i64, (h - qh) as i64, SIZE as i64, h as i64);
        let gold_pixels = canvas.crop(h - qh, qw, qh, qw);

        // Distractor: same-size crop, inside the canvas, disjoint from the
        // gold quadrant, center far enough away.
        let diag = ((SIZE * SIZE + h * h) as f64).sqrt();
        let min_center_dist = DISTRACTOR_CENTER_FRAC * diag;
        let gold_center = gold_rect.center();
        let mut distractor_rect = None;
        for _ in 0..100 {
            let dy = rng.random_range(0..=(h - qh) as i64);
            let dx = rng.random_range(0..=(SIZE - qw) as i64);
            let cand = BBox::new(dx, dy, dx + qw as i64, dy + qh as i64);
            if cand.intersects(&gold_rect) {
                continue;
            }
            let c = cand.center();
            let dist = ((c.0 - gold_center.0).powi(2) + (c.1 - gold_center.1).powi(2)).sqrt();
            if dist < min_center_dist {
                continue;
            }
            distractor_rect = Some(cand);
            break;
        }
        let Some(distractor_rect) = distractor_rect else { continue };
        let distractor_pixels =
            canvas.crop(distractor_rect.y0 as usize, distractor_rect.x0 as usize, qh, qw);

        // Compose: canvas with the quadrant blacked out, a separator row,
        // then the two option patches side by side.
        let mut image = Raster::new(SIZE, SIZE);
        image.paste(0, 0, h, SIZE, &canvas.data);
        image.fill_rect(
            gold_rect.y0,
            gold_rect.x0,
            gold_rect.y1,
            gold_rect.x1,
            0.0,
        );
        let gold_letter = rng.random_range(0..2usize);
        let strip_y = h + 1;
        let (left, right) = if gold_letter == 0 {
            (&gold_pixels, &distractor_pixels)
        } else {
            (&distractor_pixels, &gold_pixels)
        };
        image.paste(strip_y, 0, qh, qw, left);
        image.paste(strip_y, qw, qh, qw, right);

        return Ok(TaskExample {
            kind: TaskKind::Jigsaw,
            seed,
            index,
            image,
            prompt_tokens: vocab.encode_prompt(TaskKind::Jigsaw)?,
            answer_tokens: vocab.encode_mcq_answer(gold_letter),
            meta: TaskMeta::Jigsaw {
                canvas_h: h,
                gold_rect,
                distractor_rect,
                gold_letter,
                gold_pixels,
            },
        });
    }
    Err(Error::TaskGen("jigsaw: distractor constraints unsatisfiable".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::taskgen::verify_example;

    #[test]
    fn quadrant_masked_and_options_faithful() {
        let vocab = Vocabulary::default_with_latents(0);
        for i in 0..100 {
            let mut rng = substream(4, "datagen/jigsaw", i);
            let ex = generate(&mut rng, 4, i, &vocab).unwrap();
            verify_example(&ex, &vocab).unwrap();
        }
    }

    #[test]
    fn distractor_never_overlaps_gold() {
        let vocab = Vocabulary::default_with_latents(0);
        for i in 0..100 {
            let mut rng = substream(6, "datagen/jigsaw", i);
            let ex = generate(&mut rng, 6, i, &vocab).unwrap();
            let TaskMeta::Jigsaw { gold_rect, distractor_rect, .. } = ex.meta else {
                unreachable!()
            };
            assert!(!gold_rect.intersects(&distractor_rect));
        }
    }
}
