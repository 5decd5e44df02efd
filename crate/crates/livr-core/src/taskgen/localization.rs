//! Localization task: which labeled box localizes the object?
//!
//! One filled shape is rendered; its tight bounding box is the gold box
//! (15–50% of the raster area). The distractor is produced by jittering the
//! four gold corners until IoU lands in [0.2, 0.5]; candidates whose outline
//! does not visibly cut through the shape are rejected, so a wrong box is
//! always visibly wrong at raster resolution. Outlines are drawn just
//! outside their box in the intensity band of their option letter; the gold
//! outline therefore hugs the shape without covering it, while the
//! distractor outline overwrites shape pixels where it crosses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TaskKind, Vocabulary};

use super::raster::{Raster, MARK_LETTER};
use super::{iou, BBox, TaskExample, TaskMeta, SCENE_BUDGET};

pub const SIZE: usize = 32;
const SHAPE_V: f64 = 0.45;
const JITTER_BUDGET: usize = 200;
/// Outline thickness and outward offset.
const RING: i64 = 2;

fn sample_gold_box(rng: &mut ChaCha8Rng) -> Option<BBox> {
    let area = (SIZE * SIZE) as f64;
    for _ in 0..50 {
        let w = rng.random_range(10..=26i64);
        let h = rng.random_range(10..=26i64);
        let frac = (w * h) as f64 / area;
        if !(0.15..=0.5).contains(&frac) {
            continue;
        }
        // Leave room for the 2px outer outline.
        let lo = RING + 1;
        let hi = SIZE as i64 - RING - 1;
        if hi - w < lo || hi - h < lo {
            continue;
        }
        let x0 = rng.random_range(lo..=hi - w);
        let y0 = rng.random_range(lo..=hi - h);
        return Some(BBox::new(x0, y0, x0 + w, y0 + h));
    }
    None
}

/// The outline of box `b` occupies the 2px ring just outside `b`. A cut is
/// any shape pixel inside that ring: the shape sticks out of the candidate
/// box far enough for its outline to visibly cross the object.
fn outline_cuts_shape(raster: &Raster, b: &BBox) -> bool {
    for y in (b.y0 - RING).max(0)..(b.y1 + RING).min(SIZE as i64) {
        for x in (b.x0 - RING).max(0)..(b.x1 + RING).min(SIZE as i64) {
            let in_inner = y >= b.y0 && y < b.y1 && x >= b.x0 && x < b.x1;
            if in_inner {
                continue;
            }
            if raster.get(y as usize, x as usize) == SHAPE_V {
                return true;
            }
        }
    }
    false
}

/// Draw a 2px outline hugging the outside of `b`.
fn draw_outer_outline(raster: &mut Raster, b: &BBox, v: f64) {
    raster.draw_box_outline(b.y0 - RING, b.x0 - RING, b.y1 + RING, b.x1 + RING, v);
}

fn jitter_distractor(rng: &mut ChaCha8Rng, gold: &BBox, shape: &Raster) -> Option<BBox> {
    for _ in 0..JITTER_BUDGET {
        let j = rng.random_range(3..=9i64);
        let lo = RING + 1;
        let hi = SIZE as i64 - RING - 1;
        let d = BBox::new(
            (gold.x0 + rng.random_range(-j..=j)).clamp(lo, hi - 3),
            (gold.y0 + rng.random_range(-j..=j)).clamp(lo, hi - 3),
            (gold.x1 + rng.random_range(-j..=j)).clamp(lo + 3, hi),
            (gold.y1 + rng.random_range(-j..=j)).clamp(lo + 3, hi),
        );
        if d.x1 - d.x0 < 4 || d.y1 - d.y0 < 4 {
            continue;
        }
        let v = iou(gold, &d);
        if !(0.2..=0.5).contains(&v) {
            continue;
        }
        if !outline_cuts_shape(shape, &d) {
            continue;
        }
        return Some(d);
    }
    None
}

pub fn generate(
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: u64,
    vocab: &Vocabulary,
) -> Result<TaskExample> {
    for _ in 0..SCENE_BUDGET {
        let Some(gold) = sample_gold_box(rng) else { continue };

        let mut image = Raster::new(SIZE, SIZE);
        // A filled shape inscribed in the gold box, touching all four sides,
        // so the gold box is exactly its tight bounds.
        match rng.random_range(0..3u32) {
            0 => image.fill_rect(gold.y0, gold.x0, gold.y1, gold.x1, SHAPE_V),
            1 => image.fill_ellipse_in_box(gold.y0, gold.x0, gold.y1, gold.x1, SHAPE_V),
            _ => {
                let apex_x = rng.random_range(gold.x0..gold.x1);
                image.fill_triangle_in_box(gold.y0, gold.x0, gold.y1, gold.x1, apex_x, SHAPE_V);
            }
        }
        let Some(distractor) = jitter_distractor(rng, &gold, &image) else { continue };

        let gold_letter = rng.random_range(0..2usize);
        // Distractor first so the gold outline stays fully visible; the
        // distractor's cut through the shape interior survives either order.
        draw_outer_outline(&mut image, &distractor, MARK_LETTER[1 - gold_letter]);
        draw_outer_outline(&mut image, &gold, MARK_LETTER[gold_letter]);

        return Ok(TaskExample {
            kind: TaskKind::Localization,
            seed,
            index,
            image,
            prompt_tokens: vocab.encode_prompt(TaskKind::Localization)?,
            answer_tokens: vocab.encode_mcq_answer(gold_letter),
            meta: TaskMeta::Localization { gold, distractor, gold_letter },
        });
    }
    Err(Error::TaskGen("localization: jitter budget exhausted".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::taskgen::verify_example;

    #[test]
    fn distractor_iou_in_band_and_area_constraint() {
        let vocab = Vocabulary::default_with_latents(0);
        for i in 0..100 {
            let mut rng = substream(3, "datagen/localization", i);
            let ex = generate(&mut rng, 3, i, &vocab).unwrap();
            verify_example(&ex, &vocab).unwrap();
        }
    }

    #[test]
    fn letters_are_roughly_balanced() {
        let vocab = Vocabulary::default_with_latents(0);
        let mut a = 0;
        let n = 400;
        for i in 0..n {
            let mut rng = substream(11, "datagen/localization", i);
            let ex = generate(&mut rng, 11, i, &vocab).unwrap();
            let TaskMeta::Localization { gold_letter, .. } = ex.meta else { unreachable!() };
            if gold_letter == 0 {
                a += 1;
            }
        }
        let frac = a as f64 / n as f64;
        assert!((0.4..=0.6).contains(&frac), "letter A fraction {frac}");
    }

    #[test]
    fn distractor_outline_always_cuts_the_shape() {
        let vocab = Vocabulary::default_with_latents(0);
        for i in 0..100 {
            let mut rng = substream(19, "datagen/localization", i);
            let ex = generate(&mut rng, 19, i, &vocab).unwrap();
            let TaskMeta::Localization { gold_letter, .. } = ex.meta else { unreachable!() };
            // The losing letter's band must appear somewhere strictly inside
            // the shape's tight bounds (the visible cut).
            let distractor_band = MARK_LETTER[1 - gold_letter];
            let TaskMeta::Localization { gold, .. } = ex.meta else { unreachable!() };
            let mut found = false;
            for y in gold.y0..gold.y1 {
                for x in gold.x0..gold.x1 {
                    if ex.image.get(y as usize, x as usize) == distractor_band {
                        found = true;
                    }
                }
            }
            assert!(found, "#{i}: distractor outline does not cut the shape bounds");
        }
    }
}
