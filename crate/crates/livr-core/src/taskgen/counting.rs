//! Counting task: how many target shapes are in the raster?
//!
//! Renders c ∈ {2..10} non-overlapping filled disks (the target kind) plus
//! up to three square distractors of another kind and intensity band. Counts
//! are drawn uniformly; the answer is the digit string of c.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TaskKind, Vocabulary};

use super::raster::Raster;
use super::{TaskExample, TaskMeta, SCENE_BUDGET};

pub const SIZE: usize = 32;
/// Intensity band of the target disks (the flood-fill oracle counts this band).
pub const TARGET_LO: f64 = 0.40;
pub const TARGET_HI: f64 = 0.50;
const TARGET_V: f64 = 0.45;
const DISTRACTOR_V: f64 = 0.22;
const DISK_R: f64 = 2.0;
const SQUARE: i64 = 4;

struct Placement {
    centers: Vec<(f64, f64)>,
    radii: Vec<f64>,
}

impl Placement {
    fn try_place(&mut self, rng: &mut ChaCha8Rng, r: f64) -> Option<(f64, f64)> {
        let margin = r.ceil() as i64 + 1;
        for _ in 0..200 {
            let cy = rng.random_range(margin..SIZE as i64 - margin) as f64;
            let cx = rng.random_range(margin..SIZE as i64 - margin) as f64;
            let ok = self.centers.iter().zip(&self.radii).all(|(&(py, px), &pr)| {
                let d = ((cy - py).powi(2) + (cx - px).powi(2)).sqrt();
                d >= r + pr + 1.0
            });
            if ok {
                self.centers.push((cy, cx));
                self.radii.push(r);
                return Some((cy, cx));
            }
        }
        None
    }
}

pub fn generate(
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: u64,
    vocab: &Vocabulary,
) -> Result<TaskExample> {
    // The count is drawn once and kept across placement retries, so the
    // count distribution stays uniform regardless of how often crowded
    // scenes need resampling.
    let count = rng.random_range(2..=10u32);
    for _ in 0..SCENE_BUDGET {
        let n_distractors = rng.random_range(0..=3usize);
        let mut placement = Placement { centers: Vec::new(), radii: Vec::new() };
        let mut centers = Vec::new();
        let mut distractor_centers = Vec::new();
        let mut ok = true;
        for _ in 0..count {
            match placement.try_place(rng, DISK_R + 0.5) {
                Some(c) => centers.push(c),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            for _ in 0..n_distractors {
                match placement.try_place(rng, SQUARE as f64 / 2.0 + 0.9) {
                    Some(c) => distractor_centers.push(c),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if !ok {
            continue;
        }
        let mut image = Raster::new(SIZE, SIZE);
        for &(cy, cx) in &centers {
            image.fill_disk(cy, cx, DISK_R, TARGET_V);
        }
        for &(cy, cx) in &distractor_centers {
            let y0 = cy as i64 - SQUARE / 2;
            let x0 = cx as i64 - SQUARE / 2;
            image.fill_rect(y0, x0, y0 + SQUARE, x0 + SQUARE, DISTRACTOR_V);
        }
        return Ok(TaskExample {
            kind: TaskKind::Counting,
            seed,
            index,
            image,
            prompt_tokens: vocab.encode_prompt(TaskKind::Counting)?,
            answer_tokens: vocab.encode_count_answer(count),
            meta: TaskMeta::Counting { count, centers, distractor_centers },
        });
    }
    Err(Error::TaskGen("counting: placement budget exhausted".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::taskgen::raster::count_components;
    use crate::taskgen::verify_example;

    #[test]
    fn flood_fill_matches_answer() {
        let vocab = Vocabulary::default_with_latents(0);
        for i in 0..50 {
            let mut rng = substream(5, "datagen/counting", i);
            let ex = generate(&mut rng, 5, i, &vocab).unwrap();
            let TaskMeta::Counting { count, .. } = &ex.meta else { unreachable!() };
            assert_eq!(count_components(&ex.image, TARGET_LO, TARGET_HI), *count as usize);
            verify_example(&ex, &vocab).unwrap();
        }
    }

    #[test]
    fn shapes_do_not_touch() {
        let vocab = Vocabulary::default_with_latents(0);
        let mut rng = substream(9, "datagen/counting", 0);
        let ex = generate(&mut rng, 9, 0, &vocab).unwrap();
        let TaskMeta::Counting { centers, distractor_centers, .. } = &ex.meta else {
            unreachable!()
        };
        let mut all: Vec<(f64, f64, f64)> =
            centers.iter().map(|&(y, x)| (y, x, DISK_R + 0.5)).collect();
        all.extend(distractor_centers.iter().map(|&(y, x)| (y, x, SQUARE as f64 / 2.0 + 0.9)));
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d = ((all[i].0 - all[j].0).powi(2) + (all[i].1 - all[j].1).powi(2)).sqrt();
                assert!(d >= all[i].2 + all[j].2, "{i} and {j} overlap");
            }
        }
    }
}
