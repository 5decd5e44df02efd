//! Procedural generators for five perception tasks on synthetic rasters.
//!
//! Each generator is a pure function of (seed, index): regeneration yields
//! bitwise-identical rasters and tokens, and train/val/test splits are
//! disjoint by index partition. Every example carries enough metadata for an
//! independent oracle (IoU recomputation, flood fill, the reflectance rule,
//! analytic homography evaluation, pixel equality) to re-derive the stored
//! answer; `verify_example` runs that oracle.

pub mod correspondence;
pub mod counting;
pub mod dataset;
pub mod jigsaw;
pub mod localization;
pub mod raster;
pub mod reflectance;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::vocab::{TaskKind, Vocabulary};
pub use raster::Raster;

/// Axis-aligned pixel box, half-open on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> BBox {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid_within(&self, h: usize, w: usize) -> bool {
        self.x0 < self.x1
            && self.y0 < self.y1
            && self.x0 >= 0
            && self.y0 >= 0
            && self.x1 <= w as i64
            && self.y1 <= h as i64
    }

    pub fn area(&self) -> i64 {
        (self.x1 - self.x0).max(0) * (self.y1 - self.y0).max(0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.y0 + self.y1) as f64 / 2.0, (self.x0 + self.x1) as f64 / 2.0)
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0);
        ix > 0 && iy > 0
    }
}

/// Intersection over union of two boxes; symmetric, in [0,1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Task-specific gold geometry, stored alongside each example so oracles can
/// re-derive the answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskMeta {
    Counting {
        count: u32,
        centers: Vec<(f64, f64)>,
        distractor_centers: Vec<(f64, f64)>,
    },
    Localization {
        gold: BBox,
        distractor: BBox,
        gold_letter: usize,
    },
    Jigsaw {
        canvas_h: usize,
        gold_rect: BBox,
        distractor_rect: BBox,
        gold_letter: usize,
        gold_pixels: Vec<f64>,
    },
    Reflectance {
        point_a: (f64, f64),
        point_b: (f64, f64),
        y_a: f64,
        y_b: f64,
        label: usize,
    },
    Correspondence {
        homography: [f64; 9],
        ref_point: (f64, f64),
        /// Candidate points in target-panel coordinates, indexed by option
        /// letter (entry 0 is the point labeled A, and so on).
        candidates: [(f64, f64); 4],
        answer_letter: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub kind: TaskKind,
    pub seed: u64,
    pub index: u64,
    pub image: Raster,
    pub prompt_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub meta: TaskMeta,
}

/// How many scene-level resampling attempts a generator may burn before the
/// example is declared unconstructible (this would indicate a bug, not bad
/// luck).
pub(crate) const SCENE_BUDGET: usize = 1000;

/// Generate one example. Deterministic in (kind, seed, index); the vocabulary
/// only contributes stable base-token ids.
pub fn gen_example(
    kind: TaskKind,
    seed: u64,
    index: u64,
    vocab: &Vocabulary,
) -> Result<TaskExample> {
    if !kind.has_generator() {
        return Err(Error::TaskGen(format!(
            "task `{}` has a prompt template but no generator",
            kind.name()
        )));
    }
    let mut rng = substream(seed, &format!("datagen/{}", kind.name()), index);
    match kind {
        TaskKind::Counting => counting::generate(&mut rng, seed, index, vocab),
        TaskKind::Localization => localization::generate(&mut rng, seed, index, vocab),
        TaskKind::Jigsaw => jigsaw::generate(&mut rng, seed, index, vocab),
        TaskKind::Reflectance => reflectance::generate(&mut rng, seed, index, vocab),
        TaskKind::Correspondence => correspondence::generate(&mut rng, seed, index, vocab),
        _ => unreachable!(),
    }
}

/// Apply a 3×3 homography (row-major) to a point (x, y).
pub fn apply_homography(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let wq = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / wq, (h[3] * x + h[4] * y + h[5]) / wq)
}

/// Re-derive the stored answer from meta and raster through the independent
/// per-task oracle. `Err(TaskGen)` describes the first violated property.
pub fn verify_example(ex: &TaskExample, vocab: &Vocabulary) -> Result<()> {
    let fail = |msg: String| Err(Error::TaskGen(format!("{} #{}: {}", ex.kind.name(), ex.index, msg)));
    match &ex.meta {
        TaskMeta::Counting { count, centers, .. } => {
            if !(2..=10).contains(count) {
                return fail(format!("count {count} outside {{2..10}}"));
            }
            if centers.len() != *count as usize {
                return fail("center list disagrees with count".into());
            }
            let found = raster::count_components(&ex.image, counting::TARGET_LO, counting::TARGET_HI);
            if found != *count as usize {
                return fail(format!("flood fill found {found}, answer says {count}"));
            }
            let expect = vocab.encode_count_answer(*count);
            if ex.answer_tokens != expect {
                return fail("answer tokens do not encode the count".into());
            }
        }
        TaskMeta::Localization { gold, distractor, gold_letter } => {
            let v = iou(gold, distractor);
            if !(0.2..=0.5).contains(&v) {
                return fail(format!("distractor IoU {v:.4} outside [0.2, 0.5]"));
            }
            let frac = gold.area() as f64 / (ex.image.h * ex.image.w) as f64;
            if !(0.15..=0.5).contains(&frac) {
                return fail(format!("gold area fraction {frac:.3} outside [0.15, 0.5]"));
            }
            if ex.answer_tokens != vocab.encode_mcq_answer(*gold_letter) {
                return fail("answer letter does not match gold box".into());
            }
        }
        TaskMeta::Jigsaw { gold_rect, distractor_rect, gold_letter, gold_pixels, canvas_h } => {
            if gold_rect.intersects(distractor_rect) {
                return fail("distractor overlaps the gold quadrant".into());
            }
            let (qh, qw) =
                ((gold_rect.y1 - gold_rect.y0) as usize, (gold_rect.x1 - gold_rect.x0) as usize);
            // Masked quadrant must be black in the composed raster.
            let masked = ex.image.crop(gold_rect.y0 as usize, gold_rect.x0 as usize, qh, qw);
            if masked.iter().any(|&v| v != 0.0) {
                return fail("gold quadrant is not blacked out".into());
            }
            // The option strip at the gold letter must equal the pre-masking
            // canvas content; the other option must equal the distractor crop
            // (still visible in the canvas).
            let strip_y = canvas_h + 1;
            let gold_x = if *gold_letter == 0 { 0 } else { qw };
            let option_gold = ex.image.crop(strip_y, gold_x, qh, qw);
            if option_gold != *gold_pixels {
                return fail("gold option pixels differ from pre-masking canvas".into());
            }
            let other_x = if *gold_letter == 0 { qw } else { 0 };
            let option_other = ex.image.crop(strip_y, other_x, qh, qw);
            let distractor = ex.image.crop(
                distractor_rect.y0 as usize,
                distractor_rect.x0 as usize,
                qh,
                qw,
            );
            if option_other != distractor {
                return fail("distractor option pixels differ from canvas crop".into());
            }
            if ex.answer_tokens != vocab.encode_mcq_answer(*gold_letter) {
                return fail("answer letter does not match gold patch".into());
            }
        }
        TaskMeta::Reflectance { y_a, y_b, label, .. } => {
            let rel = (y_a - y_b).abs() / y_a.max(*y_b).max(1e-8);
            let expect = if rel <= reflectance::SAME_THRESHOLD {
                2
            } else if y_a < y_b {
                0
            } else {
                1
            };
            if *label != expect {
                return fail(format!("label {label} contradicts rel={rel:.4} rule"));
            }
            if ex.answer_tokens != vocab.encode_mcq_answer(*label) {
                return fail("answer tokens do not encode the label".into());
            }
        }
        TaskMeta::Correspondence { homography, ref_point, candidates, answer_letter } => {
            let (tx, ty) = apply_homography(homography, ref_point.0, ref_point.1);
            let (cx, cy) = candidates[*answer_letter];
            let dist = ((tx - cx).powi(2) + (ty - cy).powi(2)).sqrt();
            if dist > 1.0 {
                return fail(format!("true candidate {dist:.3}px from analytic warp of REF"));
            }
            for i in 0..4 {
                for j in i + 1..4 {
                    let d = ((candidates[i].0 - candidates[j].0).powi(2)
                        + (candidates[i].1 - candidates[j].1).powi(2))
                    .sqrt();
                    if d < correspondence::MIN_SEPARATION {
                        return fail(format!("candidates {i},{j} only {d:.2}px apart"));
                    }
                }
            }
            if ex.answer_tokens != vocab.encode_mcq_answer(*answer_letter) {
                return fail("answer letter does not match true candidate".into());
            }
        }
    }
    if ex.prompt_tokens != vocab.encode_prompt(ex.kind)? {
        return fail("prompt tokens do not match the task template".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_boxes() {
        let a = BBox::new(3, 4, 10, 12);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        let a = BBox::new(0, 0, 5, 5);
        let b = BBox::new(6, 6, 10, 10);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_spec_example() {
        // (10,10,30,30) vs (16,16,36,36): intersection 14^2 = 196,
        // union 2*400 - 196 = 604.
        let a = BBox::new(10, 10, 30, 30);
        let b = BBox::new(16, 16, 36, 36);
        let v = iou(&a, &b);
        assert!((v - 196.0 / 604.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn identity_homography_fixes_points() {
        let h = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(apply_homography(&h, 5.0, 9.0), (5.0, 9.0));
    }

    #[test]
    fn translation_homography_shifts_points() {
        let h = [1.0, 0.0, 3.0, 0.0, 1.0, -2.0, 0.0, 0.0, 1.0];
        assert_eq!(apply_homography(&h, 5.0, 9.0), (8.0, 7.0));
    }
}
