//! Relative reflectance task: which marked point has darker albedo?
//!
//! A piecewise-constant grayscale albedo field is multiplied by a smooth
//! shading gradient; the rendered image shows the product, so brightness at
//! a point confounds albedo and illumination. Labels come from disk-averaged
//! albedo luminance: rel = |Y_A − Y_B| / max(Y_A, Y_B, 1e-8), with
//! "about the same" (option C) whenever rel ≤ 0.10. The sampling schedule
//! targets roughly one quarter C labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TaskKind, Vocabulary};

use super::raster::{Raster, MARK_LETTER};
use super::{TaskExample, TaskMeta, SCENE_BUDGET};

pub const SIZE: usize = 32;
pub const SAME_THRESHOLD: f64 = 0.10;
/// Fraction of examples whose label is forced to "about the same".
pub const SAME_FRACTION: f64 = 0.25;
const DISK_R: f64 = 2.0;
const MARGIN: i64 = 4;
const MIN_POINT_DIST: f64 = 8.0;

fn albedo_field(rng: &mut ChaCha8Rng) -> Raster {
    let mut a = Raster::new(SIZE, SIZE);
    a.fill_rect(0, 0, SIZE as i64, SIZE as i64, rng.random::<f64>() * 0.5 + 0.25);
    for _ in 0..rng.random_range(4..=7usize) {
        let v = rng.random::<f64>() * 0.75 + 0.15;
        if rng.random::<bool>() {
            let y0 = rng.random_range(0..SIZE as i64 - 4);
            let x0 = rng.random_range(0..SIZE as i64 - 4);
            let h = rng.random_range(5..=16i64);
            let w = rng.random_range(5..=16i64);
            a.fill_rect(y0, x0, y0 + h, x0 + w, v);
        } else {
            let cy = rng.random_range(2..SIZE as i64 - 2) as f64;
            let cx = rng.random_range(2..SIZE as i64 - 2) as f64;
            a.fill_disk(cy, cx, rng.random::<f64>() * 4.0 + 2.5, v);
        }
    }
    a
}

/// Disk-averaged albedo luminance at a point.
fn disk_luminance(albedo: &Raster, cy: f64, cx: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    let r = DISK_R;
    for y in (cy - r).floor() as i64..=(cy + r).ceil() as i64 {
        for x in (cx - r).floor() as i64..=(cx + r).ceil() as i64 {
            if y < 0 || x < 0 || y >= SIZE as i64 || x >= SIZE as i64 {
                continue;
            }
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                sum += albedo.get(y as usize, x as usize);
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn sample_point(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (
        rng.random_range(MARGIN..SIZE as i64 - MARGIN) as f64,
        rng.random_range(MARGIN..SIZE as i64 - MARGIN) as f64,
    )
}

pub fn generate(
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: u64,
    vocab: &Vocabulary,
) -> Result<TaskExample> {
    for _ in 0..SCENE_BUDGET {
        let albedo = albedo_field(rng);
        let want_same = rng.random::<f64>() < SAME_FRACTION;

        let mut found = None;
        for _ in 0..200 {
            let pa = sample_point(rng);
            let pb = sample_point(rng);
            let d = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
            if d < MIN_POINT_DIST {
                continue;
            }
            let ya = disk_luminance(&albedo, pa.0, pa.1);
            let yb = disk_luminance(&albedo, pb.0, pb.1);
            if ya.max(yb) < 1e-6 {
                continue; // degenerate all-black disks
            }
            let rel = (ya - yb).abs() / ya.max(yb).max(1e-8);
            if want_same != (rel <= SAME_THRESHOLD) {
                continue;
            }
            found = Some((pa, pb, ya, yb, rel));
            break;
        }
        let Some((pa, pb, ya, yb, rel)) = found else { continue };

        let label = if rel <= SAME_THRESHOLD {
            2
        } else if ya < yb {
            0
        } else {
            1
        };

        // Render: albedo times a smooth multiplicative shading field.
        let dir = rng.random::<f64>() * std::f64::consts::TAU;
        let freq = 0.08 + rng.random::<f64>() * 0.12;
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let mut image = Raster::new(SIZE, SIZE);
        for y in 0..SIZE {
            for x in 0..SIZE {
                let t = (x as f64 * dir.cos() + y as f64 * dir.sin()) * freq + phase;
                let shade = 0.62 + 0.38 * (0.5 + 0.5 * t.sin());
                image.set(y, x, (albedo.get(y, x) * shade).clamp(0.0, 1.0));
            }
        }
        // Markers go on after luminance is computed; rings leave the
        // measured disks untouched.
        image.draw_ring(pa.0, pa.1, 3.0, MARK_LETTER[0]);
        image.draw_ring(pb.0, pb.1, 3.0, MARK_LETTER[1]);

        return Ok(TaskExample {
            kind: TaskKind::Reflectance,
            seed,
            index,
            image,
            prompt_tokens: vocab.encode_prompt(TaskKind::Reflectance)?,
            answer_tokens: vocab.encode_mcq_answer(label),
            meta: TaskMeta::Reflectance { point_a: pa, point_b: pb, y_a: ya, y_b: yb, label },
        });
    }
    Err(Error::TaskGen("reflectance: sampling budget exhausted".into()))
}
