//! Generator oracles: every stored answer must be re-derivable from meta and
//! raster by an independent check, and generation must be a pure function of
//! (seed, index).

use livr_core::taskgen::{gen_example, verify_example, TaskMeta};
use livr_core::vocab::{TaskKind, Vocabulary};

const SAMPLES: u64 = 300;

#[test]
fn all_generators_verify_over_many_samples() {
    let vocab = Vocabulary::default_with_latents(0);
    for kind in TaskKind::GENERATED {
        for i in 0..SAMPLES {
            let ex = gen_example(kind, 1234, i, &vocab).unwrap();
            verify_example(&ex, &vocab)
                .unwrap_or_else(|e| panic!("{} #{i} failed its oracle: {e}", kind.name()));
        }
    }
}

#[test]
fn generation_is_bitwise_deterministic_in_seed_and_index() {
    let vocab = Vocabulary::default_with_latents(0);
    for kind in TaskKind::GENERATED {
        let a = gen_example(kind, 7, 42, &vocab).unwrap();
        let b = gen_example(kind, 7, 42, &vocab).unwrap();
        assert_eq!(a, b, "{} not deterministic", kind.name());
        assert_eq!(
            a.image.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.image.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        );
        let c = gen_example(kind, 8, 42, &vocab).unwrap();
        assert_ne!(a.image.data, c.image.data, "{} ignores seed", kind.name());
        let d = gen_example(kind, 7, 43, &vocab).unwrap();
        assert_ne!(a.image.data, d.image.data, "{} ignores index", kind.name());
    }
}

#[test]
fn counting_counts_are_roughly_uniform() {
    let vocab = Vocabulary::default_with_latents(0);
    let n = 1800u64;
    let mut freq = [0usize; 11];
    for i in 0..n {
        let ex = gen_example(TaskKind::Counting, 99, i, &vocab).unwrap();
        let TaskMeta::Counting { count, .. } = ex.meta else { unreachable!() };
        freq[count as usize] += 1;
    }
    let expect = n as f64 / 9.0;
    for c in 2..=10 {
        let got = freq[c] as f64;
        assert!(
            (got - expect).abs() < expect * 0.25,
            "count {c} appeared {got} times, expected ~{expect}"
        );
    }
}

#[test]
fn localization_answer_letters_balanced() {
    let vocab = Vocabulary::default_with_latents(0);
    let n = 1000u64;
    let mut a = 0usize;
    for i in 0..n {
        let ex = gen_example(TaskKind::Localization, 17, i, &vocab).unwrap();
        let TaskMeta::Localization { gold_letter, .. } = ex.meta else { unreachable!() };
        if gold_letter == 0 {
            a += 1;
        }
    }
    let frac = a as f64 / n as f64;
    assert!((0.45..=0.55).contains(&frac), "A fraction {frac} outside 50% ± 5%");
}

#[test]
fn correspondence_candidates_well_separated() {
    let vocab = Vocabulary::default_with_latents(0);
    for i in 0..SAMPLES {
        let ex = gen_example(TaskKind::Correspondence, 55, i, &vocab).unwrap();
        let TaskMeta::Correspondence { candidates, .. } = &ex.meta else { unreachable!() };
        for a in 0..4 {
            for b in a + 1..4 {
                let d = ((candidates[a].0 - candidates[b].0).powi(2)
                    + (candidates[a].1 - candidates[b].1).powi(2))
                .sqrt();
                assert!(d >= 7.0, "#{i}: candidates {a},{b} at distance {d}");
            }
        }
    }
}

#[test]
fn rasters_stay_in_unit_range() {
    let vocab = Vocabulary::default_with_latents(0);
    for kind in TaskKind::GENERATED {
        for i in 0..50 {
            let ex = gen_example(kind, 31, i, &vocab).unwrap();
            assert!(
                ex.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{} #{i} leaves [0,1]",
                kind.name()
            );
        }
    }
}

#[test]
fn registry_only_tasks_have_templates_but_no_generator() {
    let vocab = Vocabulary::default_with_latents(0);
    for kind in [
        TaskKind::ArtStyle,
        TaskKind::SemanticCorrespondence,
        TaskKind::FunctionalCorrespondence,
        TaskKind::VisualSimilarity,
    ] {
        assert!(!kind.has_generator());
        assert!(vocab.encode_prompt(kind).is_ok());
        assert!(gen_example(kind, 0, 0, &vocab).is_err());
    }
}
