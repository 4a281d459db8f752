mod common;

use dogseg::datasetkit::{rotate_frame, ClassRatio};
use dogseg::encoding::cell_mahalanobis;
use dogseg::simworld::{generate_dataset, generate_scene, SceneSpec, UNKNOWN_OCC};
use proptest::prelude::*;

#[test]
fn default_class_ratio_is_heavily_imbalanced() {
    let frames = generate_dataset(&SceneSpec::paper_like(), 60, 11).unwrap();
    let r = ClassRatio::of_masks(frames.iter().map(|f| &f.mask));
    let ratio = r.ratio();
    assert!((1.0 / 300.0..=1.0 / 120.0).contains(&ratio), "dynamic share {ratio} ({r})");
}

fn quantile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn clutter_is_slower_than_movers_after_normalisation() {
    let spec = SceneSpec::paper_like();
    let clean = spec.without_corruption();
    let mut clutter = Vec::new();
    let mut movers = Vec::new();
    for seed in 0..40 {
        let a = generate_scene(&clean, seed).unwrap().remove(0);
        let b = generate_scene(&spec, seed).unwrap().remove(0);
        for ((ca, cb), l) in a.grid.cells().iter().zip(b.grid.cells()).zip(b.mask.labels()) {
            let norm = cb.speed() as f64 / (((cb.var_x + cb.var_y) / 2.0) as f64).sqrt();
            if l.is_dynamic() {
                movers.push(norm);
            } else if ca.occ == UNKNOWN_OCC && cb.occ != UNKNOWN_OCC {
                clutter.push(norm);
            }
        }
    }
    assert!(clutter.len() > 1000 && movers.len() > 1000);
    for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let (c, m) = (quantile(&mut clutter, q), quantile(&mut movers, q));
        assert!(c < m, "quantile {q}: clutter {c} vs movers {m}");
    }
}

#[test]
fn scenes_are_reproducible() {
    let spec = SceneSpec::paper_like();
    assert_eq!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 5).unwrap());
    assert_ne!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 6).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn quarter_turns_permute_cells_and_keep_mahalanobis(seed in 0u64..1000, k in 1i32..4) {
        let f = generate_scene(&SceneSpec::paper_like(), seed).unwrap().remove(0);
        let (g, m) = rotate_frame(&f.grid, &f.mask, 90 * k).unwrap();
        prop_assert_eq!(m.dynamic_count(), f.mask.dynamic_count());
        let mut a: Vec<f64> = f.grid.cells().iter().map(|c| cell_mahalanobis(c).unwrap()).collect();
        let mut b: Vec<f64> = g.cells().iter().map(|c| cell_mahalanobis(c).unwrap()).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-3 * (1.0 + x), "{} vs {}", x, y);
        }
    }

    #[test]
    fn full_turn_in_steps_returns_to_start_for_quarter_steps(seed in 0u64..1000) {
        let f = generate_scene(&SceneSpec::paper_like(), seed).unwrap().remove(0);
        let mut cur = (f.grid.clone(), f.mask.clone());
        for _ in 0..4 {
            cur = rotate_frame(&cur.0, &cur.1, 90).unwrap();
        }
        prop_assert_eq!(&cur.1, &f.mask);
        for (x, y) in cur.0.cells().iter().zip(f.grid.cells()) {
            prop_assert!((x.occ - y.occ).abs() < 1e-6);
            prop_assert!((x.vx - y.vx).abs() < 1e-4 && (x.vy - y.vy).abs() < 1e-4);
        }
    }

    #[test]
    fn rotation_keeps_the_dynamic_area_roughly(seed in 0u64..1000, step in 1i32..36) {
        let f = generate_scene(&SceneSpec::paper_like(), seed).unwrap().remove(0);
        let (_, m) = rotate_frame(&f.grid, &f.mask, 10 * step).unwrap();
        let (a, b) = (f.mask.dynamic_count() as f64, m.dynamic_count() as f64);
        // movers near the border may rotate out of view
        prop_assert!(b <= a * 1.3 + 4.0, "{} -> {}", a, b);
    }
}
