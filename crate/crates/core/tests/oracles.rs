mod common;

use boxlens::influence::{self, InfluenceConfig};
use boxlens::perturbation::{self, BlurConfig, FeatureMask};
use boxlens::segmentation::{self, KMeansConfig};
use boxlens::{fixture, Image, InfluenceCategory, PredictionVector};
use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn blur_matches_dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w, c, sigma) in [(9, 13, 1, 1.3), (16, 16, 3, 2.0), (5, 4, 2, 3.0)] {
        let img = random_image(&mut rng, h, w, c);
        let cfg = BlurConfig::with_sigma(sigma).unwrap();
        let fast = perturbation::gaussian_blur(&img, &cfg).unwrap();
        let slow = dense_blur(&img, sigma, cfg.kernel_radius);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn blur_impulse_is_the_kernel() {
    let mut img = Image::filled(21, 21, 1, 0.0);
    img.set(10, 10, 0, 1.0);
    let cfg = BlurConfig::with_sigma(1.5).unwrap();
    let out = perturbation::gaussian_blur(&img, &cfg).unwrap();
    let k = perturbation::gaussian_kernel(1.5, cfg.kernel_radius);
    let r = cfg.kernel_radius;
    for y in 0..21 {
        for x in 0..21 {
            let (dy, dx) = (y as isize - 10, x as isize - 10);
            let want = if dy.unsigned_abs() <= r && dx.unsigned_abs() <= r {
                k[(dy + r as isize) as usize] * k[(dx + r as isize) as usize]
            } else {
                0.0
            };
            assert!((out.get(y, x, 0) - want).abs() < 1e-12);
        }
    }
    assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn blur_semigroup_away_from_borders() {
    // Two blurs of s1 and s2 approximate one blur of sqrt(s1^2 + s2^2).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng, 48, 48, 1);
    let once = |im: &Image, s: f64| {
        let cfg = BlurConfig {
            kernel_radius: (5.0 * s).ceil() as usize,
            ..BlurConfig::with_sigma(s).unwrap()
        };
        perturbation::gaussian_blur(im, &cfg).unwrap()
    };
    let twice = once(&once(&img, 1.2), 1.6);
    let direct = once(&img, 2.0);
    for y in 16..32 {
        for x in 16..32 {
            let rel = (twice.get(y, x, 0) - direct.get(y, x, 0)).abs() / 255.0;
            assert!(rel < 1e-3, "({y}, {x}): {rel}");
        }
    }
}

#[test]
fn constant_image_survives_blur() {
    let img = Image::filled(7, 11, 3, 91.5);
    let out = perturbation::gaussian_blur(&img, &BlurConfig::with_sigma(4.0).unwrap()).unwrap();
    assert!(out.data().iter().all(|v| (v - 91.5).abs() < 1e-9));
}

#[test]
fn masked_blur_touches_only_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 12, 10, 3);
    let pixels = random_mask(&mut rng, 12, 10);
    let mask = FeatureMask::new(0, pixels.clone());
    let cfg = BlurConfig::with_sigma(1.7).unwrap();
    let out = perturbation::apply_masked_blur(&img, &mask, &cfg).unwrap();
    let oracle = dense_masked_blur(&img, &pixels, 1.7, cfg.kernel_radius);
    for y in 0..12 {
        for x in 0..10 {
            for c in 0..3 {
                if pixels[[y, x]] {
                    assert!((out.get(y, x, c) - oracle.get(y, x, c)).abs() < 1e-9);
                } else {
                    assert_eq!(out.get(y, x, c).to_bits(), img.get(y, x, c).to_bits());
                }
            }
        }
    }
}

#[test]
fn lloyd_matches_textbook_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let n = rng.random_range(6..40);
        let d = rng.random_range(1..5);
        let k = rng.random_range(1..5).min(n);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let m = matrix(&rows);
        let init = segmentation::kmeans_plus_plus(m.data.view(), k, &mut rng);
        let cfg = KMeansConfig { k, ..KMeansConfig::default() };
        let fit = segmentation::lloyd(m.data.view(), init.clone(), &cfg);
        let naive = naive_lloyd(&rows, init.outer_iter().map(|r| r.to_vec()).collect(), cfg.max_iterations, cfg.tolerance);
        for (a, b) in fit.centroids.outer_iter().zip(&naive.centroids) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!((fit.inertia - naive.inertia).abs() < 1e-9);
    }
}

#[test]
fn kmeans_finds_optimal_two_partition_of_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..10 {
        let (rows, truth) = two_blobs(&mut rng, 5, 2);
        let cfg = KMeansConfig { k: 2, seed, ..KMeansConfig::default() };
        let fit = segmentation::kmeans_fit(&matrix(&rows), &cfg).unwrap();
        assert!((fit.inertia - brute_force_inertia(&rows, 2)).abs() < 1e-9);
        let (labels, _) = segmentation::nearest_centroids(matrix(&rows).data.view(), fit.centroids.view());
        assert!(same_partition(&labels, &truth));
    }
}

#[test]
fn assigned_labels_are_brute_force_nearest() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let mut m = matrix(&rows);
    m.height = 5;
    m.width = 6;
    m.pixel_index = (0..30).map(|i| (i / 6, i % 6)).collect();
    let cfg = KMeansConfig { k: 4, seed: 1, ..KMeansConfig::default() };
    let fit = segmentation::kmeans_fit(&m, &cfg).unwrap();
    let seg = segmentation::assign_labels(&m, &fit.centroids).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let d: Vec<f64> = fit
            .centroids
            .outer_iter()
            .map(|c| c.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let best = (0..4).fold(0, |b, j| if d[j] < d[b] { j } else { b });
        assert_eq!(seg.label_map[[i / 6, i % 6]], best);
    }
}

#[test]
fn analyze_feature_on_tiny_cnn() {
    let model = Counting::new(tiny_model());
    let img = fixture::textured_quadrant_image();
    let original = boxlens::BlackBox::predict(&model, &img).unwrap();
    let blur = BlurConfig::with_sigma(1.0).unwrap();
    let cfg = InfluenceConfig::default();
    let quadrant = FeatureMask::new(0, Array2::from_shape_fn((8, 8), |(y, x)| y < 4 && x < 4));
    let rest = FeatureMask::new(1, quadrant.pixels.mapv(|p| !p));
    let empty = FeatureMask::new(2, Array2::from_elem((8, 8), false));
    let q = influence::analyze_feature(&model, &img, &original, &quadrant, 0, &blur, &cfg).unwrap();
    let r = influence::analyze_feature(&model, &img, &original, &rest, 0, &blur, &cfg).unwrap();
    let e = influence::analyze_feature(&model, &img, &original, &empty, 0, &blur, &cfg).unwrap();
    assert_eq!(model.calls(), 3);
    assert!(q.ir > 1.0 && q.ir > r.ir);
    assert!(q.p_true_perturbed < r.p_true_perturbed);
    assert_eq!(q.category, InfluenceCategory::Positive);
    assert_eq!((e.ir, e.irp, e.category), (1.0, 1.0, InfluenceCategory::Neutral));
    // IR recomputed from the perturbed prediction by hand.
    let perturbed = perturbation::apply_masked_blur(&img, &quadrant, &blur).unwrap();
    let p = boxlens::BlackBox::predict(&model, &perturbed).unwrap();
    assert!((q.ir - original.get(0) / p.get(0)).abs() < 1e-12);
    let weights: Vec<f64> = original.probabilities().to_vec();
    let irs: Vec<f64> = (0..4).map(|c| original.get(c) / p.get(c)).collect();
    assert!((q.irp - brute_irp(&weights, &irs, 0)).abs() < 1e-9);
}

fn prediction(raw: Vec<f64>) -> PredictionVector {
    PredictionVector::normalized(raw).unwrap()
}

proptest! {
    #[test]
    fn irp_is_scale_invariant(
        raw in prop::collection::vec(0.01f64..1.0, 2..8),
        ir in prop::collection::vec(0.01f64..10.0, 8),
        lambda in 0.1f64..10.0,
    ) {
        let w = prediction(raw);
        let ir = &ir[..w.len()];
        let cfg = InfluenceConfig::default();
        let a = influence::irp_index(ir, &w, 0, &cfg).unwrap().value;
        let scaled: Vec<f64> = ir.iter().map(|v| v * lambda).collect();
        let b = influence::irp_index(&scaled, &w, 0, &cfg).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn ir_decreases_in_perturbed_probability(p in 0.001f64..1.0, a in 1e-7f64..1.0, b in 1e-7f64..1.0) {
        prop_assume!(a < b);
        let cfg = InfluenceConfig::default();
        prop_assert!(influence::ir_index(p, a, &cfg) > influence::ir_index(p, b, &cfg));
    }

    #[test]
    fn kmeans_labels_partition_and_inertia_never_rises(
        seed in 0u64..1000,
        n in 4usize..60,
        k in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let k = k.min(n);
        let cfg = KMeansConfig { k, seed, ..KMeansConfig::default() };
        let m = matrix(&rows);
        let fit = segmentation::kmeans_fit(&m, &cfg).unwrap();
        for pair in fit.inertia_history.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12);
        }
        let seg = segmentation::assign_labels(&m, &fit.centroids).unwrap();
        let masks = segmentation::extract_masks(&seg);
        prop_assert_eq!(masks.len(), k);
        prop_assert!(segmentation::verify_partition(&masks, 1, n).is_ok());
        // Same seed, same answer.
        prop_assert_eq!(segmentation::kmeans_fit(&m, &cfg).unwrap(), fit);
    }

    #[test]
    fn masked_blur_preserves_outside(seed in 0u64..500, sigma in 0.3f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 9, 7, 2);
        let mask = FeatureMask::new(0, random_mask(&mut rng, 9, 7));
        let out = perturbation::apply_masked_blur(&img, &mask, &BlurConfig::with_sigma(sigma).unwrap()).unwrap();
        for ((y, x), &on) in mask.pixels.indexed_iter() {
            if !on {
                prop_assert_eq!(out.pixel(y, x), img.pixel(y, x));
            }
        }
    }
}
