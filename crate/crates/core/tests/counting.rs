use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tassel_core::counter::window_grid;
use tassel_core::supervision::{density_from_dots, redundant_gt};
use tassel_core::visualize::visualize;
use tassel_core::{
    image_count, normalize, Branch, ModelConfig, NormalizedCountMap, RedundantCountMap, TasselModel, Tensor, VisMode,
    WindowGeometry,
};

fn random_map(geom: WindowGeometry, rng: &mut ChaCha8Rng) -> RedundantCountMap {
    let values = (0..geom.len()).map(|_| rng.gen_range(0.0..5.0)).collect();
    RedundantCountMap::new(values, geom, Branch(0)).unwrap()
}

#[test]
fn window_enumeration_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..30), rng.gen_range(1..30));
        let k_p = rng.gen_range(1..=h.min(w));
        let z_p = rng.gen_range(1..=k_p + 2);
        let mut brute = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if y % z_p == 0 && x % z_p == 0 && y + k_p <= h && x + k_p <= w {
                    brute.push((y, x));
                }
            }
        }
        assert_eq!(window_grid(h, w, k_p, z_p).unwrap(), brute, "{h}x{w} k_p={k_p} z_p={z_p}");
    }
}

proptest! {
    #[test]
    fn normalizer_is_linear(h in 2usize..16, w in 2usize..16, kp in 1usize..4, zp in 1usize..4, a in -3.0..3.0f64, b in -3.0..3.0f64, seed in 0u64..1000) {
        let kp = kp.min(h).min(w);
        let geom = WindowGeometry::new(16 * kp, 16 * zp, 16, (h, w)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r1, r2) = (random_map(geom, &mut rng), random_map(geom, &mut rng));
        let mixed: Vec<f64> = r1.values.iter().zip(&r2.values).map(|(x, y)| a * x + b * y).collect();
        let lhs = normalize(&RedundantCountMap::new(mixed, geom, Branch(0)).unwrap());
        let (n1, n2) = (normalize(&r1), normalize(&r2));
        for i in 0..h * w {
            let rhs = a * n1.values()[i] + b * n2.values()[i];
            prop_assert!((lhs.values()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn density_mass_equals_dot_count(dots in prop::collection::vec((0.0..63.99f64, 0.0..47.99f64), 0..40), sigma in 0.3..12.0f64) {
        let d = density_from_dots(&dots, 64, 48, sigma).unwrap();
        prop_assert!((d.sum() - dots.len() as f64).abs() < 1e-6);
    }
}

/// Dots whose kernels stay where every window touching them has full
/// token coverage conserve their mass through redundant_gt and normalize.
#[test]
fn interior_mass_is_conserved_by_every_branch() {
    let side = 640;
    let grid = (side / 16, side / 16);
    let sigma = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in [32usize, 64, 128] {
        let geom = WindowGeometry::new(k, 16, 16, grid).unwrap();
        let lo = ((2 * geom.k_p - 2) * 16) as f64 + 4.0 * sigma + 1.0;
        let hi = ((grid.0 - 2 * geom.k_p + 2) * 16) as f64 - 4.0 * sigma - 1.0;
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let dots: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(lo..hi), rng.gen_range(lo..hi))).collect();
            let d = density_from_dots(&dots, side, side, sigma).unwrap();
            let total = image_count(&normalize(&redundant_gt(&d, &geom, Branch(0)).unwrap()));
            assert!((total - n as f64).abs() / (n as f64) < 1e-9, "k={k}: {total} for {n} dots");
        }
    }
}

#[test]
fn shifting_features_by_one_stride_shifts_the_count_map() {
    let model = TasselModel::new(ModelConfig::tiny(), 3).unwrap();
    let c = model.config().dim + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (12, 10);
    let f = Tensor::uniform(&[h, w, c], 1.0, &mut rng);
    let z_p = model.config().output_stride / model.config().patch_size;
    let cropped = Tensor::new(&[h - z_p, w, c], f.data()[z_p * w * c..].to_vec()).unwrap();
    for b in 0..model.branch_count() {
        let k_p = model.config().branch_blocks[b] / model.config().patch_size;
        if k_p + z_p > h - z_p {
            continue;
        }
        let full = model.branch_counts(Branch(b), &f, false).unwrap();
        let shifted = model.branch_counts(Branch(b), &cropped, false).unwrap();
        let (rows, cols) = (shifted.shape()[0], shifted.shape()[1]);
        // row 0 of the crop sees the zero padding of the slack conv
        for r in 1..rows {
            for x in 0..cols {
                let diff = (shifted.get(&[r, x]) - full.get(&[r + 1, x])).abs();
                assert!(diff < 1e-10, "branch {b} cell ({r},{x}) differs by {diff}");
            }
        }
    }
}

#[test]
fn perturbing_one_branch_leaves_the_others_bit_identical() {
    let model = TasselModel::new(ModelConfig::tiny(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = Tensor::uniform(&[8, 8, model.config().dim + 1], 1.0, &mut rng);
    let mut perturbed = model.clone();
    for slot in model.branch_slots(Branch(1)) {
        for v in perturbed.params_mut().tensor_mut(slot).data_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
    }
    for b in [0, 2] {
        assert_eq!(
            model.branch_counts(Branch(b), &f, false).unwrap(),
            perturbed.branch_counts(Branch(b), &f, false).unwrap()
        );
    }
    assert_ne!(
        model.branch_counts(Branch(1), &f, false).unwrap(),
        perturbed.branch_counts(Branch(1), &f, false).unwrap()
    );
    let mut slots: Vec<usize> = (0..3).flat_map(|b| model.branch_slots(Branch(b))).collect();
    let n = slots.len();
    slots.sort();
    slots.dedup();
    assert_eq!(slots.len(), n);
}

#[test]
fn inference_counts_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..5 {
        let model = TasselModel::new(ModelConfig::tiny(), seed).unwrap();
        let f = Tensor::uniform(&[8, 8, model.config().dim + 1], 5.0, &mut rng);
        for b in 0..3 {
            let rect = model.branch_counts(Branch(b), &f, true).unwrap();
            let raw = model.branch_counts(Branch(b), &f, false).unwrap();
            assert!(rect.data().iter().all(|&v| v >= 0.0));
            assert!(rect.data().iter().zip(raw.data()).all(|(r, v)| *r == v.max(0.0)));
        }
    }
}

#[test]
fn visualize_hints_match_n_top_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (rows, cols) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let c = NormalizedCountMap::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
        let m: Vec<f64> = (0..rows * cols).map(|_| rng.gen()).collect();
        let m_e = rng.gen_range(0.0..10.0);
        let det = visualize(&c, &m, rows, cols, m_e, VisMode::Detection).unwrap();
        let den = visualize(&c, &m, rows, cols, m_e, VisMode::Density).unwrap();
        assert_eq!(det.hint, den.hint);
        assert_eq!(det.hint.iter().filter(|&&h| h).count(), det.n_top);
        assert!(det.n_top <= rows * cols);
    }
}
