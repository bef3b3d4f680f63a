use av_grade::nn::{cross_entropy, focal_loss};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random probability vector over `k` classes and a one-hot target.
fn sample(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let k = rng.gen_range(2..8);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let y = raw.iter().map(|v| v / s).collect();
    let mut t = vec![0.0; k];
    t[rng.gen_range(0..k)] = 1.0;
    (y, t)
}

#[test]
fn gamma_zero_is_cross_entropy_on_10k_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let (y, t) = sample(&mut rng);
        let alpha: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
        let ones = vec![1.0; y.len()];
        assert!((focal_loss(&y, &t, 0.0, &ones) - cross_entropy(&y, &t, &ones)).abs() < 1e-12);
        assert!((focal_loss(&y, &t, 0.0, &alpha) - cross_entropy(&y, &t, &alpha)).abs() < 1e-12);
    }
}

#[test]
fn larger_gamma_discounts_more_on_10k_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let p: f64 = rng.gen_range(1e-3..0.999);
        let g1: f64 = rng.gen_range(0.0..4.0);
        let g2 = g1 + rng.gen_range(0.1..2.0);
        let y = [p, 1.0 - p];
        let t = [1.0, 0.0];
        let a = [1.0, 1.0];
        assert!(focal_loss(&y, &t, g1, &a) > focal_loss(&y, &t, g2, &a), "p={p} g1={g1} g2={g2}");
    }
}

proptest! {
    #[test]
    fn decreasing_in_true_class_probability(p in 1e-4f64..0.99, dp in 1e-3f64..0.5, gamma in 0.0f64..5.0) {
        let q = (p + dp).min(0.9999);
        prop_assume!(q > p);
        let l = |v: f64| focal_loss(&[v, 1.0 - v], &[1.0, 0.0], gamma, &[1.0, 1.0]);
        prop_assert!(l(p) > l(q));
    }

    #[test]
    fn weight_scales_linearly(p in 1e-4f64..1.0, gamma in 0.0f64..5.0, a in 0.01f64..1.0) {
        let y = [p, 1.0 - p];
        let t = [1.0, 0.0];
        let base = focal_loss(&y, &t, gamma, &[1.0, 1.0]);
        prop_assert!((focal_loss(&y, &t, gamma, &[a, 1.0]) - a * base).abs() <= 1e-12 * base.max(1.0));
    }
}
