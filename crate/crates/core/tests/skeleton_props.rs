use av_grade::raster::Grid;
use av_grade::vesselgraph::skeletonize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random blobs and strokes, roughly what a segmentation mask looks like.
fn fixture(seed: u64) -> Grid<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(16..64), rng.gen_range(16..64));
    let mut m = Grid::new(w, h, false);
    for _ in 0..rng.gen_range(1..8) {
        let (x0, y0) = (rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64);
        let (x1, y1) = (rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64);
        let r = rng.gen_range(0.5..4.0);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = (dx * dx + dy * dy).max(1e-9);
                let t = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (x0 + t * dx - px, y0 + t * dy - py);
                if qx * qx + qy * qy <= r * r {
                    m.set(x, y, true);
                }
            }
        }
    }
    for _ in 0..rng.gen_range(0..40) {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        m.set(x, y, !*m.get(x, y));
    }
    m
}

#[test]
fn thinning_is_idempotent_and_keeps_components() {
    for seed in 0..200 {
        let m = fixture(seed);
        let s = skeletonize(&m);
        assert!(s.thick_blocks().is_empty(), "seed {seed}");
        assert_eq!(s.mask().components_8(), m.components_8(), "seed {seed}");
        assert!(s.pixels().all(|p| m.on(p)), "seed {seed}");
        assert_eq!(&skeletonize(s.mask()), &s, "seed {seed}");
    }
}
