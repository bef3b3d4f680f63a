//! Runs candidate detection on noisy label maps and scores it against the
//! construction ground truth.
//!
//! cargo run --release --example detect_crossings -- [scenes]

use av_grade::synthgen::{corrupt_labels, generate_scene, SceneSpec};
use av_grade::vesselgraph::{detect_crossing_candidates, refine_av_map, skeletonize, DetectParams};

fn main() -> av_grade::Result<()> {
    let scenes: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let params = DetectParams::default();
    let (mut tp, mut fp, mut missed, mut total) = (0, 0, 0, 0);
    for seed in 0..scenes {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let (map, truth) = generate_scene(&spec)?;
        // Simulate an imperfect A/V classifier, then clean it with the vessel mask.
        let raw = corrupt_labels(&map, 0.03, seed);
        let refined = refine_av_map(&raw, &raw.vessel_mask)?;
        let skel = skeletonize(&refined.vessel_mask);
        let found = detect_crossing_candidates(&refined, &skel, spec.cup(), &params);

        let near = |a: av_grade::raster::Pixel, b: av_grade::raster::Pixel| a.dist(b) <= params.merge_distance;
        for c in &found {
            if truth.crossings.iter().any(|g| near(g.position, c.center)) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for g in truth.crossings.iter().filter(|g| !g.in_cup_zone) {
            total += 1;
            if !found.iter().any(|c| near(g.position, c.center)) {
                missed += 1;
            }
        }
    }
    println!("{scenes} scenes, {total} crossings outside the cup");
    println!("precision {:.4}", tp as f64 / (tp + fp).max(1) as f64);
    println!("recall    {:.4}", (total - missed) as f64 / total.max(1) as f64);
    Ok(())
}
