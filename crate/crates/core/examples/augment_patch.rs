//! Applies each augmentation operator on its own, then the full random
//! pipeline, to one crossing patch.
//!
//! cargo run --release --example augment_patch -- [out_dir]

use std::path::PathBuf;

use av_grade::augment::{augment_logged, sample_stream, AugmentConfig, Operator};
use av_grade::raster::save_png;
use av_grade::synthgen::{generate_scene, render_patch, SceneSpec};

fn main() -> av_grade::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "augment-out".into()));
    std::fs::create_dir_all(&out).expect("create output dir");
    let (map, truth) = generate_scene(&SceneSpec { seed: 3, ..SceneSpec::default() })?;
    let patch = render_patch(&map, truth.crossings[0].position, 96);
    save_png(&patch.rgb, &out.join("original.png"))?;

    for op in Operator::ALL {
        let cfg = AugmentConfig::only(op);
        let (p, _) = augment_logged(&patch, &cfg, &mut sample_stream(cfg.rng_seed, 0, 0));
        save_png(&p.rgb, &out.join(format!("{}.png", op.key())))?;
    }
    let cfg = AugmentConfig::default();
    for i in 0..4 {
        let (p, applied) = augment_logged(&patch, &cfg, &mut sample_stream(cfg.rng_seed, 0, i));
        let names: Vec<&str> = applied.iter().map(|o| o.key()).collect();
        println!("draw {i}: {}", names.join(", "));
        save_png(&p.rgb, &out.join(format!("random_{i}.png")))?;
    }
    println!("expected operators per draw: {}", av_grade::augment::expected_operator_count(&cfg));
    Ok(())
}
