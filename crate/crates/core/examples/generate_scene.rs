//! Generates one synthetic scene and writes the label map, the shaded
//! rendering and a patch around every crossing.
//!
//! cargo run --release --example generate_scene -- [seed] [out_dir]

use std::path::PathBuf;

use av_grade::raster::save_png;
use av_grade::synthgen::{generate_scene, render_patch, render_scene_rgb, SceneSpec};

fn main() -> av_grade::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "scene-out".into()));
    std::fs::create_dir_all(&out).expect("create output dir");

    let spec = SceneSpec { seed, ..SceneSpec::default() };
    let (map, truth) = generate_scene(&spec)?;
    save_png(&map.to_palette_image(), &out.join("av_map.png"))?;
    save_png(&render_scene_rgb(&map), &out.join("rendered.png"))?;

    for (i, c) in truth.crossings.iter().enumerate() {
        let grade = c.severity.map_or("-", |s| s.name());
        println!(
            "crossing {i} at ({}, {}): {:?} over, grade {grade}{}",
            c.position.x,
            c.position.y,
            c.over_vessel,
            if c.in_cup_zone { " (cup zone)" } else { "" }
        );
        save_png(&render_patch(&map, c.position, 64).rgb, &out.join(format!("crossing_{i}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
