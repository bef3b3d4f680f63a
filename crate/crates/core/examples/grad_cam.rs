//! Trains one small grading network briefly and writes Grad-CAM heat maps
//! for a few test crossings, reporting whether the heat sits on the crossing.
//!
//! cargo run --release --example grad_cam -- [out_dir]

use std::path::PathBuf;

use av_grade::mdtnet::{grad_cam, heat_inside_outside, predict_images, train_submodel, Example};
use av_grade::nn::{argmax, Architecture, LossSpec, SubModelSpec};
use av_grade::pipeline::{build_dataset, grading_splits, PipelineConfig};
use av_grade::raster::{heat_to_rgb, save_png};

fn main() -> av_grade::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "gradcam-out".into()));
    std::fs::create_dir_all(&out).expect("create output dir");
    let cfg = PipelineConfig {
        scenes: 150,
        ..PipelineConfig::default()
    };
    let ds = build_dataset(&cfg)?;
    let [train, val, test] = grading_splits(&cfg, &ds, None)?;
    let set = |idx: &[usize]| -> Vec<Example<'_>> {
        idx.iter()
            .map(|&i| (&ds.samples[i].patch, ds.samples[i].severity.unwrap().index()))
            .collect()
    };
    let mut tc = cfg.grading.train.clone();
    tc.epochs = 8;
    let spec = SubModelSpec::new(Architecture::ConvnetC, LossSpec::focal(2.0), 5);
    let (mut model, _) = train_submodel(&spec, 4, &set(&train), &set(&val), &tc)?;

    for &i in test.iter().take(8) {
        let s = &ds.samples[i];
        let pred = argmax(predict_images(&mut model, &[&s.patch])?.row(0));
        let heat = grad_cam(&mut model, &s.patch, pred)?;
        let (inside, outside) = heat_inside_outside(&heat, s.truth_in_patch().unwrap(), 21);
        println!(
            "sample {i}: true {:?} predicted {pred}  heat inside {inside:.3} outside {outside:.3}",
            s.severity.unwrap()
        );
        save_png(&s.patch, &out.join(format!("patch_{i}.png")))?;
        save_png(&heat_to_rgb(&heat), &out.join(format!("heat_{i}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
