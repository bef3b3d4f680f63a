//! Trains the grading ensemble on a small synthetic dataset: three
//! cross-entropy sub-models and three focal ones, frozen, then fusion heads
//! for n = 0, 1 and 3 focal members.
//!
//! cargo run --release --example train_mdtnet -- [scenes] [epochs]

use av_grade::pipeline::{build_dataset, grading_splits, train_grading_fusion, train_grading_submodels, PipelineConfig};

fn main() -> av_grade::Result<()> {
    let mut args = std::env::args().skip(1);
    let scenes = args.next().and_then(|s| s.parse().ok()).unwrap_or(150);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut cfg = PipelineConfig {
        scenes,
        ..PipelineConfig::default()
    };
    cfg.grading.train.epochs = epochs;

    let ds = build_dataset(&cfg)?;
    let splits = grading_splits(&cfg, &ds, None)?;
    println!(
        "{} candidates; grading train/val/test = {}/{}/{}",
        ds.samples.len(),
        splits[0].len(),
        splits[1].len(),
        splits[2].len()
    );

    let trained = train_grading_submodels(&cfg, &ds, &splits, cfg.seed)?;
    let mut subs = Vec::new();
    for (m, log) in trained {
        let best = &log.epochs[log.best_epoch];
        println!(
            "{:<20} best epoch {:>2}  val kappa {:?}  weights {:?}",
            log.label, log.best_epoch, best.val_kappa, log.class_weights
        );
        subs.push(m);
    }
    let out = train_grading_fusion(&cfg, &ds, &splits, subs, cfg.seed)?;
    for p in &out.ablation {
        println!("n = {}: test accuracy {:.4}  kappa {:?}", p.n, p.accuracy, p.kappa);
    }
    println!("fusion input width {}", out.model.config.fusion_width());
    Ok(())
}
