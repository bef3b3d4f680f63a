//! Confusion matrices, precision/recall and Cohen's kappa.
//!
//! cargo run --example evaluate -- [out.png]

use av_grade::metrics::{cohens_kappa, kappa_fraction, weighted_kappa, ConfusionMatrix, KappaWeighting};
use av_grade::raster::save_png;

fn main() -> av_grade::Result<()> {
    let names = |k: usize| (0..k).map(|i| format!("c{i}")).collect::<Vec<_>>();
    for counts in [
        vec![vec![40, 10], vec![5, 45]],
        vec![vec![25, 25], vec![25, 25]],
        vec![vec![9, 0], vec![0, 11]],
    ] {
        let cm = ConfusionMatrix::from_counts(names(2), counts)?;
        let (num, den) = kappa_fraction(&cm)?.expect("defined");
        println!("{}kappa = {num}/{den} = {:?}\n", cm.to_text(), cohens_kappa(&cm)?);
    }

    let grades = ["none", "mild", "moderate", "severe"].map(String::from).to_vec();
    let truth = [0, 0, 0, 1, 1, 1, 2, 2, 3, 0, 1, 2];
    let pred = [0, 0, 1, 1, 1, 2, 2, 2, 3, 0, 0, 3];
    let cm = ConfusionMatrix::from_predictions(grades, &truth, &pred);
    println!("{}", cm.to_text());
    for c in 0..cm.num_classes() {
        let (p, r) = cm.precision_recall(c);
        println!("{:<9} precision {:?} recall {:?}", cm.class_names[c], p, r);
    }
    println!("unweighted kappa {:?}", cohens_kappa(&cm)?);
    println!("quadratic kappa  {:?}", weighted_kappa(&cm, KappaWeighting::Quadratic)?);
    if let Some(path) = std::env::args().nth(1) {
        save_png(&cm.to_image(32), path.as_ref())?;
    }
    Ok(())
}
