//! Focal loss versus cross-entropy, and the log-count class weights for the
//! clinical grade distribution.
//!
//! cargo run --example focal_loss

use av_grade::nn::{class_weights, cross_entropy, focal_loss};
use av_grade::synthgen::CLINICAL_GRADE_COUNTS;

fn main() -> av_grade::Result<()> {
    let t = [1.0, 0.0];
    let ones = [1.0, 1.0];
    println!("p_true   CE       γ=1      γ=2      γ=3");
    for p in [0.05, 0.2, 0.5, 0.8, 0.95, 0.99] {
        let y = [p, 1.0 - p];
        print!("{p:<8.2} {:<8.4}", cross_entropy(&y, &t, &ones));
        for g in [1.0, 2.0, 3.0] {
            print!(" {:<8.4}", focal_loss(&y, &t, g, &ones));
        }
        println!();
    }

    let w = class_weights(&CLINICAL_GRADE_COUNTS)?;
    println!("\nclass weights for counts {:?} (N = {}):", w.counts, w.total);
    for (name, a) in ["none", "mild", "moderate", "severe"].iter().zip(&w.alpha) {
        println!("  {name:<9} {a:.6}");
    }
    Ok(())
}
