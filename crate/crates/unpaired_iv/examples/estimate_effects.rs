//! Run every estimator on one synthetic instance and compare against the
//! known causal coefficients.
//!
//! ```sh
//! cargo run --example estimate_effects
//! ```

use unpaired_iv::datagen::{self, GeneratorSpec};
use unpaired_iv::dataset::InstrumentKind;
use unpaired_iv::harness::{run_estimator, EstimatorKind, ALL_ESTIMATORS};

fn main() {
    let mut spec = GeneratorSpec::setting2(InstrumentKind::OneHot);
    spec.m = 200;
    spec.r = 8;
    spec.r_tilde = 8;
    spec.seed = 21;
    let (ds, gt) = datagen::generate(&spec).unwrap();

    println!(
        "dataset: m = {}, d = {}, n = ñ = {} (ratio n/m = {})",
        ds.m,
        ds.d,
        ds.n(),
        ds.n() / ds.m
    );
    println!(
        "true β* = ({:+.3}, {:+.3})\n",
        gt.beta_star[0], gt.beta_star[1]
    );
    println!("{:<16} {:>8} {:>8} {:>8}", "estimator", "β̂₁", "β̂₂", "mae");

    for kind in ALL_ESTIMATORS {
        if matches!(
            kind,
            EstimatorKind::UpGmmL1 | EstimatorKind::UpGmmHdL1 | EstimatorKind::UpGmmHdMcL1
        ) {
            continue; // sparse variants are shown in the sparse_selection example
        }
        let est = run_estimator(kind, &ds, &kind.config(None), 99).unwrap();
        let mae = (0..ds.d)
            .map(|j| (est.beta[j] - gt.beta_star[j]).abs())
            .sum::<f64>()
            / ds.d as f64;
        println!(
            "{:<16} {:>8.3} {:>8.3} {:>8.4}",
            kind.name(),
            est.beta[0],
            est.beta[1],
            mae
        );
    }
    println!(
        "\nThe plain two-sample estimators sit well below β* (attenuation from the\n\
         noisy plug-in denominator at 8 observations per environment); the\n\
         cross-moment estimators remove that bias. The naive pairing baseline\n\
         carries no signal at all."
    );
}
