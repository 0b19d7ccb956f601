//! Sandwich-variance Wald intervals: one estimate with intervals, then a
//! quick coverage check over repeated draws.
//!
//! ```sh
//! cargo run --example confidence_intervals
//! ```

use unpaired_iv::datagen::{self, GeneratorSpec};
use unpaired_iv::dataset::InstrumentKind;
use unpaired_iv::estimators::{self, EstimatorConfig};
use unpaired_iv::inference::attach_wald_ci;

fn main() {
    let mut spec = GeneratorSpec::setting2(InstrumentKind::OneHot);
    spec.m = 5;
    spec.r = 600;
    spec.r_tilde = 600;
    spec.seed = 17;

    let (ds, gt) = datagen::generate(&spec).unwrap();
    let mut cfg = EstimatorConfig::default();
    cfg.optimal_weight = true;
    let est = estimators::up_gmm(&ds, &cfg).unwrap();
    let est = attach_wald_ci(&ds, est, cfg.ridge, 0.95).unwrap();
    let ci = est.ci.as_ref().unwrap();
    println!("one draw at n = ñ = {}:", ds.n());
    for j in 0..ds.d {
        let (lo, hi) = ci.intervals[j];
        println!(
            "  β[{j}] = {:+.4}  95% CI [{:+.4}, {:+.4}]  truth {:+.4} {}",
            est.beta[j],
            lo,
            hi,
            gt.beta_star[j],
            if lo <= gt.beta_star[j] && gt.beta_star[j] <= hi {
                "covered"
            } else {
                "missed"
            }
        );
    }

    let reps = 200;
    let mut covered = vec![0usize; ds.d];
    for rep in 0..reps {
        spec.seed = 1000 + rep;
        let (ds, gt) = datagen::generate(&spec).unwrap();
        let est = estimators::up_gmm(&ds, &cfg).unwrap();
        let est = attach_wald_ci(&ds, est, cfg.ridge, 0.95).unwrap();
        let ci = est.ci.as_ref().unwrap();
        for j in 0..ds.d {
            let (lo, hi) = ci.intervals[j];
            if lo <= gt.beta_star[j] && gt.beta_star[j] <= hi {
                covered[j] += 1;
            }
        }
    }
    println!("\nempirical 95% coverage over {reps} runs:");
    for j in 0..covered.len() {
        println!("  coordinate {j}: {:.3}", covered[j] as f64 / reps as f64);
    }
}
