//! Sandwich asymptotic variances and Wald confidence intervals on the
//! estimated support.

use nalgebra::{DMatrix, DVector};

use crate::dataset::UnpairedDataset;
use crate::error::{Error, Result};
use crate::estimators::{ConfidenceIntervals, Estimate};
use crate::linalg;
use crate::moments::{self, MomentSystem, MomentVariance};

/// Asymptotic covariance of sqrt(N)(beta - beta*) on the active support.
#[derive(Debug, Clone)]
pub struct SandwichVariance {
    /// |S| x |S| symmetric PSD matrix.
    pub v: DMatrix<f64>,
    pub support: Vec<usize>,
}

/// `V = (B_SᵀWB_S)^{-1} B_SᵀW Ω̂ W B_S (B_SᵀWB_S)^{-1}` with every matrix
/// restricted to the support.
pub fn sandwich_variance(
    ms: &MomentSystem,
    omega: &MomentVariance,
    w: &DMatrix<f64>,
    support: &[usize],
) -> Result<SandwichVariance> {
    if support.iter().any(|&j| j >= ms.d) {
        return Err(Error::DimensionMismatch(
            "support index out of range".into(),
        ));
    }
    let b_s = linalg::select_columns(&ms.b, support);
    if linalg::numerical_rank(&b_s, 1e-10) < support.len() {
        return Err(Error::SupportNotIdentified(format!(
            "first stage restricted to {} coordinates is rank deficient",
            support.len()
        )));
    }
    let bread = linalg::symmetrize(&(b_s.transpose() * w * &b_s));
    let bread_inv = bread
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| {
            Error::SupportNotIdentified(format!(
                "restricted moment matrix of size {} is rank deficient",
                support.len()
            ))
        })?;
    let meat = b_s.transpose() * w * &omega.omega * w * &b_s;
    let v = linalg::symmetrize(&(&bread_inv * meat * &bread_inv));
    Ok(SandwichVariance {
        v,
        support: support.to_vec(),
    })
}

/// Wald intervals `beta_j ± z * sqrt(V_jj / N)` for the support coordinates;
/// coordinates off the support get the degenerate interval [0, 0].
pub fn wald_ci(
    estimate: &Estimate,
    sv: &SandwichVariance,
    n_total: usize,
    level: f64,
) -> Result<ConfidenceIntervals> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let mut intervals = vec![(0.0, 0.0); estimate.beta.len()];
    for (pos, &j) in sv.support.iter().enumerate() {
        let half = z * (sv.v[(pos, pos)].max(0.0) / n_total as f64).sqrt();
        intervals[j] = (estimate.beta[j] - half, estimate.beta[j] + half);
    }
    Ok(ConfidenceIntervals { level, intervals })
}

/// Re-estimate the moment variance at the returned estimate, rebuild the
/// refit weight (inverse of the support-restricted variance, identity if that
/// matrix is not positive definite), and attach Wald intervals.
pub fn attach_wald_ci(
    ds: &UnpairedDataset,
    mut estimate: Estimate,
    ridge: f64,
    level: f64,
) -> Result<Estimate> {
    let ms = MomentSystem::from_dataset(ds);
    let support: Vec<usize> = match &estimate.support {
        Some(s) => s.clone(),
        None => (0..ds.d).collect(),
    };
    if support.is_empty() {
        estimate.ci = Some(ConfidenceIntervals {
            level,
            intervals: vec![(0.0, 0.0); ds.d],
        });
        return Ok(estimate);
    }
    let mut masked = DVector::zeros(ds.d);
    for &j in &support {
        masked[j] = estimate.beta[j];
    }
    let mv = moments::omega_hat(ds, &masked)?;
    let w = if mv.omega.amax() > 0.0 {
        match ds.kind() {
            crate::dataset::InstrumentKind::OneHot => {
                linalg::weight_inverse_one_hot(&mv.omega, ridge)
                    .unwrap_or_else(|_| linalg::weight_inverse(&mv.omega, ridge))
            }
            crate::dataset::InstrumentKind::Continuous => linalg::weight_inverse(&mv.omega, ridge),
        }
    } else {
        DMatrix::identity(ds.m, ds.m)
    };
    let sv = sandwich_variance(&ms, &mv, &w, &support)?;
    estimate.ci = Some(wald_ci(&estimate, &sv, ds.n_total(), level)?);
    Ok(estimate)
}

/// Standard normal quantile function, Wichura's rational approximation
/// (absolute error far below 1e-8 across (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    133.141_667_891_784_38,
    1_971.590_950_306_551_3,
    13_731.693_765_509_461,
    45_921.953_931_549_87,
    67_265.770_927_008_7,
    33_430.575_583_588_13,
    2_509.080_928_730_122_7,
];
const B: [f64; 8] = [
    1.0,
    42.313_330_701_600_91,
    687.187_007_492_057_9,
    5_394.196_021_424_751,
    21_213.794_301_586_597,
    39_307.895_800_092_71,
    28_729.085_735_721_943,
    5_226.495_278_852_545_5,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_545,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    0.241_780_725_177_450_6,
    0.022_723_844_989_269_184,
    0.000_774_545_014_278_341_4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_8,
    1.676_384_830_183_803_8,
    0.689_767_334_985_1,
    0.148_103_976_427_480_08,
    0.015_198_666_563_616_457,
    0.000_547_593_808_499_534_5,
    1.050_750_071_644_416_9e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    0.296_560_571_828_504_87,
    0.026_532_189_526_576_124,
    0.001_242_660_947_388_078_4,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    0.599_832_206_555_887_9,
    0.136_929_880_922_735_8,
    0.014_875_361_290_850_615,
    0.000_786_869_131_145_613_3,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_445_9e-7,
    2.044_263_103_389_939_7e-15,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_matches_reference_values() {
        // Reference values from the standard normal distribution.
        let cases = [
            (0.5, 0.0),
            (0.975, 1.959_963_984_540_054),
            (0.95, 1.644_853_626_951_472_2),
            (0.05, -1.644_853_626_951_472_2),
            (0.999, 3.090_232_306_167_813_5),
            (1e-9, -5.997_807_015_008_182),
        ];
        for (p, want) in cases {
            assert!(
                (normal_quantile(p) - want).abs() < 1e-8,
                "p = {p}: got {}, want {want}",
                normal_quantile(p)
            );
        }
    }
}
