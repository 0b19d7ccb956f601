//! Centered empirical cross-covariances and the cross-fold denominators.
//!
//! Every covariance here uses the 1/n normalization with sample means
//! subtracted. One-hot instruments get closed-form paths (a row of the
//! instrument/covariate cross-covariance is `share * (env mean - grand mean)`)
//! so that nothing ever materializes an n x m indicator matrix.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Instruments, UnpairedDataset};
use crate::error::{Error, Result};

/// Empirical cross-covariances of the two samples.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    /// Cov(I, Y), length m.
    pub a: DVector<f64>,
    /// Cov(Ĩ, X̃), m x d.
    pub b: DMatrix<f64>,
    pub n: usize,
    pub n_tilde: usize,
    pub m: usize,
    pub d: usize,
}

impl MomentSystem {
    pub fn from_dataset(ds: &UnpairedDataset) -> Self {
        MomentSystem {
            a: y_moment_vector(ds),
            b: x_moment_matrix(&ds.x_inst, &ds.x, ds.m),
            n: ds.n(),
            n_tilde: ds.n_tilde(),
            m: ds.m,
            d: ds.d,
        }
    }
}

/// How the bias-corrected denominator is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DenominatorKind {
    /// Monte-Carlo average over `h` random K-fold splits.
    MonteCarlo { k: usize, h: usize },
    /// Closed-form infinite-split average.
    Analytic,
}

/// The cross-moment pair (C_XX, C_XY) feeding the many-instrument estimator.
#[derive(Debug, Clone)]
pub struct CrossMoments {
    pub c_xx: DMatrix<f64>,
    pub c_xy: DVector<f64>,
    pub construction: DenominatorKind,
    /// The instrument-dimension factor both moments carry.
    pub m_scale: f64,
}

/// Variance estimate of the sample moment, with the sample-share scalings.
#[derive(Debug, Clone)]
pub struct MomentVariance {
    /// Symmetric PSD m x m matrix.
    pub omega: DMatrix<f64>,
    /// n / (n + ñ).
    pub tau_n: f64,
    /// ñ / (n + ñ).
    pub tilde_tau_n: f64,
}

/// Centered cross-covariance of paired vectors: (1/n) Σ (u - ū)(v - v̄)ᵀ.
pub fn cov_hat(pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<DMatrix<f64>> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "cov_hat needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len();
    let p = pairs[0].0.len();
    let q = pairs[0].1.len();
    for (u, v) in pairs {
        if u.len() != p || v.len() != q {
            return Err(Error::DimensionMismatch(
                "cov_hat pairs have inconsistent dimensions".into(),
            ));
        }
    }
    let mut u_bar = DVector::zeros(p);
    let mut v_bar = DVector::zeros(q);
    for (u, v) in pairs {
        u_bar += u;
        v_bar += v;
    }
    u_bar /= n as f64;
    v_bar /= n as f64;
    let mut out = DMatrix::zeros(p, q);
    for (u, v) in pairs {
        let du = u - &u_bar;
        let dv = v - &v_bar;
        out += du * dv.transpose();
    }
    out /= n as f64;
    Ok(out)
}

/// Cov(I, Y) for the outcome sample.
pub fn y_moment_vector(ds: &UnpairedDataset) -> DVector<f64> {
    let n = ds.n();
    let y_bar = ds.y.mean();
    match &ds.y_inst {
        Instruments::OneHot { env } => {
            // Row e equals share_e * (mean of Y in e - grand mean of Y).
            let mut sums = vec![0.0f64; ds.m];
            let mut counts = vec![0usize; ds.m];
            for (i, &e) in env.iter().enumerate() {
                sums[e] += ds.y[i];
                counts[e] += 1;
            }
            DVector::from_iterator(
                ds.m,
                (0..ds.m).map(|e| {
                    if counts[e] == 0 {
                        0.0
                    } else {
                        let share = counts[e] as f64 / n as f64;
                        share * (sums[e] / counts[e] as f64 - y_bar)
                    }
                }),
            )
        }
        Instruments::Continuous { rows } => {
            let i_bar = rows.row_mean().transpose();
            let mut a = DVector::zeros(ds.m);
            for i in 0..n {
                let di = rows.row(i).transpose() - &i_bar;
                a += di * (ds.y[i] - y_bar);
            }
            a / n as f64
        }
    }
}

/// Cov(Ĩ, X̃) for any instrument column and covariate matrix.
pub fn x_moment_matrix(inst: &Instruments, x: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let x_bar = x.row_mean();
    match inst {
        Instruments::OneHot { env } => {
            let mut sums = DMatrix::<f64>::zeros(m, d);
            let mut counts = vec![0usize; m];
            for (j, &e) in env.iter().enumerate() {
                for c in 0..d {
                    sums[(e, c)] += x[(j, c)];
                }
                counts[e] += 1;
            }
            let mut b = DMatrix::zeros(m, d);
            for e in 0..m {
                if counts[e] == 0 {
                    continue;
                }
                let share = counts[e] as f64 / n as f64;
                for c in 0..d {
                    b[(e, c)] = share * (sums[(e, c)] / counts[e] as f64 - x_bar[c]);
                }
            }
            b
        }
        Instruments::Continuous { rows } => {
            let i_bar = rows.row_mean();
            let mut b = DMatrix::zeros(m, d);
            for j in 0..n {
                let di = rows.row(j) - &i_bar;
                let dx = x.row(j) - &x_bar;
                // b += diᵀ dx
                for r in 0..m {
                    for c in 0..d {
                        b[(r, c)] += di[r] * dx[c];
                    }
                }
            }
            b / n as f64
        }
    }
}

/// Fold-wise cross-covariance B_k on a sub-sample of the covariate sample.
///
/// The one-hot branch sets row e to `p_e * (env mean - fold mean)ᵀ` with the
/// fold's own covariate mean; environments empty in the fold use the fold
/// mean, which zeroes the row. The continuous branch is the centered
/// cross-covariance on the fold.
pub fn fold_cross_cov(
    inst: &Instruments,
    x: &DMatrix<f64>,
    m: usize,
    fold: &[usize],
) -> Result<DMatrix<f64>> {
    if fold.is_empty() {
        return Err(Error::DegenerateSample("empty fold".into()));
    }
    let d = x.ncols();
    let nk = fold.len();
    let mut fold_mean = DVector::<f64>::zeros(d);
    for &j in fold {
        fold_mean += x.row(j).transpose();
    }
    fold_mean /= nk as f64;

    match inst {
        Instruments::OneHot { env } => {
            let mut sums = DMatrix::<f64>::zeros(m, d);
            let mut counts = vec![0usize; m];
            for &j in fold {
                let e = env[j];
                counts[e] += 1;
                for c in 0..d {
                    sums[(e, c)] += x[(j, c)];
                }
            }
            let mut b = DMatrix::zeros(m, d);
            for e in 0..m {
                if counts[e] == 0 {
                    continue; // env mean defaults to the fold mean: zero row
                }
                let share = counts[e] as f64 / nk as f64;
                for c in 0..d {
                    b[(e, c)] = share * (sums[(e, c)] / counts[e] as f64 - fold_mean[c]);
                }
            }
            Ok(b)
        }
        Instruments::Continuous { rows } => {
            let mut i_mean = DVector::<f64>::zeros(m);
            for &j in fold {
                i_mean += rows.row(j).transpose();
            }
            i_mean /= nk as f64;
            let mut b = DMatrix::zeros(m, d);
            for &j in fold {
                let di = rows.row(j).transpose() - &i_mean;
                let dx = x.row(j).transpose() - &fold_mean;
                b += di * dx.transpose();
            }
            Ok(b / nk as f64)
        }
    }
}

/// Split the covariate-sample indices into K folds.
///
/// One-hot instruments are stratified within environments; continuous
/// instruments use a uniform random partition. Remainders go round-robin to
/// the first folds.
pub fn split_into_folds<R: Rng>(
    inst: &Instruments,
    n_tilde: usize,
    k: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    match inst {
        Instruments::OneHot { env } => {
            let m = env.iter().copied().max().map_or(0, |e| e + 1);
            let mut per_env: Vec<Vec<usize>> = vec![Vec::new(); m];
            for (j, &e) in env.iter().enumerate() {
                per_env[e].push(j);
            }
            for idx in per_env.iter_mut() {
                idx.shuffle(rng);
                distribute(idx, &mut folds);
            }
        }
        Instruments::Continuous { .. } => {
            let mut idx: Vec<usize> = (0..n_tilde).collect();
            idx.shuffle(rng);
            distribute(&idx, &mut folds);
        }
    }
    folds
}

fn distribute(idx: &[usize], folds: &mut [Vec<usize>]) {
    let k = folds.len();
    let base = idx.len() / k;
    let rem = idx.len() % k;
    let mut pos = 0;
    for (f, fold) in folds.iter_mut().enumerate() {
        let take = base + usize::from(f < rem);
        fold.extend_from_slice(&idx[pos..pos + take]);
        pos += take;
    }
}

/// Monte-Carlo cross-fold denominator: the average over `h` random K-fold
/// splits of `m/(K(K-1)) Σ_{h≠k} B_hᵀ B_k`.
pub fn cross_fold_denominator_mc<R: Rng>(
    inst: &Instruments,
    x: &DMatrix<f64>,
    m: usize,
    k: usize,
    h: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::Config("cross-fold denominator needs K >= 2".into()));
    }
    if h < 1 {
        return Err(Error::Config("cross-fold denominator needs H >= 1".into()));
    }
    let n_tilde = x.nrows();
    if n_tilde < k {
        return Err(Error::TooFewObservations {
            folds: k,
            available: n_tilde,
        });
    }
    let d = x.ncols();
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for _ in 0..h {
        let folds = split_into_folds(inst, n_tilde, k, rng);
        let covs: Vec<DMatrix<f64>> = folds
            .iter()
            .map(|f| fold_cross_cov(inst, x, m, f))
            .collect::<Result<_>>()?;
        // Σ_{h≠k} B_hᵀ B_k = TᵀT - Σ B_kᵀB_k with T = Σ B_k.
        let mut total = DMatrix::<f64>::zeros(m, d);
        for c in &covs {
            total += c;
        }
        let mut s = total.transpose() * &total;
        for c in &covs {
            s -= c.transpose() * c;
        }
        acc += s * (m as f64 / (k as f64 * (k as f64 - 1.0)));
    }
    Ok(acc / h as f64)
}

/// Closed-form infinite-split (K = 2) average of the cross-fold denominator.
///
/// With grand-centered per-observation summands g_j = (Ĩ_j - Ī)(X̃_j - X̄)ᵀ,
/// the average over all equal half-splits of the split scheme equals
///
/// ```text
/// (m/ñ²) [ ñ² B̂ᵀB̂ - Σ_j g_jᵀ g_j + Σ_s ( G_sᵀ G_s - Σ_{j∈s} g_jᵀ g_j ) / (ñ_s - 1) ]
/// ```
///
/// summed over the split strata s (each environment for one-hot instruments,
/// the whole sample for continuous). With a single stratum this reduces to
/// `m [ ñ/(ñ-1) B̂ᵀB̂ - 1/(ñ(ñ-1)) Σ_j g_jᵀ g_j ]`.
pub fn cross_fold_denominator_analytic(
    inst: &Instruments,
    x: &DMatrix<f64>,
    m: usize,
) -> Result<DMatrix<f64>> {
    let n_tilde = x.nrows();
    if n_tilde < 2 {
        return Err(Error::DegenerateSample(
            "analytic denominator needs at least 2 observations".into(),
        ));
    }
    let d = x.ncols();
    let x_bar = x.row_mean();
    let b_hat = x_moment_matrix(inst, x, m);
    let bt_b = b_hat.transpose() * &b_hat;

    // Squared instrument deviations ‖Ĩ_j - Ī‖² and stratum labels.
    let (inst_dev_sq, strata): (Vec<f64>, Vec<usize>) = match inst {
        Instruments::OneHot { env } => {
            let mut counts = vec![0usize; m];
            for &e in env {
                counts[e] += 1;
            }
            let p_norm_sq: f64 = counts
                .iter()
                .map(|&c| {
                    let p = c as f64 / n_tilde as f64;
                    p * p
                })
                .sum();
            let dev: Vec<f64> = env
                .iter()
                .map(|&e| 1.0 - 2.0 * (counts[e] as f64 / n_tilde as f64) + p_norm_sq)
                .collect();
            (dev, env.clone())
        }
        Instruments::Continuous { rows } => {
            let i_bar = rows.row_mean();
            let dev: Vec<f64> = (0..n_tilde)
                .map(|j| (rows.row(j) - &i_bar).norm_squared())
                .collect();
            (dev, vec![0usize; n_tilde])
        }
    };
    let n_strata = strata.iter().copied().max().unwrap_or(0) + 1;
    let mut stratum_counts = vec![0usize; n_strata];
    for &s in &strata {
        stratum_counts[s] += 1;
    }
    if let Some(s) = stratum_counts.iter().position(|&c| c == 1) {
        return Err(Error::DegenerateSample(format!(
            "analytic denominator: split stratum {s} has a single observation"
        )));
    }

    // Σ_j g_jᵀg_j (overall and per stratum) and per-stratum sums of centered
    // covariates. g_jᵀg_j = ‖Ĩ_j - Ī‖² (X̃_j - X̄)(X̃_j - X̄)ᵀ.
    let mut self_total = DMatrix::<f64>::zeros(d, d);
    let mut self_by_stratum = vec![DMatrix::<f64>::zeros(d, d); n_strata];
    let mut dx_sum = vec![DVector::<f64>::zeros(d); n_strata];
    for j in 0..n_tilde {
        let dx = x.row(j).transpose() - x_bar.transpose();
        let outer = &dx * dx.transpose() * inst_dev_sq[j];
        self_total += &outer;
        self_by_stratum[strata[j]] += &outer;
        dx_sum[strata[j]] += &dx;
    }

    let nn = (n_tilde * n_tilde) as f64;
    let mut bracket = bt_b * nn - &self_total;
    for s in 0..n_strata {
        if stratum_counts[s] == 0 {
            continue;
        }
        // G_sᵀG_s for the stratum's summand total. For one-hot strata all
        // instrument deviations within a stratum are the same vector, so
        // G_s = (e_s - p̂) (Σ dx)ᵀ and G_sᵀG_s = ‖e_s - p̂‖² (Σ dx)(Σ dx)ᵀ.
        let gs = match inst {
            Instruments::OneHot { .. } => {
                let idx = strata.iter().position(|&t| t == s).unwrap();
                &dx_sum[s] * dx_sum[s].transpose() * inst_dev_sq[idx]
            }
            Instruments::Continuous { .. } => {
                let sum_g = &b_hat * n_tilde as f64;
                sum_g.transpose() * sum_g
            }
        };
        bracket += (gs - &self_by_stratum[s]) / (stratum_counts[s] as f64 - 1.0);
    }
    Ok(bracket * (m as f64 / nn))
}

/// Assemble the cross-moment pair (C_XX, C_XY) with C_XY = m Bᵀ a.
pub fn cross_moments<R: Rng>(
    ds: &UnpairedDataset,
    denominator: DenominatorKind,
    rng: &mut R,
) -> Result<CrossMoments> {
    let ms = MomentSystem::from_dataset(ds);
    let c_xy = ms.b.transpose() * &ms.a * ds.m as f64;
    let c_xx = match denominator {
        DenominatorKind::MonteCarlo { k, h } => {
            cross_fold_denominator_mc(&ds.x_inst, &ds.x, ds.m, k, h, rng)?
        }
        DenominatorKind::Analytic => cross_fold_denominator_analytic(&ds.x_inst, &ds.x, ds.m)?,
    };
    Ok(CrossMoments {
        c_xx,
        c_xy,
        construction: denominator,
        m_scale: ds.m as f64,
    })
}

/// Variance estimate of the sample moment at a preliminary estimate beta0:
/// `Ω̂ = (N/n) Ω̂_m + (N/ñ) Ω̂_c(β₀)`, the per-sample variances of the moment
/// summands I·Y and Ĩ·(X̃ᵀβ₀). One-hot samples are drawn with fixed
/// per-environment counts, so their contribution is the within-environment
/// residual scatter; continuous samples use the centered-product influence
/// (see `scaled_instrument_second_moment`).
pub fn omega_hat(ds: &UnpairedDataset, beta0: &DVector<f64>) -> Result<MomentVariance> {
    if beta0.len() != ds.d {
        return Err(Error::DimensionMismatch(format!(
            "beta0 has length {}, expected {}",
            beta0.len(),
            ds.d
        )));
    }
    if beta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("beta0 must be finite".into()));
    }
    let n = ds.n() as f64;
    let n_tilde = ds.n_tilde() as f64;
    let big_n = n + n_tilde;
    let omega_m = scaled_instrument_second_moment(&ds.y_inst, ds.y.as_slice(), ds.m);
    let w: Vec<f64> = (0..ds.n_tilde())
        .map(|j| (ds.x.row(j) * beta0)[(0, 0)])
        .collect();
    let omega_c = scaled_instrument_second_moment(&ds.x_inst, &w, ds.m);
    let omega = omega_m * (big_n / n) + omega_c * (big_n / n_tilde);
    Ok(MomentVariance {
        omega,
        tau_n: n / big_n,
        tilde_tau_n: n_tilde / big_n,
    })
}

/// Variance contribution of one sample's moment summands.
///
/// One-hot instruments: the generator samples a fixed number of observations
/// per environment, so the moment's sampling variance comes from the
/// within-environment residuals only; the matrix is
/// `Σ_e p̂_e σ̂²_e (e_e - p̂)(e_e - p̂)ᵀ` with σ̂²_e the within-environment
/// variance of w. Continuous instruments are drawn i.i.d. and use the
/// centered-product influence: (1/n) Σ (z - z̄)(z - z̄)ᵀ with
/// z_i = (I_i - Ī)(w_i - w̄).
fn scaled_instrument_second_moment(inst: &Instruments, w: &[f64], m: usize) -> DMatrix<f64> {
    let n = w.len();
    match inst {
        Instruments::OneHot { env } => {
            let (p, v) = within_env_scatter(env, w, m);
            let s: f64 = v.sum();
            let mut out = DMatrix::from_diagonal(&v);
            out -= &v * p.transpose();
            out -= &p * v.transpose();
            out += &p * p.transpose() * s;
            out
        }
        Instruments::Continuous { rows } => {
            let w_bar: f64 = w.iter().sum::<f64>() / n as f64;
            let i_bar = rows.row_mean().transpose();
            let mut mean = DVector::<f64>::zeros(m);
            for i in 0..n {
                mean += (rows.row(i).transpose() - &i_bar) * (w[i] - w_bar);
            }
            mean /= n as f64;
            let mut out = DMatrix::<f64>::zeros(m, m);
            for i in 0..n {
                let z = (rows.row(i).transpose() - &i_bar) * (w[i] - w_bar) - &mean;
                out += &z * z.transpose();
            }
            out / n as f64
        }
    }
}

/// Environment shares p̂ and the scaled within-environment scatters
/// v_e = (1/n) Σ_{i in e} (w_i - w̄_e)².
fn within_env_scatter(env: &[usize], w: &[f64], m: usize) -> (DVector<f64>, DVector<f64>) {
    let n = w.len();
    let mut counts = vec![0usize; m];
    let mut sums = vec![0.0f64; m];
    for (i, &e) in env.iter().enumerate() {
        counts[e] += 1;
        sums[e] += w[i];
    }
    let means: Vec<f64> = (0..m)
        .map(|e| {
            if counts[e] > 0 {
                sums[e] / counts[e] as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut v = DVector::<f64>::zeros(m);
    for (i, &e) in env.iter().enumerate() {
        let wc = w[i] - means[e];
        v[e] += wc * wc;
    }
    v /= n as f64;
    let p = DVector::from_iterator(m, counts.iter().map(|&c| c as f64 / n as f64));
    (p, v)
}

/// Bᵀ Ω̂(β₀) B computed without materializing the m x m matrix. Used for the
/// weighting of the cross-moment estimator when m is large.
pub fn omega_weighted_gram(
    ds: &UnpairedDataset,
    beta0: &DVector<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if beta0.len() != ds.d || b.nrows() != ds.m {
        return Err(Error::DimensionMismatch(
            "omega_weighted_gram inputs".into(),
        ));
    }
    let n = ds.n() as f64;
    let n_tilde = ds.n_tilde() as f64;
    let big_n = n + n_tilde;
    let gm = quadratic_second_moment(&ds.y_inst, ds.y.as_slice(), b);
    let w: Vec<f64> = (0..ds.n_tilde())
        .map(|j| (ds.x.row(j) * beta0)[(0, 0)])
        .collect();
    let gc = quadratic_second_moment(&ds.x_inst, &w, b);
    Ok(gm * (big_n / n) + gc * (big_n / n_tilde))
}

/// Bᵀ [scaled_instrument_second_moment] B via projections, never forming the
/// m x m matrix.
fn quadratic_second_moment(inst: &Instruments, w: &[f64], b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.len();
    let d = b.ncols();
    match inst {
        Instruments::OneHot { env } => {
            let m = b.nrows();
            let (p, v) = within_env_scatter(env, w, m);
            let s: f64 = v.sum();
            // Bᵀ [diag(v) - v p̂ᵀ - p̂ vᵀ + s p̂ p̂ᵀ] B.
            let mut out = DMatrix::<f64>::zeros(d, d);
            for e in 0..m {
                if v[e] == 0.0 {
                    continue;
                }
                let row = b.row(e).transpose();
                out += &row * row.transpose() * v[e];
            }
            let bv = b.transpose() * &v;
            let bp = b.transpose() * &p;
            out -= &bv * bp.transpose();
            out -= &bp * bv.transpose();
            out += &bp * bp.transpose() * s;
            out
        }
        Instruments::Continuous { rows } => {
            let w_bar: f64 = w.iter().sum::<f64>() / n as f64;
            let i_bar = rows.row_mean().transpose();
            let mut proj_mean = DVector::<f64>::zeros(d);
            let mut projs: Vec<DVector<f64>> = Vec::with_capacity(n);
            for i in 0..n {
                let p = b.transpose() * ((rows.row(i).transpose() - &i_bar) * (w[i] - w_bar));
                proj_mean += &p;
                projs.push(p);
            }
            proj_mean /= n as f64;
            let mut out = DMatrix::<f64>::zeros(d, d);
            for p in &projs {
                let z = p - &proj_mean;
                out += &z * z.transpose();
            }
            out / n as f64
        }
    }
}
