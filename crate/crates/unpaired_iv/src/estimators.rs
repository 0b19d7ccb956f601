//! The estimators: two-sample IV baselines, weighted GMM with optional ℓ1
//! penalty and post-selection refit, and the cross-moment variants that stay
//! consistent when the number of instruments grows with the sample size.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Instruments, UnpairedDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{
    self, cross_fold_denominator_analytic, cross_fold_denominator_mc, DenominatorKind, MomentSystem,
};

/// Default ridge stabilization added to every solved system.
pub const DEFAULT_RIDGE: f64 = 1e-10;

/// Penalty selection for the ℓ1 paths.
///
/// The scale referred to by `FixedScale` and `GridIc` is the theoretical rate
/// of the regime: 1/sqrt(n + ñ) for the finite-instrument estimator and
/// 1/sqrt(m) for the cross-moment estimator. `PathIc` instead anchors a
/// geometric grid at the data-driven `lambda_max = |h|_inf` (the smallest
/// penalty with an all-zero solution), which stays meaningful under any
/// weighting of the moment system; a studentized information criterion
/// picks the grid point (see `l1_select`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LambdaRule {
    /// Use the value as-is.
    Fixed(f64),
    /// `c * scale`.
    FixedScale(f64),
    /// Pick `c * scale` from the grid by the information criterion.
    GridIc(Vec<f64>),
    /// Geometric grid of `points` penalties from `lambda_max` down to
    /// `lambda_max * min_fraction`, picked by the information criterion.
    PathIc { points: usize, min_fraction: f64 },
}

impl LambdaRule {
    pub fn default_grid() -> Self {
        LambdaRule::PathIc {
            points: 10,
            min_fraction: 1e-3,
        }
    }
}

/// How the selected support is read off the ℓ1 solution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SupportRule {
    /// The exact nonzero pattern of the penalized solution.
    NonzeroPattern,
    /// Keep coordinates with |beta_j| >= c/2 (requires a beta-min constant c).
    BetaMin(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WeightKind {
    Identity,
    OmegaInverse,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EstimatorConfig {
    pub ridge: f64,
    pub optimal_weight: bool,
    pub l1: bool,
    pub lambda: LambdaRule,
    pub post_refit: bool,
    /// Folds of the Monte-Carlo denominator.
    pub k_folds: usize,
    /// Split redraws of the Monte-Carlo denominator.
    pub h_redraws: usize,
    pub denominator: DenominatorKind,
    pub support_rule: SupportRule,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            ridge: DEFAULT_RIDGE,
            optimal_weight: false,
            l1: false,
            lambda: LambdaRule::default_grid(),
            post_refit: false,
            k_folds: 2,
            h_redraws: 10,
            denominator: DenominatorKind::Analytic,
            support_rule: SupportRule::NonzeroPattern,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge > 0.0) {
            return Err(Error::Config("ridge must be positive".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config("K must be at least 2".into()));
        }
        if self.h_redraws < 1 {
            return Err(Error::Config("H must be at least 1".into()));
        }
        match &self.lambda {
            LambdaRule::Fixed(l) | LambdaRule::FixedScale(l) => {
                if *l < 0.0 {
                    return Err(Error::Config("lambda must be nonnegative".into()));
                }
            }
            LambdaRule::GridIc(g) => {
                if g.is_empty() || g.iter().any(|c| *c < 0.0) {
                    return Err(Error::Config("lambda grid must be nonnegative".into()));
                }
            }
            LambdaRule::PathIc {
                points,
                min_fraction,
            } => {
                if *points == 0 || !(*min_fraction > 0.0 && *min_fraction <= 1.0) {
                    return Err(Error::Config(
                        "lambda path needs points >= 1 and min_fraction in (0, 1]".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-coordinate confidence intervals attached by the inference path.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConfidenceIntervals {
    pub level: f64,
    /// (lower, upper) per coordinate of beta.
    pub intervals: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    /// Condition number of the final ridged system.
    pub condition: f64,
    /// Weighted moment objective at the returned estimate.
    pub objective: f64,
    /// Penalty actually used by the ℓ1 path.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub beta: DVector<f64>,
    /// Selected support, present when a selection path ran.
    pub support: Option<Vec<usize>>,
    pub ci: Option<ConfidenceIntervals>,
    pub weight_used: WeightKind,
    pub diagnostics: Diagnostics,
}

impl Estimate {
    fn plain(beta: DVector<f64>, weight: WeightKind, diag: Diagnostics) -> Self {
        Estimate {
            beta,
            support: None,
            ci: None,
            weight_used: weight,
            diagnostics: diag,
        }
    }
}

/// Inverse-variance weight for the m-dimensional moment, using the cheap
/// deflated Cholesky for one-hot instruments and the spectral pseudo-inverse
/// otherwise.
fn moment_weight(ds: &UnpairedDataset, omega: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    match ds.kind() {
        crate::dataset::InstrumentKind::OneHot => linalg::weight_inverse_one_hot(omega, ridge)
            .unwrap_or_else(|_| linalg::weight_inverse(omega, ridge)),
        crate::dataset::InstrumentKind::Continuous => linalg::weight_inverse(omega, ridge),
    }
}

fn check_finite(ms: &MomentSystem) -> Result<()> {
    if ms.a.iter().any(|v| !v.is_finite()) || ms.b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("moment system".into()));
    }
    Ok(())
}

/// TS-IV: solve `(BᵀB + ridge I) beta = Bᵀ a` on the empirical moments.
pub fn ts_iv(ms: &MomentSystem, ridge: f64) -> Result<Estimate> {
    check_finite(ms)?;
    let gram = ms.b.transpose() * &ms.b;
    let rhs = ms.b.transpose() * &ms.a;
    let (beta, condition) = linalg::ridged_spd_solve(&gram, ridge, &rhs)?;
    let resid = &ms.a - &ms.b * &beta;
    let objective = resid.norm_squared();
    Ok(Estimate::plain(
        beta,
        WeightKind::Identity,
        Diagnostics {
            condition,
            objective,
            lambda: None,
        },
    ))
}

/// TS-2SLS: learn the instrument-to-covariate map on the covariate sample,
/// predict covariates in the outcome sample, regress. Columns are centered
/// before each stage; with one-hot instruments the stages reduce to moment
/// algebra and no indicator matrix is materialized.
pub fn ts_2sls(ds: &UnpairedDataset, ridge: f64) -> Result<Estimate> {
    let n = ds.n() as f64;
    let n_tilde = ds.n_tilde() as f64;
    // First stage on the covariate sample: Γ = (Ĩc'Ĩc + ridge I)^{-1} Ĩc'X̃c.
    let g_xx = centered_instrument_gram(&ds.x_inst, ds.m) * n_tilde;
    let b = moments::x_moment_matrix(&ds.x_inst, &ds.x, ds.m);
    let mut first = g_xx.clone();
    for i in 0..ds.m {
        first[(i, i)] += ridge;
    }
    let chol = first
        .cholesky()
        .ok_or_else(|| Error::SolveFailed("first-stage Gram not positive definite".into()))?;
    let gamma = chol.solve(&(&b * n_tilde));

    // Second stage with predictions X̂ = Ic Γ on the outcome sample.
    let g_yy = centered_instrument_gram(&ds.y_inst, ds.m) * n;
    let a = moments::y_moment_vector(ds);
    let gram = gamma.transpose() * &g_yy * &gamma;
    let rhs = gamma.transpose() * (&a * n);
    let (beta, condition) = linalg::ridged_spd_solve(&gram, ridge, &rhs)?;
    let resid = &a - &b * &beta;
    let objective = resid.norm_squared();
    Ok(Estimate::plain(
        beta,
        WeightKind::Identity,
        Diagnostics {
            condition,
            objective,
            lambda: None,
        },
    ))
}

/// Centered instrument covariance Cov(I, I), m x m.
fn centered_instrument_gram(inst: &Instruments, m: usize) -> DMatrix<f64> {
    match inst {
        Instruments::OneHot { env } => {
            let n = env.len();
            let mut p = DVector::<f64>::zeros(m);
            for &e in env {
                p[e] += 1.0;
            }
            p /= n as f64;
            let mut g = &p * -p.transpose();
            for e in 0..m {
                g[(e, e)] += p[e];
            }
            g
        }
        Instruments::Continuous { rows } => {
            let n = rows.nrows();
            let mean = rows.row_mean();
            let mut g = DMatrix::<f64>::zeros(m, m);
            for i in 0..n {
                let di = (rows.row(i) - &mean).transpose();
                g += &di * di.transpose();
            }
            g / n as f64
        }
    }
}

/// Naive OLS baseline: randomly pair rows across the two samples, center and
/// regress with a pseudoinverse. Ignores the unpaired structure entirely.
pub fn naive_ols<R: Rng>(ds: &UnpairedDataset, rng: &mut R) -> Result<Estimate> {
    let n_pair = ds.n().min(ds.n_tilde());
    let mut x_idx: Vec<usize> = (0..ds.n_tilde()).collect();
    let mut y_idx: Vec<usize> = (0..ds.n()).collect();
    x_idx.shuffle(rng);
    y_idx.shuffle(rng);

    let mut xp = DMatrix::<f64>::zeros(n_pair, ds.d);
    let mut yp = DVector::<f64>::zeros(n_pair);
    for i in 0..n_pair {
        xp.set_row(i, &ds.x.row(x_idx[i]));
        yp[i] = ds.y[y_idx[i]];
    }
    let x_mean = xp.row_mean();
    let y_mean = yp.mean();
    for i in 0..n_pair {
        for c in 0..ds.d {
            xp[(i, c)] -= x_mean[c];
        }
        yp[i] -= y_mean;
    }
    let beta = linalg::pinv_solve(&xp, &yp)?;
    let objective = (&yp - &xp * &beta).norm_squared() / n_pair as f64;
    Ok(Estimate::plain(
        beta,
        WeightKind::Identity,
        Diagnostics {
            condition: f64::NAN,
            objective,
            lambda: None,
        },
    ))
}

/// Coordinate-descent solver for `min 0.5 betaᵀG beta - hᵀbeta + lambda |beta|_1`
/// with symmetric PSD `G`. Inactive coordinates come back exactly zero.
pub fn l1_quadratic_solve(g: &DMatrix<f64>, h: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let d = g.nrows();
    if g.ncols() != d || h.len() != d {
        return Err(Error::DimensionMismatch(
            "l1 solve: G must be d x d, h length d".into(),
        ));
    }
    let min_eig = linalg::min_symmetric_eigenvalue(g);
    let scale = g.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
    if min_eig < -1e-8 * scale {
        return Err(Error::NotPsd { min_eig });
    }
    let mut beta = DVector::<f64>::zeros(d);
    let mut q = DVector::<f64>::zeros(d); // q = G beta, maintained incrementally
    let max_sweeps = 100_000;
    for _ in 0..max_sweeps {
        let mut max_update = 0.0f64;
        for j in 0..d {
            let gjj = g[(j, j)];
            let old = beta[j];
            // Partial residual excluding coordinate j.
            let rho = h[j] - (q[j] - gjj * old);
            let new = if gjj > 0.0 {
                soft_threshold(rho, lambda) / gjj
            } else {
                // PSD with zero diagonal forces a zero row; the coordinate is
                // unconstrained by the quadratic and the penalty pins it at 0.
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                for i in 0..d {
                    q[i] += delta * g[(i, j)];
                }
                beta[j] = new;
                max_update = max_update.max(delta.abs());
            }
        }
        if max_update < 1e-10 {
            break;
        }
    }
    Ok(beta)
}

fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Penalized selection along a λ path. Every grid point yields a candidate
/// support: the nonzero pattern of the penalized solution, thresholded under
/// a beta-min rule at c/2 against both the penalized and the refit
/// coefficients (the refit is unshrunken, so a coordinate is dropped only
/// when neither consistent estimate clears the floor). Candidates are scored
/// by the J-statistic-style criterion
/// `N * objective(refit on support) + |support| * log N`; with the
/// inverse-variance weight the first term is chi-square calibrated, so the
/// log N penalty separates supports consistently. Returns the winning
/// penalized solution, its candidate support, and the penalty used.
fn l1_select(
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    rule: &LambdaRule,
    support_rule: SupportRule,
    scale: f64,
    n_ic: f64,
    moment_df: f64,
    objective_at: impl Fn(&DVector<f64>) -> f64,
) -> Result<(DVector<f64>, Vec<usize>, f64)> {
    let lambdas: Vec<f64> = match rule {
        LambdaRule::Fixed(l) => vec![*l],
        LambdaRule::FixedScale(c) => vec![c * scale],
        LambdaRule::GridIc(cs) => cs.iter().map(|c| c * scale).collect(),
        LambdaRule::PathIc {
            points,
            min_fraction,
        } => {
            let lambda_max = h.amax();
            if lambda_max == 0.0 || *points == 1 {
                vec![lambda_max]
            } else {
                let lo = lambda_max * min_fraction;
                let step = (lambda_max / lo).powf(1.0 / (*points as f64 - 1.0));
                (0..*points).map(|i| lo * step.powi(i as i32)).collect()
            }
        }
    };
    let refit_on = |support: &[usize], fallback: &DVector<f64>| -> DVector<f64> {
        if support.is_empty() {
            return DVector::zeros(fallback.len());
        }
        let g_s = linalg::select_submatrix(g, support);
        let h_s = linalg::select_entries(h, support);
        match linalg::ridged_spd_solve(&g_s, DEFAULT_RIDGE, &h_s) {
            Ok((b_s, _)) => {
                let mut full = DVector::zeros(fallback.len());
                for (pos, &j) in support.iter().enumerate() {
                    full[j] = b_s[pos];
                }
                full
            }
            Err(_) => fallback.clone(),
        }
    };
    let candidate = |beta: &DVector<f64>| -> Vec<usize> {
        let nonzeros: Vec<usize> = beta
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, _)| j)
            .collect();
        match support_rule {
            SupportRule::NonzeroPattern => nonzeros,
            SupportRule::BetaMin(c) => {
                let refit = refit_on(&nonzeros, beta);
                nonzeros
                    .into_iter()
                    .filter(|&j| beta[j].abs().max(refit[j].abs()) >= c / 2.0)
                    .collect()
            }
        }
    };
    if lambdas.len() == 1 {
        let beta = l1_quadratic_solve(g, h, lambdas[0])?;
        let support = candidate(&beta);
        return Ok((beta, support, lambdas[0]));
    }
    let mut evaluated: Vec<(f64, usize, DVector<f64>, Vec<usize>, f64)> = Vec::new();
    for &l in &lambdas {
        let beta = l1_quadratic_solve(g, h, l)?;
        let support = candidate(&beta);
        let refit = refit_on(&support, &beta);
        evaluated.push((n_ic * objective_at(&refit), support.len(), beta, support, l));
    }
    // Studentize the statistic by the scale of the densest candidate: the
    // preliminary-estimate weight leaves a scalar mis-calibration that would
    // otherwise let inflated spurious improvements beat the log N penalty.
    let j_scale = evaluated
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.partial_cmp(&a.0).unwrap()))
        .map(|(j, k, _, _, _)| j / (moment_df - *k as f64).max(1.0))
        .unwrap_or(1.0)
        .max(f64::MIN_POSITIVE);
    let mut best: Option<(f64, DVector<f64>, Vec<usize>, f64)> = None;
    for (j, k, beta, support, l) in evaluated {
        let ic = j / j_scale + k as f64 * n_ic.ln();
        if best.as_ref().map_or(true, |(b, _, _, _)| ic < *b) {
            best = Some((ic, beta, support, l));
        }
    }
    let (_, beta, support, l) = best.expect("nonempty grid");
    Ok((beta, support, l))
}

fn mask_to_support(beta: &DVector<f64>, support: &[usize]) -> DVector<f64> {
    let mut out = DVector::zeros(beta.len());
    for &j in support {
        out[j] = beta[j];
    }
    out
}

/// GMM estimator on the plug-in moments, per the configuration: optional
/// optimal weighting by the inverse moment variance, optional ℓ1 penalty,
/// optional post-selection refit with the support-restricted weight.
pub fn up_gmm(ds: &UnpairedDataset, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate()?;
    let ms = MomentSystem::from_dataset(ds);
    check_finite(&ms)?;
    let gram0 = ms.b.transpose() * &ms.b;
    let rhs0 = ms.b.transpose() * &ms.a;
    let (beta0, cond0) = linalg::ridged_spd_solve(&gram0, cfg.ridge, &rhs0)?;

    let (w, weight_used) = if cfg.optimal_weight {
        let mv = moments::omega_hat(ds, &beta0)?;
        let w = moment_weight(ds, &mv.omega, cfg.ridge);
        (Some(w), WeightKind::OmegaInverse)
    } else {
        (None, WeightKind::Identity)
    };

    let (gram, rhs) = match &w {
        Some(w) => (
            ms.b.transpose() * (w * &ms.b),
            ms.b.transpose() * (w * &ms.a),
        ),
        None => (gram0, rhs0),
    };

    if !cfg.l1 {
        let (beta, condition) = linalg::ridged_spd_solve(&gram, cfg.ridge, &rhs)?;
        let objective = moment_objective(&ms.a, &ms.b, &beta, w.as_ref());
        return Ok(Estimate::plain(
            beta,
            weight_used,
            Diagnostics {
                condition: condition.max(cond0.min(f64::INFINITY)),
                objective,
                lambda: None,
            },
        ));
    }

    let big_n = ds.n_total() as f64;
    let scale = big_n.sqrt().recip();
    let (beta_l1, support, lambda) = l1_select(
        &gram,
        &rhs,
        &cfg.lambda,
        cfg.support_rule,
        scale,
        big_n,
        ds.m as f64,
        |beta| moment_objective(&ms.a, &ms.b, beta, w.as_ref()),
    )?;

    if !cfg.post_refit {
        let beta = if matches!(cfg.support_rule, SupportRule::NonzeroPattern) {
            beta_l1.clone()
        } else {
            mask_to_support(&beta_l1, &support)
        };
        let objective = moment_objective(&ms.a, &ms.b, &beta, w.as_ref());
        return Ok(Estimate {
            beta,
            support: Some(support),
            ci: None,
            weight_used,
            diagnostics: Diagnostics {
                condition: cond0,
                objective,
                lambda: Some(lambda),
            },
        });
    }

    if support.is_empty() {
        return Ok(Estimate {
            beta: DVector::zeros(ds.d),
            support: Some(support),
            ci: None,
            weight_used,
            diagnostics: Diagnostics {
                condition: cond0,
                objective: moment_objective(&ms.a, &ms.b, &DVector::zeros(ds.d), w.as_ref()),
                lambda: Some(lambda),
            },
        });
    }

    // Post refit: dense weighted solve restricted to the selected support,
    // with the refit weight from the support-restricted moment variance
    // (identity when that matrix is degenerate).
    let masked = mask_to_support(&beta_l1, &support);
    let mv = moments::omega_hat(ds, &masked)?;
    let (w_refit, weight_used) = if mv.omega.amax() > 0.0 {
        (
            Some(moment_weight(ds, &mv.omega, cfg.ridge)),
            WeightKind::OmegaInverse,
        )
    } else {
        (None, WeightKind::Identity)
    };
    let b_s = linalg::select_columns(&ms.b, &support);
    let (gram_s, rhs_s) = match &w_refit {
        Some(w) => (b_s.transpose() * w * &b_s, b_s.transpose() * (w * &ms.a)),
        None => (b_s.transpose() * &b_s, b_s.transpose() * &ms.a),
    };
    let (beta_s, condition) = linalg::ridged_spd_solve(&gram_s, cfg.ridge, &rhs_s)?;
    let mut beta = DVector::zeros(ds.d);
    for (pos, &j) in support.iter().enumerate() {
        beta[j] = beta_s[pos];
    }
    let objective = moment_objective(&ms.a, &ms.b, &beta, w_refit.as_ref());
    Ok(Estimate {
        beta,
        support: Some(support),
        ci: None,
        weight_used,
        diagnostics: Diagnostics {
            condition,
            objective,
            lambda: Some(lambda),
        },
    })
}

fn moment_objective(
    a: &DVector<f64>,
    b: &DMatrix<f64>,
    beta: &DVector<f64>,
    w: Option<&DMatrix<f64>>,
) -> f64 {
    let resid = a - b * beta;
    match w {
        Some(w) => (resid.transpose() * w * &resid)[(0, 0)],
        None => resid.norm_squared(),
    }
}

/// Cross-moment GMM estimator for the many-instrument regime. The denominator
/// C_XX comes from cross-fold products (Monte-Carlo or closed form), which
/// removes the measurement-error bias of the plug-in Gram matrix; C_XY = m Bᵀa.
pub fn up_gmm_hd<R: Rng>(
    ds: &UnpairedDataset,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<Estimate> {
    cfg.validate()?;
    let ms = MomentSystem::from_dataset(ds);
    check_finite(&ms)?;
    let c_xy = ms.b.transpose() * &ms.a * ds.m as f64;
    let c_xx = match cfg.denominator {
        DenominatorKind::MonteCarlo { .. } => {
            cross_fold_denominator_mc(&ds.x_inst, &ds.x, ds.m, cfg.k_folds, cfg.h_redraws, rng)?
        }
        DenominatorKind::Analytic => cross_fold_denominator_analytic(&ds.x_inst, &ds.x, ds.m)?,
    };

    let gram0 = c_xx.transpose() * &c_xx;
    let rhs0 = c_xx.transpose() * &c_xy;
    let (beta0, cond0) = linalg::ridged_spd_solve(&gram0, cfg.ridge, &rhs0)?;

    // The weight lives on the d-dimensional cross-moment residual. Its
    // variance proxy is m² Bᵀ Ω̂(β₀) B, evaluated without forming the m x m
    // matrix.
    let (omega_hd, weight_used) = if cfg.optimal_weight {
        let omega_hd =
            moments::omega_weighted_gram(ds, &beta0, &ms.b)? * (ds.m as f64 * ds.m as f64);
        (Some(omega_hd), WeightKind::OmegaInverse)
    } else {
        (None, WeightKind::Identity)
    };

    if !cfg.l1 {
        let w = omega_hd
            .as_ref()
            .map(|o| linalg::weight_inverse(o, cfg.ridge));
        let (gram, rhs) = match &w {
            Some(w) => (
                c_xx.transpose() * (w * &c_xx),
                c_xx.transpose() * (w * &c_xy),
            ),
            None => (gram0, rhs0),
        };
        let (beta, condition) = linalg::ridged_spd_solve(&gram, cfg.ridge, &rhs)?;
        let objective = moment_objective(&c_xy, &c_xx, &beta, w.as_ref());
        return Ok(Estimate::plain(
            beta,
            weight_used,
            Diagnostics {
                condition,
                objective,
                lambda: None,
            },
        ));
    }

    // Support selection runs on the plug-in m-dimensional moment system with
    // the full inverse-variance weight, exactly like the finite-instrument
    // penalized path: its measurement-error bias only attenuates
    // coefficients, which thresholded support recovery tolerates, while the
    // cross-fitted denominator is honestly rank deficient in low-rank first
    // stages and starves the ℓ1 geometry. The refit below uses the
    // cross-fitted moments, which alone determine the limit.
    let w_sel = if cfg.optimal_weight {
        // Preliminary estimate for the selection weight: the identity-weight
        // ridge solve of the plug-in system, whose scale tracks the target
        // even when the cross-fitted Gram is rank deficient.
        let gram_fd = ms.b.transpose() * &ms.b;
        let rhs_fd = ms.b.transpose() * &ms.a;
        let (beta0_fd, _) = linalg::ridged_spd_solve(&gram_fd, cfg.ridge, &rhs_fd)?;
        let mv = moments::omega_hat(ds, &beta0_fd)?;
        Some(moment_weight(ds, &mv.omega, cfg.ridge))
    } else {
        None
    };
    let (gram, rhs) = match &w_sel {
        Some(w) => (
            ms.b.transpose() * (w * &ms.b),
            ms.b.transpose() * (w * &ms.a),
        ),
        None => (ms.b.transpose() * &ms.b, ms.b.transpose() * &ms.a),
    };
    let scale = (ds.m as f64).sqrt().recip();
    let big_n = ds.n_total() as f64;
    let (beta_l1, support, lambda) = l1_select(
        &gram,
        &rhs,
        &cfg.lambda,
        cfg.support_rule,
        scale,
        big_n,
        ds.m as f64,
        |beta| moment_objective(&ms.a, &ms.b, beta, w_sel.as_ref()),
    )?;

    if !cfg.post_refit {
        let beta = if matches!(cfg.support_rule, SupportRule::NonzeroPattern) {
            beta_l1.clone()
        } else {
            mask_to_support(&beta_l1, &support)
        };
        let objective = moment_objective(&c_xy, &c_xx, &beta, None);
        return Ok(Estimate {
            beta,
            support: Some(support),
            ci: None,
            weight_used,
            diagnostics: Diagnostics {
                condition: cond0,
                objective,
                lambda: Some(lambda),
            },
        });
    }

    if support.is_empty() {
        return Ok(Estimate {
            beta: DVector::zeros(ds.d),
            support: Some(support),
            ci: None,
            weight_used,
            diagnostics: Diagnostics {
                condition: cond0,
                objective: moment_objective(&c_xy, &c_xx, &DVector::zeros(ds.d), None),
                lambda: Some(lambda),
            },
        });
    }

    // Refit the dense cross-moment system on the selected coordinates with
    // the weight rebuilt from the *restricted* variance, which stays well
    // conditioned on a small support.
    let c_xx_s = linalg::select_submatrix(&c_xx, &support);
    let c_xy_s = linalg::select_entries(&c_xy, &support);
    let w_s = if omega_hd.is_some() {
        let masked = mask_to_support(&beta_l1, &support);
        let omega_s =
            moments::omega_weighted_gram(ds, &masked, &ms.b)? * (ds.m as f64 * ds.m as f64);
        Some(linalg::weight_inverse(
            &linalg::select_submatrix(&omega_s, &support),
            cfg.ridge,
        ))
    } else {
        None
    };
    let (gram_s, rhs_s) = match &w_s {
        Some(w) => (
            c_xx_s.transpose() * w * &c_xx_s,
            c_xx_s.transpose() * (w * &c_xy_s),
        ),
        None => (c_xx_s.transpose() * &c_xx_s, c_xx_s.transpose() * &c_xy_s),
    };
    let (beta_s, condition) = linalg::ridged_spd_solve(&gram_s, cfg.ridge, &rhs_s)?;
    let mut beta = DVector::zeros(ds.d);
    for (pos, &j) in support.iter().enumerate() {
        beta[j] = beta_s[pos];
    }
    let objective = moment_objective(&c_xy, &c_xx, &beta, None);
    Ok(Estimate {
        beta,
        support: Some(support),
        ci: None,
        weight_used,
        diagnostics: Diagnostics {
            condition,
            objective,
            lambda: Some(lambda),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, BetaRule, GeneratorSpec};
    use crate::dataset::InstrumentKind;
    use nalgebra::dvector;
    use rand_xoshiro::rand_core::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn ms_from(a: DVector<f64>, b: DMatrix<f64>) -> MomentSystem {
        let (m, d) = (b.nrows(), b.ncols());
        MomentSystem {
            a,
            b,
            n: 10,
            n_tilde: 10,
            m,
            d,
        }
    }

    #[test]
    fn ts_iv_identity_system() {
        let ms = ms_from(dvector![2.0, -1.0], DMatrix::identity(2, 2));
        let est = ts_iv(&ms, DEFAULT_RIDGE).unwrap();
        assert!((est.beta[0] - 2.0).abs() < 1e-8);
        assert!((est.beta[1] + 1.0).abs() < 1e-8);
        assert_eq!(est.weight_used, WeightKind::Identity);
    }

    #[test]
    fn ts_iv_zero_numerator() {
        let ms = ms_from(
            DVector::zeros(3),
            DMatrix::from_fn(3, 2, |r, c| (r + c) as f64),
        );
        let est = ts_iv(&ms, DEFAULT_RIDGE).unwrap();
        assert!(est.beta.amax() == 0.0);
    }

    #[test]
    fn ts_iv_rejects_non_finite() {
        let ms = ms_from(dvector![f64::NAN, 0.0], DMatrix::identity(2, 2));
        assert!(ts_iv(&ms, DEFAULT_RIDGE).is_err());
    }

    fn balanced_categorical(seed: u64, m: usize, d: usize, r: usize) -> UnpairedDataset {
        let mut spec = GeneratorSpec::setting2(InstrumentKind::OneHot);
        spec.m = m;
        spec.d = d;
        spec.s_star = d;
        spec.r = r;
        spec.r_tilde = r;
        spec.seed = seed;
        datagen::generate(&spec).unwrap().0
    }

    #[test]
    fn ts_iv_equals_ols_on_category_means() {
        let ds = balanced_categorical(3, 6, 2, 50);
        let est = ts_iv(&MomentSystem::from_dataset(&ds), DEFAULT_RIDGE).unwrap();

        // Centered least squares of per-environment outcome means on
        // per-environment covariate means.
        let m = ds.m;
        let env_y = match &ds.y_inst {
            crate::dataset::Instruments::OneHot { env } => env.clone(),
            _ => unreachable!(),
        };
        let env_x = match &ds.x_inst {
            crate::dataset::Instruments::OneHot { env } => env.clone(),
            _ => unreachable!(),
        };
        let mut y_means = vec![0.0; m];
        let mut y_counts = vec![0usize; m];
        for (i, &e) in env_y.iter().enumerate() {
            y_means[e] += ds.y[i];
            y_counts[e] += 1;
        }
        for e in 0..m {
            y_means[e] /= y_counts[e] as f64;
        }
        let mut x_means = DMatrix::<f64>::zeros(m, ds.d);
        let mut x_counts = vec![0usize; m];
        for (j, &e) in env_x.iter().enumerate() {
            for c in 0..ds.d {
                x_means[(e, c)] += ds.x[(j, c)];
            }
            x_counts[e] += 1;
        }
        for e in 0..m {
            for c in 0..ds.d {
                x_means[(e, c)] /= x_counts[e] as f64;
            }
        }
        let ybar: f64 = y_means.iter().sum::<f64>() / m as f64;
        let xbar = x_means.row_mean();
        let mut gram = DMatrix::<f64>::zeros(ds.d, ds.d);
        let mut rhs = DVector::<f64>::zeros(ds.d);
        for e in 0..m {
            let dx = (x_means.row(e) - &xbar).transpose();
            gram += &dx * dx.transpose();
            rhs += dx * (y_means[e] - ybar);
        }
        // Same 1/m² scaling and stabilization as the estimator so the
        // comparison is exact algebra rather than ridge-limit algebra.
        let scale = (m * m) as f64;
        let mut sys = gram / scale;
        for j in 0..ds.d {
            sys[(j, j)] += DEFAULT_RIDGE;
        }
        let ols = sys.lu().solve(&(rhs / scale)).unwrap();
        assert!((est.beta - ols).amax() < 1e-10);
    }

    #[test]
    fn ts_2sls_matches_ts_iv_on_balanced_one_hot() {
        let ds = balanced_categorical(5, 8, 2, 40);
        let iv = ts_iv(&MomentSystem::from_dataset(&ds), DEFAULT_RIDGE).unwrap();
        let tsls = ts_2sls(&ds, DEFAULT_RIDGE).unwrap();
        assert!((iv.beta - tsls.beta).amax() < 1e-8);
    }

    #[test]
    fn ts_2sls_zero_covariates() {
        let mut ds = balanced_categorical(6, 4, 2, 10);
        ds.x.fill(0.0);
        let est = ts_2sls(&ds, DEFAULT_RIDGE).unwrap();
        assert!(est.beta.amax() < 1e-12);
    }

    #[test]
    fn ts_2sls_consistent_without_confounding() {
        // Strong continuous first stage, exogenous noise only.
        let mut spec = GeneratorSpec::setting2(InstrumentKind::Continuous);
        spec.m = 5;
        spec.d = 2;
        spec.r = 2000;
        spec.r_tilde = 2000;
        spec.gamma_x = 0.0;
        spec.gamma_y = 0.0;
        spec.sigma_x = 0.3;
        spec.sigma_eps = 0.3;
        spec.seed = 11;
        let (ds, gt) = datagen::generate(&spec).unwrap();
        let est = ts_2sls(&ds, DEFAULT_RIDGE).unwrap();
        assert!(
            (&est.beta - &gt.beta_star).amax() < 0.05,
            "beta {} vs {}",
            est.beta,
            gt.beta_star
        );
    }

    #[test]
    fn naive_ols_is_biased_away_from_target() {
        let mut spec = GeneratorSpec::setting2(InstrumentKind::OneHot);
        spec.m = 20;
        spec.d = 1;
        spec.s_star = 1;
        spec.r = 50;
        spec.r_tilde = 50;
        spec.beta = BetaRule::Explicit(vec![0.8]);
        let mut worst: f64 = f64::INFINITY;
        for rep in 0..50 {
            spec.seed = 100 + rep;
            let (ds, gt) = datagen::generate(&spec).unwrap();
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(rep);
            let est = naive_ols(&ds, &mut rng).unwrap();
            worst = worst.min((est.beta[0] - gt.beta_star[0]).abs());
        }
        // Random pairing destroys the signal; the estimate sits near zero,
        // far from the target.
        assert!(worst > 0.4, "worst-case distance {worst}");
    }

    #[test]
    fn naive_ols_converges_to_pairing_projection() {
        // Unconfounded generator, independent pairing: the population
        // projection coefficient of randomly paired rows is zero.
        let mut spec = GeneratorSpec::setting2(InstrumentKind::OneHot);
        spec.m = 10;
        spec.d = 1;
        spec.s_star = 1;
        spec.gamma_x = 0.0;
        spec.gamma_y = 0.0;
        spec.r = 2000;
        spec.r_tilde = 2000;
        spec.beta = BetaRule::Explicit(vec![0.9]);
        spec.seed = 4;
        let (ds, gt) = datagen::generate(&spec).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let est = naive_ols(&ds, &mut rng).unwrap();
        assert!(est.beta[0].abs() < 0.1, "projection {}", est.beta[0]);
        assert!((est.beta[0] - gt.beta_star[0]).abs() > 0.5);
    }

    #[test]
    fn naive_ols_deterministic_given_seed() {
        let ds = balanced_categorical(8, 5, 2, 20);
        let mut r1 = Xoshiro256PlusPlus::seed_from_u64(21);
        let mut r2 = Xoshiro256PlusPlus::seed_from_u64(21);
        let a = naive_ols(&ds, &mut r1).unwrap();
        let b = naive_ols(&ds, &mut r2).unwrap();
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn l1_solver_unpenalized_solves_system() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = dvector![1.0, -0.5];
        let beta = l1_quadratic_solve(&g, &h, 0.0).unwrap();
        let direct = g.clone().lu().solve(&h).unwrap();
        assert!((beta - direct).amax() < 1e-8);
    }

    #[test]
    fn l1_solver_full_shrinkage() {
        let g = DMatrix::from_diagonal(&dvector![1.0, 2.0, 0.5]);
        let h = dvector![0.3, -0.2, 0.1];
        let beta = l1_quadratic_solve(&g, &h, 0.3).unwrap();
        assert!(beta.amax() == 0.0);
    }

    #[test]
    fn l1_solver_orthogonal_design_soft_threshold() {
        let g = DMatrix::identity(3, 3);
        let h = dvector![1.0, -0.4, 0.05];
        let lambda = 0.25;
        let beta = l1_quadratic_solve(&g, &h, lambda).unwrap();
        let want = dvector![0.75, -0.15, 0.0];
        assert!((beta - want).amax() < 1e-12);
    }

    #[test]
    fn l1_solver_rejects_indefinite_matrix() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let h = dvector![1.0, 1.0];
        assert!(matches!(
            l1_quadratic_solve(&g, &h, 0.1),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn up_gmm_identity_weight_reduces_to_ts_iv() {
        let ds = balanced_categorical(13, 6, 3, 30);
        let cfg = EstimatorConfig::default();
        let reduced = up_gmm(&ds, &cfg).unwrap();
        let iv = ts_iv(&MomentSystem::from_dataset(&ds), cfg.ridge).unwrap();
        assert_eq!(reduced.beta, iv.beta);
    }

    #[test]
    fn up_gmm_optimal_close_to_identity_when_homoskedastic() {
        // Hand-built balanced one-hot data with constant noise scale.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(17);
        let (m, d, r) = (10usize, 2usize, 1000usize);
        let n = m * r;
        let mu = DMatrix::from_fn(m, d, |_, _| {
            let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            v
        });
        let beta_star = dvector![0.7, -0.6];
        let normal = |rng: &mut Xoshiro256PlusPlus| -> f64 {
            let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            v
        };
        let mut env = Vec::new();
        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, d);
        for e in 0..m {
            for i in 0..r {
                let row = e * r + i;
                env.push(e);
                let mut xy = 0.0;
                for c in 0..d {
                    let xv = mu[(e, c)] + 0.5 * normal(&mut rng);
                    xy += xv * beta_star[c];
                    x[(row, c)] = mu[(e, c)] + 0.5 * normal(&mut rng);
                }
                y[row] = xy + 0.2 * normal(&mut rng);
            }
        }
        let ds = UnpairedDataset::new(
            m,
            d,
            crate::dataset::Instruments::OneHot { env: env.clone() },
            y,
            crate::dataset::Instruments::OneHot { env },
            x,
        )
        .unwrap();
        let mut cfg = EstimatorConfig::default();
        let ident = up_gmm(&ds, &cfg).unwrap();
        cfg.optimal_weight = true;
        let opt = up_gmm(&ds, &cfg).unwrap();
        assert_eq!(opt.weight_used, WeightKind::OmegaInverse);
        assert!((opt.beta - ident.beta).norm() < 0.1);
    }

    #[test]
    fn up_gmm_l1_refit_beats_ts_iv_when_underdetermined() {
        // m < d: the dense estimator cannot identify, the sparse path can.
        let mut spec = GeneratorSpec::setting1(InstrumentKind::OneHot);
        spec.m = 20;
        spec.d = 40;
        spec.s_star = 3;
        spec.r = 100;
        spec.r_tilde = 100;
        spec.seed = 29;
        let (ds, gt) = datagen::generate(&spec).unwrap();
        let iv = ts_iv(&MomentSystem::from_dataset(&ds), DEFAULT_RIDGE).unwrap();
        let mut cfg = EstimatorConfig::default();
        cfg.optimal_weight = true;
        cfg.l1 = true;
        cfg.post_refit = true;
        let sparse = up_gmm(&ds, &cfg).unwrap();
        let err_iv = (iv.beta - &gt.beta_star).norm();
        let err_sparse = (sparse.beta.clone() - &gt.beta_star).norm();
        assert!(
            err_sparse * 2.0 < err_iv,
            "sparse {err_sparse} vs dense {err_iv}"
        );
        assert!(sparse.support.is_some());
        assert!(sparse.diagnostics.lambda.is_some());
    }

    #[test]
    fn up_gmm_hd_noiseless_recovers_exactly() {
        // Zero noise: within-environment covariates equal the means, so the
        // cross-fold moments solve the population system.
        let mut spec = GeneratorSpec::setting2(InstrumentKind::OneHot);
        spec.m = 12;
        spec.d = 1;
        spec.s_star = 1;
        spec.r = 4;
        spec.r_tilde = 4;
        spec.gamma_x = 0.0;
        spec.gamma_y = 0.0;
        spec.sigma_u = 0.0;
        spec.sigma_x = 0.0;
        spec.sigma_eps = 0.0;
        spec.beta = BetaRule::Explicit(vec![1.3]);
        spec.seed = 31;
        let (ds, gt) = datagen::generate(&spec).unwrap();
        for denom in [
            DenominatorKind::MonteCarlo { k: 2, h: 3 },
            DenominatorKind::Analytic,
        ] {
            let mut cfg = EstimatorConfig::default();
            cfg.denominator = denom;
            cfg.k_folds = 2;
            cfg.h_redraws = 3;
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
            let est = up_gmm_hd(&ds, &cfg, &mut rng).unwrap();
            assert!(
                (est.beta[0] - gt.beta_star[0]).abs() < 1e-6,
                "{denom:?}: {} vs {}",
                est.beta[0],
                gt.beta_star[0]
            );
        }
    }

    #[test]
    fn deterministic_estimators_are_label_equivariant() {
        let ds = balanced_categorical(41, 5, 2, 40);
        let perm = [3usize, 0, 4, 1, 2];
        let relabel = |inst: &crate::dataset::Instruments| match inst {
            crate::dataset::Instruments::OneHot { env } => crate::dataset::Instruments::OneHot {
                env: env.iter().map(|&e| perm[e]).collect(),
            },
            _ => unreachable!(),
        };
        let permuted = UnpairedDataset::new(
            ds.m,
            ds.d,
            relabel(&ds.y_inst),
            ds.y.clone(),
            relabel(&ds.x_inst),
            ds.x.clone(),
        )
        .unwrap();
        let mut cfg = EstimatorConfig::default();
        cfg.optimal_weight = true;
        for (a, b) in [
            (
                ts_iv(&MomentSystem::from_dataset(&ds), cfg.ridge).unwrap(),
                ts_iv(&MomentSystem::from_dataset(&permuted), cfg.ridge).unwrap(),
            ),
            (
                ts_2sls(&ds, cfg.ridge).unwrap(),
                ts_2sls(&permuted, cfg.ridge).unwrap(),
            ),
            (up_gmm(&ds, &cfg).unwrap(), up_gmm(&permuted, &cfg).unwrap()),
            (
                up_gmm_hd(&ds, &cfg, &mut Xoshiro256PlusPlus::seed_from_u64(0)).unwrap(),
                up_gmm_hd(&permuted, &cfg, &mut Xoshiro256PlusPlus::seed_from_u64(0)).unwrap(),
            ),
        ] {
            assert!((a.beta - b.beta).amax() < 1e-10);
        }
    }

    #[test]
    fn ts_iv_covariate_scaling_inverts_coefficients() {
        // A strong first stage keeps the fixed 1e-10 stabilization far below
        // the Gram spectrum on both sides of the rescaling.
        let mut ds = balanced_categorical(43, 4, 2, 100);
        ds.x *= 4.0; // widen the spread between environment means
        let scaled = UnpairedDataset::new(
            ds.m,
            ds.d,
            ds.y_inst.clone(),
            ds.y.clone(),
            ds.x_inst.clone(),
            &ds.x * 2.0,
        )
        .unwrap();
        let base = ts_iv(&MomentSystem::from_dataset(&ds), DEFAULT_RIDGE).unwrap();
        let half = ts_iv(&MomentSystem::from_dataset(&scaled), DEFAULT_RIDGE).unwrap();
        assert!((half.beta * 2.0 - base.beta).amax() < 1e-8);
    }

    #[test]
    fn l1_support_size_non_increasing_in_lambda() {
        // Full-rank instance; the grid spans the operational penalty range
        // around the 1/sqrt(N) rate.
        let mut spec = GeneratorSpec::setting1(InstrumentKind::OneHot);
        spec.m = 30;
        spec.d = 20;
        spec.s_star = 4;
        spec.r = 40;
        spec.r_tilde = 40;
        spec.seed = 47;
        let (ds, _) = datagen::generate(&spec).unwrap();
        let ms = MomentSystem::from_dataset(&ds);
        let gram = ms.b.transpose() * &ms.b;
        let rhs = ms.b.transpose() * &ms.a;
        let rate = (ds.n_total() as f64).sqrt().recip();
        let mut prev = usize::MAX;
        for i in 0..10 {
            let lambda = 0.01 * rate * 2.5f64.powi(i);
            let beta = l1_quadratic_solve(&gram, &rhs, lambda).unwrap();
            let nnz = beta.iter().filter(|v| **v != 0.0).count();
            assert!(
                nnz <= prev,
                "support grew from {prev} to {nnz} at lambda {lambda}"
            );
            prev = nnz;
        }
    }

    #[test]
    fn up_gmm_hd_mc_deterministic_given_seed() {
        let ds = balanced_categorical(51, 8, 2, 6);
        let mut cfg = EstimatorConfig::default();
        cfg.denominator = DenominatorKind::MonteCarlo { k: 2, h: 4 };
        cfg.h_redraws = 4;
        let a = up_gmm_hd(&ds, &cfg, &mut Xoshiro256PlusPlus::seed_from_u64(5)).unwrap();
        let b = up_gmm_hd(&ds, &cfg, &mut Xoshiro256PlusPlus::seed_from_u64(5)).unwrap();
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = EstimatorConfig::default();
        cfg.ridge = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = EstimatorConfig::default();
        cfg.k_folds = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = EstimatorConfig::default();
        cfg.lambda = LambdaRule::Fixed(-1.0);
        assert!(cfg.validate().is_err());
    }
}
