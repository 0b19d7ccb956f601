//! Finite checkers for identifiability: the dense rank condition, the
//! restricted-nullspace condition via exhaustive support enumeration, a
//! brute-force sparsest-solution oracle, and the attenuation predictor for
//! the naive two-sample estimator in the many-instrument regime.

use nalgebra::{DMatrix, DVector};

use crate::datagen::{self, GeneratorSpec};
use crate::dataset::InstrumentKind;
use crate::error::{Error, Result};
use crate::linalg;

/// Default relative tolerance on singular values for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Enumeration ceilings; above them the checkers refuse rather than
/// approximate.
pub const NULLSPACE_MAX_D: usize = 20;
pub const SPARSEST_MAX_D: usize = 12;

/// True iff the first-stage cross-covariance has full column rank, i.e. the
/// dense coefficient vector is identified.
pub fn dense_identifiable(c: &DMatrix<f64>) -> bool {
    dense_identifiable_with_tol(c, RANK_TOL)
}

pub fn dense_identifiable_with_tol(c: &DMatrix<f64>, rel_tol: f64) -> bool {
    linalg::numerical_rank(c, rel_tol) == c.ncols()
}

/// Restricted-nullspace check: no nonzero vector with at most `2 s*` nonzeros
/// lies in the kernel. Equivalently, every column submatrix of size
/// `min(2 s*, d)` has full column rank. Works on the first-stage matrix
/// itself or on its scaled Gram limit (for the PSD Gram the column check and
/// the principal-submatrix check agree).
pub fn restricted_nullspace_holds(mat: &DMatrix<f64>, s_star: usize) -> Result<bool> {
    restricted_nullspace_holds_with_tol(mat, s_star, RANK_TOL)
}

pub fn restricted_nullspace_holds_with_tol(
    mat: &DMatrix<f64>,
    s_star: usize,
    rel_tol: f64,
) -> Result<bool> {
    let d = mat.ncols();
    if d > NULLSPACE_MAX_D {
        return Err(Error::EnumerationBudget(format!(
            "restricted nullspace check enumerates supports only up to d = {NULLSPACE_MAX_D}, got {d}"
        )));
    }
    if s_star == 0 {
        return Ok(true);
    }
    let t = (2 * s_star).min(d);
    let mut holds = true;
    for_each_support(d, t, &mut |support| {
        let sub = linalg::select_columns(mat, support);
        if linalg::numerical_rank(&sub, rel_tol) < t {
            holds = false;
            false // stop
        } else {
            true
        }
    });
    Ok(holds)
}

/// Exhaustive sparsest-solution oracle: enumerate supports of size at most
/// `s*`, solve least squares on each, and return every exact solution
/// (residual below 1e-8) of minimal support size.
pub fn sparsest_solution_set(
    c: &DMatrix<f64>,
    target: &DVector<f64>,
    s_star: usize,
) -> Result<Vec<DVector<f64>>> {
    let d = c.ncols();
    if d > SPARSEST_MAX_D {
        return Err(Error::EnumerationBudget(format!(
            "sparsest-solution enumeration supports only d <= {SPARSEST_MAX_D}, got {d}"
        )));
    }
    if target.len() != c.nrows() {
        return Err(Error::DimensionMismatch(
            "target length must match rows of c".into(),
        ));
    }
    const RESID_TOL: f64 = 1e-8;
    for size in 0..=s_star.min(d) {
        let mut found: Vec<DVector<f64>> = Vec::new();
        for_each_support(d, size, &mut |support| {
            let solution = if size == 0 {
                DVector::zeros(d)
            } else {
                let sub = linalg::select_columns(c, support);
                match linalg::pinv_solve(&sub, target) {
                    Ok(coef) => {
                        let mut full = DVector::zeros(d);
                        for (pos, &j) in support.iter().enumerate() {
                            full[j] = coef[pos];
                        }
                        full
                    }
                    Err(_) => return true,
                }
            };
            let resid = (target - c * &solution).norm();
            if resid < RESID_TOL && !found.iter().any(|f| (f - &solution).amax() < RESID_TOL) {
                found.push(solution);
            }
            true
        });
        if !found.is_empty() {
            return Ok(found);
        }
    }
    Ok(Vec::new())
}

/// Visit every support of the given size in lexicographic order. The callback
/// returns false to stop early.
fn for_each_support(d: usize, size: usize, f: &mut impl FnMut(&[usize]) -> bool) {
    if size == 0 {
        f(&[]);
        return;
    }
    if size > d {
        return;
    }
    let mut support: Vec<usize> = (0..size).collect();
    loop {
        if !f(&support) {
            return;
        }
        // Advance to the next combination.
        let mut i = size;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if support[i] != i + d - size {
                break;
            }
            if i == 0 {
                return;
            }
        }
        support[i] += 1;
        for j in (i + 1)..size {
            support[j] = support[j - 1] + 1;
        }
    }
}

/// Finite-m population moments of a categorical generator realization.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    /// Q = (1/m) Σ_e (mu_e - mū)(mu_e - mū)ᵀ, d x d.
    pub q: DMatrix<f64>,
    /// Attenuation constant of the balanced design (within-environment noise
    /// only): (1 - 1/m) mean_e(gamma_x² sigma_u² + sigma_{x,e}²). Scalar form,
    /// meaningful for d = 1.
    pub b: f64,
    /// Matrix form of the balanced attenuation term, d x d.
    pub b_matrix: DMatrix<f64>,
    /// The i.i.d.-environment trace constant Σ_i Var((1{K=i} - 1/m) X) of the
    /// categorical example, exact at finite m (d = 1 only).
    pub b_iid: Option<f64>,
}

/// Compute the realized (Q, b) pair for a categorical generator spec by
/// materializing its environment parameters from the spec seed.
pub fn population_q_b(spec: &GeneratorSpec) -> Result<PopulationMoments> {
    if spec.kind != InstrumentKind::OneHot {
        return Err(Error::UnsupportedSpec(
            "population moments are defined for the categorical generator".into(),
        ));
    }
    spec.validate()?;
    let mut rng = datagen::rng_from_seed(spec.seed);
    let params = datagen::draw_categorical_params(spec, &mut rng);
    Ok(population_moments_from_params(
        &params.mu,
        &params.sigma_x_env,
        spec.gamma_x,
        spec.sigma_u,
    ))
}

/// Same computation from realized parameters.
pub fn population_moments_from_params(
    mu: &DMatrix<f64>,
    sigma_x_env: &[f64],
    gamma_x: f64,
    sigma_u: f64,
) -> PopulationMoments {
    let m = mu.nrows();
    let d = mu.ncols();
    let (q, b) = datagen::categorical_population_moments(mu, sigma_x_env, gamma_x, sigma_u);
    let shrink = 1.0 - 1.0 / m as f64;
    let conf = gamma_x * gamma_x * sigma_u * sigma_u;
    let mean_sq: f64 = sigma_x_env.iter().map(|s| s * s).sum::<f64>() / m as f64;
    // V̄ = gamma² sigma_u² J + mean(sigma²) I, shrunk by (1 - 1/m).
    let mut b_matrix = DMatrix::from_element(d, d, conf * shrink);
    for j in 0..d {
        b_matrix[(j, j)] += mean_sq * shrink;
    }
    let b_iid = if d == 1 {
        // Σ_i Var(Z_i) = (1 - 1/m) s̄ - Q/m with s̄ the mean of
        // E[X² | env] = mu_e² + gamma² sigma_u² + sigma_{x,e}².
        let s_bar: f64 = (0..m)
            .map(|e| {
                let mu_e = mu[(e, 0)];
                mu_e * mu_e + conf + sigma_x_env[e] * sigma_x_env[e]
            })
            .sum::<f64>()
            / m as f64;
        Some(shrink * s_bar - q[(0, 0)] / m as f64)
    } else {
        None
    };
    PopulationMoments {
        q,
        b,
        b_matrix,
        b_iid,
    }
}

/// The probability limit of the naive two-sample estimator in the
/// many-instrument regime with a scalar covariate: `beta* q / (q + b / r̃)`.
pub fn tsiv_bias_predict(beta_star: f64, q: f64, b: f64, r_tilde: f64) -> f64 {
    beta_star * q / (q + b / r_tilde)
}

/// Multivariate analogue: `(Q + B/r̃)^{-1} Q beta*`.
pub fn tsiv_plateau(
    beta_star: &DVector<f64>,
    q: &DMatrix<f64>,
    b_matrix: &DMatrix<f64>,
    r_tilde: f64,
) -> Result<DVector<f64>> {
    let denom = q + b_matrix / r_tilde;
    let rhs = q * beta_star;
    let (sol, _) = linalg::ridged_spd_solve(&denom, 0.0, &rhs)?;
    Ok(sol)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::InstrumentKind;
    use nalgebra::dvector;
    use rand::Rng;
    use rand_distr::Distribution;
    use rand_xoshiro::rand_core::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn gaussian(m: usize, d: usize, rng: &mut Xoshiro256PlusPlus) -> DMatrix<f64> {
        DMatrix::from_fn(m, d, |_, _| {
            let v: f64 = rand_distr::StandardNormal.sample(rng);
            v
        })
    }

    #[test]
    fn dense_identity_is_identifiable() {
        assert!(dense_identifiable(&DMatrix::identity(3, 3)));
    }

    #[test]
    fn dense_duplicate_column_is_not() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut c = gaussian(5, 4, &mut rng);
        let col = c.column(0).into_owned();
        c.set_column(1, &col);
        assert!(!dense_identifiable(&c));
    }

    #[test]
    fn dense_wide_matrix_is_not() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let c = gaussian(2, 4, &mut rng);
        assert!(!dense_identifiable(&c));
    }

    #[test]
    fn nullspace_identity_holds() {
        for s in 1..=3 {
            assert!(restricted_nullspace_holds(&DMatrix::identity(6, 6), s).unwrap());
        }
    }

    #[test]
    fn nullspace_duplicate_column_fails() {
        // Kernel vector e1 - e2 has two nonzeros, within the 2s* budget.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut c = gaussian(6, 4, &mut rng);
        let col = c.column(0).into_owned();
        c.set_column(1, &col);
        assert!(!restricted_nullspace_holds(&c, 1).unwrap());
    }

    #[test]
    fn nullspace_generic_wide_matrix_holds_for_small_sparsity() {
        // m = 2 rows suffice for 2s* = 2 generic columns.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        for _ in 0..100 {
            let c = gaussian(2, 4, &mut rng);
            assert!(restricted_nullspace_holds(&c, 1).unwrap());
        }
    }

    #[test]
    fn nullspace_monotone_in_sparsity() {
        // Holding at s* implies holding at every smaller sparsity budget.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        for _ in 0..50 {
            let c = gaussian(5, 7, &mut rng);
            let mut held_above = false;
            for s in (1..=3).rev() {
                let holds = restricted_nullspace_holds(&c, s).unwrap();
                if held_above {
                    assert!(holds, "fails at s = {s} after holding at s + 1");
                }
                held_above = holds;
            }
        }
    }

    #[test]
    fn nullspace_necessity_of_m_at_least_two_s() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        for _ in 0..20 {
            // m < 2 s*: every 2s*-column submatrix is rank deficient.
            let c = gaussian(3, 5, &mut rng);
            assert!(!restricted_nullspace_holds(&c, 2).unwrap());
        }
    }

    #[test]
    fn nullspace_budget_refusal() {
        let c = DMatrix::<f64>::identity(25, 25);
        assert!(matches!(
            restricted_nullspace_holds(&c, 2),
            Err(Error::EnumerationBudget(_))
        ));
    }

    #[test]
    fn nullspace_gram_form_agrees_with_first_stage_form() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for trial in 0..30 {
            let mut c = gaussian(4, 6, &mut rng);
            if trial % 3 == 0 {
                let col = c.column(2).into_owned();
                c.set_column(4, &col);
            }
            let q = c.transpose() * &c * 4.0;
            let via_c = restricted_nullspace_holds(&c, 1).unwrap();
            let via_q = restricted_nullspace_holds(&q, 1).unwrap();
            assert_eq!(via_c, via_q, "trial {trial}");
        }
    }

    #[test]
    fn sparsest_identity_recovers_target() {
        let c = DMatrix::<f64>::identity(4, 4);
        let beta = dvector![0.0, 2.0, 0.0, 0.0];
        let target = &c * &beta;
        let sols = sparsest_solution_set(&c, &target, 2).unwrap();
        assert_eq!(sols.len(), 1);
        assert!((sols[0].clone() - beta).amax() < 1e-10);
    }

    #[test]
    fn sparsest_duplicate_columns_yield_two_solutions() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let mut c = gaussian(5, 4, &mut rng);
        let col = c.column(0).into_owned();
        c.set_column(1, &col);
        let beta = dvector![1.5, 0.0, 0.0, 0.0];
        let target = &c * &beta;
        let sols = sparsest_solution_set(&c, &target, 1).unwrap();
        assert!(sols.len() >= 2, "got {} solutions", sols.len());
    }

    #[test]
    fn sparsest_zero_target_gives_zero() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let c = gaussian(4, 5, &mut rng);
        let sols = sparsest_solution_set(&c, &DVector::zeros(4), 2).unwrap();
        assert_eq!(sols.len(), 1);
        assert!(sols[0].amax() == 0.0);
    }

    #[test]
    fn sparsest_budget_refusal() {
        let c = DMatrix::<f64>::identity(15, 15);
        let t = DVector::zeros(15);
        assert!(matches!(
            sparsest_solution_set(&c, &t, 1),
            Err(Error::EnumerationBudget(_))
        ));
    }

    #[test]
    fn population_moments_flat_means_give_zero_q() {
        let mu = DMatrix::from_element(4, 1, 3.0);
        let pm = population_moments_from_params(&mu, &[0.5; 4], 0.2, 0.2);
        assert!(pm.q.amax() < 1e-15);
    }

    #[test]
    fn population_moments_doubling_deviations_quadruples_q() {
        let mu = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let mu2 = DMatrix::from_row_slice(3, 1, &[-1.0, 1.0, 3.0]); // deviations doubled
        let a = population_moments_from_params(&mu, &[0.3; 3], 0.2, 0.2);
        let b = population_moments_from_params(&mu2, &[0.3; 3], 0.2, 0.2);
        assert!((b.q[(0, 0)] - 4.0 * a.q[(0, 0)]).abs() < 1e-12);
    }

    /// Monte-Carlo oracle for the i.i.d.-environment trace constant:
    /// Σ_i Var((1{K=i} - 1/m) X) under K ~ Unif{1..m}, X = mu_K + noise.
    fn b_iid_monte_carlo(
        mu: &[f64],
        sigma_x: &[f64],
        gamma_x: f64,
        sigma_u: f64,
        draws: usize,
        seed: u64,
    ) -> f64 {
        let m = mu.len();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut sum = vec![0.0f64; m];
        let mut sum_sq = vec![0.0f64; m];
        for _ in 0..draws {
            let k = rng.gen_range(0..m);
            let u: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let x = mu[k] + gamma_x * sigma_u * u + sigma_x[k] * e;
            for i in 0..m {
                let z = (if i == k { 1.0 } else { 0.0 } - 1.0 / m as f64) * x;
                sum[i] += z;
                sum_sq[i] += z * z;
            }
        }
        (0..m)
            .map(|i| {
                let mean = sum[i] / draws as f64;
                sum_sq[i] / draws as f64 - mean * mean
            })
            .sum()
    }

    #[test]
    fn b_iid_noiseless_two_environment_case() {
        // mu = (-1, 1), no noise: each (1{K=i} - 1/2) X is constant, so the
        // trace constant is exactly zero; the Monte-Carlo oracle agrees.
        let mu = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let pm = population_moments_from_params(&mu, &[0.0, 0.0], 0.0, 0.0);
        assert!((pm.q[(0, 0)] - 1.0).abs() < 1e-14);
        let b_iid = pm.b_iid.unwrap();
        assert!(b_iid.abs() < 1e-14, "b_iid = {b_iid}");
        let mc = b_iid_monte_carlo(&[-1.0, 1.0], &[0.0, 0.0], 0.0, 0.0, 100_000, 1);
        assert!(mc.abs() < 1e-10, "mc = {mc}");
    }

    #[test]
    fn b_iid_matches_monte_carlo_with_noise() {
        let mu_v = [0.0, 1.0, 2.0];
        let sx = [0.5, 1.0, 1.5];
        let (gx, su) = (0.4, 0.5);
        let mu = DMatrix::from_row_slice(3, 1, &mu_v);
        let pm = population_moments_from_params(&mu, &sx, gx, su);
        let draws = 1_000_000;
        let mc = b_iid_monte_carlo(&mu_v, &sx, gx, su, draws, 2);
        let b_iid = pm.b_iid.unwrap();
        // The MC standard error of a variance sum at this scale.
        assert!(
            (mc - b_iid).abs() < 0.02,
            "formula {b_iid} vs monte carlo {mc}"
        );
    }

    #[test]
    fn bias_predictor_limits() {
        assert_eq!(tsiv_bias_predict(0.7, 1.3, 0.0, 4.0), 0.7);
        let near = tsiv_bias_predict(0.7, 1.3, 2.0, 1e9);
        assert!((near - 0.7).abs() < 1e-6);
        assert_eq!(tsiv_bias_predict(2.0, 1.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn plateau_reduces_to_scalar_formula() {
        let beta = dvector![0.8];
        let q = DMatrix::from_element(1, 1, 1.4);
        let b = DMatrix::from_element(1, 1, 2.3);
        let plateau = tsiv_plateau(&beta, &q, &b, 4.0).unwrap();
        let scalar = tsiv_bias_predict(0.8, 1.4, 2.3, 4.0);
        assert!((plateau[0] - scalar).abs() < 1e-12);
    }

    #[test]
    fn population_q_b_requires_categorical() {
        let spec = crate::datagen::GeneratorSpec::setting2(InstrumentKind::Continuous);
        assert!(population_q_b(&spec).is_err());
    }

    #[test]
    fn population_q_b_matches_ground_truth() {
        let mut spec = crate::datagen::GeneratorSpec::setting2(InstrumentKind::OneHot);
        spec.m = 30;
        spec.d = 1;
        spec.s_star = 1;
        spec.r = 4;
        spec.r_tilde = 4;
        spec.seed = 77;
        let pm = population_q_b(&spec).unwrap();
        let (_, gt) = crate::datagen::generate(&spec).unwrap();
        assert!((pm.q[(0, 0)] - gt.q_realized.unwrap()[(0, 0)]).abs() < 1e-12);
        assert!((pm.b - gt.b_realized.unwrap()).abs() < 1e-12);
    }
}
