//! Seeded synthetic generators for the unpaired two-sample model.
//!
//! Both generators share the structural equations
//!
//! ```text
//! X = mu(I) + gamma_x U + eps_x,   Y = Xᵀ beta* + gamma_y U + eps_y,
//! X̃ = mu(Ĩ) + gamma_x Ũ + eps̃_x,
//! ```
//!
//! with independent confounders U, Ũ ~ N(0, sigma_u²). The first stage is
//! shared across the two samples, so the population instrument/covariate
//! cross-covariances coincide by construction. Heteroskedastic noise scales
//! are drawn from a clipped lognormal and renormalized so the mean scale
//! stays at its base value.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dataset::{InstrumentKind, Instruments, UnpairedDataset};
use crate::error::{Error, Result};

/// The noise-scale clipping range, as multiples of the base scale.
pub const SCALE_CLIP: (f64, f64) = (0.25, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Setting {
    /// Finite-dimensional instruments, sparse effect.
    S1,
    /// High-dimensional instruments, dense effect (d small).
    S2,
    /// High-dimensional instruments, sparse effect, low-rank first stage.
    S3,
}

/// How the causal coefficient vector is produced.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum BetaRule {
    /// `s*` positions uniform without replacement, magnitudes uniform on
    /// [-1, -0.5] ∪ [0.5, 1].
    SparseUniform,
    /// All `d` coordinates drawn from the two bands.
    DenseUniform,
    /// A fixed vector (used by sweeps that hold the target constant).
    Explicit(Vec<f64>),
}

/// Full parameterization of a synthetic regime.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorSpec {
    pub kind: InstrumentKind,
    pub setting: Setting,
    pub m: usize,
    pub d: usize,
    pub s_star: usize,
    /// Rank of the first stage (S3 only).
    pub k_rank: usize,
    /// Observations per environment (y sample); n = m * r.
    pub r: usize,
    /// Observations per environment (x sample); ñ = m * r̃.
    pub r_tilde: usize,
    pub beta: BetaRule,
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub sigma_u: f64,
    pub sigma_x: f64,
    pub sigma_eps: f64,
    /// First-stage scale for the continuous low-rank setting.
    pub pi_scale: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    fn base(kind: InstrumentKind, setting: Setting) -> Self {
        GeneratorSpec {
            kind,
            setting,
            m: 100,
            d: 200,
            s_star: 10,
            k_rank: 60,
            r: 8,
            r_tilde: 8,
            beta: BetaRule::SparseUniform,
            gamma_x: 0.2,
            gamma_y: 0.2,
            sigma_u: 0.2,
            sigma_x: 1.0,
            sigma_eps: 0.2,
            pi_scale: 1.0,
            seed: 0,
        }
    }

    /// Finite-dimensional instruments, sparse effect: m = 100, d = 200, s* = 10.
    pub fn setting1(kind: InstrumentKind) -> Self {
        Self::base(kind, Setting::S1)
    }

    /// High-dimensional instruments, dense effect: d = 2.
    pub fn setting2(kind: InstrumentKind) -> Self {
        let mut s = Self::base(kind, Setting::S2);
        s.d = 2;
        s.s_star = 2;
        s.beta = BetaRule::DenseUniform;
        s
    }

    /// High-dimensional instruments, sparse effect, rank-k first stage:
    /// k = 60, d = 100, s* = 10.
    pub fn setting3(kind: InstrumentKind) -> Self {
        let mut s = Self::base(kind, Setting::S3);
        s.d = 100;
        s.s_star = 10;
        s.k_rank = 60;
        s
    }

    pub fn n(&self) -> usize {
        self.m * self.r
    }

    pub fn n_tilde(&self) -> usize {
        self.m * self.r_tilde
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 || self.r == 0 || self.r_tilde == 0 {
            return Err(Error::UnsupportedSpec("m, d, r, r̃ must be positive".into()));
        }
        if self.s_star > self.d {
            return Err(Error::UnsupportedSpec(format!(
                "s* = {} exceeds d = {}",
                self.s_star, self.d
            )));
        }
        if self.setting == Setting::S3 && self.k_rank == 0 {
            return Err(Error::UnsupportedSpec("S3 needs a positive rank k".into()));
        }
        for (name, v) in [
            ("gamma_x", self.gamma_x),
            ("gamma_y", self.gamma_y),
            ("sigma_u", self.sigma_u),
            ("sigma_x", self.sigma_x),
            ("sigma_eps", self.sigma_eps),
            ("pi_scale", self.pi_scale),
        ] {
            if !v.is_finite() {
                return Err(Error::UnsupportedSpec(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Realized parameters and latent state of one generated dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub beta_star: DVector<f64>,
    pub support: Vec<usize>,
    /// Environment means (categorical), m x d.
    pub mu: Option<DMatrix<f64>>,
    /// First-stage matrix (continuous), m x d.
    pub pi: Option<DMatrix<f64>>,
    /// The fixed low-rank factor of S3 (d x k).
    pub a_factor: Option<DMatrix<f64>>,
    /// Per-environment (or per-coordinate) covariate noise scales.
    pub sigma_x_env: Vec<f64>,
    /// Per-environment (or per-coordinate) outcome noise scales.
    pub sigma_eps_env: Vec<f64>,
    /// Realized Q = m CovᵀCov, d x d.
    pub q_realized: Option<DMatrix<f64>>,
    /// Realized finite-m attenuation constant of the balanced design (d = 1;
    /// see `identifiability::population_q_b`).
    pub b_realized: Option<f64>,
    /// Latent covariates of the outcome sample (n x d), emitted only when the
    /// caller asks for the oracle-paired shadow; never part of the dataset.
    pub shadow_x: Option<DMatrix<f64>>,
}

/// Draw a coefficient vector per the rule. Sparse positions are uniform
/// without replacement; magnitudes are uniform on [-1, -0.5] ∪ [0.5, 1].
pub fn gen_beta<R: Rng>(rule: &BetaRule, d: usize, s_star: usize, rng: &mut R) -> DVector<f64> {
    match rule {
        BetaRule::Explicit(v) => DVector::from_vec(v.clone()),
        BetaRule::SparseUniform => {
            let mut beta = DVector::zeros(d);
            let mut idx: Vec<usize> = (0..d).collect();
            // Partial Fisher-Yates: the first s* entries become the support.
            for i in 0..s_star.min(d) {
                let j = rng.gen_range(i..d);
                idx.swap(i, j);
            }
            for &j in idx.iter().take(s_star.min(d)) {
                beta[j] = band_magnitude(rng);
            }
            beta
        }
        BetaRule::DenseUniform => DVector::from_iterator(d, (0..d).map(|_| band_magnitude(rng))),
    }
}

fn band_magnitude<R: Rng>(rng: &mut R) -> f64 {
    let mag = rng.gen_range(0.5..1.0);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Environment parameters of a categorical dataset, drawn once per dataset.
#[derive(Debug, Clone)]
pub struct CategoricalParams {
    /// Environment means, m x d.
    pub mu: DMatrix<f64>,
    pub a_factor: Option<DMatrix<f64>>,
    pub sigma_x_env: Vec<f64>,
    pub sigma_eps_env: Vec<f64>,
    pub beta_star: DVector<f64>,
}

/// Draw the per-dataset categorical parameters (means, scales, coefficient).
pub fn draw_categorical_params<R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> CategoricalParams {
    let beta_star = gen_beta(&spec.beta, spec.d, spec.s_star, rng);
    let (mu, a_factor) = match spec.setting {
        Setting::S3 => {
            // Rank-constrained means mu_e = A z_e with A fixed across
            // environments; entries of A scale like 1/sqrt(k) so the
            // per-coordinate mean variance matches the full-rank settings.
            let k = spec.k_rank;
            let a = gaussian_matrix(spec.d, k, (1.0 / k as f64).sqrt(), rng);
            let mut mu = DMatrix::zeros(spec.m, spec.d);
            for e in 0..spec.m {
                let z: DVector<f64> =
                    DVector::from_iterator(k, (0..k).map(|_| standard_normal(rng)));
                let me = &a * z;
                for c in 0..spec.d {
                    mu[(e, c)] = me[c];
                }
            }
            (mu, Some(a))
        }
        _ => (gaussian_matrix(spec.m, spec.d, 1.0, rng), None),
    };
    let sigma_x_env = noise_scales(spec.m, spec.sigma_x, rng);
    let sigma_eps_env = noise_scales(spec.m, spec.sigma_eps, rng);
    CategoricalParams {
        mu,
        a_factor,
        sigma_x_env,
        sigma_eps_env,
        beta_star,
    }
}

/// Sample a balanced categorical dataset from fixed parameters: exactly `r`
/// observations per environment in the outcome sample and `r̃` in the
/// covariate sample.
pub fn sample_categorical<R: Rng>(
    spec: &GeneratorSpec,
    params: &CategoricalParams,
    rng: &mut R,
    with_shadow: bool,
) -> Result<(UnpairedDataset, GroundTruth)> {
    spec.validate()?;
    let (m, d) = (spec.m, spec.d);
    let n = spec.n();
    let n_tilde = spec.n_tilde();

    let mut y_env = Vec::with_capacity(n);
    let mut y = DVector::zeros(n);
    let mut shadow = if with_shadow {
        Some(DMatrix::zeros(n, d))
    } else {
        None
    };
    let mut row = 0;
    for e in 0..m {
        let mu_e = params.mu.row(e);
        for _ in 0..spec.r {
            let u: f64 = standard_normal(rng) * spec.sigma_u;
            let mut xy = 0.0;
            for c in 0..d {
                let x_lat =
                    mu_e[c] + spec.gamma_x * u + params.sigma_x_env[e] * standard_normal(rng);
                xy += x_lat * params.beta_star[c];
                if let Some(s) = shadow.as_mut() {
                    s[(row, c)] = x_lat;
                }
            }
            let eps_y = params.sigma_eps_env[e] * standard_normal(rng);
            y[row] = xy + spec.gamma_y * u + eps_y;
            y_env.push(e);
            row += 1;
        }
    }

    let mut x_env = Vec::with_capacity(n_tilde);
    let mut x = DMatrix::zeros(n_tilde, d);
    let mut row = 0;
    for e in 0..m {
        let mu_e = params.mu.row(e);
        for _ in 0..spec.r_tilde {
            let u: f64 = standard_normal(rng) * spec.sigma_u;
            for c in 0..d {
                x[(row, c)] =
                    mu_e[c] + spec.gamma_x * u + params.sigma_x_env[e] * standard_normal(rng);
            }
            x_env.push(e);
            row += 1;
        }
    }

    let ds = UnpairedDataset::new(
        m,
        d,
        Instruments::OneHot { env: y_env },
        y,
        Instruments::OneHot { env: x_env },
        x,
    )?;
    let (q, b) =
        categorical_population_moments(&params.mu, &params.sigma_x_env, spec.gamma_x, spec.sigma_u);
    let gt = GroundTruth {
        beta_star: params.beta_star.clone(),
        support: support_of(&params.beta_star),
        mu: Some(params.mu.clone()),
        pi: None,
        a_factor: params.a_factor.clone(),
        sigma_x_env: params.sigma_x_env.clone(),
        sigma_eps_env: params.sigma_eps_env.clone(),
        q_realized: Some(q),
        b_realized: if d == 1 { Some(b) } else { None },
        shadow_x: shadow,
    };
    Ok((ds, gt))
}

/// Draw parameters and sample in one step (categorical instruments).
pub fn gen_categorical<R: Rng>(
    spec: &GeneratorSpec,
    rng: &mut R,
) -> Result<(UnpairedDataset, GroundTruth)> {
    let params = draw_categorical_params(spec, rng);
    sample_categorical(spec, &params, rng, false)
}

/// First-stage parameters of a continuous-instrument dataset.
#[derive(Debug, Clone)]
pub struct ContinuousParams {
    /// Shared first-stage matrix, m x d.
    pub pi: DMatrix<f64>,
    pub a_factor: Option<DMatrix<f64>>,
    pub sigma_x_coord: Vec<f64>,
    pub sigma_eps_coord: Vec<f64>,
    pub beta_star: DVector<f64>,
}

pub fn draw_continuous_params<R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> ContinuousParams {
    let beta_star = gen_beta(&spec.beta, spec.d, spec.s_star, rng);
    let (pi, a_factor) = match spec.setting {
        Setting::S3 => {
            let k = spec.k_rank;
            let a = gaussian_matrix(spec.d, k, (1.0 / k as f64).sqrt(), rng);
            let z = gaussian_matrix(spec.m, k, 1.0, rng);
            ((z * a.transpose()) * spec.pi_scale, Some(a))
        }
        _ => (gaussian_matrix(spec.m, spec.d, 1.0, rng), None),
    };
    let sigma_x_coord = noise_scales(spec.m, spec.sigma_x, rng);
    let sigma_eps_coord = noise_scales(spec.m, spec.sigma_eps, rng);
    ContinuousParams {
        pi,
        a_factor,
        sigma_x_coord,
        sigma_eps_coord,
        beta_star,
    }
}

/// Sample a continuous-instrument dataset: I ~ N(0, (1/m) Id), X = Πᵀ I then
/// confounding plus noise, with the noise scale picked by each observation's
/// dominant instrument coordinate.
pub fn sample_continuous<R: Rng>(
    spec: &GeneratorSpec,
    params: &ContinuousParams,
    rng: &mut R,
    with_shadow: bool,
) -> Result<(UnpairedDataset, GroundTruth)> {
    spec.validate()?;
    let (m, d) = (spec.m, spec.d);
    let n = spec.n();
    let n_tilde = spec.n_tilde();
    let inst_sd = (1.0 / m as f64).sqrt();

    let mut y_rows = DMatrix::zeros(n, m);
    let mut y = DVector::zeros(n);
    let mut shadow = if with_shadow {
        Some(DMatrix::zeros(n, d))
    } else {
        None
    };
    for i in 0..n {
        let mut dom = 0usize;
        let mut dom_abs = -1.0f64;
        for l in 0..m {
            let v = inst_sd * standard_normal(rng);
            y_rows[(i, l)] = v;
            if v.abs() > dom_abs {
                dom_abs = v.abs();
                dom = l;
            }
        }
        let u: f64 = standard_normal(rng) * spec.sigma_u;
        let mut xy = 0.0;
        for c in 0..d {
            let mut x_lat = spec.gamma_x * u + params.sigma_x_coord[dom] * standard_normal(rng);
            for l in 0..m {
                x_lat += y_rows[(i, l)] * params.pi[(l, c)];
            }
            xy += x_lat * params.beta_star[c];
            if let Some(s) = shadow.as_mut() {
                s[(i, c)] = x_lat;
            }
        }
        y[i] = xy + spec.gamma_y * u + params.sigma_eps_coord[dom] * standard_normal(rng);
    }

    let mut x_rows = DMatrix::zeros(n_tilde, m);
    let mut x = DMatrix::zeros(n_tilde, d);
    for j in 0..n_tilde {
        let mut dom = 0usize;
        let mut dom_abs = -1.0f64;
        for l in 0..m {
            let v = inst_sd * standard_normal(rng);
            x_rows[(j, l)] = v;
            if v.abs() > dom_abs {
                dom_abs = v.abs();
                dom = l;
            }
        }
        let u: f64 = standard_normal(rng) * spec.sigma_u;
        for c in 0..d {
            let mut v = spec.gamma_x * u + params.sigma_x_coord[dom] * standard_normal(rng);
            for l in 0..m {
                v += x_rows[(j, l)] * params.pi[(l, c)];
            }
            x[(j, c)] = v;
        }
    }

    let ds = UnpairedDataset::new(
        m,
        d,
        Instruments::Continuous { rows: y_rows },
        y,
        Instruments::Continuous { rows: x_rows },
        x,
    )?;
    // Population Cov(I, X) = (1/m) Π, so Q = m CovᵀCov = (1/m) ΠᵀΠ.
    let q = params.pi.transpose() * &params.pi / m as f64;
    let gt = GroundTruth {
        beta_star: params.beta_star.clone(),
        support: support_of(&params.beta_star),
        mu: None,
        pi: Some(params.pi.clone()),
        a_factor: params.a_factor.clone(),
        sigma_x_env: params.sigma_x_coord.clone(),
        sigma_eps_env: params.sigma_eps_coord.clone(),
        q_realized: Some(q),
        b_realized: None,
        shadow_x: shadow,
    };
    Ok((ds, gt))
}

pub fn gen_continuous<R: Rng>(
    spec: &GeneratorSpec,
    rng: &mut R,
) -> Result<(UnpairedDataset, GroundTruth)> {
    let params = draw_continuous_params(spec, rng);
    sample_continuous(spec, &params, rng, false)
}

/// Generate from the spec's own seed, dispatching on the instrument kind.
pub fn generate(spec: &GeneratorSpec) -> Result<(UnpairedDataset, GroundTruth)> {
    let mut rng = rng_from_seed(spec.seed);
    generate_with(spec, &mut rng, false)
}

/// Generate with an explicit stream; `with_shadow` additionally records the
/// latent covariates of the outcome sample in the ground truth (test oracle).
pub fn generate_with<R: Rng>(
    spec: &GeneratorSpec,
    rng: &mut R,
    with_shadow: bool,
) -> Result<(UnpairedDataset, GroundTruth)> {
    match spec.kind {
        InstrumentKind::OneHot => {
            let params = draw_categorical_params(spec, rng);
            sample_categorical(spec, &params, rng, with_shadow)
        }
        InstrumentKind::Continuous => {
            let params = draw_continuous_params(spec, rng);
            sample_continuous(spec, &params, rng, with_shadow)
        }
    }
}

/// Realized population moments of the balanced categorical design:
/// `Q = (1/m) Σ_e (mu_e - mū)(mu_e - mū)ᵀ` and the d = 1 attenuation constant
/// `b = (1 - 1/m) mean_e(gamma_x² sigma_u² + sigma_{x,e}²)`.
pub fn categorical_population_moments(
    mu: &DMatrix<f64>,
    sigma_x_env: &[f64],
    gamma_x: f64,
    sigma_u: f64,
) -> (DMatrix<f64>, f64) {
    let m = mu.nrows();
    let d = mu.ncols();
    let mu_bar = mu.row_mean();
    let mut q = DMatrix::zeros(d, d);
    for e in 0..m {
        let dev = (mu.row(e) - &mu_bar).transpose();
        q += &dev * dev.transpose();
    }
    q /= m as f64;
    let v_bar: f64 = sigma_x_env
        .iter()
        .map(|s| gamma_x * gamma_x * sigma_u * sigma_u + s * s)
        .sum::<f64>()
        / m as f64;
    let b = (1.0 - 1.0 / m as f64) * v_bar;
    (q, b)
}

pub fn support_of(beta: &DVector<f64>) -> Vec<usize> {
    beta.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

pub fn rng_from_seed(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> DMatrix<f64> {
    // Row-major draw order so the stream is stable under refactors.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = sd * standard_normal(rng);
        }
    }
    m
}

/// Lognormal(0, 0.5) multipliers, clipped to [0.25, 4] and renormalized so the
/// mean multiplier is one, then scaled by `base`.
fn noise_scales<R: Rng>(count: usize, base: f64, rng: &mut R) -> Vec<f64> {
    let mut scales: Vec<f64> = (0..count)
        .map(|_| {
            let z: f64 = standard_normal(rng);
            (0.5 * z).exp().clamp(SCALE_CLIP.0, SCALE_CLIP.1)
        })
        .collect();
    let mean: f64 = scales.iter().sum::<f64>() / count as f64;
    for s in scales.iter_mut() {
        *s = base * *s / mean;
    }
    scales
}
