//! Reproducible experiment runner: presets, a deterministic seed-splitting
//! scheme, parallel replication execution, CSV output and aggregation.

pub mod cli;

use std::time::Instant;

use nalgebra::DVector;

use crate::datagen::{
    self, BetaRule, CategoricalParams, ContinuousParams, GeneratorSpec, GroundTruth,
};
use crate::dataset::{InstrumentKind, UnpairedDataset};
use crate::error::{Error, Result};
use crate::estimators::{self, Estimate, EstimatorConfig, LambdaRule, SupportRule};
use crate::inference;
use crate::io;
use crate::moments::{DenominatorKind, MomentSystem};

/// Exact column set of the benchmark CSV.
pub const CSV_HEADER: &str =
    "preset,estimator,m,n,n_tilde,ratio,rep,seed,mae,support_precision,support_recall,coverage,wall_ms";

const STREAM_BETA: u64 = 0;
const STREAM_PARAMS: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_ESTIMATOR: u64 = 3;

/// SplitMix64 finalizer; the basis of the seed-splitting scheme.
fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from the master seed and a path of indices. Each part
/// is mixed before being folded in, so (1, 0) and (0, 1) land far apart.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut s = mix(master ^ 0xA076_1D64_78BD_642F);
    for &p in parts {
        s = mix(s ^ mix(p));
    }
    s
}

/// One point of the sweep; sample sizes are tied to the instrument count by
/// the per-environment ratios (n = m r, ñ = m r̃).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridPoint {
    pub m: usize,
    pub r: usize,
    pub r_tilde: usize,
}

impl GridPoint {
    pub fn n(&self) -> usize {
        self.m * self.r
    }
    pub fn n_tilde(&self) -> usize {
        self.m * self.r_tilde
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Preset {
    Setting1,
    Setting2,
    Setting3,
    AttenuationBias,
    Coverage,
    Agreement,
    Custom,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Setting1 => "setting1",
            Preset::Setting2 => "setting2",
            Preset::Setting3 => "setting3",
            Preset::AttenuationBias => "attenuation_bias",
            Preset::Coverage => "coverage",
            Preset::Agreement => "agreement",
            Preset::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "setting1" | "s1" => Preset::Setting1,
            "setting2" | "s2" => Preset::Setting2,
            "setting3" | "s3" => Preset::Setting3,
            "attenuation_bias" | "bias" => Preset::AttenuationBias,
            "coverage" => Preset::Coverage,
            "agreement" | "agree" => Preset::Agreement,
            "custom" => Preset::Custom,
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        })
    }
}

/// Named estimator configurations exposed to plans and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EstimatorKind {
    TsIv,
    Ts2sls,
    NaiveOls,
    /// Dense GMM, inverse-variance weight.
    UpGmm,
    /// Dense GMM, identity weight (coincides with TS-IV).
    UpGmmId,
    /// ℓ1 + post refit, inverse-variance weight.
    UpGmmL1,
    /// Cross-moment GMM, closed-form denominator.
    UpGmmHd,
    /// Cross-moment GMM, Monte-Carlo denominator (K = 2, H = 10).
    UpGmmHdMc,
    /// Cross-moment GMM, ℓ1 + post refit, closed-form denominator.
    UpGmmHdL1,
    /// Cross-moment GMM, ℓ1 + post refit, Monte-Carlo denominator.
    UpGmmHdMcL1,
}

pub const ALL_ESTIMATORS: [EstimatorKind; 10] = [
    EstimatorKind::TsIv,
    EstimatorKind::Ts2sls,
    EstimatorKind::NaiveOls,
    EstimatorKind::UpGmm,
    EstimatorKind::UpGmmId,
    EstimatorKind::UpGmmL1,
    EstimatorKind::UpGmmHd,
    EstimatorKind::UpGmmHdMc,
    EstimatorKind::UpGmmHdL1,
    EstimatorKind::UpGmmHdMcL1,
];

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::TsIv => "ts_iv",
            EstimatorKind::Ts2sls => "ts_2sls",
            EstimatorKind::NaiveOls => "naive_ols",
            EstimatorKind::UpGmm => "up_gmm",
            EstimatorKind::UpGmmId => "up_gmm_id",
            EstimatorKind::UpGmmL1 => "up_gmm_l1",
            EstimatorKind::UpGmmHd => "up_gmm_hd",
            EstimatorKind::UpGmmHdMc => "up_gmm_hd_mc",
            EstimatorKind::UpGmmHdL1 => "up_gmm_hd_l1",
            EstimatorKind::UpGmmHdMcL1 => "up_gmm_hd_mc_l1",
        }
    }

    pub fn parse(s: &str) -> Result<EstimatorKind> {
        ALL_ESTIMATORS
            .iter()
            .copied()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown estimator {s:?}")))
    }

    /// The configuration this name stands for. A beta-min constant switches
    /// the ℓ1 support rule to thresholding at c/2.
    pub fn config(&self, beta_min: Option<f64>) -> EstimatorConfig {
        let support_rule = match beta_min {
            Some(c) => SupportRule::BetaMin(c),
            None => SupportRule::NonzeroPattern,
        };
        let mut cfg = EstimatorConfig::default();
        cfg.support_rule = support_rule;
        match self {
            EstimatorKind::TsIv | EstimatorKind::Ts2sls | EstimatorKind::NaiveOls => {}
            EstimatorKind::UpGmm => {
                cfg.optimal_weight = true;
            }
            EstimatorKind::UpGmmId => {}
            EstimatorKind::UpGmmL1 => {
                cfg.optimal_weight = true;
                cfg.l1 = true;
                cfg.post_refit = true;
                cfg.lambda = LambdaRule::default_grid();
            }
            EstimatorKind::UpGmmHd => {
                cfg.optimal_weight = true;
                cfg.denominator = DenominatorKind::Analytic;
            }
            EstimatorKind::UpGmmHdMc => {
                cfg.optimal_weight = true;
                cfg.denominator = DenominatorKind::MonteCarlo { k: 2, h: 10 };
            }
            EstimatorKind::UpGmmHdL1 => {
                cfg.optimal_weight = true;
                cfg.denominator = DenominatorKind::Analytic;
                cfg.l1 = true;
                cfg.post_refit = true;
            }
            EstimatorKind::UpGmmHdMcL1 => {
                cfg.optimal_weight = true;
                cfg.denominator = DenominatorKind::MonteCarlo { k: 2, h: 10 };
                cfg.l1 = true;
                cfg.post_refit = true;
            }
        }
        cfg
    }

    fn is_hd(&self) -> bool {
        matches!(
            self,
            EstimatorKind::UpGmmHd
                | EstimatorKind::UpGmmHdMc
                | EstimatorKind::UpGmmHdL1
                | EstimatorKind::UpGmmHdMcL1
        )
    }
}

/// Run a named estimator on a dataset with its own seeded stream.
pub fn run_estimator(
    kind: EstimatorKind,
    ds: &UnpairedDataset,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<Estimate> {
    let mut rng = datagen::rng_from_seed(seed);
    match kind {
        EstimatorKind::TsIv => estimators::ts_iv(&MomentSystem::from_dataset(ds), cfg.ridge),
        EstimatorKind::Ts2sls => estimators::ts_2sls(ds, cfg.ridge),
        EstimatorKind::NaiveOls => estimators::naive_ols(ds, &mut rng),
        EstimatorKind::UpGmm | EstimatorKind::UpGmmId | EstimatorKind::UpGmmL1 => {
            estimators::up_gmm(ds, cfg)
        }
        k if k.is_hd() => estimators::up_gmm_hd(ds, cfg, &mut rng),
        _ => unreachable!(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub preset: Preset,
    /// Generator template; each grid point overrides m, r, r̃.
    pub base: GeneratorSpec,
    pub grid: Vec<GridPoint>,
    pub estimators: Vec<EstimatorKind>,
    pub replications: usize,
    pub master_seed: u64,
    /// Hold the environment parameters fixed across replications of a grid
    /// point (used by the bias-convergence preset so the attenuation
    /// predictor has a fixed target).
    pub fix_params_per_grid_point: bool,
    /// Attach Wald intervals to every estimate and score coverage.
    pub attach_ci: bool,
    pub ci_level: f64,
    /// Beta-min constant for thresholded support selection, when known.
    pub beta_min: Option<f64>,
}

impl ExperimentPlan {
    pub fn preset(preset: Preset, master_seed: u64) -> ExperimentPlan {
        let mut plan = ExperimentPlan {
            preset,
            base: GeneratorSpec::setting1(InstrumentKind::OneHot),
            grid: Vec::new(),
            estimators: Vec::new(),
            replications: 50,
            master_seed,
            fix_params_per_grid_point: false,
            attach_ci: false,
            ci_level: 0.95,
            beta_min: None,
        };
        match preset {
            Preset::Setting1 => {
                // Scaled variant of the finite-instrument sparse regime.
                let mut base = GeneratorSpec::setting1(InstrumentKind::OneHot);
                base.m = 50;
                base.d = 100;
                base.s_star = 5;
                plan.base = base;
                plan.grid = [25, 50, 100, 200]
                    .iter()
                    .map(|&r| GridPoint {
                        m: 50,
                        r,
                        r_tilde: r,
                    })
                    .collect();
                plan.estimators = vec![EstimatorKind::TsIv, EstimatorKind::UpGmmL1];
                // The magnitude bands of the generator guarantee this floor.
                plan.beta_min = Some(0.5);
            }
            Preset::Setting2 => {
                plan.base = GeneratorSpec::setting2(InstrumentKind::OneHot);
                plan.grid = [200, 400, 800]
                    .iter()
                    .map(|&m| GridPoint {
                        m,
                        r: 8,
                        r_tilde: 8,
                    })
                    .collect();
                plan.estimators = vec![EstimatorKind::TsIv, EstimatorKind::UpGmmHd];
            }
            Preset::Setting3 => {
                // Scaled variant of the low-rank many-instrument regime. The
                // small-m points sweep across the near-singular region of the
                // plug-in Gram matrix; the largest point sits where the
                // cross-moment estimator's variance has dropped below the
                // plug-in bias floor.
                let mut base = GeneratorSpec::setting3(InstrumentKind::OneHot);
                base.k_rank = 30;
                base.d = 50;
                base.s_star = 5;
                plan.base = base;
                let mut grid = Vec::new();
                for &r in &[4usize, 8] {
                    for &m in &[10usize, 20, 40, 80, 160, 320, 640] {
                        grid.push(GridPoint { m, r, r_tilde: r });
                    }
                }
                grid.push(GridPoint {
                    m: 1600,
                    r: 8,
                    r_tilde: 8,
                });
                plan.grid = grid;
                plan.estimators = vec![
                    EstimatorKind::TsIv,
                    EstimatorKind::Ts2sls,
                    EstimatorKind::NaiveOls,
                    EstimatorKind::UpGmmL1,
                    EstimatorKind::UpGmmHdL1,
                ];
                plan.beta_min = Some(0.5);
            }
            Preset::AttenuationBias => {
                let mut base = GeneratorSpec::setting2(InstrumentKind::OneHot);
                base.d = 1;
                base.s_star = 1;
                plan.base = base;
                plan.grid = [250, 500, 1000, 2000]
                    .iter()
                    .map(|&m| GridPoint {
                        m,
                        r: 4,
                        r_tilde: 4,
                    })
                    .collect();
                plan.estimators = vec![EstimatorKind::TsIv, EstimatorKind::UpGmmHd];
                plan.fix_params_per_grid_point = true;
            }
            Preset::Coverage => {
                let mut base = GeneratorSpec::setting2(InstrumentKind::OneHot);
                base.m = 5;
                plan.base = base;
                plan.grid = vec![GridPoint {
                    m: 5,
                    r: 1000,
                    r_tilde: 1000,
                }];
                plan.estimators = vec![EstimatorKind::UpGmm];
                plan.replications = 500;
                plan.attach_ci = true;
            }
            Preset::Agreement => {
                plan.base = GeneratorSpec::setting2(InstrumentKind::OneHot);
                plan.grid = [2, 8, 32]
                    .iter()
                    .map(|&r| GridPoint {
                        m: 400,
                        r,
                        r_tilde: r,
                    })
                    .collect();
                plan.estimators = vec![EstimatorKind::UpGmmHdMc, EstimatorKind::UpGmmHd];
            }
            Preset::Custom => {}
        }
        plan
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("plan has an empty sweep".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("plan has no estimators".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("plan needs at least one replication".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config("ci level must lie in (0, 1)".into()));
        }
        self.base.validate()
    }

    /// The generator template with the coefficient rule resolved to a fixed
    /// vector. The target is drawn once per plan so error curves across the
    /// sweep compare like with like; the redraws across replications touch
    /// only the noise and (unless pinned) the environment parameters.
    pub fn resolved_base(&self) -> GeneratorSpec {
        let mut base = self.base.clone();
        if !matches!(base.beta, BetaRule::Explicit(_)) {
            let mut rng = datagen::rng_from_seed(derive_seed(self.master_seed, &[STREAM_BETA]));
            let beta = datagen::gen_beta(&base.beta, base.d, base.s_star, &mut rng);
            base.beta = BetaRule::Explicit(beta.iter().copied().collect());
        }
        base
    }

    pub fn spec_for(&self, grid_index: usize) -> GeneratorSpec {
        let gp = self.grid[grid_index];
        let mut spec = self.resolved_base();
        spec.m = gp.m;
        spec.r = gp.r;
        spec.r_tilde = gp.r_tilde;
        spec.seed = derive_seed(self.master_seed, &[STREAM_DATA, grid_index as u64]);
        spec
    }
}

/// Environment parameters shared by the replications of one grid point when
/// the plan pins them.
#[derive(Debug, Clone)]
pub enum GenParams {
    Categorical(CategoricalParams),
    Continuous(ContinuousParams),
}

pub fn params_for(plan: &ExperimentPlan, grid_index: usize) -> GenParams {
    let spec = plan.spec_for(grid_index);
    let mut rng = datagen::rng_from_seed(derive_seed(
        plan.master_seed,
        &[STREAM_PARAMS, grid_index as u64],
    ));
    match spec.kind {
        InstrumentKind::OneHot => {
            GenParams::Categorical(datagen::draw_categorical_params(&spec, &mut rng))
        }
        InstrumentKind::Continuous => {
            GenParams::Continuous(datagen::draw_continuous_params(&spec, &mut rng))
        }
    }
}

/// The dataset a given (grid point, replication) cell sees. Exposed so tests
/// and reports can reproduce exactly what the runner estimated on.
pub fn dataset_for(
    plan: &ExperimentPlan,
    grid_index: usize,
    rep: usize,
) -> Result<(UnpairedDataset, GroundTruth)> {
    let mut spec = plan.spec_for(grid_index);
    spec.seed = derive_seed(
        plan.master_seed,
        &[STREAM_DATA, grid_index as u64, rep as u64],
    );
    let mut rng = datagen::rng_from_seed(spec.seed);
    if plan.fix_params_per_grid_point {
        match params_for(plan, grid_index) {
            GenParams::Categorical(p) => datagen::sample_categorical(&spec, &p, &mut rng, false),
            GenParams::Continuous(p) => datagen::sample_continuous(&spec, &p, &mut rng, false),
        }
    } else {
        datagen::generate_with(&spec, &mut rng, false)
    }
}

/// One scored replication of one estimator at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub preset: String,
    pub estimator: String,
    pub m: usize,
    pub n: usize,
    pub n_tilde: usize,
    pub ratio: f64,
    pub rep: usize,
    /// Child seed of this (grid point, estimator, replication) cell.
    pub seed: u64,
    /// Per-coordinate absolute errors |beta_j - beta*_j| (empty on failure).
    pub errors: Vec<f64>,
    pub mae: Option<f64>,
    pub support_precision: Option<f64>,
    pub support_recall: Option<f64>,
    /// Fraction of coordinates whose interval covers the truth.
    pub coverage: Option<f64>,
    /// Per-coordinate coverage flags when intervals were computed.
    pub covered: Option<Vec<bool>>,
    pub wall_ms: u64,
    pub error_message: Option<String>,
}

/// Execute the plan. Replications are deterministic functions of the master
/// seed; any thread count yields the same rows in the same order. Estimator
/// failures become rows with empty metrics and the run continues.
pub fn run_plan(plan: &ExperimentPlan, threads: usize) -> Result<Vec<ResultRow>> {
    plan.validate()?;
    let tasks: Vec<(usize, usize)> = (0..plan.grid.len())
        .flat_map(|g| (0..plan.replications).map(move |r| (g, r)))
        .collect();
    let workers = if threads == 0 {
        std::thread::available_parallelism()
            .map(|p| p.get())
            .unwrap_or(1)
    } else {
        threads
    }
    .min(tasks.len().max(1));

    let run_task = |&(g, rep): &(usize, usize)| -> Result<Vec<ResultRow>> {
        let (ds, gt) = dataset_for(plan, g, rep)?;
        let gp = plan.grid[g];
        let mut rows = Vec::with_capacity(plan.estimators.len());
        for (ei, &kind) in plan.estimators.iter().enumerate() {
            let seed = derive_seed(
                plan.master_seed,
                &[STREAM_ESTIMATOR, g as u64, rep as u64, ei as u64],
            );
            let cfg = kind.config(plan.beta_min);
            let started = Instant::now();
            let outcome = run_estimator(kind, &ds, &cfg, seed).and_then(|est| {
                if plan.attach_ci {
                    inference::attach_wald_ci(&ds, est, cfg.ridge, plan.ci_level)
                } else {
                    Ok(est)
                }
            });
            let wall_ms = started.elapsed().as_millis() as u64;
            let mut row = ResultRow {
                preset: plan.preset.name().to_string(),
                estimator: kind.name().to_string(),
                m: gp.m,
                n: gp.n(),
                n_tilde: gp.n_tilde(),
                ratio: gp.n() as f64 / gp.m as f64,
                rep,
                seed,
                errors: Vec::new(),
                mae: None,
                support_precision: None,
                support_recall: None,
                coverage: None,
                covered: None,
                wall_ms,
                error_message: None,
            };
            match outcome {
                Ok(est) => score(&mut row, &est, &gt),
                Err(e) => row.error_message = Some(e.to_string()),
            }
            rows.push(row);
        }
        Ok(rows)
    };

    let mut slots: Vec<Option<Result<Vec<ResultRow>>>> = Vec::new();
    if workers <= 1 {
        for t in &tasks {
            slots.push(Some(run_task(t)));
        }
    } else {
        slots.resize_with(tasks.len(), || None);
        let slot_refs: Vec<_> = slots.iter_mut().collect();
        let mut chunks: Vec<Vec<(usize, &mut Option<Result<Vec<ResultRow>>>)>> =
            (0..workers).map(|_| Vec::new()).collect();
        for (i, slot) in slot_refs.into_iter().enumerate() {
            chunks[i % workers].push((i, slot));
        }
        std::thread::scope(|scope| {
            for chunk in chunks {
                let tasks = &tasks;
                let run_task = &run_task;
                scope.spawn(move || {
                    for (i, slot) in chunk {
                        *slot = Some(run_task(&tasks[i]));
                    }
                });
            }
        });
    }

    let mut rows = Vec::with_capacity(tasks.len() * plan.estimators.len());
    for slot in slots {
        rows.extend(slot.expect("task executed")?);
    }
    // Canonical order: grid point, then estimator, then replication.
    let est_index = |name: &str| {
        plan.estimators
            .iter()
            .position(|k| k.name() == name)
            .unwrap_or(usize::MAX)
    };
    let grid_index = |row: &ResultRow| {
        plan.grid
            .iter()
            .position(|g| g.m == row.m && g.n() == row.n && g.n_tilde() == row.n_tilde)
            .unwrap_or(usize::MAX)
    };
    rows.sort_by_key(|r| (grid_index(r), est_index(&r.estimator), r.rep));
    Ok(rows)
}

fn score(row: &mut ResultRow, est: &Estimate, gt: &GroundTruth) {
    let d = gt.beta_star.len();
    let errors: Vec<f64> = (0..d)
        .map(|j| (est.beta[j] - gt.beta_star[j]).abs())
        .collect();
    row.mae = Some(errors.iter().sum::<f64>() / d as f64);
    row.errors = errors;
    if let Some(support) = &est.support {
        let truth: std::collections::BTreeSet<usize> = gt.support.iter().copied().collect();
        let picked: std::collections::BTreeSet<usize> = support.iter().copied().collect();
        let hit = picked.intersection(&truth).count() as f64;
        row.support_precision = Some(if picked.is_empty() {
            1.0
        } else {
            hit / picked.len() as f64
        });
        row.support_recall = Some(if truth.is_empty() {
            1.0
        } else {
            hit / truth.len() as f64
        });
    }
    if let Some(ci) = &est.ci {
        let covered: Vec<bool> = (0..d)
            .map(|j| {
                let (lo, hi) = ci.intervals[j];
                lo <= gt.beta_star[j] && gt.beta_star[j] <= hi
            })
            .collect();
        row.coverage = Some(covered.iter().filter(|c| **c).count() as f64 / d as f64);
        row.covered = Some(covered);
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Serialize rows with the pinned header. Failed replications keep their key
/// columns and leave the metric cells empty.
pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.preset,
            r.estimator,
            r.m,
            r.n,
            r.n_tilde,
            r.ratio,
            r.rep,
            r.seed,
            fmt_opt(r.mae),
            fmt_opt(r.support_precision),
            fmt_opt(r.support_recall),
            fmt_opt(r.coverage),
            r.wall_ms
        ));
    }
    out
}

/// Aggregate of one (preset, estimator, grid point) group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub preset: String,
    pub estimator: String,
    pub m: usize,
    pub n: usize,
    pub n_tilde: usize,
    pub ratio: f64,
    pub reps: usize,
    pub failures: usize,
    pub mean_mae: Option<f64>,
    pub stderr_mae: Option<f64>,
    pub mean_support_precision: Option<f64>,
    pub mean_support_recall: Option<f64>,
    pub mean_coverage: Option<f64>,
}

/// Group rows by (preset, estimator, grid point) in first-appearance order
/// and report means with standard errors.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Config("summarize needs at least one row".into()));
    }
    let mut order: Vec<(String, String, usize, usize, usize)> = Vec::new();
    let mut groups: std::collections::HashMap<
        (String, String, usize, usize, usize),
        Vec<&ResultRow>,
    > = std::collections::HashMap::new();
    for r in rows {
        let key = (r.preset.clone(), r.estimator.clone(), r.m, r.n, r.n_tilde);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let group = &groups[&key];
        let maes: Vec<f64> = group.iter().filter_map(|r| r.mae).collect();
        let (mean_mae, stderr_mae) = mean_and_stderr(&maes);
        out.push(SummaryRow {
            preset: key.0,
            estimator: key.1,
            m: key.2,
            n: key.3,
            n_tilde: key.4,
            ratio: key.3 as f64 / key.2 as f64,
            reps: group.len(),
            failures: group.iter().filter(|r| r.error_message.is_some()).count(),
            mean_mae,
            stderr_mae,
            mean_support_precision: mean_of(group.iter().filter_map(|r| r.support_precision)),
            mean_support_recall: mean_of(group.iter().filter_map(|r| r.support_recall)),
            mean_coverage: mean_of(group.iter().filter_map(|r| r.coverage)),
        });
    }
    Ok(out)
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn mean_and_stderr(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "preset,estimator,m,n,n_tilde,ratio,reps,failures,mean_mae,stderr_mae,mean_support_precision,mean_support_recall,mean_coverage\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.preset,
            r.estimator,
            r.m,
            r.n,
            r.n_tilde,
            r.ratio,
            r.reps,
            r.failures,
            fmt_opt(r.mean_mae),
            fmt_opt(r.stderr_mae),
            fmt_opt(r.mean_support_precision),
            fmt_opt(r.mean_support_recall),
            fmt_opt(r.mean_coverage)
        ));
    }
    out
}

/// Pairwise comparison of two estimators on identical data, reported as
/// relative coefficient gaps with the configured share of the largest
/// discrepancies removed before taking the maximum.
#[derive(Debug, Clone)]
pub struct AgreementReport {
    pub candidate: String,
    pub reference: String,
    pub compared: usize,
    pub dropped: usize,
    pub max_rel_gap: f64,
    pub mean_rel_gap: f64,
    /// (ratio n/m, max trimmed gap within that ratio).
    pub per_ratio: Vec<(f64, f64)>,
}

/// Share of points treated as outliers by the agreement report.
pub const AGREEMENT_TRIM: f64 = 0.001;

pub fn agreement_report(plan: &ExperimentPlan, _threads: usize) -> Result<AgreementReport> {
    plan.validate()?;
    if plan.estimators.len() != 2 {
        return Err(Error::Config(
            "agreement needs exactly two estimators (candidate, reference)".into(),
        ));
    }
    let (cand, refr) = (plan.estimators[0], plan.estimators[1]);

    // Both estimators see the identical dataset of each cell.
    let mut gaps: Vec<(f64, f64)> = Vec::new(); // (ratio, rel gap)
    for g in 0..plan.grid.len() {
        let ratio = plan.grid[g].n() as f64 / plan.grid[g].m as f64;
        for rep in 0..plan.replications {
            let (ds, _) = dataset_for(plan, g, rep)?;
            let mut betas: Vec<DVector<f64>> = Vec::with_capacity(2);
            for (ei, kind) in [cand, refr].iter().enumerate() {
                let seed = derive_seed(
                    plan.master_seed,
                    &[STREAM_ESTIMATOR, g as u64, rep as u64, ei as u64],
                );
                let est = run_estimator(*kind, &ds, &kind.config(plan.beta_min), seed)?;
                betas.push(est.beta);
            }
            for j in 0..plan.base.d {
                let denom = betas[1][j].abs().max(1e-8);
                gaps.push((ratio, (betas[0][j] - betas[1][j]).abs() / denom));
            }
        }
    }

    let dropped = ((gaps.len() as f64 * AGREEMENT_TRIM).ceil() as usize).min(gaps.len());
    let mut sorted: Vec<f64> = gaps.iter().map(|(_, g)| *g).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let kept = &sorted[..sorted.len() - dropped];
    let max_rel_gap = kept.last().copied().unwrap_or(0.0);
    let mean_rel_gap = kept.iter().sum::<f64>() / kept.len().max(1) as f64;
    let cut = max_rel_gap;

    let mut per_ratio: Vec<(f64, f64)> = Vec::new();
    for gp in &plan.grid {
        let ratio = gp.n() as f64 / gp.m as f64;
        if per_ratio.iter().any(|(r, _)| *r == ratio) {
            continue;
        }
        let max_here = gaps
            .iter()
            .filter(|(r, g)| *r == ratio && *g <= cut)
            .map(|(_, g)| *g)
            .fold(0.0f64, f64::max);
        per_ratio.push((ratio, max_here));
    }
    Ok(AgreementReport {
        candidate: cand.name().to_string(),
        reference: refr.name().to_string(),
        compared: gaps.len(),
        dropped,
        max_rel_gap,
        mean_rel_gap,
        per_ratio,
    })
}

/// Parse an experiment plan from key-value text. `preset` selects the base
/// plan; the remaining keys override it. Generator fields use a `gen.`
/// prefix.
pub fn plan_from_string(text: &str) -> Result<ExperimentPlan> {
    let pairs = io::parse_key_values(text)?;
    let preset = pairs
        .iter()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| Preset::parse(v))
        .transpose()?
        .unwrap_or(Preset::Custom);
    let mut plan = ExperimentPlan::preset(preset, 0);

    let mut gen_lines = String::new();
    let mut m_grid: Option<Vec<usize>> = None;
    let mut ratio_grid: Option<Vec<usize>> = None;
    let mut explicit_grid: Option<Vec<GridPoint>> = None;
    for (k, v) in &pairs {
        match k.as_str() {
            "preset" => {}
            "replications" => plan.replications = parse_int(k, v)?,
            "master_seed" | "seed" => {
                plan.master_seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {v:?}")))?
            }
            "estimators" => {
                plan.estimators = v
                    .split(',')
                    .map(EstimatorKind::parse)
                    .collect::<Result<Vec<_>>>()?;
            }
            "m_grid" => m_grid = Some(parse_int_list(k, v)?),
            "ratio_grid" | "ratios" => ratio_grid = Some(parse_int_list(k, v)?),
            "grid" => {
                let mut pts = Vec::new();
                for item in v.split(',') {
                    let parts: Vec<&str> = item.trim().split(':').collect();
                    if parts.len() < 2 || parts.len() > 3 {
                        return Err(Error::Config(format!(
                            "grid item {item:?} should be m:r or m:r:r_tilde"
                        )));
                    }
                    let m = parse_int("grid m", parts[0])?;
                    let r = parse_int("grid r", parts[1])?;
                    let r_tilde = if parts.len() == 3 {
                        parse_int("grid r_tilde", parts[2])?
                    } else {
                        r
                    };
                    pts.push(GridPoint { m, r, r_tilde });
                }
                explicit_grid = Some(pts);
            }
            "attach_ci" => plan.attach_ci = parse_bool(k, v)?,
            "fix_params" => plan.fix_params_per_grid_point = parse_bool(k, v)?,
            "ci_level" => {
                plan.ci_level = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad ci_level {v:?}")))?
            }
            "beta_min" => {
                plan.beta_min = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad beta_min {v:?}")))?,
                )
            }
            _ if k.starts_with("gen.") => {
                gen_lines.push_str(&format!("{} = {}\n", &k[4..], v));
            }
            other => return Err(Error::Config(format!("unknown plan key {other:?}"))),
        }
    }
    if !gen_lines.is_empty() {
        // Re-parse the base with the overrides layered on top of its own
        // serialization so partial generator keys work.
        let merged = format!("{}{}", io::generator_spec_to_string(&plan.base), gen_lines);
        plan.base = io::generator_spec_from_string(&merged)?;
    }
    if let Some(pts) = explicit_grid {
        plan.grid = pts;
    } else if m_grid.is_some() || ratio_grid.is_some() {
        let ms = m_grid.unwrap_or_else(|| plan.grid.iter().map(|g| g.m).collect());
        let rs = ratio_grid.unwrap_or_else(|| plan.grid.iter().map(|g| g.r).collect());
        let mut pts = Vec::new();
        for &r in &rs {
            for &m in &ms {
                pts.push(GridPoint { m, r, r_tilde: r });
            }
        }
        pts.dedup();
        plan.grid = pts;
    }
    plan.validate()?;
    Ok(plan)
}

fn parse_int(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("key {key}: expected integer, got {v:?}")))
}

fn parse_int_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|t| parse_int(key, t)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "key {key}: expected bool, got {other:?}"
        ))),
    }
}
