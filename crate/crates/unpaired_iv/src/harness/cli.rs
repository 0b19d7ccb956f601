//! The `unpaired-iv` command line: generate datasets, estimate effects,
//! audit identifiability, run benchmark plans, and check the agreement of
//! the two cross-fold denominators.

use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::harness::{
    self, agreement_report, plan_from_string, rows_to_csv, run_plan, summarize, summary_to_csv,
    EstimatorKind, ExperimentPlan, Preset,
};
use crate::identifiability;
use crate::inference;
use crate::{datagen, io};

const USAGE: &str = "\
unpaired-iv: linear causal effects from unpaired two-sample data

USAGE:
  unpaired-iv <SUBCOMMAND> [--config FILE] [--seed U64] [--out PATH] [--threads N]

SUBCOMMANDS:
  generate    generator spec file -> dataset file (--out, default dataset.csv)
  estimate    dataset + estimator config -> JSON estimate with intervals
  identify    first-stage matrix or generator spec -> identifiability report
  benchmark   plan file -> results.csv + summary.csv under --out (default .)
  agree       Monte-Carlo vs closed-form denominator agreement report

FLAGS:
  --config FILE    key = value configuration (see README for schemas)
  --seed U64       override the seed of the config
  --out PATH       output file (or directory for benchmark)
  --threads N      worker threads for benchmark (default: all cores)

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
";

struct Args {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: usize,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let mut it = argv.iter();
    let sub = match it.next() {
        Some(s) if s == "--help" || s == "-h" || s == "help" => {
            println!("{USAGE}");
            return 0;
        }
        Some(s) => s.clone(),
        None => {
            eprintln!("{USAGE}");
            return 1;
        }
    };
    let mut args = Args {
        config: None,
        seed: None,
        out: None,
        threads: 0,
    };
    let rest: Vec<&String> = it.collect();
    let mut i = 0;
    while i < rest.len() {
        let flag = rest[i].as_str();
        let value = |i: usize| -> Option<&String> { rest.get(i + 1).copied() };
        match flag {
            "--help" | "-h" => {
                println!("{USAGE}");
                return 0;
            }
            "--config" => match value(i) {
                Some(v) => {
                    args.config = Some(PathBuf::from(v));
                    i += 2;
                }
                None => return usage_error("--config needs a path"),
            },
            "--out" => match value(i) {
                Some(v) => {
                    args.out = Some(PathBuf::from(v));
                    i += 2;
                }
                None => return usage_error("--out needs a path"),
            },
            "--seed" => match value(i).and_then(|v| v.parse::<u64>().ok()) {
                Some(v) => {
                    args.seed = Some(v);
                    i += 2;
                }
                None => return usage_error("--seed needs an unsigned integer"),
            },
            "--threads" => match value(i).and_then(|v| v.parse::<usize>().ok()) {
                Some(v) => {
                    args.threads = v;
                    i += 2;
                }
                None => return usage_error("--threads needs an unsigned integer"),
            },
            other => return usage_error(&format!("unknown flag {other:?}")),
        }
    }

    let result = match sub.as_str() {
        "generate" => cmd_generate(&args),
        "estimate" => cmd_estimate(&args),
        "identify" => cmd_identify(&args),
        "benchmark" => cmd_benchmark(&args),
        "agree" => cmd_agree(&args),
        other => {
            eprintln!("error: unknown subcommand {other:?}\n{USAGE}");
            return 1;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) => 1,
                _ => 2,
            }
        }
    }
}

fn usage_error(msg: &str) -> i32 {
    eprintln!("error: {msg}\n{USAGE}");
    1
}

fn read_config(args: &Args) -> crate::Result<String> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    Ok(std::fs::read_to_string(path)?)
}

fn cmd_generate(args: &Args) -> crate::Result<()> {
    let mut spec = io::generator_spec_from_string(&read_config(args)?)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("dataset.csv"));
    let (ds, gt) = datagen::generate(&spec)?;
    io::write_dataset(&out, &ds)?;
    println!(
        "wrote {} ({} outcome rows, {} covariate rows, m={}, d={}, |support|={})",
        out.display(),
        ds.n(),
        ds.n_tilde(),
        ds.m,
        ds.d,
        gt.support.len()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EstimateJson {
    beta: Vec<f64>,
    support: Vec<usize>,
    ci: Vec<[f64; 2]>,
    level: f64,
    weight: &'static str,
    diagnostics: DiagnosticsJson,
}

#[derive(serde::Serialize)]
struct DiagnosticsJson {
    condition: f64,
    objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
}

fn cmd_estimate(args: &Args) -> crate::Result<()> {
    let pairs = io::parse_key_values(&read_config(args)?)?;
    let mut data: Option<PathBuf> = None;
    let mut kind = EstimatorKind::UpGmm;
    let mut level = 0.95f64;
    let mut beta_min: Option<f64> = None;
    for (k, v) in &pairs {
        match k.as_str() {
            "data" => data = Some(PathBuf::from(v)),
            "estimator" => kind = EstimatorKind::parse(v)?,
            "level" => {
                level = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad level {v:?}")))?
            }
            "beta_min" => {
                beta_min = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad beta_min {v:?}")))?,
                )
            }
            other => return Err(Error::Config(format!("unknown estimate key {other:?}"))),
        }
    }
    let data = data.ok_or_else(|| Error::Config("estimate config needs `data = path`".into()))?;
    let ds = io::read_dataset(&data)?;
    let cfg = kind.config(beta_min);
    let est = harness::run_estimator(kind, &ds, &cfg, args.seed.unwrap_or(0))?;
    let est = inference::attach_wald_ci(&ds, est, cfg.ridge, level)?;

    let ci = est.ci.as_ref().expect("intervals attached");
    let json = EstimateJson {
        beta: est.beta.iter().copied().collect(),
        support: est.support.clone().unwrap_or_else(|| (0..ds.d).collect()),
        ci: ci.intervals.iter().map(|(l, h)| [*l, *h]).collect(),
        level: ci.level,
        weight: match est.weight_used {
            crate::estimators::WeightKind::Identity => "identity",
            crate::estimators::WeightKind::OmegaInverse => "omega_inverse",
        },
        diagnostics: DiagnosticsJson {
            condition: est.diagnostics.condition,
            objective: est.diagnostics.objective,
            lambda: est.diagnostics.lambda,
        },
    };
    let text = serde_json::to_string_pretty(&json).expect("serializable");
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_identify(args: &Args) -> crate::Result<()> {
    let text = read_config(args)?;
    let pairs = io::parse_key_values(&text)?;
    let mut matrix_path: Option<PathBuf> = None;
    let mut s_star: Option<usize> = None;
    let mut gen_lines = String::new();
    for (k, v) in &pairs {
        match k.as_str() {
            "matrix" => matrix_path = Some(PathBuf::from(v)),
            "s_star" => {
                s_star = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad s_star {v:?}")))?,
                )
            }
            _ => gen_lines.push_str(&format!("{k} = {v}\n")),
        }
    }
    let c = match matrix_path {
        Some(p) => io::read_matrix(&p)?,
        None => {
            let mut spec = io::generator_spec_from_string(&gen_lines)?;
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            realized_first_stage(&spec)?
        }
    };
    let s_star = s_star.unwrap_or(1);
    let dense = identifiability::dense_identifiable(&c);
    let sparse = identifiability::restricted_nullspace_holds(&c, s_star)?;
    let report = format!(
        "first-stage matrix: {} x {}\ndense-identifiable: {}\nsparse-identifiable: {} (s*={})\n",
        c.nrows(),
        c.ncols(),
        dense,
        sparse,
        s_star
    );
    match &args.out {
        Some(path) => {
            std::fs::write(path, &report)?;
            println!("wrote {}", path.display());
        }
        None => print!("{report}"),
    }
    Ok(())
}

fn realized_first_stage(spec: &datagen::GeneratorSpec) -> crate::Result<nalgebra::DMatrix<f64>> {
    use crate::dataset::InstrumentKind;
    let mut rng = datagen::rng_from_seed(spec.seed);
    match spec.kind {
        InstrumentKind::OneHot => {
            let params = datagen::draw_categorical_params(spec, &mut rng);
            let mu_bar = params.mu.row_mean();
            let mut c = nalgebra::DMatrix::zeros(spec.m, spec.d);
            for e in 0..spec.m {
                for j in 0..spec.d {
                    c[(e, j)] = (params.mu[(e, j)] - mu_bar[j]) / spec.m as f64;
                }
            }
            Ok(c)
        }
        InstrumentKind::Continuous => {
            let params = datagen::draw_continuous_params(spec, &mut rng);
            Ok(params.pi / spec.m as f64)
        }
    }
}

fn cmd_benchmark(args: &Args) -> crate::Result<()> {
    let mut plan = plan_from_string(&read_config(args)?)?;
    if let Some(seed) = args.seed {
        plan.master_seed = seed;
    }
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let rows = run_plan(&plan, args.threads)?;
    let summary = summarize(&rows)?;
    let results_path = out_dir.join("results.csv");
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&results_path, rows_to_csv(&rows))?;
    std::fs::write(&summary_path, summary_to_csv(&summary))?;
    println!(
        "wrote {} and {}",
        results_path.display(),
        summary_path.display()
    );
    for s in &summary {
        println!(
            "{} {} m={} n={} mae={}{}",
            s.preset,
            s.estimator,
            s.m,
            s.n,
            s.mean_mae
                .map(|v| format!("{v:.5}"))
                .unwrap_or_else(|| "-".into()),
            s.stderr_mae
                .map(|v| format!(" (se {v:.5})"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_agree(args: &Args) -> crate::Result<()> {
    let mut plan = match &args.config {
        Some(path) => {
            let path: &Path = path;
            plan_from_string(&std::fs::read_to_string(path)?)?
        }
        None => ExperimentPlan::preset(Preset::Agreement, 0),
    };
    if let Some(seed) = args.seed {
        plan.master_seed = seed;
    }
    let report = agreement_report(&plan, args.threads)?;
    let mut text = format!(
        "agreement candidate={} reference={}\ncompared={} dropped={}\nmax_rel_gap={:.6}\nmean_rel_gap={:.6}\n",
        report.candidate,
        report.reference,
        report.compared,
        report.dropped,
        report.max_rel_gap,
        report.mean_rel_gap
    );
    for (ratio, gap) in &report.per_ratio {
        text.push_str(&format!("ratio {ratio}: max_rel_gap {gap:.6}\n"));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
