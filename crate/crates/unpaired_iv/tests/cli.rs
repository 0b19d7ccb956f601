//! End-to-end exercises of the command-line surface: file formats, exit
//! codes, and output determinism.

use std::fs;
use std::path::PathBuf;

use unpaired_iv::harness::cli;
use unpaired_iv::io;

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("unpaired-iv-cli-tests")
        .join(format!("{}-{}", name, std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> i32 {
    cli::run(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>())
}

fn strip_wall_ms(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn generate_estimate_round_trip() {
    let dir = workdir("gen-est");
    let gen_cfg = dir.join("gen.cfg");
    fs::write(
        &gen_cfg,
        "kind = categorical\nsetting = s1\nm = 20\nd = 12\ns_star = 3\nr = 40\nr_tilde = 40\nseed = 5\n",
    )
    .unwrap();
    let data = dir.join("data.csv");
    assert_eq!(
        run(&[
            "generate",
            "--config",
            gen_cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap()
        ]),
        0
    );
    let ds = io::read_dataset(&data).unwrap();
    assert_eq!((ds.m, ds.d, ds.n(), ds.n_tilde()), (20, 12, 800, 800));

    let est_cfg = dir.join("est.cfg");
    fs::write(
        &est_cfg,
        format!(
            "data = {}\nestimator = up_gmm_l1\nlevel = 0.95\nbeta_min = 0.5\n",
            data.display()
        ),
    )
    .unwrap();
    let out = dir.join("estimate.json");
    assert_eq!(
        run(&[
            "estimate",
            "--config",
            est_cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let beta = json["beta"].as_array().unwrap();
    assert_eq!(beta.len(), 12);
    let support = json["support"].as_array().unwrap();
    assert!(support.len() <= 12);
    let ci = json["ci"].as_array().unwrap();
    assert_eq!(ci.len(), 12);
    for (j, interval) in ci.iter().enumerate() {
        let lo = interval[0].as_f64().unwrap();
        let hi = interval[1].as_f64().unwrap();
        assert!(lo <= hi);
        let b = beta[j].as_f64().unwrap();
        if support.iter().any(|s| s.as_u64().unwrap() as usize == j) {
            assert!(lo <= b && b <= hi);
        } else {
            assert_eq!((lo, hi), (0.0, 0.0));
        }
    }
    assert!(json["diagnostics"]["condition"].as_f64().is_some());
}

#[test]
fn generate_is_deterministic_given_seed() {
    let dir = workdir("gen-det");
    let gen_cfg = dir.join("gen.cfg");
    fs::write(
        &gen_cfg,
        "kind = continuous\nsetting = s2\nm = 6\nr = 5\nr_tilde = 5\n",
    )
    .unwrap();
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    for out in [&a, &b] {
        assert_eq!(
            run(&[
                "generate",
                "--config",
                gen_cfg.to_str().unwrap(),
                "--seed",
                "42",
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn identify_reports_sparse_failure_for_duplicated_columns() {
    let dir = workdir("identify");
    let matrix = dir.join("first_stage.txt");
    // Columns 1 and 2 identical: a 2-sparse kernel vector exists.
    fs::write(
        &matrix,
        "1.0 1.0 0.5\n0.3 0.3 -0.2\n-1.1 -1.1 0.9\n2.0 2.0 0.1\n",
    )
    .unwrap();
    let cfg = dir.join("identify.cfg");
    fs::write(&cfg, format!("matrix = {}\ns_star = 1\n", matrix.display())).unwrap();
    let out = dir.join("report.txt");
    assert_eq!(
        run(&[
            "identify",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let report = fs::read_to_string(&out).unwrap();
    assert!(report.contains("dense-identifiable: false"), "{report}");
    assert!(
        report.contains("sparse-identifiable: false (s*=1)"),
        "{report}"
    );
}

#[test]
fn identify_accepts_generator_specs() {
    let dir = workdir("identify-gen");
    let cfg = dir.join("identify.cfg");
    fs::write(
        &cfg,
        "kind = categorical\nsetting = s2\nm = 12\nd = 2\nr = 4\ns_star = 1\nseed = 3\n",
    )
    .unwrap();
    let out = dir.join("report.txt");
    assert_eq!(
        run(&[
            "identify",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let report = fs::read_to_string(&out).unwrap();
    assert!(report.contains("dense-identifiable: true"), "{report}");
    assert!(
        report.contains("sparse-identifiable: true (s*=1)"),
        "{report}"
    );
}

#[test]
fn benchmark_outputs_are_deterministic_up_to_timing() {
    let dir = workdir("bench");
    let cfg = dir.join("plan.cfg");
    fs::write(
        &cfg,
        "preset = setting2\nreplications = 3\nestimators = ts_iv, up_gmm_hd\nm_grid = 20, 40\nratio_grid = 4\n",
    )
    .unwrap();
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        assert_eq!(
            run(&[
                "benchmark",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
                "--threads",
                "2"
            ]),
            0
        );
    }
    let results_a = fs::read_to_string(out_a.join("results.csv")).unwrap();
    let results_b = fs::read_to_string(out_b.join("results.csv")).unwrap();
    assert_eq!(strip_wall_ms(&results_a), strip_wall_ms(&results_b));
    assert!(results_a.starts_with(unpaired_iv::harness::CSV_HEADER));
    // 2 grid points x 2 estimators x 3 reps data rows.
    assert_eq!(results_a.lines().count(), 1 + 12);
    let summary = fs::read_to_string(out_a.join("summary.csv")).unwrap();
    assert!(summary.lines().count() > 1);
}

#[test]
fn agree_subcommand_writes_report() {
    let dir = workdir("agree");
    let cfg = dir.join("plan.cfg");
    fs::write(
        &cfg,
        "preset = agreement\nreplications = 3\nestimators = up_gmm_hd_mc, up_gmm_hd\ngrid = 50:4\n",
    )
    .unwrap();
    let out = dir.join("agree.txt");
    assert_eq!(
        run(&[
            "agree",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let report = fs::read_to_string(&out).unwrap();
    assert!(report.contains("max_rel_gap"), "{report}");
    assert!(report.contains("candidate=up_gmm_hd_mc"), "{report}");
}

#[test]
fn exit_codes_for_bad_invocations() {
    let dir = workdir("exit");
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["estimate"]), 1); // missing --config
    let bad = dir.join("bad.cfg");
    fs::write(&bad, "estimator = nope\ndata = nowhere.csv\n").unwrap();
    assert_eq!(run(&["estimate", "--config", bad.to_str().unwrap()]), 1);
    // Config parses but the data file is missing: runtime failure.
    let cfg = dir.join("missing-data.cfg");
    fs::write(&cfg, format!("data = {}\n", dir.join("nope.csv").display())).unwrap();
    assert_eq!(run(&["estimate", "--config", cfg.to_str().unwrap()]), 2);
    assert_eq!(run(&["--help"]), 0);
}
