//! End-to-end tests of the `gplsim` binary on an epilepsy-style longitudinal
//! count fixture: 59 subjects, 4 visits, treatment and baseline covariates in
//! the linear part, visit time and age in the index part.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

fn gplsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gplsim"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = gplsim().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "gplsim {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn epil_fixture(dir: &Path) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let beta = [-0.3, 0.5];
    let mut lines = vec!["subject_id,visit,y,x1,x2,z1,z2".to_string()];
    for i in 0..59 {
        let trt = (i % 2) as f64;
        let base: f64 = rng.sample(StandardNormal);
        let age: f64 = rng.sample(StandardNormal);
        for j in 1..=4 {
            let time = (j as f64 - 2.5) / 1.5;
            let u = (time + age) / 2f64.sqrt();
            let eta = 0.7 + 0.6 * (1.2 * u).sin();
            let mu = (beta[0] * trt + beta[1] * base + eta).exp();
            let y = Poisson::new(mu).unwrap().sample(&mut rng);
            lines.push(format!("s{i:02},{j},{y},{trt},{base},{time},{age}"));
        }
    }
    let path = dir.join("epil.csv");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

#[test]
fn fit_writes_contract_outputs_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());
    let out_dir = dir.path().join("out");
    run_ok(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--family",
        "poisson",
        "--seed",
        "3",
        "--k-candidates",
        "6,8",
    ]);

    let (header, rows) = read_csv(&out_dir.join("theta_hat.csv"));
    assert_eq!(header, ["component", "estimate"]);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["beta1", "beta2", "alpha1", "alpha2"]);
    let est: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(est.iter().all(|v| v.is_finite()));
    let alpha_norm = est[2] * est[2] + est[3] * est[3];
    assert!((alpha_norm - 1.0).abs() <= 1e-10, "alpha norm^2 {alpha_norm}");
    assert!(est[2] > 0.0, "alpha1 must be positive, got {}", est[2]);

    let (header, rows) = read_csv(&out_dir.join("eta_hat.csv"));
    assert_eq!(header, ["grid", "value"]);
    assert_eq!(rows.len(), 200);
    let grid: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(grid.windows(2).all(|w| w[0] < w[1]), "grid must increase");

    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("fit_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["converged"], serde_json::Value::Bool(true));
    let k = meta["k"].as_u64().unwrap();
    assert!(k == 6 || k == 8, "selected K {k} outside the candidate set");
    assert!(meta["rho_hat"].as_f64().unwrap().is_finite());
    assert!(meta["iterations"].as_u64().unwrap() >= 1);

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["family"], "poisson");
    assert_eq!(resolved["seed"], 3);
    assert_eq!(resolved["k_candidates"], serde_json::json!([6, 8]));
}

#[test]
fn infer_emits_all_requested_interval_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());
    let out_dir = dir.path().join("out");
    run_ok(&[
        "infer",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--family",
        "poisson",
        "--seed",
        "3",
        "--k-candidates",
        "6",
        "--methods",
        "gee_wald,gee_poly",
    ]);

    let (header, rows) = read_csv(&out_dir.join("ci.csv"));
    assert_eq!(header, ["component", "method", "lo", "hi", "length"]);
    let expect: Vec<(String, String)> = ["gee_wald", "gee_poly"]
        .iter()
        .flat_map(|m| {
            ["beta1", "beta2", "alpha1", "alpha2"]
                .iter()
                .map(move |c| (c.to_string(), m.to_string()))
        })
        .collect();
    let got: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    assert_eq!(got, expect);
    for row in &rows {
        let lo: f64 = row[2].parse().unwrap();
        let hi: f64 = row[3].parse().unwrap();
        let len: f64 = row[4].parse().unwrap();
        assert!(lo < hi, "degenerate interval {row:?}");
        assert!((len - (hi - lo)).abs() <= 1e-12 * len.max(1.0));
    }

    // The per-correlation copy used by `stability` matches the primary file.
    let primary = fs::read(out_dir.join("ci.csv")).unwrap();
    let suffixed = fs::read(out_dir.join("ci_independence.csv")).unwrap();
    assert_eq!(primary, suffixed);
}

#[test]
fn cv_deviance_rows_and_naive_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());
    let out_dir = dir.path().join("out");
    run_ok(&[
        "cv",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--family",
        "poisson",
        "--seed",
        "11",
        "--cv-folds",
        "3",
        "--k-candidates",
        "6",
        "--methods",
        "naive_el,gee_wald",
    ]);

    let (header, rows) = read_csv(&out_dir.join("cv.csv"));
    assert_eq!(header, ["method", "working_corr", "mean_deviance"]);
    assert_eq!(rows.len(), 6);
    let mut by_method: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in &rows {
        let dev: f64 = row[2].parse().unwrap();
        assert!(dev.is_finite() && dev > 0.0, "deviance {row:?}");
        by_method.entry(row[0].clone()).or_default().push(row[2].clone());
    }
    let corrs: Vec<&str> = rows.iter().take(3).map(|r| r[1].as_str()).collect();
    assert_eq!(corrs, ["independence", "ar1", "exchangeable"]);
    let naive = &by_method["naive_el"];
    assert_eq!(naive.len(), 3);
    assert!(
        naive[0] == naive[1] && naive[1] == naive[2],
        "naive EL deviance must not depend on the working correlation: {naive:?}"
    );
}

#[test]
fn stability_reports_missing_inputs_then_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();

    let out = gplsim()
        .args(["stability", "--out-dir", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success(), "stability must fail without infer outputs");
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("structured error on stderr");
    assert_eq!(err["error"], "config");
    let msg = err["message"].as_str().unwrap();
    for name in ["ci_independence.csv", "ci_ar1.csv", "ci_exchangeable.csv"] {
        assert!(msg.contains(name), "missing-file message lacks {name}: {msg}");
    }

    for corr in ["independence", "ar1", "exchangeable"] {
        run_ok(&[
            "infer",
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--family",
            "poisson",
            "--seed",
            "3",
            "--k-candidates",
            "6",
            "--methods",
            "naive_el,gee_wald",
            "--corr-family",
            corr,
        ]);
    }
    run_ok(&["stability", "--out-dir", out_dir.to_str().unwrap()]);

    let (header, rows) = read_csv(&out_dir.join("stability.csv"));
    assert_eq!(header, ["component", "method", "avg_length", "range"]);
    assert_eq!(rows.len(), 8);
    let mut saw_naive = 0;
    for row in &rows {
        let avg: f64 = row[2].parse().unwrap();
        let range: f64 = row[3].parse().unwrap();
        assert!(avg > 0.0 && avg.is_finite());
        assert!(range >= 0.0 && range.is_finite());
        if row[1] == "naive_el" {
            saw_naive += 1;
            assert_eq!(row[3], "0", "naive EL range must be exactly zero: {row:?}");
        }
    }
    assert_eq!(saw_naive, 4);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());
    let out_dir = dir.path().join("out");
    let run_all = || {
        let common = [
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--family",
            "poisson",
            "--seed",
            "17",
            "--k-candidates",
            "6",
        ];
        let with = |head: &str, extra: &[&str]| {
            let mut args = vec![head];
            args.extend_from_slice(&common);
            args.extend_from_slice(extra);
            run_ok(&args);
        };
        with("fit", &[]);
        with("infer", &["--methods", "gee_wald"]);
        with("band", &["--b-star", "20", "--grid-len", "50"]);
    };

    run_all();
    let snapshot: BTreeMap<String, Vec<u8>> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    assert!(snapshot.contains_key("band.svg"));
    assert!(snapshot.contains_key("band.csv"));

    run_all();
    for (name, bytes) in &snapshot {
        let again = fs::read(out_dir.join(name)).unwrap();
        assert_eq!(&again, bytes, "{name} differs between identical reruns");
    }
}

#[test]
fn band_nests_the_estimate_and_svg_is_wellformed() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());
    let out_dir = dir.path().join("out");
    run_ok(&[
        "band",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--family",
        "poisson",
        "--seed",
        "3",
        "--k-candidates",
        "6",
        "--b-star",
        "25",
        "--grid-len",
        "40",
    ]);

    let (header, rows) = read_csv(&out_dir.join("band.csv"));
    assert_eq!(header, ["grid", "eta_hat", "lo", "hi"]);
    assert_eq!(rows.len(), 40);
    for row in &rows {
        let eta: f64 = row[1].parse().unwrap();
        let lo: f64 = row[2].parse().unwrap();
        let hi: f64 = row[3].parse().unwrap();
        assert!(lo <= eta && eta <= hi, "band must nest the estimate: {row:?}");
    }

    let svg = fs::read_to_string(out_dir.join("band.svg")).unwrap();
    assert!(svg.starts_with("<svg "));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("<polygon") && svg.contains("<polyline"));
}

#[test]
fn config_file_unknown_key_rejected_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"family": "poisson", "knots": 12}"#).unwrap();
    let out = gplsim()
        .args([
            "fit",
            "--data",
            data.to_str().unwrap(),
            "--config",
            bad.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("knots"));

    let good = dir.path().join("good.json");
    fs::write(&good, r#"{"family": "poisson", "seed": 5, "k_candidates": [6]}"#).unwrap();
    let out_dir = dir.path().join("out");
    run_ok(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--config",
        good.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["family"], "poisson", "file key survives");
    assert_eq!(resolved["seed"], 9, "flag overrides the file");
}

#[test]
fn nonconverged_exit_requires_allow_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = epil_fixture(dir.path());
    let out_dir = dir.path().join("out");
    let strict = [
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--family",
        "poisson",
        "--k-candidates",
        "6",
        "--max-outer",
        "1",
        "--tol-theta",
        "1e-12",
    ];
    let out = gplsim().args(strict).output().unwrap();
    assert!(!out.status.success(), "budget of one outer step cannot converge");
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "non_convergence");

    let mut relaxed: Vec<&str> = strict.to_vec();
    relaxed.push("--allow-nonconverged");
    run_ok(&relaxed);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("fit_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["converged"], serde_json::Value::Bool(false));
}

#[test]
fn simulate_writes_the_metric_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    run_ok(&[
        "simulate",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--n",
        "100",
        "--b",
        "2",
        "--seed",
        "9",
        "--k-candidates",
        "6",
        "--grid-len",
        "50",
        "--methods",
        "gee_poly",
    ]);
    let (header, rows) = read_csv(&out_dir.join("metrics.csv"));
    assert_eq!(header, ["family", "n", "rho", "working_corr", "method", "metric", "value"]);
    let metrics: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    for needed in ["rmse_beta2", "angle", "ise_mean", "k_med", "fail_rate", "cover_beta2", "len_beta2"] {
        assert!(metrics.contains(&needed), "metrics.csv lacks {needed}");
    }
    for row in &rows {
        assert_eq!(row[0], "gaussian");
        assert_eq!(row[1], "100");
        assert_eq!(row[4], "gee_poly");
        let v: f64 = row[6].parse().unwrap();
        assert!(v.is_finite());
    }
}
