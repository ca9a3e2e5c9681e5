use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use transport_ate::sensitivity::proxy_bias;
use transport_ate::simulation::{generate, ScenarioSpec};
use transport_ate::{stream_rng, write_csv, CombinedSample, Stratum};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transport-ate"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), stderr(o));
}

fn sample(pool: usize, obs: usize, seed: u64) -> CombinedSample {
    let spec = ScenarioSpec {
        target_size: pool,
        obs_size: obs,
        ..ScenarioSpec::baseline()
    };
    generate(&spec.resolved().unwrap(), &mut stream_rng(seed, 0)).unwrap()
}

fn write(dir: &Path, name: &str, s: &CombinedSample) -> PathBuf {
    let p = dir.join(name);
    write_csv(s, std::fs::File::create(&p).unwrap()).unwrap();
    p
}

/// Writes the trial and observational strata to separate files; the observational file has no A/Y columns.
fn split(dir: &Path, s: &CombinedSample) -> (PathBuf, PathBuf) {
    let all = dir.join("all.csv");
    write_csv(s, std::fs::File::create(&all).unwrap()).unwrap();
    let text = std::fs::read_to_string(&all).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let obs_header: Vec<&str> = header.split(',').filter(|h| *h != "A" && *h != "Y").collect();
    let mut rct = format!("{header}\n");
    let mut obs = format!("{}\n", obs_header.join(","));
    for l in lines {
        if l.starts_with('1') {
            rct.push_str(l);
            rct.push('\n');
        } else {
            let f: Vec<&str> = l.split(',').collect();
            obs.push_str(&format!("{},{}\n", f[0], f[3..].join(",")));
        }
    }
    let (r, o) = (dir.join("rct.csv"), dir.join("obs.csv"));
    std::fs::write(&r, rct).unwrap();
    std::fs::write(&o, obs).unwrap();
    (r, o)
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", stdout(o)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn estimate_gformula_from_split_files() {
    let dir = TempDir::new().unwrap();
    let (r, o) = split(dir.path(), &sample(28_000, 10_000, 3));
    let out = run(&["estimate", "--rct", p(&r), "--obs", p(&o), "--estimator", "gformula", "--outcome", "Y", "--treatment", "A"]);
    ok(&out);
    let doc = json(&out);
    let est = &doc["estimates"][0];
    assert_eq!(est["estimator"], "gformula");
    assert!(est["ci"].is_null());
    let v = est["value"].as_f64().unwrap();
    assert!((v - 50.0).abs() < 1.5, "gformula {v}");
    assert_eq!(doc["metadata"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(doc["metadata"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_study_column_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("bad.csv");
    std::fs::write(&f, "A,Y,X1\n1,2.0,0.1\n0,1.0,0.2\n").unwrap();
    let out = run(&["estimate", "--data", p(&f)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("column 'S' not found"), "{}", stderr(&out));
}

#[test]
fn malformed_range_is_an_input_error() {
    let out = run(&["sensitivity", "--pattern", "totally-missing", "--delta-range", "1:0:5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["sensitivity", "--pattern", "totally-missing", "--shift-range", "0:1:0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stochastic_estimate_requires_a_seed() {
    let dir = TempDir::new().unwrap();
    let f = write(dir.path(), "d.csv", &sample(3_000, 1_000, 4));
    let out = run(&["estimate", "--data", p(&f), "--estimator", "aipsw"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--seed"));
}

#[test]
fn aipsw_bootstrap_replay_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let f = write(dir.path(), "d.csv", &sample(3_000, 1_000, 5));
    let args = ["estimate", "--data", p(&f), "--estimator", "aipsw", "--folds", "5", "--bootstrap", "1000", "--seed", "7"];
    let a = run(&args);
    let b = run(&args);
    ok(&a);
    ok(&b);
    assert_eq!(a.stdout, b.stdout);
    let doc = json(&a);
    let est = &doc["estimates"][0];
    let ci = est["ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() < ci[1].as_f64().unwrap());
    assert_eq!(doc["metadata"]["seed"], 7);
    assert_eq!(est["diagnostics"]["bootstrap_reps"], 1000.0);
}

#[test]
fn totally_missing_grid_has_one_row_per_lattice_point() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("grid.csv");
    let out = run(&[
        "sensitivity", "--pattern", "totally-missing", "--delta-range", "-40:40:81", "--shift-range", "-1:1:81",
        "--out", p(&csv),
    ]);
    ok(&out);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("delta_mis,shift,bias"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6561);
    for r in &rows {
        assert_eq!(r[2], -r[0] * r[1]);
    }
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("grid.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["metadata"]["pattern"], "totally_missing");
    assert!(meta["metadata"]["provenance"]["config_hash"].is_string());
}

#[test]
fn totally_missing_svg_is_written() {
    let dir = TempDir::new().unwrap();
    let svg = dir.path().join("map.svg");
    let out = run(&["sensitivity", "--pattern", "totally-missing", "--threshold", "5", "--svg", p(&svg)]);
    ok(&out);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.contains("<svg") && text.trim_end().ends_with("</svg>"));
}

#[test]
fn proxy_curve_matches_the_closed_form_exactly() {
    let out = run(&["sensitivity", "--pattern", "proxy", "--sigma-prox", "0:3:31", "--delta", "30", "--shift", "0.5", "--sigma-mis", "1"]);
    ok(&out);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sigma_prox,bias"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 31);
    for (s, b) in rows {
        assert_eq!(b, proxy_bias(30.0, 0.5, 1.0, s).unwrap(), "sigma {s}");
    }
}

#[test]
fn missing_in_obs_tracks_hypothesised_means() {
    let dir = TempDir::new().unwrap();
    let s = sample(28_000, 10_000, 6).masked(0, Stratum::Observational);
    let f = write(dir.path(), "d.csv", &s);
    let out = run(&["sensitivity", "--data", p(&f), "--pattern", "missing-in-obs", "--covariate", "X1", "--expectations", "0.8:1.2:5", "--format", "json"]);
    ok(&out);
    let doc = json(&out);
    let rows = doc["rows"].as_array().unwrap();
    let expected = [44.0, 47.0, 50.0, 53.0, 56.0];
    for (r, e) in rows.iter().zip(expected) {
        let v = r["ate"].as_f64().unwrap();
        assert!((v - e).abs() < 1.0, "{v} vs {e}");
    }
}

#[test]
fn missing_in_rct_reports_threshold_and_box_m() {
    let dir = TempDir::new().unwrap();
    let s = sample(28_000, 10_000, 8).masked(0, Stratum::Trial);
    let f = write(dir.path(), "d.csv", &s);
    let out = run(&["sensitivity", "--data", p(&f), "--pattern", "missing-in-rct", "--covariate", "X1", "--format", "json"]);
    ok(&out);
    let doc = json(&out);
    assert_eq!(doc["metadata"]["threshold_source"], "abs(tau_obs - tau_dm)");
    assert!(doc["metadata"]["box_m_p_value"].is_number());
    assert!(doc["metadata"]["delta_hat"].is_number());
    assert!(doc["threshold"].as_f64().unwrap() > 0.0);
}

#[test]
fn pattern_contradicting_the_data_exits_4() {
    let dir = TempDir::new().unwrap();
    let f = write(dir.path(), "d.csv", &sample(3_000, 1_000, 9));
    let out = run(&["sensitivity", "--data", p(&f), "--pattern", "missing-in-rct", "--covariate", "X1"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn simulate_dropped_covariates_recovers_the_true_effect() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("drop.json");
    let out = run(&["simulate", "--scenario", "paper-fig3", "--reps", "100", "--seed", "1", "--out", p(&out_path)]);
    ok(&out);
    assert!(stdout(&out).contains("gformula"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let summary = doc["summary"].as_array().unwrap();
    let g = summary
        .iter()
        .find(|r| r["pattern"] == "none" && r["estimator"] == "gformula")
        .unwrap();
    let mean = g["mean"].as_f64().unwrap();
    assert!((49.5..=50.5).contains(&mean), "{mean}");
    assert!(dir.path().join("drop.csv").exists());
    assert_eq!(doc["metadata"]["provenance"]["seed"], 1);
}

#[test]
fn simulate_single_replicate_has_no_sd() {
    let out = run(&["simulate", "--scenario", "paper-fig3", "--reps", "1", "--seed", "2"]);
    ok(&out);
    let doc = json(&out);
    for row in doc["summary"].as_array().unwrap() {
        assert!(row["sd"].is_null() && row["se"].is_null());
        assert_eq!(row["reps"], 1);
    }
}

#[test]
fn simulate_replay_gives_identical_csv() {
    let a = run(&["simulate", "--scenario", "paper-fig3", "--reps", "4", "--seed", "3", "--format", "csv"]);
    let b = run(&["simulate", "--scenario", "paper-fig3", "--reps", "4", "--seed", "3", "--format", "csv", "--threads", "1"]);
    ok(&a);
    ok(&b);
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).starts_with("replicate,pattern,estimator,value"));
}

#[test]
fn simulate_from_spec_file() {
    let dir = TempDir::new().unwrap();
    let spec = ScenarioSpec {
        name: "small".into(),
        target_size: 5_000,
        obs_size: 2_000,
        ..ScenarioSpec::baseline()
    };
    let f = dir.path().join("spec.json");
    std::fs::write(&f, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = run(&["simulate", "--spec", p(&f), "--reps", "3", "--seed", "4"]);
    ok(&out);
    let doc = json(&out);
    assert_eq!(doc["rows"].as_array().unwrap().iter().filter(|r| r["pattern"] == "none" && r["estimator"] == "dm").count(), 3);
}

#[test]
fn unknown_scenario_exits_2() {
    let out = run(&["simulate", "--scenario", "no-such-thing", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown scenario"));
}

#[test]
fn simulate_without_seed_exits_2() {
    let out = run(&["simulate", "--scenario", "paper-fig3", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

fn mirrored(pool: usize, obs: usize, seed: u64) -> CombinedSample {
    // observational rows are exact copies of the trial covariates
    let s = sample(pool, obs, seed);
    let t = s.design(s.trial_rows(), &(0..s.p()).collect::<Vec<_>>());
    let a: Vec<bool> = s.trial_rows().iter().map(|&i| s.treatment(i).unwrap()).collect();
    let y = s.outcomes(s.trial_rows());
    CombinedSample::from_strata(s.names().to_vec(), &t, &a, &y, &t).unwrap()
}

#[test]
fn diagnose_identical_strata_gives_p_one() {
    let dir = TempDir::new().unwrap();
    let f = write(dir.path(), "d.csv", &mirrored(3_000, 1_000, 10));
    let out = run(&["diagnose", "--data", p(&f)]);
    ok(&out);
    let doc = json(&out);
    assert!((doc["box_m"]["p_value"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(doc["box_m"]["dof"], 15);
    assert_eq!(doc["pairs"].as_array().unwrap().len(), 10);
    for v in doc["variance_ratio_trial_over_obs"].as_object().unwrap().values() {
        assert!((v.as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn diagnose_single_covariate_has_one_dof() {
    let dir = TempDir::new().unwrap();
    let f = write(dir.path(), "d.csv", &sample(3_000, 1_000, 11));
    let out = run(&["diagnose", "--data", p(&f), "--covariates", "X2"]);
    ok(&out);
    assert_eq!(json(&out)["box_m"]["dof"], 1);
}

#[test]
fn diagnose_singular_covariance_exits_3() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("d.csv");
    let mut text = String::from("S,A,Y,X1,X2\n");
    for i in 0..20 {
        let x = i as f64 * 0.1;
        text.push_str(&format!("1,{},{},{x},{}\n", i % 2, x + 1.0, 2.0 * x));
        text.push_str(&format!("0,NA,NA,{x},{}\n", 2.0 * x));
    }
    std::fs::write(&f, text).unwrap();
    let out = run(&["diagnose", "--data", p(&f)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn diagnose_rejects_a_covariate_missing_in_one_stratum() {
    let dir = TempDir::new().unwrap();
    let f = write(dir.path(), "d.csv", &sample(3_000, 1_000, 12).masked(0, Stratum::Trial));
    let out = run(&["diagnose", "--data", p(&f), "--covariates", "X1,X2"]);
    assert_eq!(out.status.code(), Some(4));
}
