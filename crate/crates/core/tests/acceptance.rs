//! End-to-end acceptance criteria on the synthetic design. Each test prints
//! one `criterion N: PASS|FAIL` line with the measured quantities.

use std::io::Write;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use transport_ate::data::{estimate_moments, CovSource, CovariatePattern, MissingLocation};
use transport_ate::estimators::EstimatorKind;
use transport_ate::sensitivity::robinson_rlearner;
use transport_ate::simulation::*;
use transport_ate::stats::{conditional_gaussian, fit_ols, Stage1};
use transport_ate::{stream_rng, CombinedSample, Stratum};

const REPS: usize = 100;
const SEED: u64 = 1;

fn report(n: u32, title: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} - {title}");
    println!("{detail}");
    assert!(ok, "criterion {n} failed: {title}\n{detail}");
}

fn dropped() -> &'static ScenarioResult {
    static CELL: OnceLock<ScenarioResult> = OnceLock::new();
    CELL.get_or_init(|| dropped_covariates(REPS, SEED).unwrap())
}

#[test]
fn criterion_01_complete_case_recovery() {
    let r = dropped();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    let mut ok = true;
    let mut detail = String::new();
    for est in ["gformula", "ipsw", "aipsw"] {
        let s = r.get("none", est).unwrap();
        let pass = (s.mean - 50.0).abs() <= 0.5;
        ok &= pass;
        detail += &format!("  {est:<9} mean {:.3} (se {:.3}) {}\n", s.mean, s.se.unwrap(), if pass { "ok" } else { "off" });
    }
    report(1, "G-formula / IPSW / AIPSW within 0.5 of 50 (complete case)", ok, &detail);
}

#[test]
fn criterion_02_trial_estimate() {
    let s = dropped().get("none", "dm").unwrap();
    report(
        2,
        "difference in means within 1.0 of 44",
        (s.mean - 44.0).abs() <= 1.0,
        &format!("  dm mean {:.3} (se {:.3})", s.mean, s.se.unwrap()),
    );
}

#[test]
fn criterion_03_theoretical_bias_overlay() {
    let r = dropped();
    let mut ok = true;
    let mut detail = String::new();
    for pat in ["X1", "X3", "X1+X5", "X2", "X4", "X5"] {
        let g = r.get(pat, "gformula").unwrap();
        let theory = r.get(pat, "theoretical_bias").unwrap().mean;
        let emp = g.mean - r.true_ate;
        let se = g.se.unwrap();
        let mut pass = (emp - theory).abs() <= 3.0 * se;
        if matches!(pat, "X2" | "X4" | "X5") {
            pass &= emp.abs() <= 3.0 * se;
        }
        ok &= pass;
        detail += &format!(
            "  {pat:<6} empirical {emp:>8.3} theory {theory:>8.3} se {se:.3} z {:>6.2} {}\n",
            (emp - theory) / se,
            if pass { "ok" } else { "off" }
        );
    }
    let b1 = r.get("X1", "gformula").unwrap().mean - 50.0;
    let b15 = r.get("X1+X5", "gformula").unwrap().mean - 50.0;
    ok &= b15.abs() > b1.abs();
    detail += &format!("  |bias X1+X5| {:.3} > |bias X1| {:.3}\n", b15.abs(), b1.abs());
    report(3, "empirical G-formula bias matches the closed form within 3 SE", ok, &detail);
}

#[test]
fn criterion_04_linear_cate_table() {
    let xs = [0.8, 0.9, 1.0, 1.1, 1.2];
    let target = [44.0, 47.0, 50.0, 53.0, 56.0];
    let r = hypothesized_means(REPS, SEED, &xs, Stage1::Linear).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    let mut ok = true;
    let mut detail = String::new();
    for (x, t) in xs.iter().zip(target) {
        let s = r.get("X1 missing in obs", &format!("E[X1]={x}")).unwrap();
        let pass = (s.mean - t).abs() <= 1.0 && s.sd.unwrap() <= 0.6;
        ok &= pass;
        detail += &format!("  E[X1]={x}: mean {:.3} sd {:.3} (target {t})\n", s.mean, s.sd.unwrap());
    }
    report(4, "hypothesised E[X_mis] table within 1.0, sd <= 0.6", ok, &detail);
}

#[test]
fn criterion_05_correlation_attenuation() {
    let rhos = [0.05, 0.5, 0.95];
    let target = [-8.32, -6.29, -0.81];
    let r = correlation_sweep(&rhos, REPS, SEED).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    let mut ok = true;
    let mut detail = String::new();
    for (rho, t) in rhos.iter().zip(target) {
        let pat = format!("rho={rho}");
        let bias = r.get(&pat, "gformula").unwrap().mean - 50.0;
        let d5 = r.get(&pat, "delta5_hat").unwrap().mean;
        let pass = (bias - t).abs() <= 1.0;
        ok &= pass;
        detail += &format!("  rho {rho}: bias {bias:.3} (target {t}), delta5_hat {d5:.3}\n");
    }
    report(5, "G-formula bias with X1 dropped across cov(X1,X5)", ok, &detail);
}

#[test]
fn criterion_06_imputation_no_gain() {
    let r = imputation(REPS, SEED).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    let mut ok = true;
    let mut detail = String::new();
    for j in [1, 3] {
        for side in ["missing in trial", "missing in obs"] {
            for est in ["gformula", "ipsw"] {
                let imp = r.get(&format!("X{j} {side} / impute"), est).unwrap();
                let drop = r.get(&format!("X{j} / drop"), est).unwrap();
                let se = (imp.se.unwrap().powi(2) + drop.se.unwrap().powi(2)).sqrt();
                let diff = imp.mean - drop.mean;
                let pass = diff.abs() <= 3.0 * se;
                ok &= pass;
                detail += &format!(
                    "  X{j} {side:<16} {est:<8} impute {:.3} drop {:.3} diff {diff:>7.3} se {se:.3}\n",
                    imp.mean, drop.mean
                );
            }
        }
    }
    report(6, "linear imputation changes the bias by at most 3 SE", ok, &detail);
}

#[test]
fn criterion_07_proxy_curve() {
    let sigmas = [0.0, 0.5, 1.0, 2.0, 3.0];
    let r = proxy_sweep(&sigmas, REPS, SEED).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    let mut ok = true;
    let mut detail = String::new();
    for s in sigmas {
        let pat = format!("sigma_prox={s}");
        let g = r.get(&pat, "gformula").unwrap();
        let theory = r.get(&pat, "theoretical_bias").unwrap().mean;
        let emp = g.mean - 50.0;
        let se = g.se.unwrap();
        let mut pass = (emp - theory).abs() <= 3.0 * se;
        if s == 0.0 {
            pass &= emp.abs() <= 3.0 * se;
        }
        ok &= pass;
        detail += &format!("  sigma {s}: empirical {emp:>7.3} theory {theory:>7.3} se {se:.3}\n");
    }
    report(7, "proxy bias follows the attenuation formula", ok, &detail);
}

#[test]
fn criterion_08_box_m_sweep() {
    let base = ScenarioSpec {
        seed: SEED,
        ..ScenarioSpec::baseline()
    };
    let r = sweep_selection_strength(&base, &[0.0, -2.0], 50).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    let p0 = r.get("beta_s1=0", "box_m_p").unwrap().mean;
    let p2 = r.get("beta_s1=-2", "box_m_p").unwrap().mean;
    report(
        8,
        "mean Box-M p >= 0.2 without selection on X1 and <= 1e-6 at -2",
        p0 >= 0.2 && p2 <= 1e-6,
        &format!("  beta_s1=0: {p0:.4}  beta_s1=-2: {p2:.3e}"),
    );
}

#[test]
fn criterion_09_heterogeneity_situations() {
    let a = heterogeneity_situations(Situation::A, REPS, SEED).unwrap();
    let b = heterogeneity_situations(Situation::B, REPS, SEED).unwrap();
    let ca = a.get("situation A", "corrected").unwrap();
    let cb = b.get("situation B", "corrected").unwrap();
    let za = (ca.mean - 50.0) / ca.se.unwrap();
    let zb = (cb.mean - 50.0) / cb.se.unwrap();
    report(
        9,
        "corrected ATE covers 50 in situation B and misses in situation A",
        zb.abs() <= 3.0 && za.abs() > 3.0,
        &format!(
            "  A: corrected {:.3} se {:.3} z {za:.2}\n  B: corrected {:.3} se {:.3} z {zb:.2}",
            ca.mean,
            ca.se.unwrap(),
            cb.mean,
            cb.se.unwrap()
        ),
    );
}

fn conditional_gaussian_gap() -> f64 {
    let n = 1_000_000;
    let spec = ScenarioSpec::baseline();
    let chol = spec.cov_matrix().cholesky().unwrap().l();
    let mut rng = stream_rng(SEED, 0);
    let x = nalgebra::DMatrix::from_fn(n, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = (x * chol.transpose()).add_scalar(1.0);
    let mut study = vec![true; n / 2];
    study.extend(vec![false; n - n / 2]);
    let treat: Vec<Option<bool>> = (0..n).map(|i| if i < n / 2 { Some(i % 2 == 0) } else { None }).collect();
    let y: Vec<Option<f64>> = (0..n).map(|i| if i < n / 2 { Some(0.0) } else { None }).collect();
    let sample = CombinedSample::new(spec.names(), x.clone(), study, treat, y).unwrap();
    let pattern = CovariatePattern::with_missing(5, &[(0, MissingLocation::MissingInTrial)]);
    let moments = estimate_moments(&sample, &CovariatePattern::complete(5), CovSource::Pooled).unwrap();
    let cg = conditional_gaussian(&moments, &pattern, Stratum::Observational).unwrap();
    let fit = fit_ols(&x.columns(1, 4).into_owned(), &x.column(0).iter().copied().collect::<Vec<_>>(), 0.0).unwrap();
    cg.slope[0]
        .iter()
        .zip(&fit.coefficients)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_10_property_suite() {
    let mut ok = true;
    let mut detail = String::new();

    let gap = conditional_gaussian_gap();
    let pass = gap <= 0.01;
    ok &= pass;
    detail += &format!("  conditional-Gaussian slope vs OLS at 1e6 draws: max gap {gap:.2e}\n");

    let spec = ScenarioSpec::baseline().resolved().unwrap();
    let sample = generate(&spec, &mut stream_rng(SEED, 0)).unwrap();
    let truth = [30.0, 30.0, -10.0, 0.0, 0.0];
    let fit = robinson_rlearner(&sample, &[0, 1, 2, 3, 4], 0.5, Stage1::Linear).unwrap();
    let pass = fit.delta.iter().zip(truth).all(|(d, t)| (d - t).abs() <= 1.0);
    ok &= pass;
    detail += &format!("  Robinson delta (linear stage 1, n={}): {:.3?}\n", sample.n(), fit.delta);
    let kernel = robinson_rlearner(&sample, &[0, 1, 2, 3, 4], 0.5, Stage1::Kernel).unwrap();
    detail += &format!(
        "  (info) kernel stage 1: {:.3?} se {:.3?}\n",
        kernel.delta, kernel.standard_errors
    );

    let run = |target_size: usize, obs_size: usize| {
        let s = ScenarioSpec {
            target_size,
            obs_size,
            reps: REPS,
            seed: SEED,
            ..ScenarioSpec::baseline()
        };
        let options = RunOptions {
            overlay_cov: None,
            ..RunOptions::default()
        };
        run_scenario(
            &s,
            &[PatternSpec::none()],
            &[EstimatorKind::GFormula, EstimatorKind::Ipsw, EstimatorKind::Aipsw],
            &options,
        )
        .unwrap()
    };
    let small = run(2_500, 2_500);
    let large = run(10_000, 10_000);
    for est in ["gformula", "ipsw", "aipsw"] {
        let mae = |r: &ScenarioResult| {
            let v = r.values("none", est);
            v.iter().map(|x| (x - 50.0).abs()).sum::<f64>() / v.len() as f64
        };
        let (m_s, m_l) = (mae(&small), mae(&large));
        let (sd_s, sd_l) = (
            small.get("none", est).unwrap().sd.unwrap(),
            large.get("none", est).unwrap().sd.unwrap(),
        );
        let pass = m_l < m_s && sd_l < sd_s;
        ok &= pass;
        detail += &format!("  {est:<9} mean |err| {m_s:.3} -> {m_l:.3}, sd {sd_s:.3} -> {sd_l:.3}\n");
    }

    let no_shift = ScenarioSpec {
        beta_s: vec![0.0; 5],
        beta_s0: Some(30.0),
        reps: 50,
        seed: SEED,
        ..ScenarioSpec::baseline()
    };
    let options = RunOptions {
        overlay_cov: None,
        ..RunOptions::default()
    };
    let r = run_scenario(
        &no_shift,
        &[PatternSpec::none()],
        &[EstimatorKind::Dm, EstimatorKind::GFormula, EstimatorKind::Ipsw],
        &options,
    )
    .unwrap();
    let dm = r.values("none", "dm");
    for est in ["gformula", "ipsw"] {
        let v = r.values("none", est);
        let d: Vec<f64> = v.iter().zip(&dm).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let se = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
            / (d.len() as f64).sqrt();
        let pass = mean.abs() <= 3.0 * se.max(1e-12);
        ok &= pass;
        detail += &format!("  no shift: mean({est} - dm) {mean:.4} se {se:.4}\n");
    }

    let short = ScenarioSpec {
        reps: 3,
        seed: 9,
        target_size: 2_000,
        obs_size: 2_000,
        ..ScenarioSpec::baseline()
    };
    let csv = |s: &ScenarioSpec| {
        let r = run_scenario(s, &standard_patterns(), &EstimatorKind::ALL, &RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        buf
    };
    let a = csv(&short);
    let b = csv(&short);
    let pass = a == b;
    ok &= pass;
    detail += &format!("  determinism replay: {} bytes, identical = {pass}\n", a.len());

    report(10, "property suite", ok, &detail);
}
