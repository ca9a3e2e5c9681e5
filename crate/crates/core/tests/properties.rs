use nalgebra::DMatrix;
use proptest::prelude::*;
use transport_ate::data::{
    detect_pattern, estimate_moments, read_csv, write_csv, CombinedSample, CovSource, CovariatePattern, CsvSchema,
    MissingLocation, MomentSummary, Stratum,
};
use transport_ate::estimators::{
    difference_in_means, estimate, g_formula, ipsw, CrossFitPlan, EstimatorConfig, EstimatorKind,
};
use transport_ate::sensitivity::{
    linear_cate_ate, procedure_totally_missing, proxy_bias, robinson_rlearner, theoretical_bias, SensitivityGrid,
};
use transport_ate::simulation::{summarize, ReplicateRow};
use transport_ate::stats::{box_m_test, conditional_gaussian, fit_logistic, fit_ols, Stage1};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Random sample with alternating treatment so both arms have at least two rows.
fn sample_strategy(min_trial: usize) -> impl Strategy<Value = CombinedSample> {
    (1usize..=3, min_trial..min_trial + 20, 3usize..25).prop_flat_map(|(p, n, m)| {
        (
            prop::collection::vec(-10.0f64..10.0, (n + m) * p),
            prop::collection::vec(-50.0f64..50.0, n),
        )
            .prop_map(move |(x, y)| {
                let x = DMatrix::from_row_slice(n + m, p, &x);
                let trial_x = x.rows(0, n).into_owned();
                let obs_x = x.rows(n, m).into_owned();
                let a: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                let names = (1..=p).map(|j| format!("X{j}")).collect();
                CombinedSample::from_strata(names, &trial_x, &a, &y, &obs_x).unwrap()
            })
    })
}

fn spd(p: usize, entries: Vec<f64>) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(p, p, &entries[..p * p]);
    &a * a.transpose() + DMatrix::identity(p, p)
}

fn moments_from(cov: &DMatrix<f64>, mean_target: Vec<f64>, mean_trial: Vec<f64>) -> MomentSummary {
    let p = cov.nrows();
    MomentSummary {
        mean_target,
        mean_trial,
        cov: (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect(),
        n: 100,
        m: 100,
        cov_source: CovSource::Pooled,
        names: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(s in sample_strategy(4)) {
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        prop_assert_eq!(back.names(), s.names());
        prop_assert_eq!(back.n(), s.n());
        prop_assert_eq!(back.m(), s.m());
        for i in 0..s.rows() {
            prop_assert_eq!(back.is_trial(i), s.is_trial(i));
            prop_assert_eq!(back.treatment(i), s.treatment(i));
            prop_assert_eq!(back.outcome(i).map(f64::to_bits), s.outcome(i).map(f64::to_bits));
            for j in 0..s.p() {
                prop_assert_eq!(back.covariate(i, j).map(f64::to_bits), s.covariate(i, j).map(f64::to_bits));
            }
        }
    }

    #[test]
    fn moments_are_permutation_invariant(s in sample_strategy(4), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..s.rows()).collect();
        order.shuffle(&mut transport_ate::stream_rng(seed, 0));
        let shuffled = s.subset_rows(&order).unwrap();
        let pat = CovariatePattern::complete(s.p());
        for src in [CovSource::Pooled, CovSource::TrialOnly, CovSource::ObservationalOnly] {
            let a = estimate_moments(&s, &pat, src).unwrap();
            let b = estimate_moments(&shuffled, &pat, src).unwrap();
            for j in 0..s.p() {
                prop_assert!(close(a.mean_target[j], b.mean_target[j], 1e-12));
                prop_assert!(close(a.mean_trial[j], b.mean_trial[j], 1e-12));
                for k in 0..s.p() {
                    prop_assert!(close(a.cov[j][k], b.cov[j][k], 1e-10));
                    prop_assert_eq!(a.cov[j][k], a.cov[k][j]);
                }
            }
        }
    }

    #[test]
    fn affine_outcome_map_scales_the_ate(s in sample_strategy(12), a in -5.0f64..5.0, b in -100.0f64..100.0) {
        prop_assume!(a.abs() > 1e-3);
        let mapped = s.map_outcomes(|y| a * y + b);
        let cfg = EstimatorConfig::default();
        let dm = difference_in_means(&s).unwrap().value;
        let dm2 = difference_in_means(&mapped).unwrap().value;
        prop_assert!((dm2 - a * dm).abs() <= 1e-9 * (1.0 + (a * dm).abs() + b.abs()));
        if let Ok(g) = g_formula(&s, &cfg) {
            let g2 = g_formula(&mapped, &cfg).unwrap().value;
            prop_assert!((g2 - a * g.value).abs() <= 1e-7 * (1.0 + (a * g.value).abs() + b.abs()));
        }
    }

    #[test]
    fn ipsw_weights_are_positive_and_finite(s in sample_strategy(6)) {
        let est = ipsw(&s, &EstimatorConfig::default()).unwrap();
        let lo = est.diagnostics["weight_min"];
        let hi = est.diagnostics["weight_max"];
        prop_assert!(lo > 0.0 && lo.is_finite());
        prop_assert!(hi >= lo && hi.is_finite());
    }

    #[test]
    fn observed_covariates_are_usable(s in sample_strategy(12), drop_trial in 0usize..3, drop_obs in 0usize..3) {
        let mut s = s;
        if drop_trial < s.p() && s.p() > 1 {
            s = s.masked(drop_trial, Stratum::Trial);
        }
        if drop_obs < s.p() && drop_obs != drop_trial && s.p() > 2 {
            s = s.masked(drop_obs, Stratum::Observational);
        }
        let pat = detect_pattern(&s);
        let mut all: Vec<usize> = pat.obs_idx.iter().chain(&pat.mis_idx).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..s.p()).collect::<Vec<_>>());
        prop_assert!(pat.obs_idx.iter().all(|j| !pat.mis_idx.contains(j)));
        for kind in EstimatorKind::ALL {
            match estimate(&s, kind, &EstimatorConfig::default()) {
                Ok(_) => {}
                Err(e) => prop_assert!(
                    matches!(e, transport_ate::Error::SingularDesign | transport_ate::Error::InsufficientRows { .. }),
                    "{kind:?}: {e}"
                ),
            }
        }
    }

    #[test]
    fn ols_reproduces_column_space(n in 6usize..40, coef in prop::collection::vec(-5.0f64..5.0, 3), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = transport_ate::stream_rng(seed, 1);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
        let y: Vec<f64> = (0..n).map(|i| coef[0] + coef[1] * x[(i, 0)] + coef[2] * x[(i, 1)]).collect();
        if let Ok(fit) = fit_ols(&x, &y, 0.0) {
            prop_assert!(fit.residual_variance < 1e-20);
            prop_assert!(fit.residual_variance >= 0.0);
            for (i, &yi) in y.iter().enumerate() {
                prop_assert!((fit.predict_row(&[x[(i, 0)], x[(i, 1)]]) - yi).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn logistic_loglik_is_monotone(n in 10usize..200, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = transport_ate::stream_rng(seed, 2);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let s: Vec<bool> = (0..n).map(|i| rng.random_bool(transport_ate::stats::expit(0.5 * x[(i, 0)] - x[(i, 1)]))).collect();
        prop_assume!(s.iter().any(|&v| v) && s.iter().any(|&v| !v));
        let fit = fit_logistic(&x, &s).unwrap();
        for w in fit.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for p in fit.predict(&x) {
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn conditional_gaussian_is_affine(
        entries in prop::collection::vec(-1.0f64..1.0, 16),
        mean in prop::collection::vec(-3.0f64..3.0, 4),
        x in prop::collection::vec(-5.0f64..5.0, 3),
        x2 in prop::collection::vec(-5.0f64..5.0, 3),
        alpha in -2.0f64..2.0,
        mis in 0usize..4,
    ) {
        let cov = spd(4, entries);
        let mo = moments_from(&cov, mean.clone(), mean);
        let pat = CovariatePattern::with_missing(4, &[(mis, MissingLocation::MissingInTrial)]);
        let cg = conditional_gaussian(&mo, &pat, Stratum::Observational).unwrap();
        let mix: Vec<f64> = x.iter().zip(&x2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let lhs = cg.predict(&mix)[0];
        let rhs = alpha * cg.predict(&x)[0] + (1.0 - alpha) * cg.predict(&x2)[0];
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs().max(rhs.abs())) * 10.0);
        prop_assert!(cg.slope[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn box_m_is_symmetric(
        a in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 9),
        na in 5usize..500,
        nb in 5usize..500,
    ) {
        let (ca, cb) = (spd(3, a), spd(3, b));
        let ab = box_m_test(&ca, na, &cb, nb).unwrap();
        let ba = box_m_test(&cb, nb, &ca, na).unwrap();
        prop_assert!((ab.statistic - ba.statistic).abs() <= 1e-10 * (1.0 + ab.statistic.abs()));
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        let same = box_m_test(&ca, na, &ca, nb).unwrap();
        prop_assert!(same.statistic.abs() < 1e-9);
    }

    #[test]
    fn totally_missing_grid_is_bilinear(
        lo in -50.0f64..0.0, hi in 0.0f64..50.0, slo in -2.0f64..0.0, shi in 0.0f64..2.0,
        steps in 2usize..15, c in -1.0f64..1.0,
    ) {
        let d = transport_ate::sensitivity::linspace(lo, hi, steps);
        let s = transport_ate::sensitivity::linspace(slo, shi, steps + 1);
        let g = SensitivityGrid::bilinear("X", d.clone(), s.clone(), c, 1.0);
        for (i, di) in d.iter().enumerate() {
            for (k, sk) in s.iter().enumerate() {
                prop_assert!((g.bias[i][k] + di * (sk - c)).abs() <= 1e-12 * (1.0 + (di * sk).abs()));
            }
        }
        let sym: Vec<f64> = d.iter().map(|v| -v).collect();
        let flipped = procedure_totally_missing("X", sym, s.clone(), 1.0);
        let plain = procedure_totally_missing("X", d, s, 1.0);
        for (r1, r2) in plain.bias.iter().zip(&flipped.bias) {
            for (a, b) in r1.iter().zip(r2) {
                prop_assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn proxy_bias_grows_with_noise(
        delta in -50.0f64..50.0, shift in -2.0f64..2.0, sm in 0.1f64..3.0,
        s1 in 0.0f64..5.0, extra in 0.0f64..5.0,
    ) {
        let a = proxy_bias(delta, shift, sm, s1).unwrap().abs();
        let b = proxy_bias(delta, shift, sm, s1 + extra).unwrap().abs();
        prop_assert!(b + 1e-12 >= a);
        prop_assert!(b <= (delta * shift).abs() + 1e-12);
    }

    #[test]
    fn bias_report_recomposes(
        entries in prop::collection::vec(-1.0f64..1.0, 16),
        tgt in prop::collection::vec(-2.0f64..2.0, 4),
        trl in prop::collection::vec(-2.0f64..2.0, 4),
        delta in prop::collection::vec(-40.0f64..40.0, 2),
    ) {
        let cov = spd(4, entries);
        let mo = moments_from(&cov, tgt, trl);
        let pat = CovariatePattern::dropping(4, &[0, 2]);
        let rep = theoretical_bias(&delta, &mo, &pat, None).unwrap();
        prop_assert!((rep.recompose() - rep.bias).abs() <= 1e-12 * (1.0 + rep.bias.abs()));
        let zero = theoretical_bias(&[0.0, 0.0], &mo, &pat, None).unwrap();
        prop_assert_eq!(zero.bias, 0.0);
    }

    #[test]
    fn cross_fit_folds_partition(n in 2usize..500, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let plan = CrossFitPlan::new(n, k, seed).unwrap();
        prop_assert_eq!(plan.fold_assignment.len(), n);
        prop_assert!(plan.fold_assignment.iter().all(|&f| f < k));
        let sizes = plan.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn summary_is_recomputable(values in prop::collection::vec(-100.0f64..100.0, 1..40)) {
        let rows: Vec<ReplicateRow> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ReplicateRow { replicate: i as u64, pattern: "p".into(), estimator: "e".into(), value: v })
            .collect();
        let s = &summarize(&rows)[0];
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        prop_assert!((s.mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        prop_assert_eq!(s.reps, values.len());
        if values.len() > 1 {
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            prop_assert!((s.sd.unwrap() - sd).abs() <= 1e-12 * (1.0 + sd));
            prop_assert!((s.se.unwrap() - sd / n.sqrt()).abs() <= 1e-12 * (1.0 + sd));
        } else {
            prop_assert!(s.sd.is_none());
        }
    }

    #[test]
    fn linear_cate_ate_is_affine_in_hypothesis(s in sample_strategy(30), h in -3.0f64..3.0, step in 0.1f64..2.0) {
        prop_assume!(s.p() >= 2);
        let cols: Vec<usize> = (0..s.p()).collect();
        if let Ok(fit) = robinson_rlearner(&s, &cols, 0.5, Stage1::Linear) {
            let obs_means = vec![1.0; s.p() - 1];
            let a = linear_cate_ate(&fit, &obs_means, h);
            let b = linear_cate_ate(&fit, &obs_means, h + step);
            let slope = fit.delta[s.p() - 1];
            prop_assert!(((b - a) / step - slope).abs() <= 1e-9 * (1.0 + slope.abs()));
        }
    }
}
