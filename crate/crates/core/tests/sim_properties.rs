use dips::sim::{build_sigma, gen_scenario, run_experiment, true_outcome_mean, true_propensity};
use dips::{Method, PerturbationConfig, Scenario, ScenarioConfig};

fn strip_clock(r: &dips::SimReport) -> String {
    let mut v = serde_json::to_value(r).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_secs");
    serde_json::to_string(&v).unwrap()
}

#[test]
fn single_repetition_report() {
    let cfg = ScenarioConfig::new(Scenario::BothCorrect, 200, 10, 1, 3);
    let r = run_experiment(&cfg).unwrap();
    for s in &r.estimators {
        let est = s.estimates[0].unwrap();
        assert_eq!(s.bias, est - 1.0);
        assert!((s.rmse - s.bias.abs()).abs() < 1e-15);
        assert_eq!(s.emp_se, 0.0);
    }
}

#[test]
fn aggregation_identity_and_relative_efficiency() {
    let mut cfg = ScenarioConfig::new(Scenario::MisspecOutcome, 200, 10, 8, 4);
    cfg.noise_sd = 3.0;
    let r = run_experiment(&cfg).unwrap();
    for s in &r.estimators {
        let k = s.successes as f64;
        let rhs = s.bias.powi(2) + s.emp_se.powi(2) * (k - 1.0) / k;
        assert!((s.rmse.powi(2) - rhs).abs() < 1e-10);
    }
    assert_eq!(r.summary(Method::DrAlas).unwrap().re_vs_dr, Some(1.0));
    let dr = r.summary(Method::DrAlas).unwrap().rmse.powi(2);
    let dips = r.summary(Method::Dips).unwrap();
    assert!((dips.re_vs_dr.unwrap() - dr / dips.rmse.powi(2)).abs() < 1e-12);
}

#[test]
fn no_relative_efficiency_without_dr() {
    let mut cfg = ScenarioConfig::new(Scenario::BothCorrect, 150, 10, 2, 4);
    cfg.estimators = vec![Method::Dips];
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.estimators.len(), 1);
    assert!(r.estimators[0].re_vs_dr.is_none());
}

#[test]
fn report_is_identical_across_thread_counts() {
    let mut cfg = ScenarioConfig::new(Scenario::BothMisspec, 150, 12, 6, 21);
    cfg.noise_sd = 3.0;
    cfg.perturb = Some(PerturbationConfig {
        resamples: 12,
        seed: 0,
        ..PerturbationConfig::default()
    });
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        strip_clock(&pool.install(|| run_experiment(&cfg).unwrap()))
    };
    let a = run(1);
    assert_eq!(a, run(2));
    assert_eq!(a, run(5));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(v["estimators"][0]["coverage"].is_f64());
    assert!(v["estimators"][1]["coverage"].is_null());
}

#[test]
fn csv_has_one_row_per_estimator() {
    let cfg = ScenarioConfig::new(Scenario::MisspecPs, 120, 10, 2, 1);
    let r = run_experiment(&cfg).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("misspec-ps,120,10,2,dips,"));
}

#[test]
fn covariates_follow_sigma() {
    let mut cfg = ScenarioConfig::new(Scenario::BothCorrect, 40_000, 12, 1, 8);
    cfg.noise_sd = 1.0;
    let (d, _) = gen_scenario(&cfg, 0).unwrap();
    let sigma = build_sigma(12).unwrap();
    let n = d.n() as f64;
    for a in 0..12 {
        for b in a..12 {
            let c: f64 = d.column(a).iter().zip(d.column(b)).map(|(u, v)| u * v).sum::<f64>() / n;
            assert!((c - sigma[(a, b)]).abs() < 0.03, "({a},{b}) {c} vs {}", sigma[(a, b)]);
        }
    }
}

#[test]
fn treatment_rates_match_propensity() {
    for scenario in dips::Scenario::ALL {
        let cfg = ScenarioConfig::new(scenario, 20_000, 10, 1, 2);
        let (d, _) = gen_scenario(&cfg, 0).unwrap();
        let mut row = vec![0.0; 10];
        let mut expected = 0.0;
        for i in 0..d.n() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = d.x()[(i, j)];
            }
            expected += true_propensity(scenario, &row);
        }
        let n = d.n() as f64;
        let observed = d.t().iter().map(|&t| f64::from(t)).sum::<f64>();
        let se = (expected / n * (1.0 - expected / n) / n).sqrt();
        assert!((observed / n - expected / n).abs() < 4.0 * se, "{scenario}");
    }
}

#[test]
fn truth_is_one_on_generated_covariates() {
    for scenario in dips::Scenario::ALL {
        let mut cfg = ScenarioConfig::new(scenario, 500, 15, 4, 5);
        cfg.noise_sd = 0.0;
        let mut total = 0.0;
        let mut count = 0.0;
        for rep in 0..cfg.reps {
            let (d, truth) = gen_scenario(&cfg, rep).unwrap();
            assert_eq!(truth, 1.0);
            let mut row = vec![0.0; 15];
            for i in 0..d.n() {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = d.x()[(i, j)];
                }
                total += true_outcome_mean(scenario, &row, 1) - true_outcome_mean(scenario, &row, 0);
                count += 1.0;
            }
            // with zero noise, observed outcomes equal the arm means
            for i in 0..d.n() {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = d.x()[(i, j)];
                }
                assert_eq!(d.y()[i], true_outcome_mean(scenario, &row, d.t()[i]));
            }
        }
        let mean: f64 = total / count;
        assert!((mean - 1.0).abs() < 4.0 / count.sqrt());
    }
}
