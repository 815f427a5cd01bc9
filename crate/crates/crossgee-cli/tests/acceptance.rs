//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (run with `cargo test -p crossgee-cli --test acceptance -- --nocapture`
//! to see them). Monte Carlo criteria pin their scenario, replication
//! count, tolerance, and runtime budget in code.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossgee::crossfit::{self, CrossFitConfig, KernelConfig, LambdaRule};
use crossgee::inference::{noncentrality, sandwich, sandwich_with_outer};
use crossgee::lasso::{solve_lasso, LassoProblem};
use crossgee::model::{Dataset, IndexSet, LinkFunction, ObservationBlock};
use crossgee::penalty::{PenaltyConfig, PenaltyKind};
use crossgee::sim::{
    generate, rep_rng, run_experiment, true_sigma, CovFamily, ExperimentName, ScenarioConfig,
    TrueCovarianceProvider,
};
use crossgee::solver::{
    estimating_function, estimating_jacobian, penalized_solve, ridge_init, ModelSpec,
    SolverConfig, WorkingCovariance,
};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:2}: {name} — {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_spd(rng: &mut ChaCha8Rng, l: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(l, l, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(l, l) * rng.random_range(0.3..1.0)
}

fn random_dataset(
    rng: &mut ChaCha8Rng,
    n: usize,
    p: usize,
    l: usize,
    link: &LinkFunction<f64>,
    beta: &DVector<f64>,
    noise: f64,
) -> Dataset<f64> {
    let blocks = (0..n)
        .map(|_| {
            let x = DMatrix::from_fn(p, l, |_, _| rng.random_range(-1.0..1.0));
            let lp = x.tr_mul(beta);
            let y = DVector::from_fn(l, |k, _| link.g(lp[k]) + noise * rng.random_range(-1.0..1.0));
            ObservationBlock::new(y, x).unwrap()
        })
        .collect();
    Dataset::new(blocks).unwrap()
}

/// Scenario shared by the rate and support criteria (calibrated penalty
/// constant; the thresholds below come from the acceptance contract).
fn sparse_hetero_scenario(n: usize) -> ScenarioConfig<f64> {
    ScenarioConfig {
        n,
        p: 50,
        l: 2,
        s: 3,
        m: 2,
        link: LinkFunction::Identity,
        family: CovFamily::DiagExp { scale: 1.0 },
        active: IndexSet::new(vec![4]),
        signal: 1.0,
        m_value: 0.5,
        drift: vec![],
        bounded_errors: false,
        seed: 20260808,
        replications: 0,
        lambda: LambdaRule::RateScaled { c: 1.6 },
        kernel: KernelConfig::default(),
        level: 0.05,
    }
}

#[test]
fn criterion_01_jacobian_matches_finite_differences() {
    let start = Instant::now();
    let links = [LinkFunction::Identity, LinkFunction::Log, LinkFunction::Logit];
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let n = rng.random_range(10..=50);
        let p = rng.random_range(2..=10);
        let l = rng.random_range(1..=3);
        let link = links[(inst % 3) as usize].clone();
        let beta_true = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        let data = random_dataset(&mut rng, n, p, l, &link, &beta_true, 0.3);
        let cov = WorkingCovariance::Fixed(random_spd(&mut rng, l));
        let beta = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        let cols = IndexSet::full(p);
        let jac = estimating_jacobian(&data, &beta, &link, &cov, &cols).unwrap();
        // Central finite differences of the estimating function.
        let h = 1e-6;
        let mut fd = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let fu = estimating_function(&data, &up, &link, &cov).unwrap();
            let fl = estimating_function(&data, &dn, &link, &cov).unwrap();
            fd.set_column(j, &((fu - fl) / (2.0 * h)));
        }
        let rel = (&jac - &fd).norm() / fd.norm();
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && elapsed.as_secs() < 30;
    report(
        1,
        "analytic Jacobian vs central finite differences",
        pass,
        format!("max rel err {worst:.2e} over 50 instances (tol 1e-5), {elapsed:.1?} < 30s"),
    );
}

#[test]
fn criterion_02_oracle_reductions() {
    let start = Instant::now();
    // (a) lambda = 0, identity link, Sigma = I: penalized solve equals the
    // stacked least-squares solution.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let beta_true = DVector::from_vec(vec![1.0, -0.5, 0.25, 0.0, 0.7, 0.0]);
    let data = random_dataset(&mut rng, 60, 6, 2, &LinkFunction::Identity, &beta_true, 0.4);
    let mut g = DMatrix::<f64>::zeros(6, 6);
    let mut b = DVector::<f64>::zeros(6);
    for block in data.blocks() {
        for k in 0..2 {
            let xk = block.x().column(k).into_owned();
            g.ger(1.0, &xk, &xk, 1.0);
            b.axpy(block.y()[k], &xk, 1.0);
        }
    }
    let ols = g.lu().solve(&b).unwrap();
    let spec = ModelSpec::new(
        LinkFunction::Identity,
        PenaltyConfig::scad(0.0).unwrap(),
        IndexSet::full(6),
    );
    let cfg = SolverConfig::default();
    let init = ridge_init(&data, &LinkFunction::Identity, cfg.init_ridge);
    let mut worst = 0.0f64;
    for cov in [
        WorkingCovariance::Identity,
        WorkingCovariance::Fixed(DMatrix::identity(2, 2)),
    ] {
        let fit = penalized_solve(&data, &spec, &cov, &cfg, &init).unwrap();
        assert!(fit.converged);
        worst = worst.max((fit.beta.beta.clone() - &ols).amax());
    }

    // (b) lasso oracles: null threshold, soft threshold, OLS at lambda 0.
    let x = DMatrix::from_fn(20, 5, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
    let lambda_max = (0..5)
        .map(|j| f64::abs(2.0 / 20.0 * x.column(j).dot(&y)))
        .fold(0.0f64, f64::max);
    let null = solve_lasso(&LassoProblem::new(x.clone(), y.clone(), lambda_max * 1.000001).unwrap())
        .unwrap();
    let null_ok = null.coef == DVector::zeros(5);

    let ones = DMatrix::from_element(16, 1, 1.0);
    let mut yy = DVector::from_element(16, 0.4);
    yy[0] += 0.3;
    yy[1] -= 0.3;
    let c = yy.sum() / 16.0;
    let mut soft_ok = true;
    for lambda in [0.1f64, 0.6, 1.2] {
        let sol = solve_lasso(&LassoProblem::new(ones.clone(), yy.clone(), lambda).unwrap())
            .unwrap();
        let expect = (c.abs() - lambda / 2.0).max(0.0) * c.signum();
        soft_ok &= (sol.coef[0] - expect).abs() < 1e-10;
    }

    let xs = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
    let ys = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
    let lsq = xs.clone().lu().solve(&ys).unwrap();
    let sol = solve_lasso(
        &LassoProblem::new(xs, ys, 0.0)
            .unwrap()
            .with_tol(1e-12, 200_000),
    )
    .unwrap();
    let ols_lasso_err = (sol.coef - lsq).amax();

    let elapsed = start.elapsed();
    let pass =
        worst <= 1e-6 && null_ok && soft_ok && ols_lasso_err <= 1e-8 && elapsed.as_secs() < 10;
    report(
        2,
        "closed-form least-squares and lasso oracles",
        pass,
        format!(
            "GLS-reduction err {worst:.2e} (tol 1e-6), lasso OLS err {ols_lasso_err:.2e}, null {null_ok}, soft-threshold {soft_ok}, {elapsed:.1?} < 10s"
        ),
    );
}

#[test]
fn criterion_03_penalty_shape_suite() {
    let lambdas = [0.05f64, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0, 8.0];
    let mut checked = 0usize;
    for kind in [PenaltyKind::Scad, PenaltyKind::Mcp] {
        let shapes: [f64; 2] = match kind {
            PenaltyKind::Scad => [2.5, 3.7],
            PenaltyKind::Mcp => [1.5, 3.0],
        };
        for &lambda in &lambdas {
            for &a in &shapes {
                let cfg = PenaltyConfig::new(kind, lambda, a).unwrap();
                // rho'(0+) = lambda, exactly.
                assert_eq!(cfg.derivative(1e-300), lambda);
                assert_eq!(cfg.derivative(0.0), lambda);
                let hi = 1.5 * a * lambda;
                let mut prev = f64::INFINITY;
                for i in 0..10_000 {
                    let t = hi * (i as f64) / 9_999.0;
                    let d = cfg.derivative(t);
                    assert!(d >= 0.0, "{kind:?} negative at {t}");
                    assert!(d <= prev, "{kind:?} not nonincreasing at {t}");
                    if t >= a * lambda {
                        assert_eq!(d, 0.0, "{kind:?} nonzero beyond a*lambda at {t}");
                    }
                    prev = d;
                }
                checked += 1;
            }
        }
    }
    report(
        3,
        "penalty shape properties on 1e4-point grids",
        checked == 40,
        format!("{checked} (lambda, a) pairs checked exactly"),
    );
}

#[test]
fn criterion_04_consistency_rate() {
    let start = Instant::now();
    let cfg = sparse_hetero_scenario(200);
    let rep = run_experiment(ExperimentName::Rate, &cfg, 200).unwrap();
    let failures = rep.rows.iter().filter(|r| !r.ok).count();
    let ratio = rep
        .summary
        .iter()
        .find(|(k, _)| k == "median_ratio")
        .map(|(_, v)| *v)
        .unwrap();
    let elapsed = start.elapsed();
    let pass = (1.6..=2.6).contains(&ratio) && failures == 0 && elapsed.as_secs() < 300;
    report(
        4,
        "median error ratio n=200 vs n=800 in [1.6, 2.6]",
        pass,
        format!("ratio {ratio:.3}, {failures} failures, 200 reps, {elapsed:.1?} < 5min"),
    );
}

#[test]
fn criterion_05_support_recovery() {
    let start = Instant::now();
    let cfg = sparse_hetero_scenario(800);
    let rep = run_experiment(ExperimentName::Support, &cfg, 200).unwrap();
    let freq = rep
        .summary
        .iter()
        .find(|(k, _)| k == "freq_off_support_zero")
        .map(|(_, v)| *v)
        .unwrap();
    let elapsed = start.elapsed();
    let pass = freq >= 0.9;
    report(
        5,
        "exact zeros off the oracle support with prob >= 0.9",
        pass,
        format!("P(beta off-support == 0) = {freq:.3} at n=800, 200 reps, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_06_screening_consistency_and_null_control() {
    let start = Instant::now();
    // Planted two-coordinate active set, strong signal.
    let mut planted = sparse_hetero_scenario(500);
    planted.family = CovFamily::DiagExp { scale: 3.0 };
    planted.active = IndexSet::new(vec![0, 1]);
    let rep = run_experiment(ExperimentName::Screening, &planted, 200).unwrap();
    let p_exact = rep
        .summary
        .iter()
        .find(|(k, _)| k == "p_exact_match")
        .map(|(_, v)| *v)
        .unwrap();

    // Homoscedastic null: familywise false positive control.
    let mut null = sparse_hetero_scenario(1000);
    null.family = CovFamily::Homoscedastic { sigma: 1.0 };
    null.active = IndexSet::empty();
    let rep0 = run_experiment(ExperimentName::Screening, &null, 200).unwrap();
    let p_nonempty = rep0
        .summary
        .iter()
        .find(|(k, _)| k == "p_nonempty")
        .map(|(_, v)| *v)
        .unwrap();

    let bound = 2.0 * 0.05 + 0.03; // l * alpha + Monte Carlo slack
    let elapsed = start.elapsed();
    let pass = p_exact >= 0.9 && p_nonempty <= bound;
    report(
        6,
        "screening recovers the planted set and controls the null",
        pass,
        format!(
            "P(A_hat == A) = {p_exact:.3} (>= 0.9), null P(A_hat nonempty) = {p_nonempty:.3} (<= {bound}), {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_07_kernel_rate_direction() {
    let start = Instant::now();
    let mut cfg = sparse_hetero_scenario(500);
    cfg.family = CovFamily::DiagExp { scale: 1.5 };
    cfg.active = IndexSet::new(vec![4]);
    cfg.kernel = KernelConfig {
        c_h: 2.0,
        ..KernelConfig::default()
    };
    let rep = run_experiment(ExperimentName::KernelRate, &cfg, 100).unwrap();
    let frac = rep
        .summary
        .iter()
        .find(|(k, _)| k == "frac_improved")
        .map(|(_, v)| *v)
        .unwrap();
    let elapsed = start.elapsed();
    let pass = frac >= 0.9 && elapsed.as_secs() < 180;
    report(
        7,
        "sup-norm kernel error shrinks from n=500 to n=2000",
        pass,
        format!("improved in {frac:.2} of 100 replications (>= 0.9), {elapsed:.1?} < 3min"),
    );
}

fn wald_scenario() -> ScenarioConfig<f64> {
    ScenarioConfig {
        n: 800,
        p: 10,
        l: 2,
        s: 2,
        m: 2,
        link: LinkFunction::Identity,
        family: CovFamily::DiagExp { scale: 1.0 },
        active: IndexSet::new(vec![4]),
        signal: 1.0,
        m_value: 0.5,
        drift: vec![],
        bounded_errors: false,
        seed: 20260808,
        replications: 0,
        lambda: LambdaRule::RateScaled { c: 1.6 },
        kernel: KernelConfig {
            c_h: 4.0,
            ..KernelConfig::default()
        },
        level: 0.05,
    }
}

#[test]
fn criterion_08_wald_size() {
    let start = Instant::now();
    let cfg = wald_scenario();
    let rep = run_experiment(ExperimentName::Size, &cfg, 1000).unwrap();
    let failures = rep.rows.iter().filter(|r| !r.ok).count();
    let rate = rep
        .summary
        .iter()
        .find(|(k, _)| k == "rejection_rate")
        .map(|(_, v)| *v)
        .unwrap();
    let elapsed = start.elapsed();
    let pass = (0.03..=0.08).contains(&rate) && failures == 0 && elapsed.as_secs() < 600;
    report(
        8,
        "empirical Wald size in [0.03, 0.08] at nominal 0.05",
        pass,
        format!("rejection {rate:.4} (r=2, n=800, 1000 reps), {failures} failures, {elapsed:.1?} < 10min"),
    );
}

#[test]
fn criterion_09_power_dominance() {
    let start = Instant::now();
    // Empirical: cross-fitted power within slack of (and here above) the
    // working-independence power under drifted diag-exp heteroscedasticity.
    let mut cfg = wald_scenario();
    cfg.family = CovFamily::DiagExp { scale: 1.5 };
    cfg.drift = vec![3.0, 0.0];
    let rep = run_experiment(ExperimentName::Power, &cfg, 500).unwrap();
    let p_cf = rep
        .summary
        .iter()
        .find(|(k, _)| k == "power_crossfit")
        .map(|(_, v)| *v)
        .unwrap();
    let p_ind = rep
        .summary
        .iter()
        .find(|(k, _)| k == "power_independence")
        .map(|(_, v)| *v)
        .unwrap();
    let empirical_ok = p_cf >= p_ind - 0.02;

    // Exact: the Loewner ordering of covariance estimates implies the
    // noncentrality ordering for every drift.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut exact_ok = true;
    for _ in 0..50 {
        let m = 4usize;
        let a = DMatrix::<f64>::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let omega_hat = &a * a.transpose() + DMatrix::identity(m, m) * 0.2;
        let b = DMatrix::<f64>::from_fn(m, m, |_, _| rng.random_range(-0.8..0.8));
        let omega_tilde = &omega_hat + &b * b.transpose();
        let c = DMatrix::<f64>::from_fn(2, m, |_, _| rng.random_range(-1.0..1.0));
        let h = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let d_hat = noncentrality(&h, &c, &omega_hat).unwrap();
        let d_tilde = noncentrality(&h, &c, &omega_tilde).unwrap();
        exact_ok &= d_hat >= d_tilde - 1e-10;
    }
    let elapsed = start.elapsed();
    let pass = empirical_ok && exact_ok;
    report(
        9,
        "cross-fitted power dominates working independence",
        pass,
        format!(
            "power {p_cf:.3} vs {p_ind:.3} (slack 0.02, 500 reps), PSD-ordering exact check {exact_ok}, {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_10_meat_collapses_onto_bread_with_true_weights() {
    let start = Instant::now();
    let cfg = ScenarioConfig {
        n: 5000,
        p: 6,
        l: 2,
        s: 2,
        m: 1,
        link: LinkFunction::Identity,
        family: CovFamily::DiagExp { scale: 1.0 },
        active: IndexSet::new(vec![4]),
        signal: 1.0,
        m_value: 0.5,
        drift: vec![],
        bounded_errors: false,
        seed: 31,
        replications: 1,
        lambda: LambdaRule::Fixed(0.0),
        kernel: KernelConfig::default(),
        level: 0.05,
    };
    let mut rng = rep_rng(cfg.seed, 0, 0);
    let (data, truth) = generate(&cfg, &mut rng).unwrap();
    let provider = TrueCovarianceProvider {
        family: truth.family,
        active: truth.active.clone(),
    };
    let support = truth.m_set.union(&truth.signal_set);
    let sw = sandwich(
        &data,
        &truth.beta0,
        &LinkFunction::Identity,
        &provider,
        &support,
    )
    .unwrap();
    let v1_inv = sw.v1.clone().cholesky().unwrap().inverse();
    let rel = (&sw.omega - &v1_inv).norm() / v1_inv.norm();

    // The algebraic collapse is exact once the residual outer product is
    // replaced by its conditional mean.
    let sw_exact = sandwich_with_outer(
        &data,
        &truth.beta0,
        &LinkFunction::Identity,
        &provider,
        &support,
        |i, _| true_sigma(&truth.family, &truth.active, data.block(i).x()),
    )
    .unwrap();
    let exact = (&sw_exact.v1 - &sw_exact.v2).norm() / sw_exact.v1.norm();
    let elapsed = start.elapsed();
    let pass = rel <= 0.1 && exact <= 1e-10;
    report(
        10,
        "sandwich collapses to V1^{-1} under true weights",
        pass,
        format!("statistical rel err {rel:.3} (<= 0.1 at n=5000), algebraic collapse {exact:.1e}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_11_fold_hygiene_audit() {
    let start = Instant::now();
    let cfg = ScenarioConfig {
        n: 160,
        p: 6,
        l: 2,
        s: 2,
        m: 1,
        link: LinkFunction::Identity,
        family: CovFamily::DiagExp { scale: 2.0 },
        active: IndexSet::new(vec![1]),
        signal: 1.0,
        m_value: 0.5,
        drift: vec![],
        bounded_errors: false,
        seed: 77,
        replications: 1,
        lambda: LambdaRule::RateScaled { c: 1.6 },
        kernel: KernelConfig::default(),
        level: 0.05,
    };
    let mut rng = rep_rng(cfg.seed, 0, 0);
    let (data, _) = generate(&cfg, &mut rng).unwrap();
    let spec = ModelSpec::new(
        LinkFunction::Identity,
        PenaltyConfig::scad(0.0).unwrap(),
        IndexSet::new(vec![0]),
    );
    let ccfg = CrossFitConfig {
        lambda: cfg.lambda,
        seed: 5,
        ..CrossFitConfig::default()
    };
    let out = crossfit::run(&data, &spec, &ccfg).unwrap();

    // Structural audit: each fold's model was trained exactly on its own
    // fold's units and shares none with the refit fold it weights.
    let mut violations = 0usize;
    for (q_idx, fold_out) in out.folds.iter().enumerate() {
        let q = (q_idx + 1) as u8;
        let model = &fold_out.model;
        assert_eq!(model.fold_id(), q);
        let own: std::collections::BTreeSet<_> = out.plan.fold(q).iter().copied().collect();
        let other: std::collections::BTreeSet<_> =
            out.plan.fold(3 - q).iter().copied().collect();
        for &u in model.training_units() {
            if !own.contains(&u) || other.contains(&u) {
                violations += 1;
            }
        }
        if model.training_units().len() != out.plan.fold(q).len() {
            violations += 1;
        }
    }
    // Negative control: consuming a model on its own fold must be rejected.
    let rejected = crossfit::audit_fold_hygiene(&out.folds[0].model, &out.plan, 1).is_err();
    let elapsed = start.elapsed();
    let pass = violations == 0 && out.diagnostics.fold_hygiene_ok && rejected;
    report(
        11,
        "every refit covariance evaluation uses opposite-fold training only",
        pass,
        format!(
            "violations {violations}, diagnostics ok {}, own-fold use rejected {rejected}, {elapsed:.1?}",
            out.diagnostics.fold_hygiene_ok
        ),
    );
}

#[test]
fn criterion_12_cli_golden_determinism() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_crossgee");
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let tmp = std::env::temp_dir().join("crossgee-acceptance");
    std::fs::create_dir_all(&tmp).unwrap();

    let strip = |text: &str| -> String {
        text.lines()
            .filter(|l| !l.contains("generated_at_unix"))
            .collect::<Vec<_>>()
            .join("\n")
    };

    let mut runs = Vec::new();
    for run_id in 0..2 {
        let out = tmp.join(format!("crossfit_{run_id}.json"));
        let status = std::process::Command::new(bin)
            .args([
                "crossfit",
                "--data",
                fixtures.join("crossfit_data.csv").to_str().unwrap(),
                "--config",
                fixtures.join("crossfit_config.json").to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        runs.push(std::fs::read_to_string(&out).unwrap());
    }
    let rerun_identical = strip(&runs[0]) == strip(&runs[1]);
    let golden =
        std::fs::read_to_string(fixtures.join("crossfit_expected.json")).unwrap();
    let golden_identical = strip(&runs[0]) == strip(&golden);

    // The golden run recovers the planted covariance coordinate (1-based 2)
    // in both folds.
    let parsed: serde_json::Value = serde_json::from_str(&runs[0]).unwrap();
    let folds = parsed["folds"].as_array().unwrap();
    let planted_ok = folds
        .iter()
        .all(|f| f["active_set"] == serde_json::json!([2]));
    let elapsed = start.elapsed();
    let pass = rerun_identical && golden_identical && planted_ok;
    report(
        12,
        "fixed-seed crossfit run reproduces the committed golden file",
        pass,
        format!(
            "rerun byte-identical {rerun_identical}, matches golden {golden_identical}, planted active set {planted_ok}, {elapsed:.1?}"
        ),
    );
}
