//! Regenerates the committed test fixtures under `tests/fixtures/`.
//! Inputs only; the expected JSON outputs are produced by running the
//! built binary on these inputs (see tests/cli.rs for the invocations).

use nalgebra::{DMatrix, DVector};

use crossgee::crossfit::{KernelConfig, LambdaRule};
use crossgee::model::{Dataset, IndexSet, LinkFunction};
use crossgee::sim::{generate, rep_rng, CovFamily, ScenarioConfig};

fn dataset_csv(data: &Dataset<f64>) -> String {
    let p = data.p();
    let mut out = String::from("unit_id,k,y");
    for j in 1..=p {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (i, block) in data.blocks().iter().enumerate() {
        for k in 0..data.l() {
            out.push_str(&format!("{},{},{}", i + 1, k + 1, block.y()[k]));
            for j in 0..p {
                out.push_str(&format!(",{}", block.x()[(j, k)]));
            }
            out.push('\n');
        }
    }
    out
}

fn main() {
    let dir = std::path::Path::new("crates/crossgee-cli/tests/fixtures");
    std::fs::create_dir_all(dir).unwrap();

    // Small homoscedastic dataset for the lambda = 0 least-squares oracle.
    let fit_cfg = ScenarioConfig {
        n: 40,
        p: 5,
        l: 2,
        s: 2,
        m: 1,
        link: LinkFunction::Identity,
        family: CovFamily::Homoscedastic { sigma: 0.4 },
        active: IndexSet::empty(),
        signal: 1.0,
        m_value: 0.5,
        drift: vec![],
        bounded_errors: false,
        seed: 71,
        replications: 1,
        lambda: LambdaRule::Fixed(0.0),
        kernel: KernelConfig::default(),
        level: 0.05,
    };
    let mut rng = rep_rng(fit_cfg.seed, 0, 0);
    let (fit_data, _) = generate(&fit_cfg, &mut rng).unwrap();
    std::fs::write(dir.join("fit_small.csv"), dataset_csv(&fit_data)).unwrap();
    std::fs::write(
        dir.join("fit_config.json"),
        r#"{
  "model": {
    "link": "identity",
    "m_set": [1, 2, 3, 4, 5],
    "lambda": { "rule": "fixed", "value": 0.0 }
  },
  "seed": 7
}
"#,
    )
    .unwrap();

    // Independent least-squares oracle: stacked normal equations.
    let p = fit_data.p();
    let mut g = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for block in fit_data.blocks() {
        for k in 0..fit_data.l() {
            let xk = block.x().column(k).into_owned();
            g.ger(1.0, &xk, &xk, 1.0);
            b.axpy(block.y()[k], &xk, 1.0);
        }
    }
    let ols = g.lu().solve(&b).unwrap();
    let oracle = serde_json::json!({
        "method": "stacked normal equations",
        "coefficients": ols.iter().copied().collect::<Vec<f64>>(),
    });
    std::fs::write(
        dir.join("fit_oracle.json"),
        serde_json::to_string_pretty(&oracle).unwrap() + "\n",
    )
    .unwrap();

    // Heteroscedastic scenario for the cross-fitting golden run: variance
    // driven by covariate 2 (1-based), strong signal so both folds detect it.
    let cf_cfg = ScenarioConfig {
        n: 160,
        p: 6,
        l: 2,
        s: 2,
        m: 1,
        link: LinkFunction::Identity,
        family: CovFamily::DiagExp { scale: 3.0 },
        active: IndexSet::new(vec![1]),
        signal: 1.0,
        m_value: 0.5,
        drift: vec![],
        bounded_errors: false,
        seed: 424,
        replications: 1,
        lambda: LambdaRule::RateScaled { c: 1.6 },
        kernel: KernelConfig::default(),
        level: 0.05,
    };
    let mut rng = rep_rng(cf_cfg.seed, 0, 0);
    let (cf_data, truth) = generate(&cf_cfg, &mut rng).unwrap();
    eprintln!(
        "crossfit fixture: signal set {:?}, active {:?}",
        truth.signal_set.as_slice(),
        truth.active.as_slice()
    );
    std::fs::write(dir.join("crossfit_data.csv"), dataset_csv(&cf_data)).unwrap();
    std::fs::write(
        dir.join("crossfit_config.json"),
        r#"{
  "model": {
    "link": "identity",
    "penalty": { "kind": "scad" },
    "m_set": [1],
    "lambda": { "rule": "rate_scaled", "c": 1.6 }
  },
  "kernel": { "c_h": 2.0 },
  "hypothesis": { "c": [[1.0]], "t": [0.5] },
  "seed": 11
}
"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("test_config.json"),
        r#"{
  "model": {
    "link": "identity",
    "penalty": { "kind": "scad" },
    "m_set": [1],
    "lambda": { "rule": "rate_scaled", "c": 1.6 }
  },
  "kernel": { "c_h": 2.0 },
  "hypothesis": { "c": [[1.0]], "t": [0.5], "drift": [2.0], "level": 0.05 },
  "seed": 11
}
"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("sim_scenario.json"),
        r#"{
  "experiment": "rate",
  "n": 60,
  "p": 6,
  "l": 2,
  "s": 2,
  "m": 1,
  "link": "identity",
  "family": { "kind": "diag_exp", "scale": 1.0 },
  "active": [3],
  "signal": 1.0,
  "m_value": 0.5,
  "seed": 5,
  "replications": 10,
  "lambda": { "rule": "rate_scaled", "c": 1.6 }
}
"#,
    )
    .unwrap();
    eprintln!("fixtures written to {}", dir.display());
}
