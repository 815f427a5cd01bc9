//! Command-line interface: fit models on CSV data, run the screening and
//! cross-fitting pipelines, test linear hypotheses, and launch simulation
//! experiments from scenario files.
//!
//! Exit codes: 0 success, 2 input/schema error, 3 numerical failure.

mod config;
mod data;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use crossgee::crossfit;
use crossgee::inference::{power_compare, sandwich, wald};
use crossgee::model::{residual, Dataset, DEFAULT_NORM_BOUND};
use crossgee::screening::screen;
use crossgee::sim;
use crossgee::solver::WorkingCovariance;

use config::{RunConfig, ScenarioFile};
use report::{
    to_json_pretty, CrossfitReport, FitReport, PowerSection, ScreenReport, WaldSection,
};

#[derive(Parser)]
#[command(
    name = "crossgee",
    about = "Penalized estimating equations with cross-fitted covariance calibration",
    version
)]
struct Cli {
    /// Worker threads for parallel sections (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single penalized fit under working independence.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Covariance active-set screening on residuals of an initial fit.
    Screen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full two-fold cross-fitting pipeline (plus Wald test when the config
    /// carries a hypothesis).
    Crossfit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-fitted Wald test with the working-independence comparator;
    /// requires a hypothesis in the config.
    Test {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo experiment from a scenario file; writes
    /// metrics.csv and summary.json into the output directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the replication count from the scenario file.
        #[arg(long)]
        reps: Option<usize>,
    },
}

enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => m,
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn core_err(e: crossgee::Error) -> CliError {
    use crossgee::Error::*;
    match e {
        Dimension { .. } | InvalidConfig(_) | InvalidData(_) => CliError::Input(e.to_string()),
        Singular(_) | NonConvergence { .. } | Degenerate(_) => {
            CliError::Numerical(e.to_string())
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                CliError::Numerical(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    std::fs::write(path, content)
        .map_err(|e| CliError::Numerical(format!("cannot write {}: {e}", path.display())))
}

fn load_inputs(
    data_path: &Path,
    config_path: &Path,
) -> Result<(Dataset<f64>, RunConfig), CliError> {
    let csv = read_to_string(data_path)?;
    let dataset = data::parse_dataset(&csv).map_err(input_err)?;
    let cfg_text = read_to_string(config_path)?;
    let cfg = RunConfig::parse(&cfg_text).map_err(input_err)?;
    Ok((dataset, cfg))
}

fn cmd_fit(
    data_path: &Path,
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<bool, CliError> {
    let (dataset, cfg) = load_inputs(data_path, config_path)?;
    let spec = cfg.model_spec(dataset.p()).map_err(input_err)?;
    let ccfg = cfg.crossfit_config(seed).map_err(input_err)?;
    let warnings = dataset.norm_warnings(DEFAULT_NORM_BOUND);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let fit = crossfit::initial_fit(&dataset, &spec, &WorkingCovariance::Identity, &ccfg)
        .map_err(core_err)?;
    let dims = (dataset.n(), dataset.p(), dataset.l());
    let report = FitReport::from_fit(&fit, dims, ccfg.seed, warnings);
    write_output(out, &to_json_pretty(&report))?;
    Ok(fit.converged)
}

fn cmd_screen(
    data_path: &Path,
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<bool, CliError> {
    let (dataset, cfg) = load_inputs(data_path, config_path)?;
    let spec = cfg.model_spec(dataset.p()).map_err(input_err)?;
    let ccfg = cfg.crossfit_config(seed).map_err(input_err)?;
    let fit = crossfit::initial_fit(&dataset, &spec, &WorkingCovariance::Identity, &ccfg)
        .map_err(core_err)?;
    let residuals: Vec<DVector<f64>> = dataset
        .blocks()
        .iter()
        .map(|b| residual(b, &fit.beta.beta, &spec.link))
        .collect::<crossgee::Result<Vec<_>>>()
        .map_err(core_err)?;
    let result = screen(&dataset, &residuals, &ccfg.screening).map_err(core_err)?;
    let report = ScreenReport {
        generated_at_unix: report::timestamp(),
        command: "screen",
        seed: ccfg.seed,
        n: dataset.n(),
        p: dataset.p(),
        l: dataset.l(),
        initial_lambda: fit.lambda,
        initial_converged: fit.converged,
        critical_value: result.critical_value,
        w_stats: (0..dataset.l())
            .map(|k| (0..dataset.p()).map(|j| result.w_stats[(k, j)]).collect())
            .collect(),
        active_sets: result
            .active_sets
            .iter()
            .map(|s| s.iter().map(|j| j + 1).collect())
            .collect(),
        union_active_set: result.union_set.iter().map(|j| j + 1).collect(),
        flagged: result.flagged.clone(),
    };
    write_output(out, &to_json_pretty(&report))?;
    Ok(fit.converged)
}

fn run_crossfit(
    data_path: &Path,
    config_path: &Path,
    seed: Option<u64>,
    command: &'static str,
    require_hypothesis: bool,
) -> Result<(CrossfitReport, bool), CliError> {
    let (dataset, cfg) = load_inputs(data_path, config_path)?;
    let spec = cfg.model_spec(dataset.p()).map_err(input_err)?;
    if require_hypothesis && spec.hypothesis.is_none() {
        return Err(CliError::Input(
            "the test command needs a 'hypothesis' section in the config".into(),
        ));
    }
    let ccfg = cfg.crossfit_config(seed).map_err(input_err)?;
    let out = crossfit::run(&dataset, &spec, &ccfg).map_err(core_err)?;
    let dims = (dataset.n(), dataset.p(), dataset.l());
    let mut report = CrossfitReport::from_result(command, &out, dims, &spec.m_set, ccfg.seed);

    // Power comparison against the working-independence fit when a drift is
    // supplied alongside the hypothesis.
    if let (Some(hyp_cfg), Some(hyp)) = (&cfg.hypothesis, &spec.hypothesis) {
        if let Some(drift) = &hyp_cfg.drift {
            if drift.len() != hyp.r() {
                return Err(CliError::Input(format!(
                    "drift length {} does not match hypothesis rank {}",
                    drift.len(),
                    hyp.r()
                )));
            }
            let level = hyp_cfg.level.unwrap_or(0.05);
            let sw_cf = out
                .sandwich
                .as_ref()
                .ok_or_else(|| CliError::Numerical("missing sandwich".into()))?;
            let omega_cf = sw_cf.omega_block(&spec.m_set).map_err(core_err)?;
            let ind_fit =
                crossfit::initial_fit(&dataset, &spec, &WorkingCovariance::Identity, &ccfg)
                    .map_err(core_err)?;
            let support = ind_fit.beta.support.union(&spec.m_set);
            let sw_ind = sandwich(
                &dataset,
                &ind_fit.beta.beta,
                &spec.link,
                &WorkingCovariance::Identity,
                &support,
            )
            .map_err(core_err)?;
            let omega_ind = sw_ind.omega_block(&spec.m_set).map_err(core_err)?;
            let drift_v = DVector::from_vec(drift.clone());
            let cmp = power_compare(&omega_cf, &omega_ind, &hyp.c, &drift_v, level)
                .map_err(core_err)?;
            report.power_comparison =
                Some(PowerSection::from_comparison(&cmp, level, drift.clone()));

            // Also report the comparator's own Wald test if the pipeline
            // produced none of its own.
            if report.wald.is_none() {
                let beta_m = DVector::from_fn(spec.m_set.len(), |c, _| {
                    ind_fit.beta.beta[spec.m_set.as_slice()[c]]
                });
                let w_ind = wald(&beta_m, hyp, &omega_ind, dataset.n()).map_err(core_err)?;
                report.wald = Some(WaldSection::from_report(&w_ind));
            }
        }
    }
    let ok = out.diagnostics.all_converged;
    Ok((report, ok))
}

fn cmd_simulate(
    config_path: &Path,
    out_dir: &Path,
    reps: Option<usize>,
    seed: Option<u64>,
) -> Result<bool, CliError> {
    let text = read_to_string(config_path)?;
    let file = ScenarioFile::parse(&text).map_err(input_err)?;
    let name = file.experiment().map_err(input_err)?;
    let scenario = file.to_scenario(seed).map_err(input_err)?;
    let report = sim::run_experiment(name, &scenario, reps.unwrap_or(0)).map_err(core_err)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Numerical(format!("cannot create {}: {e}", out_dir.display())))?;
    write_output(&out_dir.join("metrics.csv"), &report.to_csv())?;
    let mut summary = report.summary_json();
    summary.push('\n');
    write_output(&out_dir.join("summary.json"), &summary)?;
    let failures = report.rows.iter().filter(|r| !r.ok).count();
    if failures > 0 {
        eprintln!(
            "warning: {failures}/{} replications failed",
            report.rows.len()
        );
    }
    Ok(failures == 0)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .map_err(|e| CliError::Input(format!("cannot configure threads: {e}")))?;
    }
    match &cli.command {
        Command::Fit { data, config, out } => cmd_fit(data, config, out, cli.seed),
        Command::Screen { data, config, out } => cmd_screen(data, config, out, cli.seed),
        Command::Crossfit { data, config, out } => {
            let (report, ok) = run_crossfit(data, config, cli.seed, "crossfit", false)?;
            write_output(out, &to_json_pretty(&report))?;
            Ok(ok)
        }
        Command::Test { data, config, out } => {
            let (report, ok) = run_crossfit(data, config, cli.seed, "test", true)?;
            write_output(out, &to_json_pretty(&report))?;
            Ok(ok)
        }
        Command::Simulate { config, out, reps } => cmd_simulate(config, out, *reps, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: solver did not converge (see report diagnostics)");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
