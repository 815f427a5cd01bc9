//! JSON report documents. Field order is fixed by struct declaration, so a
//! rerun with the same inputs and seed is byte-identical except for the
//! single `generated_at_unix` field.

use serde::Serialize;

use crossgee::crossfit::CrossFitResult;
use crossgee::inference::{PowerComparison, WaldReport};
use crossgee::model::IndexSet;
use crossgee::solver::FitResult;

pub fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn one_based(set: &IndexSet) -> Vec<usize> {
    set.iter().map(|j| j + 1).collect()
}

#[derive(Serialize)]
pub struct FitReport {
    pub generated_at_unix: u64,
    pub command: &'static str,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_update_norm: f64,
    pub equation_norm_on_support: f64,
    pub kkt_excess_off_support: f64,
    pub coefficients: Vec<f64>,
    pub support: Vec<usize>,
    pub m_set: Vec<usize>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn from_fit(
        fit: &FitResult<f64>,
        dims: (usize, usize, usize),
        seed: u64,
        warnings: Vec<String>,
    ) -> Self {
        FitReport {
            generated_at_unix: timestamp(),
            command: "fit",
            seed,
            n: dims.0,
            p: dims.1,
            l: dims.2,
            lambda: fit.lambda,
            converged: fit.converged,
            iterations: fit.iterations,
            final_update_norm: fit.final_update_norm,
            equation_norm_on_support: fit.equation_norm_on_support,
            kkt_excess_off_support: fit.kkt_excess_off_support,
            coefficients: fit.beta.beta.iter().copied().collect(),
            support: one_based(&fit.beta.support),
            m_set: one_based(&fit.beta.m_set),
            warnings,
        }
    }
}

#[derive(Serialize)]
pub struct ScreenReport {
    pub generated_at_unix: u64,
    pub command: &'static str,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub initial_lambda: f64,
    pub initial_converged: bool,
    pub critical_value: f64,
    pub w_stats: Vec<Vec<f64>>,
    pub active_sets: Vec<Vec<usize>>,
    pub union_active_set: Vec<usize>,
    pub flagged: Vec<(usize, usize)>,
}

#[derive(Serialize)]
pub struct WaldSection {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub noncentrality: f64,
}

impl WaldSection {
    pub fn from_report(w: &WaldReport<f64>) -> Self {
        WaldSection {
            statistic: w.statistic,
            df: w.df,
            p_value: w.p_value,
            noncentrality: w.noncentrality,
        }
    }
}

#[derive(Serialize)]
pub struct FoldSection {
    pub fold: u8,
    pub units: usize,
    pub lambda_initial: f64,
    pub initial_converged: bool,
    pub active_set: Vec<usize>,
    pub screening_critical_value: f64,
    pub bandwidth: f64,
    pub pooled_fallback: bool,
    pub lambda_refit: f64,
    pub refit_converged: bool,
}

#[derive(Serialize)]
pub struct CrossfitReport {
    pub generated_at_unix: u64,
    pub command: &'static str,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub folds: Vec<FoldSection>,
    pub beta_hat: Vec<f64>,
    pub support: Vec<usize>,
    pub m_set: Vec<usize>,
    pub fold_hygiene_ok: bool,
    pub support_disagreement: bool,
    pub all_converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wald: Option<WaldSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_comparison: Option<PowerSection>,
}

#[derive(Serialize)]
pub struct PowerSection {
    pub level: f64,
    pub drift: Vec<f64>,
    pub delta_crossfit: f64,
    pub delta_independence: f64,
    pub power_crossfit: f64,
    pub power_independence: f64,
    pub dominance: bool,
}

impl PowerSection {
    pub fn from_comparison(cmp: &PowerComparison<f64>, level: f64, drift: Vec<f64>) -> Self {
        PowerSection {
            level,
            drift,
            delta_crossfit: cmp.delta_crossfit,
            delta_independence: cmp.delta_initial,
            power_crossfit: cmp.power_crossfit,
            power_independence: cmp.power_initial,
            dominance: cmp.dominance,
        }
    }
}

impl CrossfitReport {
    pub fn from_result(
        command: &'static str,
        out: &CrossFitResult<f64>,
        dims: (usize, usize, usize),
        m_set: &IndexSet,
        seed: u64,
    ) -> Self {
        let folds = out
            .folds
            .iter()
            .enumerate()
            .map(|(i, f)| FoldSection {
                fold: (i + 1) as u8,
                units: out.plan.fold((i + 1) as u8).len(),
                lambda_initial: f.initial.lambda,
                initial_converged: f.initial.converged,
                active_set: one_based(f.model.active_set()),
                screening_critical_value: f.screening.critical_value,
                bandwidth: f.model.bandwidth(),
                pooled_fallback: f.model.is_pooled_fallback(),
                lambda_refit: f.refit.lambda,
                refit_converged: f.refit.converged,
            })
            .collect();
        CrossfitReport {
            generated_at_unix: timestamp(),
            command,
            seed,
            n: dims.0,
            p: dims.1,
            l: dims.2,
            folds,
            beta_hat: out.beta_hat.iter().copied().collect(),
            support: one_based(&out.support),
            m_set: one_based(m_set),
            fold_hygiene_ok: out.diagnostics.fold_hygiene_ok,
            support_disagreement: out.diagnostics.support_disagreement,
            all_converged: out.diagnostics.all_converged,
            wald: out.wald.as_ref().map(WaldSection::from_report),
            power_comparison: None,
        }
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializable");
    s.push('\n');
    s
}
