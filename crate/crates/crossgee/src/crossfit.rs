//! Two-fold cross-fitting workflow: split, initial fits under a working
//! covariance, per-fold screening and kernel covariance estimation, refits
//! on the opposite fold, and aggregation.
//!
//! Fold hygiene is the load-bearing invariant: the covariance model consumed
//! by fold `q'`'s refit must have been built exclusively from fold `q` data,
//! so that the estimated weights are independent of the responses they
//! weight. Models carry their training-unit provenance and the refit audits
//! it; the audit result is part of the output.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inference::{sandwich, SandwichCovariance, WaldReport};
use crate::kernel::{CovarianceModel, DEFAULT_JITTER_REL};
use crate::model::{residual, Dataset, IndexSet, ObservationBlock};
use crate::scalar::Scalar;
use crate::screening::{screen, ScreeningConfig, ScreeningResult};
use crate::solver::{
    fit_with_hbic, penalized_solve, ridge_init, CovarianceProvider, FitResult, ModelSpec,
    SolverConfig, WorkingCovariance,
};

/// Disjoint two-fold split of `{0..n-1}` with `|fold 1| = floor(n/2)`.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold(&self, q: u8) -> &[usize] {
        match q {
            1 => &self.idx1,
            2 => &self.idx2,
            _ => panic!("fold index must be 1 or 2"),
        }
    }

    pub fn n(&self) -> usize {
        self.idx1.len() + self.idx2.len()
    }
}

/// Uniform random partition, deterministic given the seed. Fold indices are
/// kept sorted so downstream iteration order is reproducible.
pub fn split(n: usize, seed: u64) -> Result<FoldPlan> {
    if n < 4 {
        return Err(Error::InvalidData(
            "cross-fitting needs at least 4 units".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let half = n / 2;
    let mut idx1 = perm[..half].to_vec();
    let mut idx2 = perm[half..].to_vec();
    idx1.sort_unstable();
    idx2.sort_unstable();
    Ok(FoldPlan { idx1, idx2, seed })
}

/// Rule for choosing the penalty level of a fit.
#[derive(Debug, Clone, Copy)]
pub enum LambdaRule<T> {
    /// Use this value as is.
    Fixed(T),
    /// `c * sqrt(log(max(p, 2)) / n)`, evaluated at the fitting sample size.
    RateScaled { c: T },
    /// High-dimensional BIC over a descending log-spaced grid.
    Hbic { grid_size: usize, min_ratio: T },
}

impl<T: Scalar> Default for LambdaRule<T> {
    fn default() -> Self {
        LambdaRule::Hbic {
            grid_size: 12,
            min_ratio: T::c(1e-2),
        }
    }
}

/// Kernel covariance knobs for the calibration step.
#[derive(Debug, Clone, Copy)]
pub struct KernelConfig<T> {
    /// Assumed Hoelder smoothness order in (0, 1].
    pub nu: T,
    /// Bandwidth constant multiplier.
    pub c_h: T,
    /// Relative eigenvalue floor of evaluated covariances.
    pub jitter_rel: T,
}

impl<T: Scalar> Default for KernelConfig<T> {
    fn default() -> Self {
        KernelConfig {
            nu: T::one(),
            c_h: T::one(),
            jitter_rel: T::c(DEFAULT_JITTER_REL),
        }
    }
}

/// Configuration of the whole cross-fitting pipeline.
#[derive(Debug, Clone)]
pub struct CrossFitConfig<T> {
    pub solver: SolverConfig<T>,
    pub screening: ScreeningConfig<T>,
    pub kernel: KernelConfig<T>,
    pub lambda: LambdaRule<T>,
    pub seed: u64,
}

impl<T: Scalar> Default for CrossFitConfig<T> {
    fn default() -> Self {
        CrossFitConfig {
            solver: SolverConfig::default(),
            screening: ScreeningConfig::default(),
            kernel: KernelConfig::default(),
            lambda: LambdaRule::default(),
            seed: 0,
        }
    }
}

/// Fit on one dataset with the penalty level resolved by the rule; the
/// working covariance defaults to identity for initial fits.
pub fn initial_fit<T: Scalar>(
    data: &Dataset<T>,
    spec: &ModelSpec<T>,
    cov: &WorkingCovariance<T>,
    cfg: &CrossFitConfig<T>,
) -> Result<FitResult<T>> {
    match cfg.lambda {
        LambdaRule::Fixed(lambda) => {
            let spec_l = spec.with_lambda(lambda);
            let init = ridge_init(data, &spec.link, cfg.solver.init_ridge);
            penalized_solve(data, &spec_l, cov, &cfg.solver, &init)
        }
        LambdaRule::RateScaled { c } => {
            let lambda =
                c * (T::c(data.p().max(2) as f64).ln() / T::c(data.n() as f64)).sqrt();
            let spec_l = spec.with_lambda(lambda);
            let init = ridge_init(data, &spec.link, cfg.solver.init_ridge);
            penalized_solve(data, &spec_l, cov, &cfg.solver, &init)
        }
        LambdaRule::Hbic {
            grid_size,
            min_ratio,
        } => Ok(fit_with_hbic(data, spec, cov, &cfg.solver, grid_size, min_ratio)?.result),
    }
}

/// Screening plus kernel covariance estimation on one fold: residuals from
/// the fold's own initial fit feed the active-set tests, and the model is
/// assembled from the fold's (covariate, residual-outer-product) pairs.
pub fn calibrate_fold<T: Scalar>(
    data: &Dataset<T>,
    plan: &FoldPlan,
    q: u8,
    fold_fit: &FitResult<T>,
    spec: &ModelSpec<T>,
    cfg: &CrossFitConfig<T>,
) -> Result<(ScreeningResult<T>, CovarianceModel<T>)> {
    let fold_ids = plan.fold(q);
    let fold_data = data.subset(fold_ids)?;
    let residuals: Vec<DVector<T>> = fold_data
        .blocks()
        .iter()
        .map(|b| residual(b, &fold_fit.beta.beta, &spec.link))
        .collect::<Result<Vec<_>>>()?;
    let screening = screen(&fold_data, &residuals, &cfg.screening)?;
    let model = CovarianceModel::from_residuals(
        data,
        fold_ids,
        &residuals,
        screening.union_set.clone(),
        cfg.kernel.nu,
        cfg.kernel.c_h,
        cfg.kernel.jitter_rel,
        q,
    )?;
    Ok((screening, model))
}

/// Provenance audit of a refit: the model must come from the complementary
/// fold and touch none of the refit fold's units.
pub fn audit_fold_hygiene<T: Scalar>(
    model: &CovarianceModel<T>,
    plan: &FoldPlan,
    q_prime: u8,
) -> Result<()> {
    let q = 3 - q_prime;
    if model.fold_id() != q {
        return Err(Error::InvalidConfig(format!(
            "refit on fold {q_prime} requires a covariance model from fold {q}, got fold {}",
            model.fold_id()
        )));
    }
    let own: std::collections::BTreeSet<usize> = plan.fold(q).iter().copied().collect();
    let other: std::collections::BTreeSet<usize> = plan.fold(q_prime).iter().copied().collect();
    for &u in model.training_units() {
        if other.contains(&u) || !own.contains(&u) {
            return Err(Error::InvalidConfig(format!(
                "covariance model for fold {q} contains unit {u} outside its fold"
            )));
        }
    }
    Ok(())
}

/// Refit on fold `q'` with the covariance model learned on the opposite
/// fold. The audit runs before any computation.
pub fn crossfit_refit<T: Scalar>(
    data: &Dataset<T>,
    plan: &FoldPlan,
    q_prime: u8,
    model: &CovarianceModel<T>,
    warm_start: Option<&DVector<T>>,
    spec: &ModelSpec<T>,
    cfg: &CrossFitConfig<T>,
) -> Result<FitResult<T>> {
    audit_fold_hygiene(model, plan, q_prime)?;
    let fold_data = data.subset(plan.fold(q_prime))?;
    let cov = WorkingCovariance::Estimated(model.clone());
    match (cfg.lambda, warm_start) {
        (LambdaRule::Hbic { grid_size, min_ratio }, _) => {
            Ok(fit_with_hbic(&fold_data, spec, &cov, &cfg.solver, grid_size, min_ratio)?.result)
        }
        (rule, warm) => {
            let lambda = match rule {
                LambdaRule::Fixed(l) => l,
                LambdaRule::RateScaled { c } => {
                    c * (T::c(fold_data.p().max(2) as f64).ln() / T::c(fold_data.n() as f64))
                        .sqrt()
                }
                LambdaRule::Hbic { .. } => unreachable!(),
            };
            let spec_l = spec.with_lambda(lambda);
            let init = match warm {
                Some(w) => w.clone(),
                None => ridge_init(&fold_data, &spec.link, cfg.solver.init_ridge),
            };
            penalized_solve(&fold_data, &spec_l, &cov, &cfg.solver, &init)
        }
    }
}

/// Coordinatewise mean of the two fold refits.
pub fn aggregate<T: Scalar>(beta1: &DVector<T>, beta2: &DVector<T>) -> Result<DVector<T>> {
    if beta1.len() != beta2.len() {
        return Err(Error::Dimension {
            context: "aggregate fold estimates",
            expected: beta1.len(),
            found: beta2.len(),
        });
    }
    Ok((beta1 + beta2) * T::c(0.5))
}

/// Per-unit covariance assignment for pooled sandwich estimation: each unit
/// is weighted by the covariance model learned on the opposite fold.
pub struct FoldMatchedCovariance<'a, T> {
    fold_of_unit: Vec<u8>,
    models: [&'a CovarianceModel<T>; 2],
}

impl<'a, T: Scalar> FoldMatchedCovariance<'a, T> {
    pub fn new(
        plan: &FoldPlan,
        model_fold1: &'a CovarianceModel<T>,
        model_fold2: &'a CovarianceModel<T>,
    ) -> Result<Self> {
        if model_fold1.fold_id() != 1 || model_fold2.fold_id() != 2 {
            return Err(Error::InvalidConfig(
                "fold-matched covariance needs models tagged fold 1 and fold 2".into(),
            ));
        }
        let n = plan.n();
        let mut fold_of_unit = vec![0u8; n];
        for &i in &plan.idx1 {
            fold_of_unit[i] = 1;
        }
        for &i in &plan.idx2 {
            fold_of_unit[i] = 2;
        }
        Ok(FoldMatchedCovariance {
            fold_of_unit,
            models: [model_fold1, model_fold2],
        })
    }
}

impl<'a, T: Scalar> CovarianceProvider<T> for FoldMatchedCovariance<'a, T> {
    fn inverse_for(&self, unit: usize, block: &ObservationBlock<T>) -> Result<DMatrix<T>> {
        let fold = *self.fold_of_unit.get(unit).ok_or(Error::Dimension {
            context: "FoldMatchedCovariance unit index",
            expected: self.fold_of_unit.len(),
            found: unit,
        })?;
        // Unit in fold q is weighted by the model trained on fold 3 - q.
        let model = self.models[(2 - fold) as usize];
        let z = block.vec_active(model.active_set());
        model.inverse_at(&z)
    }
}

/// Everything produced for one fold.
#[derive(Debug, Clone)]
pub struct FoldOutput<T> {
    pub initial: FitResult<T>,
    pub screening: ScreeningResult<T>,
    pub model: CovarianceModel<T>,
    pub refit: FitResult<T>,
}

/// Pipeline diagnostics.
#[derive(Debug, Clone)]
pub struct CrossFitDiagnostics {
    pub fold_hygiene_ok: bool,
    /// The two fold refits disagree on the support.
    pub support_disagreement: bool,
    /// Per fold: the screening came back empty and the covariance model
    /// degenerated to the pooled constant covariance.
    pub pooled_fallback: [bool; 2],
    pub all_converged: bool,
}

/// Cross-fitted estimation result.
#[derive(Debug, Clone)]
pub struct CrossFitResult<T> {
    /// Aggregated estimator: mean of the two fold refits.
    pub beta_hat: DVector<T>,
    /// Support of the aggregated estimator (zero-threshold applied to the
    /// average, union with the unpenalized set).
    pub support: IndexSet,
    pub plan: FoldPlan,
    /// Fold 1 output first, fold 2 second; `folds[q-1].refit` was computed
    /// on fold `3-q` ... no: `folds[q-1].refit` is the refit computed ON
    /// fold `q` USING the other fold's model.
    pub folds: [FoldOutput<T>; 2],
    pub sandwich: Option<SandwichCovariance<T>>,
    pub wald: Option<WaldReport<T>>,
    pub diagnostics: CrossFitDiagnostics,
}

/// Run the full two-fold pipeline. The fold pipelines run concurrently; the
/// aggregation and optional Wald step join them.
pub fn run<T: Scalar>(
    data: &Dataset<T>,
    spec: &ModelSpec<T>,
    cfg: &CrossFitConfig<T>,
) -> Result<CrossFitResult<T>> {
    spec.m_set.validate_within(data.p(), "crossfit m_set")?;
    let plan = split(data.n(), cfg.seed)?;

    // Per-fold initial fit and calibration, in parallel.
    let calibrate = |q: u8| -> Result<(FitResult<T>, ScreeningResult<T>, CovarianceModel<T>)> {
        let fold_data = data.subset(plan.fold(q))?;
        let fit = initial_fit(&fold_data, spec, &WorkingCovariance::Identity, cfg)?;
        let (screening, model) = calibrate_fold(data, &plan, q, &fit, spec, cfg)?;
        Ok((fit, screening, model))
    };
    let (cal1, cal2) = rayon::join(|| calibrate(1), || calibrate(2));
    let (fit1, screening1, model1) = cal1?;
    let (fit2, screening2, model2) = cal2?;

    // Cross-fitted refits: fold q' consumes the model from fold q.
    let (refit1, refit2) = rayon::join(
        || crossfit_refit(data, &plan, 1, &model2, Some(&fit1.beta.beta), spec, cfg),
        || crossfit_refit(data, &plan, 2, &model1, Some(&fit2.beta.beta), spec, cfg),
    );
    let refit1 = refit1?;
    let refit2 = refit2?;

    let beta_hat = aggregate(&refit1.beta.beta, &refit2.beta.beta)?;
    let mut support: Vec<usize> = spec.m_set.iter().collect();
    for j in 0..data.p() {
        if !spec.m_set.contains(j) && beta_hat[j].abs() >= cfg.solver.zero_threshold {
            support.push(j);
        }
    }
    let support = IndexSet::new(support);
    let support_disagreement = refit1.beta.support != refit2.beta.support;

    // Audits already ran inside crossfit_refit; re-check for the report.
    let hygiene1 = audit_fold_hygiene(&model2, &plan, 1).is_ok();
    let hygiene2 = audit_fold_hygiene(&model1, &plan, 2).is_ok();

    // Pooled fold-matched sandwich on the aggregated support, plus the Wald
    // test when a hypothesis is attached.
    let provider = FoldMatchedCovariance::new(&plan, &model1, &model2)?;
    let sandwich_result = sandwich(data, &beta_hat, &spec.link, &provider, &support)?;
    let wald = match &spec.hypothesis {
        Some(hyp) => {
            let beta_m = DVector::from_fn(spec.m_set.len(), |c, _| {
                beta_hat[spec.m_set.as_slice()[c]]
            });
            let omega_m = sandwich_result.omega_block(&spec.m_set)?;
            Some(crate::inference::wald(&beta_m, hyp, &omega_m, data.n())?)
        }
        None => None,
    };

    let diagnostics = CrossFitDiagnostics {
        fold_hygiene_ok: hygiene1 && hygiene2,
        support_disagreement,
        pooled_fallback: [model1.is_pooled_fallback(), model2.is_pooled_fallback()],
        all_converged: fit1.converged && fit2.converged && refit1.converged && refit2.converged,
    };
    Ok(CrossFitResult {
        beta_hat,
        support,
        plan,
        folds: [
            FoldOutput {
                initial: fit1,
                screening: screening1,
                model: model1,
                refit: refit1,
            },
            FoldOutput {
                initial: fit2,
                screening: screening2,
                model: model2,
                refit: refit2,
            },
        ],
        sandwich: Some(sandwich_result),
        wald,
        diagnostics,
    })
}
