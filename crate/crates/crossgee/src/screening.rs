//! Covariance active-set selection via decorrelated score chi-squared tests
//! on basis-transformed squared residuals.
//!
//! For each measurement `k` and candidate coordinate `j`, the statistic
//! couples two lasso residualizations: the basis responses `f_v(r_k^2)`
//! regressed on all covariates (`theta` fits, one per basis index), and the
//! coordinate `x_j` regressed on the remaining covariates (`gamma` fit).
//! Their per-unit products `S_i = e_x(i) * e_f(i)` behave like mean-zero
//! scores when `j` carries no covariance signal, so
//! `W = S_bar' Omega^{-1} S_bar` is asymptotically `chi2_h` under the null
//! and detects coordinates whose basis projections are nonzero. Coordinates
//! with `W >= chi2_h(1 - alpha/p)` enter the active set; the overall set is
//! the union over measurements.
//!
//! All lasso fits for one measurement share a single Gram matrix, so a full
//! screen costs one `O(n p^2)` pass plus Gram-space coordinate descent.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::chi2::chi2_quantile;
use crate::error::{Error, Result};
use crate::lasso::bic_path_gram;
use crate::model::{Dataset, IndexSet};
use crate::scalar::Scalar;

/// Fixed family of basis transforms applied to squared residuals.
#[derive(Clone)]
pub struct BasisFamily<T> {
    evaluators: Vec<Arc<dyn Fn(T) -> T + Send + Sync>>,
}

impl<T> fmt::Debug for BasisFamily<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BasisFamily(h={})", self.evaluators.len())
    }
}

impl<T: Scalar> BasisFamily<T> {
    /// Polynomial moments `f_v(u) = u^v`, `v = 1..h`.
    pub fn polynomial(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::InvalidConfig("basis count must be >= 1".into()));
        }
        let evaluators = (1..=h)
            .map(|v| {
                let f: Arc<dyn Fn(T) -> T + Send + Sync> =
                    Arc::new(move |u: T| u.powi(v as i32));
                f
            })
            .collect();
        Ok(BasisFamily { evaluators })
    }

    pub fn from_evaluators(evaluators: Vec<Arc<dyn Fn(T) -> T + Send + Sync>>) -> Result<Self> {
        if evaluators.is_empty() {
            return Err(Error::InvalidConfig("basis count must be >= 1".into()));
        }
        Ok(BasisFamily { evaluators })
    }

    pub fn count(&self) -> usize {
        self.evaluators.len()
    }

    pub fn evaluate(&self, v: usize, u: T) -> T {
        (self.evaluators[v])(u)
    }
}

/// How the per-test level scales with the dimension.
#[derive(Debug, Clone, Copy)]
pub enum AlphaMode<T> {
    /// Use `alpha` itself, Bonferroni-split over the `p` candidates.
    Bonferroni,
    /// Theory scaling `alpha_p = p^{-c}`, split over the `p` candidates.
    PowerLaw { c: T },
}

#[derive(Debug, Clone)]
pub struct ScreeningConfig<T> {
    pub basis: BasisFamily<T>,
    pub alpha: T,
    pub alpha_mode: AlphaMode<T>,
    pub lambda_grid: usize,
    pub lambda_min_ratio: T,
    pub lasso_tol: T,
    pub lasso_max_sweeps: usize,
}

impl<T: Scalar> Default for ScreeningConfig<T> {
    fn default() -> Self {
        ScreeningConfig {
            basis: BasisFamily::polynomial(3).expect("h >= 1"),
            alpha: T::c(0.05),
            alpha_mode: AlphaMode::Bonferroni,
            lambda_grid: 50,
            lambda_min_ratio: T::c(1e-3),
            lasso_tol: T::c(1e-8),
            lasso_max_sweeps: 2_000,
        }
    }
}

/// Basis regressions of one measurement: standardized responses and the
/// per-basis lasso coefficients on that standardized scale.
#[derive(Debug, Clone)]
pub struct BasisRegressions<T> {
    /// `n × h` matrix of standardized basis responses.
    pub responses: DMatrix<T>,
    /// One coefficient vector of length `p` per basis index.
    pub theta: Vec<DVector<T>>,
}

/// One decorrelated score statistic with its degradation flags.
#[derive(Debug, Clone, Copy)]
pub struct ScoreOutcome<T> {
    pub w: T,
    /// All scores were identically zero; `w` is reported as 0.
    pub degenerate: bool,
    /// The score covariance needed diagonal jitter before inversion.
    pub jittered: bool,
}

/// Screening output for one dataset (Algorithm steps for one fold).
#[derive(Debug, Clone)]
pub struct ScreeningResult<T> {
    /// `l × p` matrix of test statistics.
    pub w_stats: DMatrix<T>,
    pub theta_hats: Vec<BasisRegressions<T>>,
    /// `gamma_hats[k][j]`: decorrelation coefficients of length `p - 1`.
    pub gamma_hats: Vec<Vec<DVector<T>>>,
    pub critical_value: T,
    pub active_sets: Vec<IndexSet>,
    pub union_set: IndexSet,
    /// `(k, j)` pairs whose statistic degenerated or needed jitter.
    pub flagged: Vec<(usize, usize)>,
}

/// Design matrix of measurement `k`: row `i` is `x_{ik}'`.
fn design_for_measurement<T: Scalar>(data: &Dataset<T>, k: usize) -> DMatrix<T> {
    DMatrix::from_fn(data.n(), data.p(), |i, j| data.block(i).x()[(j, k)])
}

/// Center and unit-scale a vector; an (almost) constant vector becomes zero.
fn standardize<T: Scalar>(v: &DVector<T>) -> DVector<T> {
    let n = v.len();
    let nf = T::c(n as f64);
    let mean = v.sum() / nf;
    let centered = v.map(|x| x - mean);
    let sd = (centered.norm_squared() / nf).sqrt();
    if sd > T::c(1e-12) {
        centered / sd
    } else {
        DVector::zeros(n)
    }
}

/// Lasso fits of the standardized basis responses `f_v(r_k^2)` on the
/// covariates of measurement `k`.
pub fn fit_basis_regressions<T: Scalar>(
    data: &Dataset<T>,
    residuals: &[DVector<T>],
    basis: &BasisFamily<T>,
    k: usize,
    cfg: &ScreeningConfig<T>,
) -> Result<BasisRegressions<T>> {
    if residuals.len() != data.n() {
        return Err(Error::Dimension {
            context: "fit_basis_regressions residuals",
            expected: data.n(),
            found: residuals.len(),
        });
    }
    let xk = design_for_measurement(data, k);
    let nf = T::c(data.n() as f64);
    let gram = xk.tr_mul(&xk) / nf;
    fit_basis_regressions_gram(&xk, &gram, residuals, basis, k, cfg)
}

fn fit_basis_regressions_gram<T: Scalar>(
    xk: &DMatrix<T>,
    gram: &DMatrix<T>,
    residuals: &[DVector<T>],
    basis: &BasisFamily<T>,
    k: usize,
    cfg: &ScreeningConfig<T>,
) -> Result<BasisRegressions<T>> {
    let n = xk.nrows();
    let nf = T::c(n as f64);
    let h = basis.count();
    let mut responses = DMatrix::zeros(n, h);
    let raw = DVector::from_fn(n, |i, _| {
        let r = residuals[i][k];
        r * r
    });
    for v in 0..h {
        let col = standardize(&raw.map(|u| basis.evaluate(v, u)));
        responses.set_column(v, &col);
    }
    let mut theta = Vec::with_capacity(h);
    for v in 0..h {
        let b = responses.column(v).into_owned();
        let xty = xk.tr_mul(&b) / nf;
        let yty = b.norm_squared() / nf;
        let pick = bic_path_gram(
            gram,
            &xty,
            yty,
            n,
            cfg.lambda_grid,
            cfg.lambda_min_ratio,
            cfg.lasso_tol,
            cfg.lasso_max_sweeps,
        )?;
        theta.push(pick.coef);
    }
    Ok(BasisRegressions { responses, theta })
}

/// Lasso regression of coordinate `j` of measurement `k` on the remaining
/// covariates; the coefficient vector lives in `R^{p-1}` (coordinate `j`
/// removed).
pub fn fit_decorrelation<T: Scalar>(
    data: &Dataset<T>,
    k: usize,
    j: usize,
    cfg: &ScreeningConfig<T>,
) -> Result<DVector<T>> {
    if data.p() < 2 {
        return Err(Error::InvalidConfig("decorrelation needs p >= 2".into()));
    }
    let xk = design_for_measurement(data, k);
    let nf = T::c(data.n() as f64);
    let gram = xk.tr_mul(&xk) / nf;
    fit_decorrelation_gram(&gram, data.n(), j, cfg)
}

fn fit_decorrelation_gram<T: Scalar>(
    gram: &DMatrix<T>,
    n: usize,
    j: usize,
    cfg: &ScreeningConfig<T>,
) -> Result<DVector<T>> {
    let p = gram.ncols();
    let keep: Vec<usize> = (0..p).filter(|&m| m != j).collect();
    let sub = DMatrix::from_fn(p - 1, p - 1, |a, b| gram[(keep[a], keep[b])]);
    let xty = DVector::from_fn(p - 1, |a, _| gram[(keep[a], j)]);
    let pick = bic_path_gram(
        &sub,
        &xty,
        gram[(j, j)],
        n,
        cfg.lambda_grid,
        cfg.lambda_min_ratio,
        cfg.lasso_tol,
        cfg.lasso_max_sweeps,
    )?;
    Ok(pick.coef)
}

/// Decorrelated score statistic for coordinate `j` of measurement `k`.
///
/// `xk` is the `n × p` design of the measurement, `fits` the basis
/// regressions (standardized responses plus `theta` coefficients), and
/// `gamma` the decorrelation fit of coordinate `j`. The `theta` plug-in
/// removes coordinate `j`'s own contribution rather than refitting.
pub fn score_statistic<T: Scalar>(
    xk: &DMatrix<T>,
    fits: &BasisRegressions<T>,
    gamma: &DVector<T>,
    j: usize,
) -> Result<ScoreOutcome<T>> {
    let n = xk.nrows();
    let p = xk.ncols();
    let h = fits.theta.len();
    if gamma.len() != p - 1 {
        return Err(Error::Dimension {
            context: "score_statistic gamma",
            expected: p - 1,
            found: gamma.len(),
        });
    }
    let nf = T::c(n as f64);

    // e_x = x_j - X_{-j} gamma.
    let col_j = xk.column(j).into_owned();
    let mut gamma_pad = DVector::zeros(p);
    let mut idx = 0usize;
    for m in 0..p {
        if m != j {
            gamma_pad[m] = gamma[idx];
            idx += 1;
        }
    }
    let e_x = &col_j - xk * gamma_pad;

    // e_f^v = b_v - X theta_v + x_j theta_v[j]  (coordinate j removed).
    let mut scores = DMatrix::zeros(n, h);
    for v in 0..h {
        let b = fits.responses.column(v);
        let fitted = xk * &fits.theta[v];
        for i in 0..n {
            let e_f = b[i] - fitted[i] + col_j[i] * fits.theta[v][j];
            scores[(i, v)] = e_x[i] * e_f;
        }
    }

    // S_bar = n^{-1/2} sum_i S_i, Omega = n^{-1} sum_i S_i S_i'.
    let mut s_bar = DVector::zeros(h);
    let mut omega = DMatrix::zeros(h, h);
    for i in 0..n {
        let row = scores.row(i).transpose();
        s_bar += &row;
        omega.ger(T::one() / nf, &row, &row, T::one());
    }
    s_bar /= nf.sqrt();

    if omega.norm() == T::zero() {
        return Ok(ScoreOutcome {
            w: T::zero(),
            degenerate: true,
            jittered: false,
        });
    }

    // Invert with escalating jitter if needed.
    let mut jittered = false;
    let mut ridge = omega.trace().max(T::c(1e-300)) / T::c(h as f64) * T::c(1e-10);
    for _ in 0..6 {
        if let Some(chol) = omega.clone().cholesky() {
            let w = s_bar.dot(&chol.solve(&s_bar)).max(T::zero());
            return Ok(ScoreOutcome {
                w,
                degenerate: false,
                jittered,
            });
        }
        for d in 0..h {
            omega[(d, d)] += ridge;
        }
        ridge *= T::c(100.0);
        jittered = true;
    }
    Err(Error::Singular("score statistic Omega"))
}

/// Critical value `t0`: the `(1 - alpha/p)` quantile of `chi2_h`.
pub fn critical_value<T: Scalar>(h: usize, p: usize, alpha: T) -> Result<T> {
    if p == 0 {
        return Err(Error::InvalidConfig("critical_value needs p >= 1".into()));
    }
    if alpha <= T::zero() || alpha >= T::one() {
        return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    chi2_quantile(T::one() - alpha / T::c(p as f64), h)
}

/// Threshold the statistics: per-measurement sets and their union.
pub fn select_active_set<T: Scalar>(w_stats: &DMatrix<T>, t0: T) -> (Vec<IndexSet>, IndexSet) {
    let l = w_stats.nrows();
    let p = w_stats.ncols();
    let mut active_sets = Vec::with_capacity(l);
    let mut union = Vec::new();
    for k in 0..l {
        let set: Vec<usize> = (0..p).filter(|&j| w_stats[(k, j)] >= t0).collect();
        union.extend_from_slice(&set);
        active_sets.push(IndexSet::new(set));
    }
    (active_sets, IndexSet::new(union))
}

/// Run the full screening pass on one dataset (typically one fold), given
/// per-unit residuals from an initial fit.
pub fn screen<T: Scalar>(
    data: &Dataset<T>,
    residuals: &[DVector<T>],
    cfg: &ScreeningConfig<T>,
) -> Result<ScreeningResult<T>> {
    if residuals.len() != data.n() {
        return Err(Error::Dimension {
            context: "screen residuals",
            expected: data.n(),
            found: residuals.len(),
        });
    }
    let p = data.p();
    let l = data.l();
    let h = cfg.basis.count();
    if p < 2 {
        return Err(Error::InvalidConfig("screening needs p >= 2".into()));
    }
    let nf = T::c(data.n() as f64);

    let mut w_stats = DMatrix::zeros(l, p);
    let mut theta_hats = Vec::with_capacity(l);
    let mut gamma_hats = Vec::with_capacity(l);
    let mut flagged = Vec::new();
    for k in 0..l {
        let xk = design_for_measurement(data, k);
        let gram = xk.tr_mul(&xk) / nf;
        let fits = fit_basis_regressions_gram(&xk, &gram, residuals, &cfg.basis, k, cfg)?;
        let mut gammas = Vec::with_capacity(p);
        for j in 0..p {
            let gamma = fit_decorrelation_gram(&gram, data.n(), j, cfg)?;
            let outcome = score_statistic(&xk, &fits, &gamma, j)?;
            w_stats[(k, j)] = outcome.w;
            if outcome.degenerate || outcome.jittered {
                flagged.push((k, j));
            }
            gammas.push(gamma);
        }
        theta_hats.push(fits);
        gamma_hats.push(gammas);
    }

    let alpha_eff = match cfg.alpha_mode {
        AlphaMode::Bonferroni => cfg.alpha,
        AlphaMode::PowerLaw { c } => T::c(p as f64).powf(-c),
    };
    let t0 = critical_value(h, p, alpha_eff)?;
    let (active_sets, union_set) = select_active_set(&w_stats, t0);
    Ok(ScreeningResult {
        w_stats,
        theta_hats,
        gamma_hats,
        critical_value: t0,
        active_sets,
        union_set,
        flagged,
    })
}
