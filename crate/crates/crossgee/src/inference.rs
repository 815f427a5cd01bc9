//! Sandwich covariance estimation, Wald statistics, chi-squared p-values,
//! and the local power comparison between weighting schemes.
//!
//! The asymptotic covariance of the support coordinates is the sandwich
//! `Omega = V1^{-1} V2 V1^{-1}` with bread
//! `V1 = (1/n) sum_i X_s D_i S_i^{-1} D_i X_s'` and meat
//! `V2 = (1/n) sum_i X_s D_i S_i^{-1} r_i r_i' S_i^{-1} D_i X_s'`. When the
//! plug-in weights equal the true conditional covariance and the residual
//! outer product is replaced by its conditional mean, `V2` collapses onto
//! `V1` and the sandwich reduces to `V1^{-1}` — the efficiency endpoint the
//! cross-fitted pipeline is aiming for.

use nalgebra::{DMatrix, DVector};

use crate::chi2::{chi2_cdf, chi2_quantile};
use crate::error::{Error, Result};
use crate::model::{mean_derivative_diag, residual, Dataset, IndexSet, LinkFunction};
use crate::scalar::{symmetrize, Scalar};
use crate::solver::CovarianceProvider;

/// Linear hypothesis `C beta_M = t` with `C` of full row rank `r <= m`.
#[derive(Debug, Clone)]
pub struct HypothesisSpec<T> {
    pub c: DMatrix<T>,
    pub t: DVector<T>,
}

impl<T: Scalar> HypothesisSpec<T> {
    pub fn new(c: DMatrix<T>, t: DVector<T>) -> Result<Self> {
        if c.nrows() == 0 || c.nrows() > c.ncols() {
            return Err(Error::InvalidConfig(
                "hypothesis matrix must have 1 <= r <= m rows".into(),
            ));
        }
        if t.len() != c.nrows() {
            return Err(Error::Dimension {
                context: "HypothesisSpec target length",
                expected: c.nrows(),
                found: t.len(),
            });
        }
        // Full row rank <=> smallest singular value bounded away from zero.
        let sv = c.clone().svd(false, false).singular_values;
        let max = sv.iter().fold(T::zero(), |m, s| m.max(*s));
        let min = sv.iter().fold(max, |m, s| m.min(*s));
        if max <= T::zero() || min <= T::c(1e-10) * max {
            return Err(Error::InvalidConfig(
                "hypothesis matrix is not of full row rank".into(),
            ));
        }
        Ok(HypothesisSpec { c, t })
    }

    pub fn r(&self) -> usize {
        self.c.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.ncols()
    }
}

/// Sandwich pieces restricted to the support coordinates.
#[derive(Debug, Clone)]
pub struct SandwichCovariance<T> {
    pub v1: DMatrix<T>,
    pub v2: DMatrix<T>,
    pub omega: DMatrix<T>,
    pub support: IndexSet,
}

impl<T: Scalar> SandwichCovariance<T> {
    /// Sub-block of `omega` for the given coordinates (which must be a
    /// subset of the support), in support order.
    pub fn omega_block(&self, coords: &IndexSet) -> Result<DMatrix<T>> {
        let pos: Vec<usize> = coords
            .iter()
            .map(|j| {
                self.support
                    .as_slice()
                    .binary_search(&j)
                    .map_err(|_| Error::InvalidConfig(format!("coordinate {j} not in support")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(pos.len(), pos.len(), |a, b| {
            self.omega[(pos[a], pos[b])]
        }))
    }
}

/// Sandwich covariance with the residual outer products taken from the data.
pub fn sandwich<T: Scalar>(
    data: &Dataset<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
    cov: &dyn CovarianceProvider<T>,
    support: &IndexSet,
) -> Result<SandwichCovariance<T>> {
    sandwich_with_outer(data, beta, link, cov, support, |_, r| r * r.transpose())
}

/// Sandwich covariance with a caller-supplied residual outer product per
/// unit (`outer(i, r_i)`); the plain [`sandwich`] passes `r_i r_i'`.
/// Substituting the conditional mean of the outer product reproduces the
/// `V2 = V1` collapse exactly.
pub fn sandwich_with_outer<T: Scalar, F>(
    data: &Dataset<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
    cov: &dyn CovarianceProvider<T>,
    support: &IndexSet,
    outer: F,
) -> Result<SandwichCovariance<T>>
where
    F: Fn(usize, &DVector<T>) -> DMatrix<T>,
{
    if support.is_empty() {
        return Err(Error::InvalidConfig("sandwich needs a nonempty support".into()));
    }
    support.validate_within(data.p(), "sandwich support")?;
    let d = support.len();
    let l = data.l();
    let inv_n = T::one() / T::c(data.n() as f64);
    let mut v1 = DMatrix::zeros(d, d);
    let mut v2 = DMatrix::zeros(d, d);
    for (i, block) in data.blocks().iter().enumerate() {
        let a = cov.inverse_for(i, block)?;
        let dg = mean_derivative_diag(block, beta, link)?;
        let r = residual(block, beta, link)?;
        // Xs: support rows of the design, shape d×l.
        let xs = DMatrix::from_fn(d, l, |c, k| block.x()[(support.as_slice()[c], k)]);
        // W = Xs D: scale columns by the link derivative.
        let mut w = xs;
        for k in 0..l {
            let mut col = w.column_mut(k);
            col *= dg[k];
        }
        let wa = &w * &a; // d×l
        v1 += &wa * w.transpose() * inv_n;
        let m = outer(i, &r);
        v2 += &wa * m * wa.transpose() * inv_n;
    }
    symmetrize(&mut v1);
    symmetrize(&mut v2);
    let chol = v1
        .clone()
        .cholesky()
        .ok_or(Error::Singular("sandwich bread V1 (support too large for n)"))?;
    // Omega = V1^{-1} V2 V1^{-1}.
    let half = chol.solve(&v2);
    let mut omega = chol.solve(&half.transpose());
    symmetrize(&mut omega);
    Ok(SandwichCovariance {
        v1,
        v2,
        omega,
        support: support.clone(),
    })
}

/// Wald test report.
#[derive(Debug, Clone)]
pub struct WaldReport<T> {
    pub statistic: T,
    pub df: usize,
    pub p_value: T,
    /// Moment-based noncentrality estimate `max(0, W - r)`; drift-based
    /// noncentralities come from [`noncentrality`].
    pub noncentrality: T,
}

/// Wald statistic `W = n (C b_M - t)' (C Omega C')^{-1} (C b_M - t)` with a
/// central chi-squared p-value on `r` degrees of freedom.
pub fn wald<T: Scalar>(
    beta_m: &DVector<T>,
    hyp: &HypothesisSpec<T>,
    omega_m: &DMatrix<T>,
    n: usize,
) -> Result<WaldReport<T>> {
    if beta_m.len() != hyp.m() {
        return Err(Error::Dimension {
            context: "wald beta_M length",
            expected: hyp.m(),
            found: beta_m.len(),
        });
    }
    if omega_m.nrows() != hyp.m() || omega_m.ncols() != hyp.m() {
        return Err(Error::Dimension {
            context: "wald omega_M size",
            expected: hyp.m(),
            found: omega_m.nrows(),
        });
    }
    let diff = &hyp.c * beta_m - &hyp.t;
    let mut middle = &hyp.c * omega_m * hyp.c.transpose();
    symmetrize(&mut middle);
    let chol = middle
        .cholesky()
        .ok_or(Error::Singular("wald C Omega C'"))?;
    let solved = chol.solve(&diff);
    let statistic = (T::c(n as f64) * diff.dot(&solved)).max(T::zero());
    let r = hyp.r();
    let p_value = (T::one() - chi2_cdf(statistic, r, T::zero())?)
        .max(T::zero())
        .min(T::one());
    Ok(WaldReport {
        statistic,
        df: r,
        p_value,
        noncentrality: (statistic - T::c(r as f64)).max(T::zero()),
    })
}

/// Local noncentrality `delta = h' (C Omega C')^{-1} h` of the drift `h`.
pub fn noncentrality<T: Scalar>(
    h_drift: &DVector<T>,
    c: &DMatrix<T>,
    omega: &DMatrix<T>,
) -> Result<T> {
    if h_drift.len() != c.nrows() {
        return Err(Error::Dimension {
            context: "noncentrality drift length",
            expected: c.nrows(),
            found: h_drift.len(),
        });
    }
    let mut middle = c * omega * c.transpose();
    symmetrize(&mut middle);
    let chol = middle
        .cholesky()
        .ok_or(Error::Singular("noncentrality C Omega C'"))?;
    Ok(h_drift.dot(&chol.solve(h_drift)).max(T::zero()))
}

/// Analytic local power of the level-`level` Wald test with `r` degrees of
/// freedom under noncentrality `delta`.
pub fn local_power<T: Scalar>(delta: T, r: usize, level: T) -> Result<T> {
    let crit = chi2_quantile(T::one() - level, r)?;
    Ok(T::one() - chi2_cdf(crit, r, delta)?)
}

/// Power comparison between the cross-fitted and initial weighting schemes.
#[derive(Debug, Clone, Copy)]
pub struct PowerComparison<T> {
    pub delta_crossfit: T,
    pub delta_initial: T,
    pub power_crossfit: T,
    pub power_initial: T,
    /// `delta_crossfit >= delta_initial` up to a small numerical slack.
    pub dominance: bool,
}

/// Compare analytic local powers under the same drift for two asymptotic
/// covariance estimates on the same support.
pub fn power_compare<T: Scalar>(
    omega_crossfit: &DMatrix<T>,
    omega_initial: &DMatrix<T>,
    c: &DMatrix<T>,
    h_drift: &DVector<T>,
    level: T,
) -> Result<PowerComparison<T>> {
    if omega_crossfit.nrows() != omega_initial.nrows() {
        return Err(Error::Dimension {
            context: "power_compare omega sizes",
            expected: omega_crossfit.nrows(),
            found: omega_initial.nrows(),
        });
    }
    let r = c.nrows();
    let delta_crossfit = noncentrality(h_drift, c, omega_crossfit)?;
    let delta_initial = noncentrality(h_drift, c, omega_initial)?;
    let power_crossfit = local_power(delta_crossfit, r, level)?;
    let power_initial = local_power(delta_initial, r, level)?;
    let tol = T::c(1e-10) * (T::one() + delta_initial);
    Ok(PowerComparison {
        delta_crossfit,
        delta_initial,
        power_crossfit,
        power_initial,
        dominance: delta_crossfit >= delta_initial - tol,
    })
}
