//! L1-penalized least squares by cyclic coordinate descent.
//!
//! The objective is exactly `(1/n) * ||y - X b||^2 + lambda * ||b||_1`, so
//! the stationarity conditions carry the factor `2/n`: at a solution,
//! `|(2/n) x_j' r| = lambda` (with matching sign) on the active set and
//! `|(2/n) x_j' r| <= lambda` elsewhere. The solver works in Gram form
//! (`G = X'X/n`, `c = X'y/n`) so sweeps cost `O(d^2)` independent of the
//! sample size; this matters because covariance screening solves on the
//! order of `l * p` of these problems per fold, all sharing one Gram matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A lasso instance on an explicit design matrix.
#[derive(Debug, Clone)]
pub struct LassoProblem<T> {
    pub design: DMatrix<T>,
    pub response: DVector<T>,
    pub lambda: T,
    pub tol: T,
    pub max_sweeps: usize,
}

impl<T: Scalar> LassoProblem<T> {
    pub fn new(design: DMatrix<T>, response: DVector<T>, lambda: T) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::InvalidData("empty lasso design".into()));
        }
        if design.nrows() != response.len() {
            return Err(Error::Dimension {
                context: "LassoProblem response length",
                expected: design.nrows(),
                found: response.len(),
            });
        }
        if lambda < T::zero() {
            return Err(Error::InvalidConfig("lasso lambda must be >= 0".into()));
        }
        Ok(LassoProblem {
            design,
            response,
            lambda,
            tol: T::c(1e-8),
            max_sweeps: 10_000,
        })
    }

    pub fn with_tol(mut self, tol: T, max_sweeps: usize) -> Self {
        self.tol = tol;
        self.max_sweeps = max_sweeps;
        self
    }

    fn objective(&self, coef: &DVector<T>) -> T {
        let r = &self.response - &self.design * coef;
        let n = T::c(self.design.nrows() as f64);
        r.norm_squared() / n + self.lambda * coef.iter().fold(T::zero(), |s, b| s + b.abs())
    }
}

/// Solver output. `kkt_violation <= tol` whenever `converged` is set;
/// hitting the sweep limit is reported through the flag, not an error.
#[derive(Debug, Clone)]
pub struct LassoSolution<T> {
    pub coef: DVector<T>,
    pub objective: T,
    pub kkt_violation: T,
    pub sweeps_used: usize,
    pub converged: bool,
}

/// Gram-form lasso data: `gram = X'X/n`, `xty = X'y/n`, `yty = y'y/n`.
pub(crate) struct GramLasso<'a, T> {
    pub gram: &'a DMatrix<T>,
    pub xty: &'a DVector<T>,
    pub yty: T,
    pub lambda: T,
    pub tol: T,
    pub max_sweeps: usize,
}

pub(crate) struct GramSolution<T> {
    pub coef: DVector<T>,
    pub rss_over_n: T,
    pub kkt_violation: T,
    pub sweeps_used: usize,
    pub converged: bool,
}

fn soft_threshold<T: Scalar>(z: T, t: T) -> T {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        T::zero()
    }
}

/// Cyclic coordinate descent in Gram form, warm-started from `coef`.
pub(crate) fn solve_gram<T: Scalar>(p: &GramLasso<'_, T>, coef: &mut DVector<T>) -> GramSolution<T> {
    let d = p.gram.ncols();
    let two = T::c(2.0);
    // gb = G * coef, maintained incrementally.
    let mut gb = p.gram * &*coef;
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < p.max_sweeps {
        sweeps += 1;
        for j in 0..d {
            let gjj = p.gram[(j, j)];
            if gjj <= T::zero() {
                continue; // zero column: coefficient stays put
            }
            let old = coef[j];
            // rho = (2/n) x_j' (r + x_j old) = 2 (c_j - gb_j + G_jj old)
            let rho = two * (p.xty[j] - gb[j] + gjj * old);
            let new = soft_threshold(rho, p.lambda) / (two * gjj);
            if new != old {
                let delta = new - old;
                coef[j] = new;
                gb.axpy(delta, &p.gram.column(j).into_owned(), T::one());
            }
        }
        let viol = gram_kkt_violation(p, coef, &gb);
        if viol <= p.tol {
            converged = true;
            break;
        }
    }
    let gb_final = p.gram * &*coef;
    let kkt_violation = gram_kkt_violation(p, coef, &gb_final);
    let rss_over_n =
        p.yty - two * coef.dot(p.xty) + coef.dot(&gb_final);
    GramSolution {
        coef: coef.clone(),
        rss_over_n,
        kkt_violation,
        sweeps_used: sweeps,
        converged,
    }
}

fn gram_kkt_violation<T: Scalar>(p: &GramLasso<'_, T>, coef: &DVector<T>, gb: &DVector<T>) -> T {
    let two = T::c(2.0);
    let mut worst = T::zero();
    for j in 0..coef.len() {
        let grad = two * (p.xty[j] - gb[j]); // (2/n) x_j' r
        let v = if coef[j] > T::zero() {
            (grad - p.lambda).abs()
        } else if coef[j] < T::zero() {
            (grad + p.lambda).abs()
        } else {
            (grad.abs() - p.lambda).max(T::zero())
        };
        worst = worst.max(v);
    }
    worst
}

/// Solve a lasso problem from a cold start.
pub fn solve_lasso<T: Scalar>(problem: &LassoProblem<T>) -> Result<LassoSolution<T>> {
    let n = T::c(problem.design.nrows() as f64);
    let gram = problem.design.tr_mul(&problem.design) / n;
    let xty = problem.design.tr_mul(&problem.response) / n;
    let yty = problem.response.norm_squared() / n;
    let mut coef = DVector::zeros(problem.design.ncols());
    let sol = solve_gram(
        &GramLasso {
            gram: &gram,
            xty: &xty,
            yty,
            lambda: problem.lambda,
            tol: problem.tol,
            max_sweeps: problem.max_sweeps,
        },
        &mut coef,
    );
    Ok(LassoSolution {
        objective: problem.objective(&sol.coef),
        coef: sol.coef,
        kkt_violation: sol.kkt_violation,
        sweeps_used: sol.sweeps_used,
        converged: sol.converged,
    })
}

/// Result of a BIC-selected lasso path.
#[derive(Debug, Clone)]
pub struct BicSelection<T> {
    /// Coefficients on the original (unstandardized) design scale.
    pub coef: DVector<T>,
    /// The selected penalty level, on the standardized-design scale.
    pub lambda: T,
    pub bic: T,
    pub df: usize,
    pub converged: bool,
}

/// Lasso path over a log-spaced lambda grid with BIC selection, computed in
/// Gram form. Columns are standardized internally (unit root-mean-square)
/// and coefficients mapped back to the original scale on output; the grid
/// runs from the null threshold `lambda_max` down to `lambda_max * min_ratio`.
pub(crate) fn bic_path_gram<T: Scalar>(
    gram: &DMatrix<T>,
    xty: &DVector<T>,
    yty: T,
    n: usize,
    grid_size: usize,
    min_ratio: T,
    tol: T,
    max_sweeps: usize,
) -> Result<BicSelection<T>> {
    let d = gram.ncols();
    if grid_size == 0 {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    // Column scales; zero-variance columns keep scale 1 and stay at zero.
    let scales: Vec<T> = (0..d)
        .map(|j| {
            let s = gram[(j, j)].max(T::zero()).sqrt();
            if s > T::zero() {
                s
            } else {
                T::one()
            }
        })
        .collect();
    let mut g_std = gram.clone();
    for i in 0..d {
        for j in 0..d {
            g_std[(i, j)] /= scales[i] * scales[j];
        }
    }
    let xty_std = DVector::from_fn(d, |j, _| xty[j] / scales[j]);

    let two = T::c(2.0);
    let lambda_max = xty_std
        .iter()
        .fold(T::zero(), |m, c| m.max((two * *c).abs()))
        .max(T::c(1e-12));
    let ratio = min_ratio.max(T::c(1e-6));
    let lambdas: Vec<T> = (0..grid_size)
        .map(|k| {
            if grid_size == 1 {
                lambda_max
            } else {
                let f = T::c(k as f64 / (grid_size - 1) as f64);
                lambda_max * ratio.powf(f)
            }
        })
        .collect();

    let nf = T::c(n as f64);
    let ln_n = nf.ln();
    let mut coef_std = DVector::zeros(d);
    let mut best: Option<BicSelection<T>> = None;
    for &lam in &lambdas {
        let sol = solve_gram(
            &GramLasso {
                gram: &g_std,
                xty: &xty_std,
                yty,
                lambda: lam,
                tol,
                max_sweeps,
            },
            &mut coef_std,
        );
        let df = sol.coef.iter().filter(|b| **b != T::zero()).count();
        let rss = sol.rss_over_n.max(T::c(1e-300));
        let bic = nf * rss.ln() + T::c(df as f64) * ln_n;
        if best.as_ref().map(|b| bic < b.bic).unwrap_or(true) {
            let coef = DVector::from_fn(d, |j, _| sol.coef[j] / scales[j]);
            best = Some(BicSelection {
                coef,
                lambda: lam,
                bic,
                df,
                converged: sol.converged,
            });
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// BIC-selected lasso on an explicit design (see [`bic_path_gram`]).
pub fn select_lasso_bic<T: Scalar>(
    design: &DMatrix<T>,
    response: &DVector<T>,
    grid_size: usize,
    min_ratio: T,
    tol: T,
    max_sweeps: usize,
) -> Result<BicSelection<T>> {
    let n = design.nrows();
    if n == 0 {
        return Err(Error::InvalidData("empty lasso design".into()));
    }
    let nf = T::c(n as f64);
    let gram = design.tr_mul(design) / nf;
    let xty = design.tr_mul(response) / nf;
    let yty = response.norm_squared() / nf;
    bic_path_gram(&gram, &xty, yty, n, grid_size, min_ratio, tol, max_sweeps)
}
