//! Estimating function `U_n(beta)`, its analytic Jacobian, and the partially
//! penalized Newton-type solver.
//!
//! The estimating function is
//! `U_n(beta) = (1/n) sum_i X_i D_i(beta) S_i^{-1} (y_i - g(X_i' beta))`,
//! where `S_i` is the working covariance at unit `i` and `D_i` the diagonal
//! of link derivatives. There is no scalar objective behind it in general,
//! so the solver tracks the penalized equation residual instead of a loss:
//! a solution satisfies `U_j = sign(beta_j) * rho'(|beta_j|)` on nonzero
//! penalized coordinates, `U_j = 0` on the unpenalized set, and
//! `|U_j| <= lambda` on penalized coordinates at rest.
//!
//! Iteration runs in two phases per round: a majorize-minimize pass that
//! replaces the penalty derivative with the local quadratic weight
//! `rho'(|b|)/(eps + |b|)`, then, after thresholding small coordinates to
//! exact zeros, a Newton polish on the frozen support that drives the
//! exact penalized equations below `tol`.
//! Coordinates whose KKT interval is violated at zero re-enter the active
//! set and trigger another round.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inference::HypothesisSpec;
use crate::kernel::CovarianceModel;
use crate::model::{Dataset, IndexSet, LinkFunction, ObservationBlock, ParameterVector};
use crate::penalty::PenaltyConfig;
use crate::scalar::{linf, symmetrize, Scalar};

/// Working covariance structure used to weight the estimating equations.
#[derive(Debug, Clone)]
pub enum WorkingCovariance<T> {
    /// Working independence: `S_i = I`.
    Identity,
    /// A fixed symmetric positive definite `l×l` matrix for every unit.
    Fixed(DMatrix<T>),
    /// A fitted covariance-function model evaluated at each unit's active
    /// covariates.
    Estimated(CovarianceModel<T>),
}

/// Anything that can produce the inverse working covariance of a unit.
/// Implemented by [`WorkingCovariance`] (one structure for all units) and by
/// fold-matched assignments in the cross-fitting pipeline.
pub trait CovarianceProvider<T: Scalar> {
    fn inverse_for(&self, unit: usize, block: &ObservationBlock<T>) -> Result<DMatrix<T>>;
}

impl<T: Scalar> CovarianceProvider<T> for WorkingCovariance<T> {
    fn inverse_for(&self, _unit: usize, block: &ObservationBlock<T>) -> Result<DMatrix<T>> {
        let l = block.l();
        match self {
            WorkingCovariance::Identity => Ok(DMatrix::identity(l, l)),
            WorkingCovariance::Fixed(m) => {
                if m.nrows() != l || m.ncols() != l {
                    return Err(Error::Dimension {
                        context: "WorkingCovariance::Fixed size",
                        expected: l,
                        found: m.nrows(),
                    });
                }
                if (m - m.transpose()).norm() > T::c(1e-10) * (T::one() + m.norm()) {
                    return Err(Error::InvalidConfig(
                        "fixed working covariance must be symmetric".into(),
                    ));
                }
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or(Error::Singular("fixed working covariance"))?;
                let mut inv = chol.inverse();
                symmetrize(&mut inv);
                Ok(inv)
            }
            WorkingCovariance::Estimated(model) => {
                let z = block.vec_active(model.active_set());
                model.inverse_at(&z)
            }
        }
    }
}

/// Model specification: link, penalty, unpenalized set, optional hypothesis.
#[derive(Debug, Clone)]
pub struct ModelSpec<T> {
    pub link: LinkFunction<T>,
    pub penalty: PenaltyConfig<T>,
    pub m_set: IndexSet,
    pub hypothesis: Option<HypothesisSpec<T>>,
}

impl<T: Scalar> ModelSpec<T> {
    pub fn new(link: LinkFunction<T>, penalty: PenaltyConfig<T>, m_set: IndexSet) -> Self {
        ModelSpec {
            link,
            penalty,
            m_set,
            hypothesis: None,
        }
    }

    pub fn with_hypothesis(mut self, hyp: HypothesisSpec<T>) -> Self {
        self.hypothesis = Some(hyp);
        self
    }

    /// Copy with the penalty level replaced.
    pub fn with_lambda(&self, lambda: T) -> Self {
        let mut out = self.clone();
        out.penalty = out.penalty.with_lambda(lambda);
        out
    }
}

/// Numerical knobs of the penalized solver.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig<T> {
    /// Convergence threshold on the max-norm of the penalized equations on
    /// the support (and on update steps).
    pub tol: T,
    pub max_iter: usize,
    /// Penalized coordinates below this magnitude are set to exact zero.
    pub zero_threshold: T,
    /// Relative ridge damping added to near-singular Newton systems.
    pub ridge_rel: T,
    /// Rounds of (majorize, threshold, polish, KKT-reactivate).
    pub max_rounds: usize,
    /// Ridge level of the deterministic marginal initializer.
    pub init_ridge: T,
    /// Per-iteration cap on the max-norm of an update step. Keeps saturating
    /// links (logit) from jumping onto the degenerate root at infinity where
    /// the quasi-score vanishes.
    pub max_step: T,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            tol: T::c(1e-8),
            max_iter: 100,
            zero_threshold: T::c(1e-4),
            ridge_rel: T::c(1e-8),
            max_rounds: 4,
            init_ridge: T::c(1e-2),
            max_step: T::c(2.0),
        }
    }
}

/// Outcome of a penalized solve.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub beta: ParameterVector<T>,
    pub converged: bool,
    pub iterations: usize,
    pub final_update_norm: T,
    /// Max-norm of the penalized estimating equations on the support.
    pub equation_norm_on_support: T,
    /// Largest violation of `|U_j| <= lambda` over penalized zero coordinates.
    pub kkt_excess_off_support: T,
    /// Penalty level the fit was computed with.
    pub lambda: T,
}

/// Per-unit inverse working covariances, computed once per solve (the
/// working covariance never depends on `beta`).
struct PrecomputedCov<T> {
    inv: Vec<DMatrix<T>>,
}

impl<T: Scalar> PrecomputedCov<T> {
    fn build(data: &Dataset<T>, cov: &dyn CovarianceProvider<T>) -> Result<Self> {
        let inv = data
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| cov.inverse_for(i, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(PrecomputedCov { inv })
    }
}

fn check_beta_len<T: Scalar>(data: &Dataset<T>, beta: &DVector<T>) -> Result<()> {
    if beta.len() != data.p() {
        return Err(Error::Dimension {
            context: "estimating function beta",
            expected: data.p(),
            found: beta.len(),
        });
    }
    Ok(())
}

fn u_value<T: Scalar>(
    data: &Dataset<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
    pre: &PrecomputedCov<T>,
) -> DVector<T> {
    let p = data.p();
    let inv_n = T::one() / T::c(data.n() as f64);
    let mut u = DVector::zeros(p);
    for (i, block) in data.blocks().iter().enumerate() {
        let lp = block.x().tr_mul(beta);
        let r = block.y() - lp.map(|v| link.g(v));
        let d = lp.map(|v| link.dg(v));
        let v = &pre.inv[i] * r;
        let w = d.component_mul(&v);
        u.gemv(inv_n, block.x(), &w, T::one());
    }
    u
}

fn jacobian_cols<T: Scalar>(
    data: &Dataset<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
    pre: &PrecomputedCov<T>,
    cols: &[usize],
) -> DMatrix<T> {
    let p = data.p();
    let l = data.l();
    let m = cols.len();
    let inv_n = T::one() / T::c(data.n() as f64);
    let mut jac = DMatrix::zeros(p, m);
    for (i, block) in data.blocks().iter().enumerate() {
        let lp = block.x().tr_mul(beta);
        let r = block.y() - lp.map(|v| link.g(v));
        let d = lp.map(|v| link.dg(v));
        let dd = lp.map(|v| link.ddg(v));
        let a = &pre.inv[i];
        let v = a * r;
        // B = diag(ddg .* (A r)) - D A D
        let mut b = DMatrix::zeros(l, l);
        for k in 0..l {
            for k2 in 0..l {
                b[(k, k2)] = -d[k] * a[(k, k2)] * d[k2];
            }
            b[(k, k)] += dd[k] * v[k];
        }
        // Xc: selected rows of the p×l design, shape |cols|×l.
        let xc = DMatrix::from_fn(m, l, |c, k| block.x()[(cols[c], k)]);
        let contrib = block.x() * (b * xc.transpose());
        jac.zip_apply(&contrib, |a, b| *a += b * inv_n);
    }
    jac
}

/// Estimating function `U_n(beta)` of the whole dataset.
pub fn estimating_function<T: Scalar>(
    data: &Dataset<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
    cov: &WorkingCovariance<T>,
) -> Result<DVector<T>> {
    check_beta_len(data, beta)?;
    let pre = PrecomputedCov::build(data, cov)?;
    Ok(u_value(data, beta, link, &pre))
}

/// Analytic derivative of [`estimating_function`] with respect to the
/// coordinates in `cols`, returned as a `p × |cols|` matrix. Both terms of
/// the derivative are kept: the `-D S^{-1} D` curvature term and the
/// second-derivative term carrying `S^{-1} r`.
pub fn estimating_jacobian<T: Scalar>(
    data: &Dataset<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
    cov: &WorkingCovariance<T>,
    cols: &IndexSet,
) -> Result<DMatrix<T>> {
    check_beta_len(data, beta)?;
    cols.validate_within(data.p(), "estimating_jacobian cols")?;
    let pre = PrecomputedCov::build(data, cov)?;
    Ok(jacobian_cols(data, beta, link, &pre, cols.as_slice()))
}

/// Deterministic initializer: marginal ridge regression of the
/// inverse-link-transformed response on the stacked covariates, under
/// working independence. Returns zeros when the link has no usable inverse.
pub fn ridge_init<T: Scalar>(data: &Dataset<T>, link: &LinkFunction<T>, ridge: T) -> DVector<T> {
    let p = data.p();
    let mut g = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut count = 0usize;
    for block in data.blocks() {
        for k in 0..data.l() {
            let z = match link.inverse(block.y()[k]) {
                Some(z) => z,
                None => return DVector::zeros(p),
            };
            let xk = block.x().column(k);
            g.ger(T::one(), &xk, &xk, T::one());
            b.axpy(z, &xk, T::one());
            count += 1;
        }
    }
    let nf = T::c(count as f64);
    g /= nf;
    b /= nf;
    for j in 0..p {
        g[(j, j)] += ridge;
    }
    match g.cholesky() {
        Some(chol) => chol.solve(&b),
        None => DVector::zeros(p),
    }
}

/// Exact penalized-equation residual on the given coordinates:
/// `U_j - sign(beta_j) rho'(|beta_j|)` for penalized coordinates, `U_j` for
/// unpenalized ones.
fn penalized_residual<T: Scalar>(
    u: &DVector<T>,
    beta: &DVector<T>,
    m_set: &IndexSet,
    pen: &PenaltyConfig<T>,
    coords: &[usize],
) -> DVector<T> {
    DVector::from_fn(coords.len(), |c, _| {
        let j = coords[c];
        let mut f = u[j];
        if !m_set.contains(j) && beta[j] != T::zero() {
            let s = if beta[j] > T::zero() { T::one() } else { -T::one() };
            f -= s * pen.derivative(beta[j]);
        }
        f
    })
}

/// Stationarity merit used to gate majorization steps. For a penalized
/// nonzero coordinate either outcome counts as progress: the exact equation
/// residual going to zero, or the coordinate itself contracting to a
/// KKT-feasible rest point (the exact residual tends to `lambda`, not zero,
/// along a contraction path, so it cannot serve as the merit on its own).
fn kkt_merit<T: Scalar>(
    u: &DVector<T>,
    beta: &DVector<T>,
    m_set: &IndexSet,
    pen: &PenaltyConfig<T>,
    coords: &[usize],
) -> T {
    let lambda = pen.kkt_interval();
    coords.iter().fold(T::zero(), |worst, &j| {
        let r = if m_set.contains(j) {
            u[j].abs()
        } else if beta[j] == T::zero() {
            (u[j].abs() - lambda).max(T::zero())
        } else {
            let s = if beta[j] > T::zero() { T::one() } else { -T::one() };
            let exact = (u[j] - s * pen.derivative(beta[j])).abs();
            let rest = (u[j].abs() - lambda).max(T::zero()) + beta[j].abs();
            exact.min(rest)
        };
        worst.max(r)
    })
}

fn solve_damped<T: Scalar>(
    mut a: DMatrix<T>,
    rhs: &DVector<T>,
    ridge_rel: T,
) -> Result<DVector<T>> {
    let dim = a.nrows();
    let scale = a.trace().abs() / T::c(dim as f64) + T::one();
    let mut ridge = ridge_rel * scale;
    for _ in 0..8 {
        let mut damped = a.clone();
        for j in 0..dim {
            damped[(j, j)] += ridge;
        }
        if let Some(sol) = damped.lu().solve(rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                return Ok(sol);
            }
        }
        ridge *= T::c(100.0);
    }
    // Last resort: heavy damping.
    for j in 0..dim {
        a[(j, j)] += scale;
    }
    a.lu()
        .solve(rhs)
        .ok_or(Error::Singular("penalized solver linear system"))
}

/// Solve the partially penalized estimating equations.
///
/// On success the returned coefficients satisfy, up to `10 * tol`:
/// zero penalized equations on the support, exact zeros on penalized
/// coordinates below `zero_threshold`, and `|U_j| <= lambda` off support.
/// Non-convergence is reported through [`FitResult::converged`], not an
/// error.
pub fn penalized_solve<T: Scalar>(
    data: &Dataset<T>,
    spec: &ModelSpec<T>,
    cov: &WorkingCovariance<T>,
    cfg: &SolverConfig<T>,
    init: &DVector<T>,
) -> Result<FitResult<T>> {
    check_beta_len(data, init)?;
    spec.m_set.validate_within(data.p(), "ModelSpec m_set")?;
    let p = data.p();
    let pre = PrecomputedCov::build(data, cov)?;
    let link = &spec.link;
    let pen = &spec.penalty;
    let lambda = pen.lambda;
    let m_set = &spec.m_set;
    let eps_mm = T::c(1e-6);
    let phase1_tol = cfg.tol.max(cfg.zero_threshold * T::c(1e-2));

    let mut beta = init.clone();
    let mut iterations = 0usize;
    let mut final_update = T::c(f64::INFINITY);
    let mut converged = false;

    for _round in 0..cfg.max_rounds {
        // Active set: unpenalized coordinates, current nonzeros, and zero
        // coordinates whose KKT interval is violated.
        let u = u_value(data, &beta, link, &pre);
        let active: Vec<usize> = (0..p)
            .filter(|&j| {
                m_set.contains(j)
                    || beta[j] != T::zero()
                    || u[j].abs() > lambda
            })
            .collect();
        if active.is_empty() {
            // Everything at rest and KKT-feasible.
            converged = true;
            final_update = T::zero();
            break;
        }

        // Coordinates re-activated at exactly zero get a one-coordinate
        // Newton seed off the KKT boundary; the quadratic majorization
        // weight is infinite at zero and would pin them otherwise.
        let seeds: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&j| !m_set.contains(j) && beta[j] == T::zero() && u[j].abs() > lambda)
            .collect();
        if !seeds.is_empty() {
            let jac = jacobian_cols(data, &beta, link, &pre, &seeds);
            for (c, &j) in seeds.iter().enumerate() {
                let curv = (-jac[(j, c)]).max(T::c(1e-8));
                let sgn = if u[j] > T::zero() { T::one() } else { -T::one() };
                // Seed at the one-coordinate Newton value, capped at the
                // edge of the penalty's flat region.
                let mag = ((u[j].abs() - lambda) / curv).min(pen.a * lambda.max(T::c(1e-12)));
                beta[j] = sgn * mag;
            }
        }

        // Phase 1: majorize-minimize steps with the quadratic penalty weight.
        let budget = cfg.max_iter / 2 + 1;
        for _ in 0..budget {
            let u = u_value(data, &beta, link, &pre);
            let merit_base = kkt_merit(&u, &beta, m_set, pen, &active);
            if merit_base <= cfg.tol {
                break;
            }
            let jac = jacobian_cols(data, &beta, link, &pre, &active);
            let j_aa = jac.select_rows(active.iter());
            let dim = active.len();
            let mut a = -j_aa;
            let mut rhs = DVector::zeros(dim);
            for (c, &j) in active.iter().enumerate() {
                let e = if m_set.contains(j) {
                    T::zero()
                } else {
                    pen.derivative(beta[j]) / (eps_mm + beta[j].abs())
                };
                a[(c, c)] += e;
                rhs[c] = u[j] - e * beta[j];
            }
            let mut step = solve_damped(a, &rhs, cfg.ridge_rel)?;
            let cap = linf(&step);
            if cap > cfg.max_step {
                step *= cfg.max_step / cap;
            }
            // Step halving; a step that cannot improve the penalized
            // residual is rejected, which ends the phase.
            let mut accepted = false;
            let slack = cfg.tol + merit_base * T::c(1e-12);
            for _ in 0..7 {
                let mut trial = beta.clone();
                for (c, &j) in active.iter().enumerate() {
                    trial[j] += step[c];
                }
                let ut = u_value(data, &trial, link, &pre);
                let merit = kkt_merit(&ut, &trial, m_set, pen, &active);
                if merit.is_finite() && merit <= merit_base + slack {
                    beta = trial;
                    accepted = true;
                    break;
                }
                step /= T::c(2.0);
            }
            iterations += 1;
            if !accepted {
                break;
            }
            final_update = linf(&step);
            if final_update <= phase1_tol {
                break;
            }
        }

        // Exact-zero thresholding on penalized coordinates.
        if lambda > T::zero() {
            for j in 0..p {
                if !m_set.contains(j) && beta[j].abs() < cfg.zero_threshold {
                    beta[j] = T::zero();
                }
            }
        }
        let support: Vec<usize> = (0..p)
            .filter(|&j| m_set.contains(j) || beta[j] != T::zero())
            .collect();

        // Phase 2: Newton polish of the exact penalized equations. Only
        // coordinates whose local curvature dominates the penalty concavity
        // take Newton steps; penalized coordinates inside the concave dead
        // zone (where `-J_jj + rho'' <= 0`) have no stable nonzero root and
        // are left to the next round's majorization, which contracts them
        // to zero.
        let mut phase2_ok = false;
        let mut frozen_left = false;
        if support.is_empty() {
            phase2_ok = true;
        } else {
            for _ in 0..cfg.max_iter {
                let u = u_value(data, &beta, link, &pre);
                let jac = jacobian_cols(data, &beta, link, &pre, &support);
                let j_ss = jac.select_rows(support.iter());
                let mut polish: Vec<usize> = Vec::with_capacity(support.len());
                let mut curvatures: Vec<T> = Vec::with_capacity(support.len());
                frozen_left = false;
                for (c, &j) in support.iter().enumerate() {
                    let neg_jjj = -j_ss[(c, c)];
                    if m_set.contains(j) {
                        polish.push(c);
                        curvatures.push(T::zero());
                        continue;
                    }
                    let curv = pen.second_derivative(beta[j]);
                    if neg_jjj + curv > T::c(0.05) * neg_jjj.abs().max(T::c(1e-12)) {
                        polish.push(c);
                        curvatures.push(curv);
                    } else {
                        frozen_left = true;
                    }
                }
                if polish.is_empty() {
                    break;
                }
                let coords: Vec<usize> = polish.iter().map(|&c| support[c]).collect();
                let f = penalized_residual(&u, &beta, m_set, pen, &coords);
                let fnorm = linf(&f);
                if fnorm <= cfg.tol {
                    phase2_ok = true;
                    break;
                }
                let dim = polish.len();
                let mut a = DMatrix::zeros(dim, dim);
                for (r, &cr) in polish.iter().enumerate() {
                    for (q, &cq) in polish.iter().enumerate() {
                        a[(r, q)] = -j_ss[(cr, cq)];
                    }
                    a[(r, r)] += curvatures[r];
                }
                let mut step = solve_damped(a, &f, cfg.ridge_rel)?;
                let cap = linf(&step);
                if cap > cfg.max_step {
                    step *= cfg.max_step / cap;
                }
                let mut improved = false;
                for _ in 0..8 {
                    let mut trial = beta.clone();
                    for (r, &j) in coords.iter().enumerate() {
                        trial[j] += step[r];
                    }
                    let ut = u_value(data, &trial, link, &pre);
                    let ft = penalized_residual(&ut, &trial, m_set, pen, &coords);
                    if linf(&ft) < fnorm {
                        beta = trial;
                        improved = true;
                        break;
                    }
                    step /= T::c(2.0);
                }
                iterations += 1;
                final_update = linf(&step);
                if !improved || final_update <= cfg.tol * T::c(1e-3) {
                    break;
                }
            }
        }
        let phase2_ok = phase2_ok && !frozen_left;

        // Re-threshold: the polish may have moved a coordinate into the dead
        // zone; if so, run another round.
        let mut support_changed = false;
        if lambda > T::zero() {
            for &j in &support {
                if !m_set.contains(j) && beta[j] != T::zero() && beta[j].abs() < cfg.zero_threshold
                {
                    beta[j] = T::zero();
                    support_changed = true;
                }
            }
        }

        // KKT feasibility off the support.
        let u = u_value(data, &beta, link, &pre);
        let kkt_ok = (0..p).all(|j| {
            m_set.contains(j)
                || beta[j] != T::zero()
                || u[j].abs() <= lambda + cfg.tol * T::c(10.0)
        });
        if phase2_ok && kkt_ok && !support_changed {
            converged = true;
            break;
        }
    }

    // Final diagnostics.
    let u = u_value(data, &beta, link, &pre);
    let support: Vec<usize> = (0..p)
        .filter(|&j| m_set.contains(j) || beta[j] != T::zero())
        .collect();
    let equation_norm_on_support = linf(&penalized_residual(&u, &beta, m_set, pen, &support));
    let mut kkt_excess = T::zero();
    for j in 0..p {
        if !m_set.contains(j) && beta[j] == T::zero() {
            kkt_excess = kkt_excess.max((u[j].abs() - lambda).max(T::zero()));
        }
    }
    let converged = converged && equation_norm_on_support <= cfg.tol * T::c(10.0);
    Ok(FitResult {
        beta: ParameterVector::new(beta, m_set.clone())?,
        converged,
        iterations,
        final_update_norm: final_update,
        equation_norm_on_support,
        kkt_excess_off_support: kkt_excess,
        lambda,
    })
}

/// One point of a penalty-level selection path.
#[derive(Debug, Clone, Copy)]
pub struct LambdaPathPoint<T> {
    pub lambda: T,
    pub hbic: T,
    pub df: usize,
    pub converged: bool,
}

/// Penalty-level selection by high-dimensional BIC over a descending
/// log-spaced grid with warm starts.
#[derive(Debug, Clone)]
pub struct HbicFit<T> {
    pub result: FitResult<T>,
    pub lambda: T,
    pub path: Vec<LambdaPathPoint<T>>,
}

/// Quasi-Gaussian residual sum of squares of a fit.
fn rss<T: Scalar>(data: &Dataset<T>, beta: &DVector<T>, link: &LinkFunction<T>) -> T {
    let mut acc = T::zero();
    for block in data.blocks() {
        let lp = block.x().tr_mul(beta);
        let r = block.y() - lp.map(|v| link.g(v));
        acc += r.norm_squared();
    }
    acc
}

/// Fit over a lambda grid and keep the high-dimensional-BIC minimizer:
/// `N ln(RSS/N) + df * ln(ln N) * ln(max(p, 2))` with `N = n*l`.
pub fn fit_with_hbic<T: Scalar>(
    data: &Dataset<T>,
    spec: &ModelSpec<T>,
    cov: &WorkingCovariance<T>,
    cfg: &SolverConfig<T>,
    grid_size: usize,
    min_ratio: T,
) -> Result<HbicFit<T>> {
    if grid_size == 0 {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    let init = ridge_init(data, &spec.link, cfg.init_ridge);
    let pre = PrecomputedCov::build(data, cov)?;
    let u0 = u_value(data, &DVector::zeros(data.p()), &spec.link, &pre);
    let u_init = u_value(data, &init, &spec.link, &pre);
    let lambda_hi = linf(&u0).max(linf(&u_init)).max(T::c(1e-8));
    let ratio = min_ratio.max(T::c(1e-6));
    let nl = T::c((data.n() * data.l()) as f64);
    let dims = T::c(data.p().max(2) as f64);
    let pen_factor = nl.ln().max(T::c(2.8)).ln() * dims.ln();

    let mut warm = init;
    let mut best: Option<(T, HbicFit<T>)> = None;
    let mut path = Vec::with_capacity(grid_size);
    for k in 0..grid_size {
        let f = if grid_size == 1 {
            T::zero()
        } else {
            T::c(k as f64 / (grid_size - 1) as f64)
        };
        let lambda = lambda_hi * ratio.powf(f);
        let spec_k = spec.with_lambda(lambda);
        let fit = penalized_solve(data, &spec_k, cov, cfg, &warm)?;
        warm = fit.beta.beta.clone();
        let df = fit.beta.support.len();
        let r = rss(data, &fit.beta.beta, &spec.link).max(T::c(1e-300));
        let hbic = nl * (r / nl).ln() + T::c(df as f64) * pen_factor;
        path.push(LambdaPathPoint {
            lambda,
            hbic,
            df,
            converged: fit.converged,
        });
        let better = best.as_ref().map(|(b, _)| hbic < *b).unwrap_or(true);
        if better && fit.converged {
            best = Some((
                hbic,
                HbicFit {
                    result: fit,
                    lambda,
                    path: Vec::new(),
                },
            ));
        }
    }
    // Fall back to the last fit if nothing converged (flagged in result).
    let mut chosen = match best {
        Some((_, fit)) => fit,
        None => {
            let lambda = path.last().expect("nonempty path").lambda;
            let spec_k = spec.with_lambda(lambda);
            let fit = penalized_solve(data, &spec_k, cov, cfg, &warm)?;
            HbicFit {
                result: fit,
                lambda,
                path: Vec::new(),
            }
        }
    };
    chosen.path = path;
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::evaluate_mean;
    use crate::penalty::PenaltyKind;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset_l1(x_rows: &[Vec<f64>], y: &[f64]) -> Dataset<f64> {
        let blocks = x_rows
            .iter()
            .zip(y)
            .map(|(row, yi)| {
                let x = DMatrix::from_vec(row.len(), 1, row.clone());
                ObservationBlock::new(DVector::from_vec(vec![*yi]), x).unwrap()
            })
            .collect();
        Dataset::new(blocks).unwrap()
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
                let y = DVector::from_fn(l, |k, _| {
                    link.g(lp[k]) + noise * rng.random_range(-1.0..1.0)
                });
                ObservationBlock::new(y, x).unwrap()
            })
            .collect();
        Dataset::new(blocks).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, l: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(l, l, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(l, l) * 0.5
    }

    #[test]
    fn estimating_function_direct_arithmetic() {
        // n = 1 replicated twice to satisfy the n >= 2 dataset rule:
        // X = (1, 2)', y = 3, beta = 0 -> U = X y = (3, 6)'.
        let data = dataset_l1(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[3.0, 3.0]);
        let u = estimating_function(
            &data,
            &DVector::zeros(2),
            &LinkFunction::Identity,
            &WorkingCovariance::Identity,
        )
        .unwrap();
        assert_relative_eq!(u[0], 3.0, max_relative = 1e-14);
        assert_relative_eq!(u[1], 6.0, max_relative = 1e-14);
    }

    #[test]
    fn estimating_function_zero_at_ols_and_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let beta = DVector::from_vec(vec![0.7, -0.4, 0.0]);
        let data = random_dataset(&mut rng, 40, 3, 1, &LinkFunction::Identity, &beta, 0.3);
        // OLS solution zeroes the working-independence equations.
        let mut g = DMatrix::<f64>::zeros(3, 3);
        let mut b = DVector::<f64>::zeros(3);
        for block in data.blocks() {
            let xk = block.x().column(0).into_owned();
            g.ger(1.0, &xk, &xk, 1.0);
            b.axpy(block.y()[0], &xk, 1.0);
        }
        let ols = g.lu().solve(&b).unwrap();
        let u = estimating_function(
            &data,
            &ols,
            &LinkFunction::Identity,
            &WorkingCovariance::Identity,
        )
        .unwrap();
        assert!(linf(&u) < 1e-12);

        // Noiseless data: zero residuals at the generating beta.
        let clean = random_dataset(&mut rng, 10, 3, 2, &LinkFunction::Logit, &beta, 0.0);
        let u = estimating_function(
            &clean,
            &beta,
            &LinkFunction::Logit,
            &WorkingCovariance::Identity,
        )
        .unwrap();
        assert!(linf(&u) < 1e-14);
    }

    #[test]
    fn jacobian_identity_link_is_minus_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let beta = DVector::from_vec(vec![0.2, -0.1]);
        let data = random_dataset(&mut rng, 15, 2, 1, &LinkFunction::Identity, &beta, 0.1);
        let cols = IndexSet::full(2);
        let j = estimating_jacobian(
            &data,
            &beta,
            &LinkFunction::Identity,
            &WorkingCovariance::Identity,
            &cols,
        )
        .unwrap();
        let mut gram = DMatrix::<f64>::zeros(2, 2);
        for block in data.blocks() {
            let xk = block.x().column(0).into_owned();
            gram.ger(1.0 / 15.0, &xk, &xk, 1.0);
        }
        assert!((j + gram).norm() < 1e-12);
    }

    fn fd_jacobian(
        data: &Dataset<f64>,
        beta: &DVector<f64>,
        link: &LinkFunction<f64>,
        cov: &WorkingCovariance<f64>,
    ) -> DMatrix<f64> {
        let p = data.p();
        let h = 1e-6;
        let mut out = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let fu = estimating_function(data, &up, link, cov).unwrap();
            let fd = estimating_function(data, &dn, link, cov).unwrap();
            out.set_column(j, &((fu - fd) / (2.0 * h)));
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let beta = DVector::from_vec(vec![0.5, -0.3, 0.2, 0.0, 0.1, -0.2]);
        let data = random_dataset(&mut rng, 30, 6, 2, &LinkFunction::Logit, &beta, 0.2);
        let cov = WorkingCovariance::Fixed(random_spd(&mut rng, 2));
        let j = estimating_jacobian(&data, &beta, &LinkFunction::Logit, &cov, &IndexSet::full(6))
            .unwrap();
        let fd = fd_jacobian(&data, &beta, &LinkFunction::Logit, &cov);
        let rel = (&j - &fd).norm() / fd.norm();
        assert!(rel < 1e-5, "rel err {rel}");
    }

    #[test]
    fn jacobian_zero_residual_log_link_keeps_only_curvature_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let beta = DVector::from_vec(vec![0.4, -0.2]);
        let data = random_dataset(&mut rng, 12, 2, 2, &LinkFunction::Log, &beta, 0.0);
        let cov = WorkingCovariance::Fixed(random_spd(&mut rng, 2));
        let pre = PrecomputedCov::build(&data, &cov).unwrap();
        let j = jacobian_cols(&data, &beta, &LinkFunction::Log, &pre, &[0, 1]);
        // Manual -X D A D X' assembly.
        let mut expect = DMatrix::<f64>::zeros(2, 2);
        for (i, block) in data.blocks().iter().enumerate() {
            let lp = block.x().tr_mul(&beta);
            let d = lp.map(|v| LinkFunction::Log.dg(v));
            let a = &pre.inv[i];
            let mut dad = a.clone();
            for k in 0..2 {
                for k2 in 0..2 {
                    dad[(k, k2)] *= d[k] * d[k2];
                }
            }
            expect += block.x() * (dad * block.x().transpose()) / 12.0;
        }
        assert!((j + expect).norm() < 1e-10);
    }

    #[test]
    fn lambda_zero_fits_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let beta = DVector::from_vec(vec![1.0, -0.5, 0.3, 0.0]);
        let data = random_dataset(&mut rng, 50, 4, 1, &LinkFunction::Identity, &beta, 0.4);
        let spec = ModelSpec::new(
            LinkFunction::Identity,
            PenaltyConfig::scad(0.0).unwrap(),
            IndexSet::full(4),
        );
        let cfg = SolverConfig::default();
        let init = ridge_init(&data, &LinkFunction::Identity, cfg.init_ridge);
        let fit = penalized_solve(&data, &spec, &WorkingCovariance::Identity, &cfg, &init).unwrap();
        assert!(fit.converged);
        let mut g = DMatrix::<f64>::zeros(4, 4);
        let mut b = DVector::<f64>::zeros(4);
        for block in data.blocks() {
            let xk = block.x().column(0).into_owned();
            g.ger(1.0, &xk, &xk, 1.0);
            b.axpy(block.y()[0], &xk, 1.0);
        }
        let ols = g.lu().solve(&b).unwrap();
        for j in 0..4 {
            assert_relative_eq!(fit.beta.beta[j], ols[j], epsilon = 1e-6);
        }
        assert!(fit.equation_norm_on_support <= 1e-7);
    }

    #[test]
    fn huge_lambda_returns_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let beta = DVector::zeros(5);
        let data = random_dataset(&mut rng, 30, 5, 1, &LinkFunction::Identity, &beta, 1.0);
        let u0 = estimating_function(
            &data,
            &DVector::zeros(5),
            &LinkFunction::Identity,
            &WorkingCovariance::Identity,
        )
        .unwrap();
        let lambda = linf(&u0) * 10.0 * (30.0f64).ln();
        let spec = ModelSpec::new(
            LinkFunction::Identity,
            PenaltyConfig::new(PenaltyKind::Scad, lambda, 3.7).unwrap(),
            IndexSet::empty(),
        );
        let cfg = SolverConfig::default();
        let init = ridge_init(&data, &LinkFunction::Identity, cfg.init_ridge);
        let fit = penalized_solve(&data, &spec, &WorkingCovariance::Identity, &cfg, &init).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.beta.beta, DVector::zeros(5));
        assert!(fit.beta.support.is_empty());
    }

    /// Global minimizer of `(z - b)^2 / 1 + scad penalty` per coordinate for
    /// an orthonormal design (the classical three-branch rule).
    fn scad_threshold(z: f64, lambda: f64, a: f64) -> f64 {
        let az = z.abs();
        if az <= 2.0 * lambda {
            z.signum() * (az - lambda).max(0.0)
        } else if az <= a * lambda {
            ((a - 1.0) * z - z.signum() * a * lambda) / (a - 2.0)
        } else {
            z
        }
    }

    #[test]
    fn orthonormal_design_matches_scad_rule() {
        // Orthonormal design: 8 units, X_i = sqrt(8) * e_{i mod 8} /
        // sqrt(count), arranged so (1/n) sum x x' = I. Simplest: one-hot
        // rows scaled by sqrt(n).
        let n = 8usize;
        let p = 4usize;
        let lambda = 0.5;
        let a = 3.7;
        // Targets away from the rule's decision boundaries.
        let z = [0.3f64, 1.4, -1.7, 2.6];
        let blocks: Vec<ObservationBlock<f64>> = (0..n)
            .map(|i| {
                let j = i % p;
                let mut x = DMatrix::zeros(p, 1);
                x[(j, 0)] = (p as f64).sqrt(); // (1/n) sum x x' = I
                let y = DVector::from_vec(vec![(p as f64).sqrt() * z[j]]);
                ObservationBlock::new(y, x).unwrap()
            })
            .collect();
        let data = Dataset::new(blocks).unwrap();
        let spec = ModelSpec::new(
            LinkFunction::Identity,
            PenaltyConfig::new(PenaltyKind::Scad, lambda, a).unwrap(),
            IndexSet::empty(),
        );
        let cfg = SolverConfig::default();
        let init = ridge_init(&data, &LinkFunction::Identity, 1e-4);
        let fit = penalized_solve(&data, &spec, &WorkingCovariance::Identity, &cfg, &init).unwrap();
        for j in 0..p {
            let expect = scad_threshold(z[j], lambda, a);
            assert_relative_eq!(fit.beta.beta[j], expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn unit_permutation_leaves_solution_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let beta = DVector::from_vec(vec![1.0, 0.0, -0.8, 0.0, 0.0]);
        let data = random_dataset(&mut rng, 40, 5, 2, &LinkFunction::Identity, &beta, 0.3);
        let spec = ModelSpec::new(
            LinkFunction::Identity,
            PenaltyConfig::scad(0.12).unwrap(),
            IndexSet::new(vec![0]),
        );
        let cfg = SolverConfig::default();
        let init = ridge_init(&data, &LinkFunction::Identity, cfg.init_ridge);
        let fit1 = penalized_solve(&data, &spec, &WorkingCovariance::Identity, &cfg, &init).unwrap();
        let perm: Vec<usize> = (0..40).rev().collect();
        let data2 = data.subset(&perm).unwrap();
        let init2 = ridge_init(&data2, &LinkFunction::Identity, cfg.init_ridge);
        let fit2 =
            penalized_solve(&data2, &spec, &WorkingCovariance::Identity, &cfg, &init2).unwrap();
        assert!((fit1.beta.beta - fit2.beta.beta).norm() < 1e-7);
    }

    #[test]
    fn unpenalized_equations_are_exact_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let beta = DVector::from_vec(vec![0.6, -0.2, 0.9, 0.0, 0.0, 0.0]);
        let data = random_dataset(&mut rng, 60, 6, 2, &LinkFunction::Logit, &beta, 0.1);
        let spec = ModelSpec::new(
            LinkFunction::Logit,
            PenaltyConfig::mcp(0.05).unwrap(),
            IndexSet::new(vec![0, 1]),
        );
        let cfg = SolverConfig::default();
        let init = ridge_init(&data, &LinkFunction::Logit, cfg.init_ridge);
        let fit = penalized_solve(&data, &spec, &WorkingCovariance::Identity, &cfg, &init).unwrap();
        assert!(fit.converged);
        let u = estimating_function(
            &data,
            &fit.beta.beta,
            &LinkFunction::Logit,
            &WorkingCovariance::Identity,
        )
        .unwrap();
        for j in [0usize, 1] {
            assert!(u[j].abs() <= 10.0 * cfg.tol, "U[{j}] = {}", u[j]);
        }
    }

    #[test]
    fn estimated_covariance_precompute_roundtrip() {
        // A constant-model estimated covariance must behave like Fixed.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let beta = DVector::from_vec(vec![0.5, -0.5]);
        let data = random_dataset(&mut rng, 20, 2, 2, &LinkFunction::Identity, &beta, 0.2);
        let sigma = random_spd(&mut rng, 2);
        let pairs: Vec<(DVector<f64>, DMatrix<f64>)> =
            vec![(DVector::zeros(0), sigma.clone()); 3];
        let model = CovarianceModel::from_pairs(
            IndexSet::empty(),
            1.0,
            1e-12,
            pairs,
            vec![0, 1, 2],
            1,
        )
        .unwrap();
        let u_est = estimating_function(
            &data,
            &beta,
            &LinkFunction::Identity,
            &WorkingCovariance::Estimated(model),
        )
        .unwrap();
        let u_fixed = estimating_function(
            &data,
            &beta,
            &LinkFunction::Identity,
            &WorkingCovariance::Fixed(sigma),
        )
        .unwrap();
        assert!((u_est - u_fixed).norm() < 1e-9);
    }

    #[test]
    fn hbic_recovers_sparse_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut beta = DVector::zeros(12);
        beta[0] = 0.8; // unpenalized
        beta[3] = 1.0;
        beta[7] = -1.0;
        let data = random_dataset(&mut rng, 150, 12, 2, &LinkFunction::Identity, &beta, 0.3);
        let spec = ModelSpec::new(
            LinkFunction::Identity,
            PenaltyConfig::scad(0.1).unwrap(),
            IndexSet::new(vec![0]),
        );
        let cfg = SolverConfig::default();
        let fit = fit_with_hbic(&data, &spec, &WorkingCovariance::Identity, &cfg, 12, 1e-2)
            .unwrap();
        assert!(fit.result.converged);
        let support = fit.result.beta.support.as_slice().to_vec();
        assert_eq!(support, vec![0, 3, 7], "path {:?}", fit.path);
    }

    #[test]
    fn singular_fixed_covariance_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let beta = DVector::from_vec(vec![0.5, -0.5]);
        let data = random_dataset(&mut rng, 6, 2, 2, &LinkFunction::Identity, &beta, 0.1);
        let singular = DMatrix::from_element(2, 2, 1.0); // rank one
        let err = estimating_function(
            &data,
            &beta,
            &LinkFunction::Identity,
            &WorkingCovariance::Fixed(singular),
        );
        assert!(matches!(err, Err(crate::error::Error::Singular(_))));
    }

    #[test]
    fn self_consistency_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let beta = DVector::from_vec(vec![0.3, 0.3]);
        let data = random_dataset(&mut rng, 10, 2, 2, &LinkFunction::Log, &beta, 0.0);
        for block in data.blocks() {
            let mu = evaluate_mean(block, &beta, &LinkFunction::Log).unwrap();
            assert!((block.y() - mu).norm() < 1e-12);
        }
    }
}
