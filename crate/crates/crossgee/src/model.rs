//! Data model: multivariate-response observations, link functions with
//! derivatives, mean evaluation, and residuals.
//!
//! One unit contributes a response vector `y ∈ R^l` and a design matrix
//! `x ∈ R^{p×l}` whose column `k` is the covariate vector of measurement `k`.
//! The conditional mean is `E[y_k | x] = g(x_k' beta)` for a known link `g`,
//! and the residual `r(beta) = y - g(X' beta)` is what every downstream
//! module (solver weights, covariance screening, kernel estimation) consumes.
//! Data are stored per unit rather than stacked because all covariance
//! weighting is blockwise.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default covariate-norm bound for the boundedness sanity check.
pub const DEFAULT_NORM_BOUND: f64 = 1e6;

/// User-supplied link: the mean function and its first three derivatives.
///
/// All four evaluators must be finite on bounded inputs; the derivatives
/// must stay bounded on compact intervals.
pub trait CustomLink<T>: Send + Sync {
    fn g(&self, u: T) -> T;
    fn dg(&self, u: T) -> T;
    fn ddg(&self, u: T) -> T;
    fn dddg(&self, u: T) -> T;
    /// Inverse of the mean function, if available (used only for cheap
    /// deterministic initialization, never for estimation).
    fn inverse(&self, mu: T) -> Option<T>;
}

/// Link function with derivatives up to third order.
#[derive(Clone)]
pub enum LinkFunction<T> {
    Identity,
    Log,
    Logit,
    Custom(Arc<dyn CustomLink<T>>),
}

impl<T> fmt::Debug for LinkFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkFunction::Identity => write!(f, "Identity"),
            LinkFunction::Log => write!(f, "Log"),
            LinkFunction::Logit => write!(f, "Logit"),
            LinkFunction::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Numerically stable logistic function.
fn sigmoid<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> LinkFunction<T> {
    /// Mean function `g(u)`.
    pub fn g(&self, u: T) -> T {
        match self {
            LinkFunction::Identity => u,
            LinkFunction::Log => u.exp(),
            LinkFunction::Logit => sigmoid(u),
            LinkFunction::Custom(c) => c.g(u),
        }
    }

    /// First derivative `ġ(u)`.
    pub fn dg(&self, u: T) -> T {
        match self {
            LinkFunction::Identity => T::one(),
            LinkFunction::Log => u.exp(),
            LinkFunction::Logit => {
                let p = sigmoid(u);
                p * (T::one() - p)
            }
            LinkFunction::Custom(c) => c.dg(u),
        }
    }

    /// Second derivative `g̈(u)`.
    pub fn ddg(&self, u: T) -> T {
        match self {
            LinkFunction::Identity => T::zero(),
            LinkFunction::Log => u.exp(),
            LinkFunction::Logit => {
                let p = sigmoid(u);
                p * (T::one() - p) * (T::one() - T::c(2.0) * p)
            }
            LinkFunction::Custom(c) => c.ddg(u),
        }
    }

    /// Third derivative.
    pub fn dddg(&self, u: T) -> T {
        match self {
            LinkFunction::Identity => T::zero(),
            LinkFunction::Log => u.exp(),
            LinkFunction::Logit => {
                let p = sigmoid(u);
                let six = T::c(6.0);
                p * (T::one() - p) * (T::one() - six * p + six * p * p)
            }
            LinkFunction::Custom(c) => c.dddg(u),
        }
    }

    /// Inverse mean function, where defined. Inputs are clamped away from the
    /// boundary of the mean range so the result is always finite.
    pub fn inverse(&self, mu: T) -> Option<T> {
        let eps = T::c(1e-6);
        match self {
            LinkFunction::Identity => Some(mu),
            LinkFunction::Log => Some(mu.max(eps).ln()),
            LinkFunction::Logit => {
                let p = mu.max(eps).min(T::one() - eps);
                Some((p / (T::one() - p)).ln())
            }
            LinkFunction::Custom(c) => c.inverse(mu),
        }
    }
}

/// Sorted, duplicate-free set of 0-based coordinate indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Build from arbitrary indices; sorts and deduplicates.
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        IndexSet(indices)
    }

    pub fn empty() -> Self {
        IndexSet(Vec::new())
    }

    /// `{0, 1, ..., p-1}`.
    pub fn full(p: usize) -> Self {
        IndexSet((0..p).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        IndexSet::new(v)
    }

    /// Indices in `{0..p-1}` not contained in `self`.
    pub fn complement(&self, p: usize) -> IndexSet {
        IndexSet((0..p).filter(|j| !self.contains(*j)).collect())
    }

    /// Error if any index is `>= p`.
    pub fn validate_within(&self, p: usize, context: &'static str) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= p => Err(Error::Dimension {
                context,
                expected: p,
                found: last + 1,
            }),
            _ => Ok(()),
        }
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        IndexSet::new(iter.into_iter().collect())
    }
}

/// One unit's data: response `y` (length `l`) and design `x` (`p×l`,
/// column `k` is the covariate vector of measurement `k`).
#[derive(Debug, Clone)]
pub struct ObservationBlock<T> {
    y: DVector<T>,
    x: DMatrix<T>,
}

impl<T: Scalar> ObservationBlock<T> {
    pub fn new(y: DVector<T>, x: DMatrix<T>) -> Result<Self> {
        if y.len() == 0 {
            return Err(Error::InvalidData("response must have length >= 1".into()));
        }
        if x.ncols() != y.len() {
            return Err(Error::Dimension {
                context: "ObservationBlock design columns",
                expected: y.len(),
                found: x.ncols(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite entry in observation".into()));
        }
        Ok(ObservationBlock { y, x })
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn l(&self) -> usize {
        self.y.len()
    }

    /// Covariate vector of measurement `k` (column `k` of the design).
    pub fn covariates(&self, k: usize) -> DVector<T> {
        self.x.column(k).into_owned()
    }

    /// Linear predictor `X' beta ∈ R^l` with entry `k` equal to `x_k' beta`.
    pub fn linear_predictor(&self, beta: &DVector<T>) -> Result<DVector<T>> {
        if beta.len() != self.p() {
            return Err(Error::Dimension {
                context: "linear_predictor beta",
                expected: self.p(),
                found: beta.len(),
            });
        }
        Ok(self.x.tr_mul(beta))
    }

    /// `vec(X_A)`: the active rows of the design stacked measurement-major,
    /// i.e. `(x_{1,A}, x_{2,A}, ..., x_{l,A})` flattened to length `l·|A|`.
    pub fn vec_active(&self, active: &IndexSet) -> DVector<T> {
        let l = self.l();
        let a = active.len();
        let mut out = DVector::zeros(l * a);
        for k in 0..l {
            for (idx, j) in active.iter().enumerate() {
                out[k * a + idx] = self.x[(j, k)];
            }
        }
        out
    }
}

/// Homogeneous collection of observation blocks.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    blocks: Vec<ObservationBlock<T>>,
    p: usize,
    l: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(blocks: Vec<ObservationBlock<T>>) -> Result<Self> {
        if blocks.len() < 2 {
            return Err(Error::InvalidData(
                "a dataset needs at least 2 units".into(),
            ));
        }
        let p = blocks[0].p();
        let l = blocks[0].l();
        for (i, b) in blocks.iter().enumerate() {
            if b.p() != p || b.l() != l {
                return Err(Error::InvalidData(format!(
                    "unit {i} has dimensions ({}, {}), expected ({p}, {l})",
                    b.p(),
                    b.l()
                )));
            }
        }
        Ok(Dataset { blocks, p, l })
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn blocks(&self) -> &[ObservationBlock<T>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &ObservationBlock<T> {
        &self.blocks[i]
    }

    /// New dataset holding the units listed in `idx` (in the given order).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset<T>> {
        let blocks = idx
            .iter()
            .map(|&i| {
                self.blocks
                    .get(i)
                    .cloned()
                    .ok_or(Error::Dimension {
                        context: "Dataset::subset index",
                        expected: self.n(),
                        found: i,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(blocks)
    }

    /// Covariate boundedness check: returns one warning string per unit whose
    /// design has a column norm above `bound`. Unscaled real data can trip
    /// this, so it is a warning rather than an error.
    pub fn norm_warnings(&self, bound: T) -> Vec<String> {
        let mut warnings = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for k in 0..self.l {
                let norm = b.x.column(k).norm();
                if norm > bound {
                    warnings.push(format!(
                        "unit {i}, measurement {k}: covariate norm {:.3e} exceeds bound {:.3e}",
                        norm.as_f64(),
                        bound.as_f64()
                    ));
                }
            }
        }
        warnings
    }
}

/// Coefficient vector together with the unpenalized set and its support.
#[derive(Debug, Clone)]
pub struct ParameterVector<T> {
    pub beta: DVector<T>,
    pub m_set: IndexSet,
    pub support: IndexSet,
}

impl<T: Scalar> ParameterVector<T> {
    /// Build with the support derived from the nonzero pattern of `beta`.
    pub fn new(beta: DVector<T>, m_set: IndexSet) -> Result<Self> {
        m_set.validate_within(beta.len(), "ParameterVector m_set")?;
        let support = beta
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(j, _)| j)
            .collect();
        Ok(ParameterVector {
            beta,
            m_set,
            support,
        })
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }
}

/// Mean vector `g(X' beta)` of one unit.
pub fn evaluate_mean<T: Scalar>(
    block: &ObservationBlock<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
) -> Result<DVector<T>> {
    let lp = block.linear_predictor(beta)?;
    Ok(lp.map(|u| link.g(u)))
}

/// Residual `r(beta) = y - g(X' beta)` of one unit.
pub fn residual<T: Scalar>(
    block: &ObservationBlock<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
) -> Result<DVector<T>> {
    let mean = evaluate_mean(block, beta, link)?;
    Ok(block.y() - mean)
}

/// Diagonal of the mean-derivative matrix `D(beta) = diag(ġ(x_k' beta))`.
pub fn mean_derivative_diag<T: Scalar>(
    block: &ObservationBlock<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
) -> Result<DVector<T>> {
    let lp = block.linear_predictor(beta)?;
    Ok(lp.map(|u| link.dg(u)))
}

/// Mean-derivative matrix as a full (diagonal) `l×l` matrix.
pub fn mean_derivative_matrix<T: Scalar>(
    block: &ObservationBlock<T>,
    beta: &DVector<T>,
    link: &LinkFunction<T>,
) -> Result<DMatrix<T>> {
    Ok(DMatrix::from_diagonal(&mean_derivative_diag(
        block, beta, link,
    )?))
}
