//! Nonconvex penalty derivatives (SCAD, MCP) and the partially penalized
//! subgradient map.
//!
//! Only the derivative of the penalty enters the estimating equations, so
//! the penalty value itself is never computed. Both penalties share the key
//! shape properties: the derivative equals `lambda` at `0+`, is nonnegative
//! and nonincreasing in `|t|`, and vanishes for `|t| >= a*lambda`, which is
//! what leaves large coefficients unshrunk.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::IndexSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Scad,
    Mcp,
}

/// Penalty configuration: kind, level `lambda`, and shape constant `a`.
///
/// ```
/// use crossgee::penalty::PenaltyConfig;
/// let scad = PenaltyConfig::scad(1.0f64).unwrap();
/// assert_eq!(scad.derivative(0.5), 1.0);           // |t| <= lambda branch
/// assert!((scad.derivative(2.0) - 1.7 / 2.7).abs() < 1e-12);
/// ```
#[derive(Debug, Clone, Copy)]
pub struct PenaltyConfig<T> {
    pub kind: PenaltyKind,
    pub lambda: T,
    pub a: T,
}

impl<T: Scalar> PenaltyConfig<T> {
    pub fn new(kind: PenaltyKind, lambda: T, a: T) -> Result<Self> {
        if lambda < T::zero() {
            return Err(Error::InvalidConfig("penalty lambda must be >= 0".into()));
        }
        let min_a = match kind {
            PenaltyKind::Scad => T::c(2.0),
            PenaltyKind::Mcp => T::one(),
        };
        if a <= min_a {
            return Err(Error::InvalidConfig(format!(
                "penalty constant a = {} out of range for {kind:?}",
                a.as_f64()
            )));
        }
        Ok(PenaltyConfig { kind, lambda, a })
    }

    /// SCAD with the conventional `a = 3.7`.
    pub fn scad(lambda: T) -> Result<Self> {
        Self::new(PenaltyKind::Scad, lambda, T::c(3.7))
    }

    /// MCP with the conventional `a = 3.0`.
    pub fn mcp(lambda: T) -> Result<Self> {
        Self::new(PenaltyKind::Mcp, lambda, T::c(3.0))
    }

    /// Copy of this configuration with a different `lambda`.
    pub fn with_lambda(&self, lambda: T) -> Self {
        PenaltyConfig {
            kind: self.kind,
            lambda,
            a: self.a,
        }
    }

    /// Penalty derivative evaluated at `|t|`; always in `[0, lambda]`.
    pub fn derivative(&self, t: T) -> T {
        let at = t.abs();
        let lam = self.lambda;
        match self.kind {
            PenaltyKind::Scad => {
                if at <= lam {
                    lam
                } else {
                    let num = (self.a * lam - at).max(T::zero());
                    num / (self.a - T::one())
                }
            }
            PenaltyKind::Mcp => (lam - at / self.a).max(T::zero()),
        }
    }

    /// Derivative of `t ↦ sign(t)·derivative(|t|)` away from the kinks;
    /// used by the Newton polish step.
    pub fn second_derivative(&self, t: T) -> T {
        let at = t.abs();
        let lam = self.lambda;
        match self.kind {
            PenaltyKind::Scad => {
                if at > lam && at < self.a * lam {
                    -T::one() / (self.a - T::one())
                } else {
                    T::zero()
                }
            }
            PenaltyKind::Mcp => {
                if at < self.a * lam {
                    -T::one() / self.a
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Half-width of the subdifferential at zero: the KKT condition for a
    /// penalized coordinate at rest is `|U_j| <= kkt_interval()`.
    pub fn kkt_interval(&self) -> T {
        self.lambda
    }
}

/// Gradient of the partial penalty: component `j` is
/// `sign(beta_j) * derivative(|beta_j|)` for `j` outside the unpenalized set
/// and zero otherwise. At `beta_j = 0` the subdifferential is the interval
/// `[-lambda, lambda]`; this map returns 0 there, and KKT checks must use
/// [`PenaltyConfig::kkt_interval`] instead of a point value.
pub fn partial_penalty_gradient<T: Scalar>(
    beta: &DVector<T>,
    m_set: &IndexSet,
    cfg: &PenaltyConfig<T>,
) -> Result<DVector<T>> {
    m_set.validate_within(beta.len(), "partial_penalty_gradient m_set")?;
    let mut out = DVector::zeros(beta.len());
    for j in 0..beta.len() {
        if m_set.contains(j) {
            continue;
        }
        let b = beta[j];
        if b > T::zero() {
            out[j] = cfg.derivative(b);
        } else if b < T::zero() {
            out[j] = -cfg.derivative(b);
        }
    }
    Ok(out)
}
