//! Matrix-valued Nadaraya–Watson estimator of the conditional covariance
//! function, with the power-law bandwidth rule and guaranteed-invertible
//! evaluation.
//!
//! The estimate at `x` is the kernel-weighted average of stored residual
//! outer products, `sum_i w_i(x) R_i R_i'`, with Gaussian product-kernel
//! weights sharing one bandwidth across all matrix entries. A convex
//! combination of PSD matrices is PSD but can be arbitrarily close to
//! singular when residual directions nearly repeat, so evaluation floors the
//! smallest eigenvalue at `jitter_rel * trace / l` before inverting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Dataset, IndexSet};
use crate::scalar::{symmetrize, Scalar};

/// Default relative jitter floor applied to the smallest eigenvalue.
pub const DEFAULT_JITTER_REL: f64 = 1e-6;

/// Bandwidth `c_h * n^{-1/(4 nu + 2 l a_size)}` for an `l`-variate response
/// whose covariance depends on `a_size` active covariates and is
/// Hoelder-smooth of order `nu` in (0, 1].
pub fn bandwidth_rule<T: Scalar>(n: usize, nu: T, l: usize, a_size: usize, c_h: T) -> Result<T> {
    if n < 2 {
        return Err(Error::InvalidConfig("bandwidth rule needs n >= 2".into()));
    }
    if nu <= T::zero() || nu > T::one() {
        return Err(Error::InvalidConfig(
            "smoothness nu must lie in (0, 1]".into(),
        ));
    }
    if a_size == 0 || l == 0 {
        return Err(Error::InvalidConfig(
            "bandwidth rule needs l >= 1 and a_size >= 1".into(),
        ));
    }
    if c_h <= T::zero() {
        return Err(Error::InvalidConfig("bandwidth constant must be > 0".into()));
    }
    let exponent = -T::one() / (T::c(4.0) * nu + T::c(2.0 * (l * a_size) as f64));
    Ok(c_h * T::c(n as f64).powf(exponent))
}

/// Diagnostics attached to a single covariance evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalInfo<T> {
    /// Amount added to the diagonal to reach the jitter floor (0 if none).
    pub jitter_added: T,
    /// Set when all kernel weights degenerated and the nearest training
    /// pair was used instead.
    pub nearest_fallback: bool,
}

/// Fitted covariance-function model: the active set, the bandwidth, and the
/// training pairs `(z_i, R_i R_i')` from exactly one fold.
#[derive(Debug, Clone)]
pub struct CovarianceModel<T> {
    active_set: IndexSet,
    bandwidth: T,
    jitter_rel: T,
    training: Vec<(DVector<T>, DMatrix<T>)>,
    training_units: Vec<usize>,
    fold_id: u8,
    pooled_fallback: bool,
    l: usize,
}

impl<T: Scalar> CovarianceModel<T> {
    /// Assemble a model from explicit training pairs.
    ///
    /// Every `m_i` must be symmetric PSD of a common size `l`, and each
    /// `z_i` must have length `l * |active_set|`. An empty active set is the
    /// pooled-covariance degenerate case: all weights become uniform and the
    /// model evaluates to the plain average of the `m_i`.
    pub fn from_pairs(
        active_set: IndexSet,
        bandwidth: T,
        jitter_rel: T,
        pairs: Vec<(DVector<T>, DMatrix<T>)>,
        training_units: Vec<usize>,
        fold_id: u8,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidData("covariance model needs >= 1 pair".into()));
        }
        if bandwidth <= T::zero() {
            return Err(Error::InvalidConfig("bandwidth must be > 0".into()));
        }
        if training_units.len() != pairs.len() {
            return Err(Error::Dimension {
                context: "CovarianceModel training_units",
                expected: pairs.len(),
                found: training_units.len(),
            });
        }
        let l = pairs[0].1.nrows();
        let d = l * active_set.len();
        for (z, m) in &pairs {
            if m.nrows() != l || m.ncols() != l || z.len() != d {
                return Err(Error::InvalidData(
                    "inconsistent covariance training pair dimensions".into(),
                ));
            }
        }
        Ok(CovarianceModel {
            pooled_fallback: active_set.is_empty(),
            active_set,
            bandwidth,
            jitter_rel,
            training: pairs,
            training_units,
            fold_id,
            l,
        })
    }

    /// Build a model from residuals of the given units. The bandwidth is the
    /// power-law rule scaled by the average per-dimension standard deviation
    /// of the training coordinates.
    #[allow(clippy::too_many_arguments)]
    pub fn from_residuals(
        data: &Dataset<T>,
        unit_ids: &[usize],
        residuals: &[DVector<T>],
        active_set: IndexSet,
        nu: T,
        c_h: T,
        jitter_rel: T,
        fold_id: u8,
    ) -> Result<Self> {
        if unit_ids.len() != residuals.len() {
            return Err(Error::Dimension {
                context: "CovarianceModel residuals",
                expected: unit_ids.len(),
                found: residuals.len(),
            });
        }
        active_set.validate_within(data.p(), "CovarianceModel active_set")?;
        let l = data.l();
        let pairs: Vec<(DVector<T>, DMatrix<T>)> = unit_ids
            .iter()
            .zip(residuals)
            .map(|(&i, r)| {
                let z = data.block(i).vec_active(&active_set);
                let m = r * r.transpose();
                (z, m)
            })
            .collect();

        let bandwidth = if active_set.is_empty() {
            T::one() // irrelevant: weights are uniform
        } else {
            let base = bandwidth_rule(unit_ids.len().max(2), nu, l, active_set.len(), c_h)?;
            base * mean_dimension_sd(&pairs)
        };
        Self::from_pairs(
            active_set,
            bandwidth,
            jitter_rel,
            pairs,
            unit_ids.to_vec(),
            fold_id,
        )
    }

    pub fn active_set(&self) -> &IndexSet {
        &self.active_set
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn fold_id(&self) -> u8 {
        self.fold_id
    }

    pub fn training_units(&self) -> &[usize] {
        &self.training_units
    }

    pub fn training_len(&self) -> usize {
        self.training.len()
    }

    /// Set when the active set was empty and the model degenerated to the
    /// pooled constant covariance.
    pub fn is_pooled_fallback(&self) -> bool {
        self.pooled_fallback
    }

    pub fn response_dim(&self) -> usize {
        self.l
    }

    /// Kernel weights at `x`: log-sum-exp-normalized Gaussian weights, which
    /// sum to one by construction.
    fn weights(&self, x: &DVector<T>) -> Result<(Vec<T>, bool)> {
        let d = self.l * self.active_set.len();
        if x.len() != d {
            return Err(Error::Dimension {
                context: "CovarianceModel evaluate point",
                expected: d,
                found: x.len(),
            });
        }
        let h2 = self.bandwidth * self.bandwidth;
        let half = T::c(0.5);
        let scores: Vec<T> = self
            .training
            .iter()
            .map(|(z, _)| {
                let diff = z - x;
                -half * diff.norm_squared() / h2
            })
            .collect();
        let max = scores
            .iter()
            .fold(T::c(f64::NEG_INFINITY), |m, s| m.max(*s));
        if !max.is_finite() {
            // Every score degenerated: fall back to the nearest pair,
            // ordered by the max-abs distance, which cannot overflow.
            let mut best = 0usize;
            let mut best_d = T::c(f64::INFINITY);
            for (i, (z, _)) in self.training.iter().enumerate() {
                let diff = z - x;
                let dist = diff.iter().fold(T::zero(), |m, v| m.max(v.abs()));
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            if !best_d.is_finite() {
                return Err(Error::Degenerate(
                    "covariance evaluation point infinitely far from training".into(),
                ));
            }
            let mut w = vec![T::zero(); self.training.len()];
            w[best] = T::one();
            return Ok((w, true));
        }
        let mut w: Vec<T> = scores.iter().map(|s| (*s - max).exp()).collect();
        let total: T = w.iter().fold(T::zero(), |a, b| a + *b);
        for wi in &mut w {
            *wi /= total;
        }
        Ok((w, false))
    }

    /// Covariance estimate at `x`, guaranteed symmetric positive definite.
    pub fn evaluate(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.evaluate_with_info(x)?.0)
    }

    /// As [`evaluate`](Self::evaluate), also reporting jitter/fallback info.
    pub fn evaluate_with_info(&self, x: &DVector<T>) -> Result<(DMatrix<T>, EvalInfo<T>)> {
        let (w, nearest_fallback) = self.weights(x)?;
        let mut sigma = DMatrix::zeros(self.l, self.l);
        for (wi, (_, m)) in w.iter().zip(&self.training) {
            let wi = *wi;
            if wi > T::zero() {
                sigma.zip_apply(m, |s, v| *s += v * wi);
            }
        }
        symmetrize(&mut sigma);

        // Floor the smallest eigenvalue at jitter_rel * trace / l (absolute
        // fallback when the trace itself vanishes).
        let tr = sigma.trace();
        let floor = if tr > T::zero() {
            self.jitter_rel * tr / T::c(self.l as f64)
        } else {
            self.jitter_rel
        };
        let lambda_min = sigma
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(T::c(f64::INFINITY), |m, e| m.min(*e));
        let jitter_added = if lambda_min < floor {
            floor - lambda_min
        } else {
            T::zero()
        };
        if jitter_added > T::zero() {
            for i in 0..self.l {
                sigma[(i, i)] += jitter_added;
            }
        }
        Ok((
            sigma,
            EvalInfo {
                jitter_added,
                nearest_fallback,
            },
        ))
    }

    /// Inverse of the covariance estimate at `x`; always well defined thanks
    /// to the jitter floor.
    pub fn inverse_at(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        let sigma = self.evaluate(x)?;
        let chol = sigma
            .cholesky()
            .ok_or(Error::Singular("CovarianceModel::inverse_at"))?;
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        Ok(inv)
    }

    /// Largest Frobenius distance between the model and `truth` over the
    /// grid; zero for an empty grid.
    pub fn sup_error<F>(&self, truth: F, grid: &[DVector<T>]) -> Result<T>
    where
        F: Fn(&DVector<T>) -> DMatrix<T>,
    {
        let mut worst = T::zero();
        for x in grid {
            let est = self.evaluate(x)?;
            let diff = est - truth(x);
            worst = worst.max(diff.norm());
        }
        Ok(worst)
    }
}

/// Average per-dimension standard deviation of the training coordinates;
/// returns 1 when the coordinates are degenerate.
fn mean_dimension_sd<T: Scalar>(pairs: &[(DVector<T>, DMatrix<T>)]) -> T {
    let n = pairs.len();
    if n < 2 {
        return T::one();
    }
    let d = pairs[0].0.len();
    if d == 0 {
        return T::one();
    }
    let nf = T::c(n as f64);
    let mut acc = T::zero();
    for k in 0..d {
        let mean = pairs.iter().fold(T::zero(), |s, (z, _)| s + z[k]) / nf;
        let var = pairs
            .iter()
            .fold(T::zero(), |s, (z, _)| s + (z[k] - mean) * (z[k] - mean))
            / (nf - T::one());
        acc += var.sqrt();
    }
    let sd = acc / T::c(d as f64);
    if sd > T::zero() {
        sd
    } else {
        T::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(z: Vec<f64>, diag: Vec<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (
            DVector::from_vec(z),
            DMatrix::from_diagonal(&DVector::from_vec(diag)),
        )
    }

    fn model_from(pairs: Vec<(DVector<f64>, DMatrix<f64>)>, h: f64) -> CovarianceModel<f64> {
        let units: Vec<usize> = (0..pairs.len()).collect();
        CovarianceModel::from_pairs(IndexSet::new(vec![0]), h, 1e-6, pairs, units, 1).unwrap()
    }

    #[test]
    fn bandwidth_rule_examples() {
        // nu = 1, l = 2, |A| = 1, n = 1000 -> 1000^(-1/8).
        let h = bandwidth_rule(1000, 1.0, 2, 1, 1.0).unwrap();
        assert_relative_eq!(h, 1000f64.powf(-1.0 / 8.0), max_relative = 1e-12);
        assert_relative_eq!(h, 0.42169650342858224, max_relative = 1e-10);
        // nu = 1, l = 1, |A| = 1 -> exponent -1/6.
        let h = bandwidth_rule(100, 1.0, 1, 1, 1.0).unwrap();
        assert_relative_eq!(h, 100f64.powf(-1.0 / 6.0), max_relative = 1e-12);
        // Doubling n strictly decreases h.
        let h1 = bandwidth_rule(500, 0.7, 2, 3, 2.0).unwrap();
        let h2 = bandwidth_rule(1000, 0.7, 2, 3, 2.0).unwrap();
        assert!(h2 < h1);
        assert!(bandwidth_rule(1, 1.0, 1, 1, 1.0).is_err());
        assert!(bandwidth_rule(100, 0.0, 1, 1, 1.0).is_err());
        assert!(bandwidth_rule(100, 1.3, 1, 1, 1.0).is_err());
    }

    #[test]
    fn single_pair_returns_it_everywhere() {
        let m = model_from(vec![pair(vec![0.0, 0.0], vec![2.0, 3.0])], 0.5);
        for xv in [vec![0.0, 0.0], vec![5.0, -3.0]] {
            let s = m.evaluate(&DVector::from_vec(xv)).unwrap();
            assert_relative_eq!(s[(0, 0)], 2.0, max_relative = 1e-9);
            assert_relative_eq!(s[(1, 1)], 3.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn equidistant_point_averages() {
        let m = model_from(
            vec![
                pair(vec![-1.0, 0.0], vec![2.0, 2.0]),
                pair(vec![1.0, 0.0], vec![4.0, 4.0]),
            ],
            0.7,
        );
        let s = m.evaluate(&DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(s[(0, 0)], 3.0, max_relative = 1e-9);
    }

    #[test]
    fn tiny_bandwidth_selects_nearest() {
        let m = model_from(
            vec![
                pair(vec![0.0, 0.0], vec![1.0, 1.0]),
                pair(vec![1.0, 1.0], vec![9.0, 9.0]),
            ],
            1e-6,
        );
        let s = m.evaluate(&DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(s[(0, 0)], 1.0, max_relative = 1e-6);
        let s = m.evaluate(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(s[(0, 0)], 9.0, max_relative = 1e-6);
        // Far away, log-sum-exp still resolves to the nearest pair.
        let (s, info) = m
            .evaluate_with_info(&DVector::from_vec(vec![100.0, 100.0]))
            .unwrap();
        assert!(s[(0, 0)] > 8.0);
        assert!(!info.nearest_fallback || s[(0, 0)] > 8.0);
    }

    #[test]
    fn scalar_inverse_and_identity() {
        let m = model_from(
            vec![
                (DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 4.0)),
                (DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 4.0)),
            ],
            0.5,
        );
        let inv = m.inverse_at(&DVector::from_vec(vec![0.3])).unwrap();
        assert_relative_eq!(inv[(0, 0)], 0.25, max_relative = 1e-6);
    }

    #[test]
    fn evaluate_times_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<_> = (0..20)
            .map(|_| {
                let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let a = DMatrix::<f64>::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
                let m = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
                (z, m)
            })
            .collect();
        let model = model_from(pairs, 0.4);
        for _ in 0..5 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let s = model.evaluate(&x).unwrap();
            let inv = model.inverse_at(&x).unwrap();
            let prod = &s * &inv;
            let err = (&prod - DMatrix::identity(2, 2)).norm();
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn diagonal_family_stays_diagonal() {
        let m = model_from(
            vec![
                pair(vec![0.0, 0.0], vec![1.0, 2.0]),
                pair(vec![0.5, 0.2], vec![3.0, 1.0]),
            ],
            0.8,
        );
        let inv = m.inverse_at(&DVector::from_vec(vec![0.2, 0.1])).unwrap();
        assert_relative_eq!(inv[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(inv[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sup_error_cases() {
        let truth = |_: &DVector<f64>| DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let m = model_from(
            vec![
                pair(vec![0.0, 0.0], vec![2.0, 3.0]),
                pair(vec![1.0, 0.0], vec![2.0, 3.0]),
            ],
            0.5,
        );
        let grid: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![0.1, 0.0]),
            DVector::from_vec(vec![0.9, 0.0]),
        ];
        let err = m.sup_error(truth, &grid).unwrap();
        assert!(err < 1e-5, "err {err}");
        assert_eq!(m.sup_error(truth, &[]).unwrap(), 0.0);
    }

    #[test]
    fn weights_sum_to_one_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pairs: Vec<_> = (0..15)
            .map(|_| {
                let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let v = DVector::from_fn(2, |_, _| rng.random_range(0.2..2.0));
                (z, DMatrix::from_diagonal(&v))
            })
            .collect();
        let model = model_from(pairs.clone(), 0.3);
        let x = DVector::from_vec(vec![0.2, -0.1]);
        let s1 = model.evaluate(&x).unwrap();
        pairs.reverse();
        let model_rev = model_from(pairs, 0.3);
        let s2 = model_rev.evaluate(&x).unwrap();
        assert!((s1 - s2).norm() < 1e-12);
    }

    #[test]
    fn psd_on_random_inputs_and_spd_after_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            // Rank-one residual outer products: raw average can be singular.
            let pairs: Vec<_> = (0..6)
                .map(|_| {
                    let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    let r = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    let m = &r * r.transpose();
                    (z, m)
                })
                .collect();
            let model = model_from(pairs, 0.4);
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let s = model.evaluate(&x).unwrap();
            let eigs = s.symmetric_eigen().eigenvalues;
            assert!(eigs.iter().all(|e| *e > 0.0), "eigs {eigs:?}");
        }
    }

    #[test]
    fn degenerate_weights_fall_back_to_nearest_pair() {
        // Distances overflow to infinity: every kernel score is -inf and the
        // nearest pair is used, flagged.
        let m = model_from(
            vec![
                pair(vec![1e200, 0.0], vec![2.0, 2.0]),
                pair(vec![1.5e200, 0.0], vec![5.0, 5.0]),
            ],
            1.0,
        );
        let (s, info) = m
            .evaluate_with_info(&DVector::from_vec(vec![-1e200, 0.0]))
            .unwrap();
        assert!(info.nearest_fallback);
        assert!((s[(0, 0)] - 2.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn empty_active_set_is_pooled_average() {
        let pairs = vec![
            (DVector::zeros(0), DMatrix::from_element(1, 1, 1.0)),
            (DVector::zeros(0), DMatrix::from_element(1, 1, 3.0)),
        ];
        let m = CovarianceModel::from_pairs(IndexSet::empty(), 1.0, 1e-6, pairs, vec![0, 1], 2)
            .unwrap();
        assert!(m.is_pooled_fallback());
        let s = m.evaluate(&DVector::zeros(0)).unwrap();
        assert_relative_eq!(s[(0, 0)], 2.0, max_relative = 1e-12);
    }
}
