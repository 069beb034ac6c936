//! Per-subject posterior mode and curvature.
//!
//! `L(z)` is strongly convex (its Hessian is a positive semi-definite item
//! sum plus the identity), so the minimizer is unique and plain Newton steps
//! converge quadratically from any start. A step-halving guard handles the
//! extreme-eta regimes where a full step could overshoot.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{neg_log_joint, neg_log_joint_grad, neg_log_joint_hess, Theta};
use ndarray::{Array1, Array2, ArrayView1};

/// Gaussian approximation of one subject's posterior: mode, curvature
/// `psi = hess(L)(mode)^{-1}`, and its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct PosteriorApprox {
    pub mode: Array1<f64>,
    pub psi: Array2<f64>,
    pub cholesky: Array2<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Tolerances for the inner Newton solve.
#[derive(Debug, Clone, Copy)]
pub struct InnerOptions {
    /// Stop when the gradient max-norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Minimize `L(z)` by Newton iteration from `init`.
///
/// Each step solves `hess(L) d = grad(L)` through a Cholesky factorization
/// (the Hessian is positive definite by construction) and halves the step
/// while `L` increases. Returns the mode together with the curvature
/// `psi = hess^{-1}` and its Cholesky factor.
pub fn find_mode(
    theta: &Theta,
    y: ArrayView1<u8>,
    init: ArrayView1<f64>,
    options: &InnerOptions,
) -> Result<PosteriorApprox> {
    if !(options.tol > 0.0) {
        return Err(Error::invalid("inner tolerance must be positive"));
    }
    if options.max_iter == 0 {
        return Err(Error::invalid("inner max_iter must be at least 1"));
    }
    let q = theta.q();
    let mut z = init.to_owned();
    let mut value = neg_log_joint(theta, y, z.view());
    let mut iterations = 0;

    loop {
        let grad = neg_log_joint_grad(theta, y, z.view());
        let grad_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !grad_norm.is_finite() {
            return Err(Error::ModeDiverged);
        }
        if grad_norm <= options.tol {
            let hess = neg_log_joint_hess(theta, z.view());
            let hess_chol =
                linalg::cholesky(&hess).ok_or(Error::CurvatureNotPositiveDefinite {
                    subject: None,
                })?;
            let psi = linalg::chol_inverse(&hess_chol);
            let cholesky = linalg::cholesky(&psi)
                .ok_or(Error::CurvatureNotPositiveDefinite { subject: None })?;
            return Ok(PosteriorApprox {
                mode: z,
                psi,
                cholesky,
                iterations,
                grad_norm,
            });
        }
        if iterations >= options.max_iter {
            return Err(Error::ModeNotConverged {
                iterations,
                grad_norm,
                last_iterate: z.to_vec(),
            });
        }
        iterations += 1;

        let hess = neg_log_joint_hess(theta, z.view());
        let hess_chol = linalg::cholesky(&hess)
            .ok_or(Error::CurvatureNotPositiveDefinite { subject: None })?;
        let direction = linalg::chol_solve(&hess_chol, &grad);

        // full Newton step, halved only if L fails to decrease; the slack
        // admits roundoff-level increases near the minimum where the true
        // decrease is below float resolution
        let slack = 1e-14 * (1.0 + value.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = Array1::<f64>::zeros(q);
            for m in 0..q {
                trial[m] = z[m] - step * direction[m];
            }
            let trial_value = neg_log_joint(theta, y, trial.view());
            if trial_value.is_finite() && trial_value <= value + slack {
                z = trial;
                value = trial_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // direction is a descent direction for a convex objective, so an
            // acceptable step always exists unless the iterate is degenerate
            return Err(Error::ModeDiverged);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModeDiverged);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Theta};
    use approx::assert_relative_eq;
    use ndarray::{array, Array1, Array2};

    #[test]
    fn zero_loadings_converge_immediately_to_prior_mean() {
        let spec = ModelSpec::intercept_only(3).unwrap();
        let theta = Theta::from_parts(
            &spec,
            array![0.4, -1.0, 0.0],
            Array2::zeros((3, 1)),
        )
        .unwrap();
        let y = array![1u8, 0, 1];
        let post = find_mode(
            &theta,
            y.view(),
            array![0.0].view(),
            &InnerOptions::default(),
        )
        .unwrap();
        assert_eq!(post.mode.to_vec(), vec![0.0]);
        assert_eq!(post.psi, Array2::eye(1));
        // L is quadratic in z: the start is already stationary
        assert_eq!(post.iterations, 0);
        // warm-started from elsewhere it takes exactly one Newton step
        let post = find_mode(
            &theta,
            y.view(),
            array![2.5].view(),
            &InnerOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(post.mode[0], 0.0, epsilon = 1e-12);
        assert_eq!(post.iterations, 1);
    }

    #[test]
    fn single_item_mode_matches_bisection_oracle() {
        // p = 1, q = 1, alpha0 = 0, alpha = 1, y = 1: the stationarity
        // condition is z - (1 - sigma(z)) = 0. Bisection oracle:
        let f = |z: f64| z - 1.0 + crate::model::sigmoid(z);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle_mode = 0.5 * (lo + hi);
        let pi = crate::model::sigmoid(oracle_mode);
        let oracle_psi = 1.0 / (pi * (1.0 - pi) + 1.0);

        let spec = ModelSpec::echelon(1, 1).unwrap();
        let theta = Theta::from_parts(&spec, array![0.0], array![[1.0]]).unwrap();
        let post = find_mode(
            &theta,
            array![1u8].view(),
            array![0.0].view(),
            &InnerOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(post.mode[0], oracle_mode, epsilon = 1e-10);
        assert_relative_eq!(post.psi[[0, 0]], oracle_psi, epsilon = 1e-10);
        // frozen digits for the record
        assert_relative_eq!(post.mode[0], 0.4010581375, epsilon = 1e-9);
        assert_relative_eq!(post.psi[[0, 0]], 0.8063147294, epsilon = 1e-9);
    }

    #[test]
    fn complement_responses_give_negated_modes() {
        // with all intercepts zero, y -> 1 - y flips eta -> -eta
        let spec = ModelSpec::echelon(4, 2).unwrap();
        let theta = Theta::from_parts(
            &spec,
            Array1::zeros(4),
            array![[1.2, 0.0], [0.7, 0.9], [0.4, 1.1], [0.8, 0.3]],
        )
        .unwrap();
        let y = array![1u8, 0, 1, 1];
        let yc = array![0u8, 1, 0, 0];
        let opts = InnerOptions::default();
        let a = find_mode(&theta, y.view(), array![0.0, 0.0].view(), &opts).unwrap();
        let b = find_mode(&theta, yc.view(), array![0.0, 0.0].view(), &opts).unwrap();
        for m in 0..2 {
            assert_relative_eq!(a.mode[m], -b.mode[m], epsilon = 1e-9);
        }
    }

    #[test]
    fn psi_equals_cholesky_product() {
        let spec = ModelSpec::echelon(5, 2).unwrap();
        let theta = Theta::from_parts(
            &spec,
            array![0.1, -0.3, 0.5, 0.0, 0.2],
            array![[1.0, 0.0], [0.5, 0.8], [0.9, 0.2], [0.3, 1.4], [0.7, 0.6]],
        )
        .unwrap();
        let y = array![1u8, 1, 0, 1, 0];
        let post = find_mode(
            &theta,
            y.view(),
            array![0.0, 0.0].view(),
            &InnerOptions::default(),
        )
        .unwrap();
        let prod = post.cholesky.dot(&post.cholesky.t());
        let frob: f64 = (&prod - &post.psi).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(frob <= 1e-10, "frobenius gap {frob}");
        assert!(post.grad_norm <= 1e-10);
    }

    #[test]
    fn non_convergence_carries_last_iterate() {
        let spec = ModelSpec::echelon(1, 1).unwrap();
        let theta = Theta::from_parts(&spec, array![0.0], array![[1.0]]).unwrap();
        let err = find_mode(
            &theta,
            array![1u8].view(),
            array![5.0].view(),
            &InnerOptions {
                tol: 1e-10,
                max_iter: 1,
            },
        )
        .unwrap_err();
        match err {
            Error::ModeNotConverged {
                iterations,
                grad_norm,
                last_iterate,
            } => {
                assert_eq!(iterations, 1);
                assert!(grad_norm > 0.0);
                assert_eq!(last_iterate.len(), 1);
            }
            other => panic!("expected ModeNotConverged, got {other:?}"),
        }
    }
}
