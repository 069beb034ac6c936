//! Outer maximization of the approximated log-likelihood and the
//! M-estimator sandwich covariance.
//!
//! The driver is a BFGS quasi-Newton ascent on the free-parameter vector
//! with a backtracking Armijo line search, so the likelihood trace is
//! non-decreasing across accepted steps. The gradient is the method's
//! estimating function: the quadrature methods use the weighted posterior
//! expectation of the complete-data scores, the second-order method
//! differentiates its objective by central differences. Convergence
//! requires both a small parameter change and a small score max-norm.
//!
//! Per-subject evaluations run in parallel and are reduced in subject
//! order; each subject's previous posterior mode seeds the next inner solve
//! (the dominant cost of a fit is repeated inner solves). Identical inputs
//! give bit-identical results regardless of thread count.
//!
//! The covariance of the estimator is the sandwich `B^{-1} A B^{-T} / n`
//! with `A` the average outer product of per-subject scores and `B` the
//! (numerically differentiated) average score derivative.

use crate::approximation::{
    agh_subject_score_with, fd_step, laplace1_marginal_with, laplace2_c1, Method,
};
use crate::error::{Error, Result};
use crate::linalg::{self, KahanSum};
use crate::model::{Dataset, ModelSpec, Theta};
use crate::posterior::InnerOptions;
use crate::quadrature::{hermite_rule, HermiteRule};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use std::time::Instant;

/// Convergence controls shared by every method.
#[derive(Debug, Clone, Copy)]
pub struct FitControls {
    /// Stop when the largest parameter change falls below this...
    pub outer_param_tol: f64,
    /// ...and the score max-norm falls below this.
    pub outer_score_tol: f64,
    pub max_outer: usize,
    pub inner: InnerOptions,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            outer_param_tol: 1e-6,
            outer_score_tol: 1e-5,
            max_outer: 500,
            inner: InnerOptions::default(),
        }
    }
}

/// Method choice plus convergence controls. Deterministic: fitting involves
/// no randomness.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub method: Method,
    pub controls: FitControls,
}

impl FitOptions {
    pub fn new(method: Method) -> Self {
        FitOptions {
            method,
            controls: FitControls::default(),
        }
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions::new(Method::Agh { k: 5 })
    }
}

/// One outer-iteration record: objective value and score max-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub loglik: f64,
    pub score_norm: f64,
}

/// Outcome of a fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: Theta,
    /// Sandwich covariance over the free parameters (flattening order).
    /// Rows and columns of parameters frozen by separation handling are zero.
    pub covariance: Array2<f64>,
    /// Square roots of the covariance diagonal; NaN for frozen parameters.
    pub std_errors: Array1<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub elapsed_seconds: f64,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// batched objective/score evaluation
// ---------------------------------------------------------------------------

struct Objective<'a> {
    spec: &'a ModelSpec,
    data: &'a Dataset,
    method: Method,
    rule: Option<HermiteRule>,
    inner: InnerOptions,
}

struct Evaluation {
    loglik: f64,
    /// Analytic score (quadrature methods only).
    score: Option<Array1<f64>>,
    modes: Vec<Array1<f64>>,
}

impl<'a> Objective<'a> {
    fn new(
        spec: &'a ModelSpec,
        data: &'a Dataset,
        method: Method,
        inner: InnerOptions,
    ) -> Result<Self> {
        let rule = match method.quadrature_k() {
            Some(k) => Some(hermite_rule(k)?),
            None => None,
        };
        Ok(Objective {
            spec,
            data,
            method,
            rule,
            inner,
        })
    }

    fn theta(&self, x: &Array1<f64>) -> Result<Theta> {
        Theta::unflatten(self.spec, x.view())
    }

    /// Evaluate the objective at `x`, optionally with the analytic score
    /// (quadrature methods). Per-subject work is parallel; the reduction is
    /// in subject order.
    fn eval(&self, x: &Array1<f64>, warm: &[Array1<f64>], want_score: bool) -> Result<Evaluation> {
        let theta = self.theta(x)?;
        let n = self.data.n();
        match (&self.rule, self.method) {
            (Some(rule), _) => {
                if want_score {
                    let per: Vec<Result<(Array1<f64>, f64, Array1<f64>)>> = (0..n)
                        .into_par_iter()
                        .map(|l| {
                            agh_subject_score_with(
                                &theta,
                                self.spec,
                                self.data.row(l),
                                rule,
                                &self.inner,
                                Some(warm[l].view()),
                            )
                            .map(|(s, v, post)| (s, v, post.mode))
                            .map_err(|e| e.for_subject(l))
                        })
                        .collect();
                    let mut acc = KahanSum::default();
                    let mut score = Array1::<f64>::zeros(self.spec.n_free());
                    let mut modes = Vec::with_capacity(n);
                    for r in per {
                        let (s, v, mode) = r?;
                        acc.add(v);
                        score += &s;
                        modes.push(mode);
                    }
                    Ok(Evaluation {
                        loglik: acc.value(),
                        score: Some(score),
                        modes,
                    })
                } else {
                    let per: Vec<Result<(f64, Array1<f64>)>> = (0..n)
                        .into_par_iter()
                        .map(|l| {
                            crate::approximation::agh_marginal_with(
                                &theta,
                                self.data.row(l),
                                rule,
                                &self.inner,
                                Some(warm[l].view()),
                            )
                            .map(|(v, post)| (v, post.mode))
                            .map_err(|e| e.for_subject(l))
                        })
                        .collect();
                    let mut acc = KahanSum::default();
                    let mut modes = Vec::with_capacity(n);
                    for r in per {
                        let (v, mode) = r?;
                        acc.add(v);
                        modes.push(mode);
                    }
                    Ok(Evaluation {
                        loglik: acc.value(),
                        score: None,
                        modes,
                    })
                }
            }
            (None, Method::Laplace2) => {
                let per: Vec<Result<(f64, Array1<f64>, bool)>> = (0..n)
                    .into_par_iter()
                    .map(|l| {
                        let (lap1, post) = laplace1_marginal_with(
                            &theta,
                            self.data.row(l),
                            &self.inner,
                            Some(warm[l].view()),
                        )
                        .map_err(|e| e.for_subject(l))?;
                        let c1 = laplace2_c1(&theta, &post);
                        if c1 <= -1.0 {
                            Ok((lap1, post.mode, true))
                        } else {
                            Ok((lap1 + c1.ln_1p(), post.mode, false))
                        }
                    })
                    .collect();
                let mut acc = KahanSum::default();
                let mut modes = Vec::with_capacity(n);
                let mut fallbacks = 0usize;
                for r in per {
                    let (v, mode, fb) = r?;
                    acc.add(v);
                    modes.push(mode);
                    fallbacks += fb as usize;
                }
                if fallbacks > 0 {
                    log::debug!(
                        "second-order correction fell back to first order for {fallbacks} subjects"
                    );
                }
                Ok(Evaluation {
                    loglik: acc.value(),
                    score: None,
                    modes,
                })
            }
            (None, _) => unreachable!("quadrature methods always carry a rule"),
        }
    }

    /// Score at `x`: analytic for quadrature methods, central differences of
    /// the objective for the second-order method.
    fn score(&self, x: &Array1<f64>, warm: &[Array1<f64>]) -> Result<Array1<f64>> {
        if self.rule.is_some() {
            Ok(self
                .eval(x, warm, true)?
                .score
                .expect("score requested from quadrature evaluation"))
        } else {
            let d = x.len();
            let mut score = Array1::<f64>::zeros(d);
            for i in 0..d {
                let h = fd_step(x[i]);
                let mut plus = x.clone();
                plus[i] += h;
                let mut minus = x.clone();
                minus[i] -= h;
                let lp = self.eval(&plus, warm, false)?.loglik;
                let lm = self.eval(&minus, warm, false)?.loglik;
                score[i] = (lp - lm) / (2.0 * h);
            }
            Ok(score)
        }
    }

    /// Per-subject scores at `x` as an `n x d` matrix (rows in subject
    /// order); the per-subject estimating functions whose outer products
    /// build the `A` half of the sandwich.
    fn subject_scores(&self, x: &Array1<f64>, warm: &[Array1<f64>]) -> Result<Array2<f64>> {
        let theta = self.theta(x)?;
        let n = self.data.n();
        let d = self.spec.n_free();
        if let Some(rule) = &self.rule {
            let per: Vec<Result<Array1<f64>>> = (0..n)
                .into_par_iter()
                .map(|l| {
                    agh_subject_score_with(
                        &theta,
                        self.spec,
                        self.data.row(l),
                        rule,
                        &self.inner,
                        Some(warm[l].view()),
                    )
                    .map(|(s, _, _)| s)
                    .map_err(|e| e.for_subject(l))
                })
                .collect();
            let mut out = Array2::<f64>::zeros((n, d));
            for (l, r) in per.into_iter().enumerate() {
                let s = r?;
                out.row_mut(l).assign(&s);
            }
            Ok(out)
        } else {
            // per-subject central differences of the log marginal
            let mut out = Array2::<f64>::zeros((n, d));
            for i in 0..d {
                let h = fd_step(x[i]);
                let mut plus = x.clone();
                plus[i] += h;
                let mut minus = x.clone();
                minus[i] -= h;
                let lp = self.subject_log_marginals(&plus, warm)?;
                let lm = self.subject_log_marginals(&minus, warm)?;
                for l in 0..n {
                    out[[l, i]] = (lp[l] - lm[l]) / (2.0 * h);
                }
            }
            Ok(out)
        }
    }

    /// Per-subject second-order log marginals (with first-order fallback).
    fn subject_log_marginals(&self, x: &Array1<f64>, warm: &[Array1<f64>]) -> Result<Vec<f64>> {
        let theta = self.theta(x)?;
        let per: Vec<Result<f64>> = (0..self.data.n())
            .into_par_iter()
            .map(|l| {
                let (lap1, post) = laplace1_marginal_with(
                    &theta,
                    self.data.row(l),
                    &self.inner,
                    Some(warm[l].view()),
                )
                .map_err(|e| e.for_subject(l))?;
                let c1 = laplace2_c1(&theta, &post);
                Ok(if c1 <= -1.0 { lap1 } else { lap1 + c1.ln_1p() })
            })
            .collect();
        per.into_iter().collect()
    }
}

// ---------------------------------------------------------------------------
// fit driver
// ---------------------------------------------------------------------------

#[inline]
fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Starting values: intercepts at the logit of the item means clipped to
/// `[-3, 3]`, free loadings at `+0.5`.
fn starting_values(spec: &ModelSpec, data: &Dataset) -> Array1<f64> {
    let means = data.item_means();
    let mut theta = Theta::zeros(spec);
    for j in 0..spec.p() {
        let m = means[j];
        let raw = if m <= 0.0 {
            f64::NEG_INFINITY
        } else if m >= 1.0 {
            f64::INFINITY
        } else {
            logit(m)
        };
        theta.intercepts[j] = raw.clamp(-3.0, 3.0);
    }
    for j in 0..spec.p() {
        for m in 0..spec.q() {
            if spec.is_free(j, m) {
                theta.loadings[[j, m]] = 0.5;
            }
        }
    }
    theta.flatten(spec)
}

/// Indices (into the flat free-parameter vector) of item `j`'s parameters.
fn item_param_indices(spec: &ModelSpec, item: usize) -> Vec<usize> {
    let mut idx = vec![item];
    let mut pos = spec.p();
    for j in 0..spec.p() {
        for m in 0..spec.q() {
            if spec.is_free(j, m) {
                if j == item {
                    idx.push(pos);
                }
                pos += 1;
            }
        }
    }
    idx
}

/// Maximize the approximated log-likelihood for `data` under `spec`.
///
/// Non-convergence within `max_outer` iterations is not an error: the
/// result carries `converged = false` and the full trace, which is what the
/// simulation harness needs. Inner-solver failures abort with an error
/// naming the subject.
///
/// Items whose sample mean is exactly 0 or 1 admit no finite estimate;
/// their intercepts are pinned at the starting-value clip boundary, their
/// loadings at zero, and a separation warning is recorded.
pub fn fit(data: &Dataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    if data.p() != spec.p() {
        return Err(Error::invalid(format!(
            "dataset has {} items but the model expects {}",
            data.p(),
            spec.p()
        )));
    }
    let start_time = Instant::now();
    let controls = &options.controls;
    let obj = Objective::new(spec, data, options.method, controls.inner)?;
    let n = data.n();
    let d = spec.n_free();
    let mut warnings = Vec::new();

    let mut x = starting_values(spec, data);
    let mut frozen = vec![false; d];
    let means = data.item_means();
    for j in 0..spec.p() {
        if means[j] <= 0.0 || means[j] >= 1.0 {
            for idx in item_param_indices(spec, j) {
                frozen[idx] = true;
                if idx >= spec.p() {
                    x[idx] = 0.0;
                }
            }
            warnings.push(format!(
                "item {} is separated (sample mean {}); its intercept is pinned at the clip boundary and its loadings at zero",
                j + 1,
                means[j]
            ));
        }
    }
    let active: Vec<usize> = (0..d).filter(|&i| !frozen[i]).collect();
    let da = active.len();

    let select = |full: &Array1<f64>| -> Array1<f64> {
        Array1::from_iter(active.iter().map(|&i| full[i]))
    };

    let mut warm: Vec<Array1<f64>> = vec![Array1::zeros(spec.q()); n];
    let quadrature_score = obj.rule.is_some();

    let first = obj.eval(&x, &warm, quadrature_score)?;
    warm = first.modes;
    let mut loglik = first.loglik;
    let mut score_full = match first.score {
        Some(s) => s,
        None => obj.score(&x, &warm)?,
    };
    let mut g = select(&score_full);

    let mut trace = vec![TraceEntry {
        loglik,
        score_norm: inf_norm(&g),
    }];
    let mut iterations = 0usize;
    let mut converged = da == 0;
    let mut hinv = Array2::<f64>::eye(da);
    let mut steepest_retry_used = false;

    const ARMIJO_C: f64 = 1e-4;
    const MAX_HALVINGS: usize = 30;

    while !converged && iterations < controls.max_outer {
        // ascent direction
        let mut direction = hinv.dot(&g);
        let mut slope = g.dot(&direction);
        if !(slope > 0.0) || !slope.is_finite() {
            hinv = Array2::eye(da);
            direction = g.clone();
            slope = g.dot(&direction);
        }

        // backtracking Armijo line search on the objective
        let mut step = 1.0f64;
        let mut accepted: Option<(Array1<f64>, Evaluation)> = None;
        for _ in 0..MAX_HALVINGS {
            let mut x_trial = x.clone();
            for (r, &i) in active.iter().enumerate() {
                x_trial[i] += step * direction[r];
            }
            let trial = obj.eval(&x_trial, &warm, quadrature_score)?;
            if trial.loglik.is_finite() && trial.loglik >= loglik + ARMIJO_C * step * slope {
                accepted = Some((x_trial, trial));
                break;
            }
            step *= 0.5;
        }

        let (x_new, eval_new) = match accepted {
            Some(pair) => {
                steepest_retry_used = false;
                pair
            }
            None => {
                if !steepest_retry_used {
                    // one retry along the raw score before giving up
                    steepest_retry_used = true;
                    hinv = Array2::eye(da);
                    continue;
                }
                // no ascent step exists within resolution; the iterate is a
                // stationary point of the estimating equations if the score
                // is small
                converged = inf_norm(&g) <= controls.outer_score_tol;
                break;
            }
        };

        iterations += 1;
        warm = eval_new.modes;
        let loglik_new = eval_new.loglik;
        let score_new_full = match eval_new.score {
            Some(s) => s,
            None => obj.score(&x_new, &warm)?,
        };
        let g_new = select(&score_new_full);

        // BFGS inverse update (minimization form on the negated objective)
        let s_vec = Array1::from_iter(active.iter().map(|&i| x_new[i] - x[i]));
        let y_vec = &g - &g_new;
        let sy = s_vec.dot(&y_vec);
        let s_norm = s_vec.dot(&s_vec).sqrt();
        let y_norm = y_vec.dot(&y_vec).sqrt();
        if sy > 1e-10 * s_norm * y_norm && sy.is_finite() {
            let rho = 1.0 / sy;
            // Hinv' = (I - rho s y^T) Hinv (I - rho y s^T) + rho s s^T
            let hy = hinv.dot(&y_vec);
            let yhy = y_vec.dot(&hy);
            let coeff = rho * rho * yhy + rho;
            for a in 0..da {
                for b in 0..da {
                    hinv[[a, b]] += coeff * s_vec[a] * s_vec[b]
                        - rho * (s_vec[a] * hy[b] + hy[a] * s_vec[b]);
                }
            }
        }

        let param_change = active
            .iter()
            .fold(0.0f64, |m, &i| m.max((x_new[i] - x[i]).abs()));
        x = x_new;
        loglik = loglik_new;
        g = g_new;
        score_full = score_new_full;
        trace.push(TraceEntry {
            loglik,
            score_norm: inf_norm(&g),
        });

        if param_change <= controls.outer_param_tol && inf_norm(&g) <= controls.outer_score_tol {
            converged = true;
        }
    }

    // resolve the sign indeterminacy: make each factor's first free loading
    // positive (the echelon mask removes rotational freedom; sign flips
    // remain and the reported tables use positive leading loadings)
    let mut theta_hat = Theta::unflatten(spec, x.view())?;
    let mut flipped = vec![false; spec.q()];
    for m in 0..spec.q() {
        if let Some(j) = (0..spec.p()).find(|&j| spec.is_free(j, m)) {
            if theta_hat.loadings[[j, m]] < 0.0 {
                flipped[m] = true;
                for jj in 0..spec.p() {
                    if spec.is_free(jj, m) {
                        theta_hat.loadings[[jj, m]] = -theta_hat.loadings[[jj, m]];
                    }
                }
            }
        }
    }
    if flipped.iter().any(|&f| f) {
        x = theta_hat.flatten(spec);
        for mode in warm.iter_mut() {
            for m in 0..spec.q() {
                if flipped[m] {
                    mode[m] = -mode[m];
                }
            }
        }
        score_full = obj.score(&x, &warm)?;
    }

    let score_norm_final = inf_norm(&select(&score_full));
    if converged && score_norm_final > 1e-4 {
        warnings.push(format!(
            "covariance evaluated at a point with score max-norm {score_norm_final:.3e} > 1e-4"
        ));
    }

    let (covariance, std_errors) = if da == 0 {
        (
            Array2::<f64>::zeros((d, d)),
            Array1::from_elem(d, f64::NAN),
        )
    } else {
        sandwich_from_objective(&obj, &x, &warm, &active, &mut warnings)?
    };

    Ok(FitResult {
        theta_hat,
        covariance,
        std_errors,
        loglik,
        iterations,
        elapsed_seconds: start_time.elapsed().as_secs_f64(),
        converged,
        trace,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// sandwich covariance
// ---------------------------------------------------------------------------

fn sandwich_from_objective(
    obj: &Objective<'_>,
    x: &Array1<f64>,
    warm: &[Array1<f64>],
    active: &[usize],
    warnings: &mut Vec<String>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = obj.data.n() as f64;
    let d = obj.spec.n_free();
    let da = active.len();

    // A = (1/n) sum_l psi_l psi_l^T over the active parameters
    let psi = obj.subject_scores(x, warm)?;
    let mut a = Array2::<f64>::zeros((da, da));
    for l in 0..obj.data.n() {
        for (ra, &ia) in active.iter().enumerate() {
            let v = psi[[l, ia]];
            if v == 0.0 {
                continue;
            }
            for (ca, &ja) in active.iter().enumerate() {
                a[[ra, ca]] += v * psi[[l, ja]];
            }
        }
    }
    a.mapv_inplace(|v| v / n);

    // B = -(1/n) d(total score)/d(theta), column by column
    let mut b = Array2::<f64>::zeros((da, da));
    for (ca, &ja) in active.iter().enumerate() {
        let h = fd_step(x[ja]);
        let mut plus = x.clone();
        plus[ja] += h;
        let mut minus = x.clone();
        minus[ja] -= h;
        let sp = obj.score(&plus, warm)?;
        let sm = obj.score(&minus, warm)?;
        for (ra, &ia) in active.iter().enumerate() {
            b[[ra, ca]] = -(sp[ia] - sm[ia]) / (2.0 * h * n);
        }
    }

    let lu = linalg::lu_factor(&b).ok_or(Error::SingularInformation)?;
    let binv_a = lu.solve_mat(&a);
    let ct = lu.solve_mat(&binv_a.t().to_owned()); // B^{-1} (B^{-1} A)^T = C^T
    let mut cov_active = ct.t().to_owned();
    cov_active.mapv_inplace(|v| v / n);

    let scale = cov_active.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for r in 0..da {
        for c in 0..r {
            asym = asym.max((cov_active[[r, c]] - cov_active[[c, r]]).abs());
        }
    }
    if asym > 1e-10 * (1.0 + scale) {
        warnings.push(format!(
            "sandwich covariance asymmetry {asym:.3e} exceeds tolerance; symmetrized"
        ));
    }
    for r in 0..da {
        for c in 0..r {
            let v = 0.5 * (cov_active[[r, c]] + cov_active[[c, r]]);
            cov_active[[r, c]] = v;
            cov_active[[c, r]] = v;
        }
    }
    if linalg::cholesky(&cov_active).is_none() {
        warnings.push("sandwich covariance is not positive definite".to_string());
    }

    let mut covariance = Array2::<f64>::zeros((d, d));
    let mut std_errors = Array1::from_elem(d, f64::NAN);
    for (ra, &ia) in active.iter().enumerate() {
        for (ca, &ja) in active.iter().enumerate() {
            covariance[[ia, ja]] = cov_active[[ra, ca]];
        }
        let var = cov_active[[ra, ra]];
        std_errors[ia] = if var >= 0.0 {
            var.sqrt()
        } else {
            warnings.push(format!(
                "negative variance {var:.3e} for parameter index {ia}; standard error set to 0"
            ));
            0.0
        };
    }
    Ok((covariance, std_errors))
}

/// Sandwich covariance `B^{-1} A B^{-T} / n` of the estimating equations at
/// `theta_hat`. Warns (through the log) when `theta_hat` is not stationary
/// to within `1e-4`.
pub fn sandwich_covariance(
    theta_hat: &Theta,
    spec: &ModelSpec,
    data: &Dataset,
    method: Method,
) -> Result<Array2<f64>> {
    let obj = Objective::new(spec, data, method, InnerOptions::default())?;
    let x = theta_hat.flatten(spec);
    let warm: Vec<Array1<f64>> = vec![Array1::zeros(spec.q()); data.n()];
    let score = obj.score(&x, &warm)?;
    let norm = inf_norm(&score);
    if norm > 1e-4 {
        log::warn!("sandwich covariance requested at a non-stationary point (score max-norm {norm:.3e})");
    }
    let active: Vec<usize> = (0..spec.n_free()).collect();
    let mut warnings = Vec::new();
    let (cov, _) = sandwich_from_objective(&obj, &x, &warm, &active, &mut warnings)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn bernoulli_data(p: usize, pattern: &[(usize, usize)], n: usize) -> Dataset {
        // pattern gives (ones, period) per item: item j is 1 on the first
        // `ones` of every `period` subjects
        let mut y = Array2::<u8>::zeros((n, p));
        for (j, &(ones, period)) in pattern.iter().enumerate() {
            for l in 0..n {
                if l % period < ones {
                    y[[l, j]] = 1;
                }
            }
        }
        Dataset::new(y).unwrap()
    }

    #[test]
    fn intercept_only_recovers_logit_means() {
        let spec = ModelSpec::intercept_only(3).unwrap();
        let data = bernoulli_data(3, &[(3, 4), (2, 4), (1, 4)], 32);
        for method in [Method::Agh { k: 5 }, Method::Laplace1, Method::Laplace2] {
            let result = fit(&data, &spec, &FitOptions::new(method)).unwrap();
            assert!(result.converged, "{method} did not converge");
            let expect = [3.0f64.ln(), 0.0, -(3.0f64.ln())];
            for j in 0..3 {
                assert_relative_eq!(
                    result.theta_hat.intercepts[j],
                    expect[j],
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn trace_is_monotone_and_result_deterministic() {
        let spec = ModelSpec::echelon(4, 1).unwrap();
        let data = bernoulli_data(4, &[(3, 4), (2, 4), (2, 3), (1, 2)], 48);
        let options = FitOptions::new(Method::Agh { k: 3 });
        let a = fit(&data, &spec, &options).unwrap();
        for w in a.trace.windows(2) {
            assert!(
                w[1].loglik >= w[0].loglik - 1e-12,
                "trace decreased: {} -> {}",
                w[0].loglik,
                w[1].loglik
            );
        }
        let b = fit(&data, &spec, &options).unwrap();
        assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(
            a.theta_hat.flatten(&spec).to_vec(),
            b.theta_hat.flatten(&spec).to_vec()
        );
        if a.converged {
            assert!(a.trace.last().unwrap().score_norm <= 1e-5);
        }
    }

    #[test]
    fn separated_item_is_pinned_with_warning() {
        let spec = ModelSpec::intercept_only(2).unwrap();
        let mut y = Array2::<u8>::zeros((10, 2));
        for l in 0..5 {
            y[[l, 0]] = 1;
        }
        // item 2 is all zeros
        let data = Dataset::new(y).unwrap();
        let result = fit(&data, &spec, &FitOptions::default()).unwrap();
        assert!(result
            .warnings
            .iter()
            .any(|w| w.contains("separated")));
        assert_relative_eq!(result.theta_hat.intercepts[1], -3.0, epsilon = 1e-12);
        assert!(result.std_errors[1].is_nan());
        assert_relative_eq!(result.theta_hat.intercepts[0], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn sandwich_matches_bernoulli_information() {
        // single intercept-only item with mean 3/4: var(alpha0_hat) is
        // 1 / (n * 0.1875)
        let spec = ModelSpec::intercept_only(1).unwrap();
        let n = 400;
        let data = bernoulli_data(1, &[(3, 4)], n);
        let result = fit(&data, &spec, &FitOptions::new(Method::Agh { k: 5 })).unwrap();
        assert!(result.converged);
        let expect = 1.0 / (n as f64 * 0.1875);
        assert_relative_eq!(result.covariance[[0, 0]], expect, max_relative = 1e-4);

        let cov = sandwich_covariance(&result.theta_hat, &spec, &data, Method::Agh { k: 5 })
            .unwrap();
        assert_relative_eq!(cov[[0, 0]], expect, max_relative = 1e-4);
    }

    #[test]
    fn duplicated_dataset_halves_the_covariance() {
        let spec = ModelSpec::intercept_only(2).unwrap();
        let base = bernoulli_data(2, &[(3, 4), (1, 4)], 16);
        let mut doubled = Array2::<u8>::zeros((32, 2));
        for l in 0..16 {
            for j in 0..2 {
                doubled[[l, j]] = base.responses()[[l, j]];
                doubled[[l + 16, j]] = base.responses()[[l, j]];
            }
        }
        let doubled = Dataset::new(doubled).unwrap();
        let options = FitOptions::new(Method::Agh { k: 3 });
        let fit_base = fit(&base, &spec, &options).unwrap();
        let fit_doubled = fit(&doubled, &spec, &options).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(
                    fit_doubled.covariance[[i, j]],
                    0.5 * fit_base.covariance[[i, j]],
                    max_relative = 1e-6,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn item_relabeling_permutes_the_covariance() {
        let spec = ModelSpec::intercept_only(2).unwrap();
        let data = bernoulli_data(2, &[(3, 4), (1, 4)], 24);
        let swapped = {
            let y = data.responses();
            let mut s = Array2::<u8>::zeros((24, 2));
            for l in 0..24 {
                s[[l, 0]] = y[[l, 1]];
                s[[l, 1]] = y[[l, 0]];
            }
            Dataset::new(s).unwrap()
        };
        let options = FitOptions::new(Method::Agh { k: 3 });
        let a = fit(&data, &spec, &options).unwrap();
        let b = fit(&swapped, &spec, &options).unwrap();
        assert_relative_eq!(
            a.covariance[[0, 0]],
            b.covariance[[1, 1]],
            max_relative = 1e-8
        );
        assert_relative_eq!(
            a.covariance[[1, 1]],
            b.covariance[[0, 0]],
            max_relative = 1e-8
        );
    }
}
