//! Marginal density, log-likelihood, and score approximations.
//!
//! Three evaluators share the per-subject Gaussian posterior approximation
//! `(zhat, Psi)` from [`crate::posterior`]:
//!
//! * adapted quadrature with `k` nodes per dimension: the tensor rule is
//!   recentred at `(zhat, Psi)` and the marginal becomes
//!   `2^{q/2} |T| sum_t g(y | z*_t) h(z*_t) prod w*`, evaluated in log space
//!   end to end (a log-sum-exp over tensor nodes), because ten items at tail
//!   nodes underflow raw densities;
//! * the first-order Gaussian (Laplace) approximation
//!   `(q/2) log 2 pi + log|Psi|/2 - L(zhat)`, which the adapted rule
//!   reproduces exactly at `k = 1`;
//! * the second-order variant, which multiplies the first-order density by
//!   `1 + c1` with `c1` built from third/fourth derivatives of the joint log
//!   density at the mode (Kronecker/vec contractions against `Psi`).
//!
//! Scores for the quadrature method are the weighted posterior expectations
//! of the complete-data scores, with the adaptation held fixed at evaluation
//! time: the same normalized node weights that define the marginal are used,
//! so the `2^{q/2} |T|` factors cancel explicitly. The second-order method
//! has no closed-form score and differentiates its objective numerically.

use crate::error::{Error, Result};
use crate::model::{neg_log_joint, sigmoid, Dataset, ModelSpec, Theta};
use crate::posterior::{find_mode, InnerOptions, PosteriorApprox};
use crate::quadrature::{adapt, hermite_rule, log_integrate, AdaptedRule, HermiteRule};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Marginal-likelihood approximation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Adapted Gauss-Hermite quadrature with `k` nodes per dimension.
    Agh { k: usize },
    /// First-order Gaussian approximation (identical to `Agh { k: 1 }`).
    Laplace1,
    /// Second-order correction of the Gaussian approximation.
    Laplace2,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "laplace1" | "lap1" => Ok(Method::Laplace1),
            "laplace2" | "lap2" => Ok(Method::Laplace2),
            _ => {
                if let Some(num) = t.strip_prefix("agh") {
                    let k: usize = num.parse().map_err(|_| {
                        Error::invalid(format!("cannot parse method `{s}`: bad node count"))
                    })?;
                    if k == 0 {
                        return Err(Error::invalid("method aghK needs k >= 1"));
                    }
                    Ok(Method::Agh { k })
                } else {
                    Err(Error::invalid(format!(
                        "unknown method `{s}` (expected aghK, laplace1 or laplace2)"
                    )))
                }
            }
        }
    }

    /// Node count of the rule this method evaluates with (1 for the
    /// first-order method; none for the second-order one).
    pub fn quadrature_k(&self) -> Option<usize> {
        match self {
            Method::Agh { k } => Some(*k),
            Method::Laplace1 => Some(1),
            Method::Laplace2 => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Agh { k } => write!(f, "agh{k}"),
            Method::Laplace1 => write!(f, "laplace1"),
            Method::Laplace2 => write!(f, "laplace2"),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Method, String> {
        Method::parse(&s).map_err(|e| e.to_string())
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// Joint log density `log g(y | z) + log h(z) = -L(z)`.
#[inline]
fn log_joint(theta: &Theta, y: ArrayView1<u8>, z: &[f64]) -> f64 {
    -neg_log_joint(theta, y, ArrayView1::from(z))
}

// ---------------------------------------------------------------------------
// adapted quadrature
// ---------------------------------------------------------------------------

/// Log marginal density of one subject under the adapted `k`-node rule,
/// together with the posterior approximation used for the adaptation.
pub fn agh_marginal(theta: &Theta, y: ArrayView1<u8>, k: usize) -> Result<(f64, PosteriorApprox)> {
    let rule = hermite_rule(k)?;
    agh_marginal_with(theta, y, &rule, &InnerOptions::default(), None)
}

/// As [`agh_marginal`], reusing a prebuilt rule and optionally warm-starting
/// the inner mode search.
pub fn agh_marginal_with(
    theta: &Theta,
    y: ArrayView1<u8>,
    rule: &HermiteRule,
    inner: &InnerOptions,
    init: Option<ArrayView1<f64>>,
) -> Result<(f64, PosteriorApprox)> {
    let q = theta.q();
    let zero;
    let start = match init {
        Some(v) => v,
        None => {
            zero = Array1::<f64>::zeros(q);
            zero.view()
        }
    };
    let post = find_mode(theta, y, start, inner)?;
    let adapted = adapt(rule, &post.mode, &post.psi)?;
    let value = agh_log_marginal_at(theta, y, &adapted)?;
    Ok((value, post))
}

/// Log marginal under a caller-supplied adaptation. The adaptation is taken
/// as given; only the integrand depends on `theta`. This is the quantity
/// whose parameter derivative the quadrature score matches.
pub fn agh_log_marginal_at(
    theta: &Theta,
    y: ArrayView1<u8>,
    adapted: &AdaptedRule,
) -> Result<f64> {
    log_integrate(|z| log_joint(theta, y, z), adapted)
}

/// Log-likelihood `sum_l log f(y_l)` under the adapted `k`-node rule.
/// Subjects are processed independently and reduced in subject order.
pub fn agh_loglik(theta: &Theta, data: &Dataset, k: usize) -> Result<f64> {
    let rule = hermite_rule(k)?;
    let inner = InnerOptions::default();
    let mut acc = crate::linalg::KahanSum::default();
    for l in 0..data.n() {
        let (v, _) = agh_marginal_with(theta, data.row(l), &rule, &inner, None)
            .map_err(|e| e.for_subject(l))?;
        acc.add(v);
    }
    Ok(acc.value())
}

/// Complete-data score of one subject at a fixed latent point, laid out in
/// free-parameter order (intercepts, then free loadings item-major):
/// `y_j - pi_j(z)` for the intercepts and `z_m (y_j - pi_j(z))` for the
/// free loadings.
fn accumulate_complete_data_score(
    theta: &Theta,
    spec: &ModelSpec,
    y: ArrayView1<u8>,
    z: &[f64],
    weight: f64,
    out: &mut [f64],
) {
    let p = spec.p();
    let q = spec.q();
    let mut pos = p;
    for j in 0..p {
        let mut e = theta.intercepts[j];
        for m in 0..q {
            e += theta.loadings[[j, m]] * z[m];
        }
        let resid = (y[j] as f64) - sigmoid(e);
        out[j] += weight * resid;
        for m in 0..q {
            if spec.is_free(j, m) {
                out[pos] += weight * z[m] * resid;
                pos += 1;
            }
        }
    }
}

/// Per-subject quadrature score: the softmax-weighted posterior expectation
/// of the complete-data score over the adapted tensor nodes. Returns the
/// score, the log marginal, and the posterior approximation so batched
/// callers can reuse all three.
pub fn agh_subject_score_with(
    theta: &Theta,
    spec: &ModelSpec,
    y: ArrayView1<u8>,
    rule: &HermiteRule,
    inner: &InnerOptions,
    init: Option<ArrayView1<f64>>,
) -> Result<(Array1<f64>, f64, PosteriorApprox)> {
    let q = theta.q();
    let zero;
    let start = match init {
        Some(v) => v,
        None => {
            zero = Array1::<f64>::zeros(q);
            zero.view()
        }
    };
    let post = find_mode(theta, y, start, inner)?;
    let adapted = adapt(rule, &post.mode, &post.psi)?;

    let d = spec.n_free();
    let mut numer = vec![0.0f64; d];
    let mut scratch = vec![0.0f64; d];
    let mut denom = 0.0f64;
    let mut max_term = f64::NEG_INFINITY;
    let log_w = adapted.log_adapted_weights().to_vec();

    adapted.for_each_node(|idx, z| {
        let mut term = log_joint(theta, y, z);
        if term.is_nan() || term == f64::INFINITY {
            return Err(Error::NonFiniteIntegrand { node: idx.to_vec() });
        }
        for &i in idx {
            term += log_w[i];
        }
        if term == f64::NEG_INFINITY {
            return Ok(());
        }
        // streaming softmax: rescale accumulators when a new maximum appears
        let w = if term <= max_term {
            (term - max_term).exp()
        } else {
            let rescale = (max_term - term).exp();
            denom *= rescale;
            for v in numer.iter_mut() {
                *v *= rescale;
            }
            max_term = term;
            1.0
        };
        denom += w;
        scratch.iter_mut().for_each(|v| *v = 0.0);
        accumulate_complete_data_score(theta, spec, y, z, w, &mut scratch);
        for (n, s) in numer.iter_mut().zip(&scratch) {
            *n += s;
        }
        Ok(())
    })?;

    let log_marginal = adapted.log_scale() + max_term + denom.ln();
    let score = Array1::from_iter(numer.iter().map(|v| v / denom));
    Ok((score, log_marginal, post))
}

/// Quadrature score of the whole sample, summed in subject order.
pub fn agh_score(theta: &Theta, spec: &ModelSpec, data: &Dataset, k: usize) -> Result<Array1<f64>> {
    let rule = hermite_rule(k)?;
    let inner = InnerOptions::default();
    let mut total = Array1::<f64>::zeros(spec.n_free());
    for l in 0..data.n() {
        let (s, _, _) = agh_subject_score_with(theta, spec, data.row(l), &rule, &inner, None)
            .map_err(|e| e.for_subject(l))?;
        total += &s;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Gaussian (Laplace) approximations
// ---------------------------------------------------------------------------

const LN_2PI: f64 = 1.8378770664093453;

fn laplace1_from_post(theta: &Theta, y: ArrayView1<u8>, post: &PosteriorApprox) -> f64 {
    let q = theta.q() as f64;
    let log_det_psi = crate::linalg::chol_log_det(&post.cholesky);
    0.5 * q * LN_2PI + 0.5 * log_det_psi - neg_log_joint(theta, y, post.mode.view())
}

/// First-order log marginal `(q/2) log 2 pi + log|Psi|/2 - L(zhat)`.
pub fn laplace1_marginal(theta: &Theta, y: ArrayView1<u8>) -> Result<(f64, PosteriorApprox)> {
    laplace1_marginal_with(theta, y, &InnerOptions::default(), None)
}

pub fn laplace1_marginal_with(
    theta: &Theta,
    y: ArrayView1<u8>,
    inner: &InnerOptions,
    init: Option<ArrayView1<f64>>,
) -> Result<(f64, PosteriorApprox)> {
    let q = theta.q();
    let zero;
    let start = match init {
        Some(v) => v,
        None => {
            zero = Array1::<f64>::zeros(q);
            zero.view()
        }
    };
    let post = find_mode(theta, y, start, inner)?;
    Ok((laplace1_from_post(theta, y, &post), post))
}

/// Column-major vectorization.
fn vec_col_major(a: &Array2<f64>) -> Vec<f64> {
    let (r, c) = a.dim();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(a[[i, j]]);
        }
    }
    out
}

/// Kronecker product `a (x) b`.
fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::<f64>::zeros((ar * br, ac * bc));
    for ia in 0..ar {
        for ja in 0..ac {
            let v = a[[ia, ja]];
            if v == 0.0 {
                continue;
            }
            for ib in 0..br {
                for jb in 0..bc {
                    out[[ia * br + ib, ja * bc + jb]] = v * b[[ib, jb]];
                }
            }
        }
    }
    out
}

/// Second-order correction coefficient at a posterior approximation:
///
/// ```text
/// c1 = (1/8)  vec^T[Psi (x) Psi]          vec[D4]
///    + (5/24) vec^T[Psi (x) Psi (x) Psi]  vec[D3 (x) D3]
/// ```
///
/// where `D3`, `D4` are the third/fourth derivative arrays of the joint log
/// density at the mode ([`crate::model::log_joint_d3`] and
/// [`crate::model::log_joint_d4`]). Zero whenever all loadings are zero,
/// since the joint log density is then quadratic in `z`.
pub fn laplace2_c1(theta: &Theta, post: &PosteriorApprox) -> f64 {
    let d3 = crate::model::log_joint_d3(theta, post.mode.view());
    let d4 = crate::model::log_joint_d4(theta, post.mode.view());
    let psi_kron2 = kron(&post.psi, &post.psi);
    let term1: f64 = vec_col_major(&psi_kron2)
        .iter()
        .zip(vec_col_major(&d4).iter())
        .map(|(a, b)| a * b)
        .sum();
    let psi_kron3 = kron(&psi_kron2, &post.psi);
    let d3_kron = kron(&d3, &d3);
    let term2: f64 = vec_col_major(&psi_kron3)
        .iter()
        .zip(vec_col_major(&d3_kron).iter())
        .map(|(a, b)| a * b)
        .sum();
    term1 / 8.0 + term2 * 5.0 / 24.0
}

/// Second-order log marginal: the first-order value plus `log(1 + c1)`.
/// Fails when the corrected density would be non-positive.
pub fn laplace2_marginal(theta: &Theta, y: ArrayView1<u8>) -> Result<(f64, PosteriorApprox)> {
    laplace2_marginal_with(theta, y, &InnerOptions::default(), None)
}

pub fn laplace2_marginal_with(
    theta: &Theta,
    y: ArrayView1<u8>,
    inner: &InnerOptions,
    init: Option<ArrayView1<f64>>,
) -> Result<(f64, PosteriorApprox)> {
    let (lap1, post) = laplace1_marginal_with(theta, y, inner, init)?;
    let c1 = laplace2_c1(theta, &post);
    if c1 <= -1.0 {
        return Err(Error::NonPositiveCorrectedDensity { value: 1.0 + c1 });
    }
    Ok((lap1 + c1.ln_1p(), post))
}

/// Second-order log-likelihood. A subject whose corrected density would be
/// non-positive falls back to the first-order value; fallbacks are counted
/// and logged, never silent.
pub fn laplace2_loglik(theta: &Theta, data: &Dataset) -> Result<f64> {
    laplace2_loglik_with(theta, data, &InnerOptions::default(), None)
}

pub fn laplace2_loglik_with(
    theta: &Theta,
    data: &Dataset,
    inner: &InnerOptions,
    warm: Option<&[Array1<f64>]>,
) -> Result<f64> {
    let mut acc = crate::linalg::KahanSum::default();
    let mut fallbacks = 0usize;
    for l in 0..data.n() {
        let init = warm.map(|w| w[l].view());
        let (lap1, post) = laplace1_marginal_with(theta, data.row(l), inner, init)
            .map_err(|e| e.for_subject(l))?;
        let c1 = laplace2_c1(theta, &post);
        if c1 <= -1.0 {
            fallbacks += 1;
            acc.add(lap1);
        } else {
            acc.add(lap1 + c1.ln_1p());
        }
    }
    if fallbacks > 0 {
        log::warn!(
            "second-order correction was non-positive for {fallbacks} of {} subjects; fell back to the first-order value there",
            data.n()
        );
    }
    Ok(acc.value())
}

/// Finite-difference step for parameter `value`: `max(1e-5, 1e-5 |value|)`.
#[inline]
pub fn fd_step(value: f64) -> f64 {
    (1e-5f64).max(1e-5 * value.abs())
}

/// Second-order score by central differences of [`laplace2_loglik`]; the
/// objective has no closed-form parameter derivative.
pub fn laplace2_score(theta: &Theta, spec: &ModelSpec, data: &Dataset) -> Result<Array1<f64>> {
    laplace2_score_with(theta, spec, data, &InnerOptions::default(), None)
}

pub fn laplace2_score_with(
    theta: &Theta,
    spec: &ModelSpec,
    data: &Dataset,
    inner: &InnerOptions,
    warm: Option<&[Array1<f64>]>,
) -> Result<Array1<f64>> {
    let flat = theta.flatten(spec);
    let d = flat.len();
    let mut score = Array1::<f64>::zeros(d);
    for i in 0..d {
        let h = fd_step(flat[i]);
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = laplace2_loglik_with(&Theta::unflatten(spec, plus.view())?, data, inner, warm)?;
        let lm = laplace2_loglik_with(&Theta::unflatten(spec, minus.view())?, data, inner, warm)?;
        score[i] = (lp - lm) / (2.0 * h);
    }
    Ok(score)
}
