//! Gauss-Hermite quadrature: base rules, per-subject adaptation, and
//! tensor-product integration over R^q.
//!
//! The base rule integrates against the weight `exp(-z^2)`. Nodes are the
//! roots of the degree-k Hermite polynomial, obtained as eigenvalues of the
//! symmetric tridiagonal Jacobi matrix (zero diagonal, off-diagonal
//! `sqrt(i/2)`); the weight of node `i` is `sqrt(pi)` times the squared
//! first component of eigenvector `i`. The recurrence coefficients are exact
//! rationals under a square root, so no polynomial root polishing is needed.
//!
//! An adapted rule recentres the tensor grid at a mode `zhat` and rescales it
//! by the Cholesky factor `T` of a curvature matrix `Psi = T T^T`:
//!
//! ```text
//! z*_t = sqrt(2) T (z_{t_1}, ..., z_{t_q})^T + zhat,   w*_t = w_t exp(z_t^2)
//! ```
//!
//! and an integral of `f` is approximated by
//! `2^{q/2} |T| * sum_t f(z*_t) * prod_d w*_{t_d}`. When `f` is a Gaussian
//! density times a polynomial of per-dimension degree at most `2k - 1`, the
//! approximation is exact (the classical Gauss-Hermite exactness degree;
//! asserted conservatively in the tests).
//!
//! Tensor nodes are enumerated in odometer order (last index fastest) and
//! accumulated with compensated summation, so results are identical across
//! thread counts and platforms.

use crate::error::{Error, Result};
use crate::linalg::{self, KahanSum};
use ndarray::{Array1, Array2};

/// Largest supported number of nodes per dimension.
pub const MAX_NODES: usize = 64;
/// Largest supported latent dimension.
pub const MAX_DIM: usize = 8;
/// Refuse tensor grids beyond this many nodes.
pub const MAX_TENSOR_NODES: u128 = 100_000_000;

/// A univariate Gauss-Hermite rule for the weight `exp(-z^2)`.
///
/// Invariants: nodes are strictly increasing and exactly antisymmetric
/// (`node_i == -node_{k-1-i}` bitwise), weights are positive and symmetric,
/// the weights sum to `sqrt(pi)`, and the second moment equals `sqrt(pi)/2`.
#[derive(Debug, Clone)]
pub struct HermiteRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl HermiteRule {
    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Rule with the node (and weight) order reversed. The reversed rule
    /// represents the same measure; it exists so symmetry of the tensor
    /// summation can be tested directly.
    pub fn reversed(&self) -> HermiteRule {
        HermiteRule {
            nodes: self.nodes.iter().rev().copied().collect(),
            weights: self.weights.iter().rev().copied().collect(),
        }
    }
}

/// Build the k-node Gauss-Hermite rule.
pub fn hermite_rule(k: usize) -> Result<HermiteRule> {
    if k == 0 || k > MAX_NODES {
        return Err(Error::invalid(format!(
            "quadrature size k must be in 1..={MAX_NODES}, got {k}"
        )));
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    if k == 1 {
        return Ok(HermiteRule {
            nodes: vec![0.0],
            weights: vec![sqrt_pi],
        });
    }

    let diag = vec![0.0f64; k];
    let off: Vec<f64> = (1..k).map(|i| (i as f64 / 2.0).sqrt()).collect();
    let (values, firsts) = linalg::sym_tridiag_eigen(&diag, &off);

    let mut nodes = values;
    let mut weights: Vec<f64> = firsts.iter().map(|q0| sqrt_pi * q0 * q0).collect();

    // The eigensolver is accurate to roundoff but not exactly symmetric;
    // fold the two halves so antisymmetry holds bitwise.
    for i in 0..k / 2 {
        let j = k - 1 - i;
        let node = 0.5 * (nodes[j] - nodes[i]);
        nodes[j] = node;
        nodes[i] = -node;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if k % 2 == 1 {
        nodes[k / 2] = 0.0;
    }

    Ok(HermiteRule { nodes, weights })
}

/// A base rule recentred at a mode and rescaled by a Cholesky factor.
#[derive(Debug, Clone)]
pub struct AdaptedRule {
    base: HermiteRule,
    mode: Array1<f64>,
    cholesky: Array2<f64>,
    /// `(q/2) ln 2 + ln|T|`; the log of the Jacobian factor.
    log_scale: f64,
    /// Per-dimension adapted weights `w_t exp(z_t^2)`.
    adapted_weights: Vec<f64>,
    /// `ln w_t + z_t^2`, used when node weights would overflow.
    log_adapted_weights: Vec<f64>,
}

impl AdaptedRule {
    pub fn q(&self) -> usize {
        self.mode.len()
    }

    pub fn k(&self) -> usize {
        self.base.k()
    }

    pub fn base(&self) -> &HermiteRule {
        &self.base
    }

    pub fn mode(&self) -> &Array1<f64> {
        &self.mode
    }

    /// Lower-triangular factor `T` with `Psi = T T^T`.
    pub fn cholesky(&self) -> &Array2<f64> {
        &self.cholesky
    }

    /// Jacobian factor `2^{q/2} |T|`.
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn adapted_weights(&self) -> &[f64] {
        &self.adapted_weights
    }

    pub fn log_adapted_weights(&self) -> &[f64] {
        &self.log_adapted_weights
    }

    /// Number of tensor nodes `k^q`.
    pub fn node_count(&self) -> usize {
        self.base.k().pow(self.q() as u32)
    }

    /// Write the adapted node for multi-index `idx` into `out`:
    /// `z* = sqrt(2) T z_idx + mode`.
    pub fn node_at(&self, idx: &[usize], out: &mut [f64]) {
        let q = self.q();
        debug_assert_eq!(idx.len(), q);
        debug_assert_eq!(out.len(), q);
        let sqrt2 = std::f64::consts::SQRT_2;
        for r in 0..q {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += self.cholesky[[r, c]] * self.base.nodes[idx[c]];
            }
            out[r] = sqrt2 * acc + self.mode[r];
        }
    }

    /// Visit every tensor node in odometer order (last index fastest).
    /// The buffers passed to the visitor are reused between calls.
    pub fn for_each_node<F>(&self, mut visit: F) -> Result<()>
    where
        F: FnMut(&[usize], &[f64]) -> Result<()>,
    {
        let q = self.q();
        let k = self.base.k();
        let mut idx = vec![0usize; q];
        let mut z = vec![0.0f64; q];
        loop {
            self.node_at(&idx, &mut z);
            visit(&idx, &z)?;
            // odometer increment, last dimension fastest
            let mut d = q;
            loop {
                if d == 0 {
                    return Ok(());
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < k {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

/// Recentre and rescale `rule` at `(mode, psi)`. `psi` must be symmetric
/// positive definite; failure of its Cholesky factorization is reported as a
/// curvature error.
pub fn adapt(rule: &HermiteRule, mode: &Array1<f64>, psi: &Array2<f64>) -> Result<AdaptedRule> {
    let q = mode.len();
    if q == 0 || q > MAX_DIM {
        return Err(Error::invalid(format!(
            "latent dimension must be in 1..={MAX_DIM}, got {q}"
        )));
    }
    if psi.nrows() != q || psi.ncols() != q {
        return Err(Error::invalid(format!(
            "psi must be {q}x{q}, got {}x{}",
            psi.nrows(),
            psi.ncols()
        )));
    }
    let count = (rule.k() as u128).pow(q as u32);
    if count > MAX_TENSOR_NODES {
        return Err(Error::invalid(format!(
            "tensor grid of {count} nodes (k = {}, q = {q}) exceeds the cap of {MAX_TENSOR_NODES}",
            rule.k()
        )));
    }
    let asym = (0..q)
        .flat_map(|i| (0..q).map(move |j| (i, j)))
        .map(|(i, j)| (psi[[i, j]] - psi[[j, i]]).abs())
        .fold(0.0f64, f64::max);
    if asym > 1e-8 * (1.0 + psi.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
        return Err(Error::invalid("psi is not symmetric".to_string()));
    }
    let cholesky =
        linalg::cholesky(psi).ok_or(Error::CurvatureNotPositiveDefinite { subject: None })?;
    let log_det_t: f64 = (0..q).map(|i| cholesky[[i, i]].ln()).sum();
    let log_scale = 0.5 * (q as f64) * std::f64::consts::LN_2 + log_det_t;

    let adapted_weights: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(z, w)| w * (z * z).exp())
        .collect();
    let log_adapted_weights: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(z, w)| w.ln() + z * z)
        .collect();

    Ok(AdaptedRule {
        base: rule.clone(),
        mode: mode.clone(),
        cholesky,
        log_scale,
        adapted_weights,
        log_adapted_weights,
    })
}

/// Approximate `integral of f over R^q` with an adapted rule:
/// `scale * sum_t f(z*_t) prod_d w*_{t_d}`.
///
/// Returns an evaluation error naming the tensor index if `f` produces a
/// NaN or infinite value at a node.
pub fn integrate<F>(f: F, adapted: &AdaptedRule) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut acc = KahanSum::default();
    adapted.for_each_node(|idx, z| {
        let fv = f(z);
        if !fv.is_finite() {
            return Err(Error::NonFiniteIntegrand { node: idx.to_vec() });
        }
        let mut w = 1.0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(d < adapted.q());
            w *= adapted.adapted_weights[i];
        }
        acc.add(fv * w);
        Ok(())
    })?;
    Ok(adapted.scale() * acc.value())
}

/// Log-space variant: given `log f`, returns `log` of the same sum,
/// accumulated by a streaming log-sum-exp so node weights and densities can
/// be far outside the representable range of `f64`.
///
/// `log f = -inf` (a zero integrand value) is allowed; NaN or `+inf` is an
/// evaluation error.
pub fn log_integrate<F>(log_f: F, adapted: &AdaptedRule) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64; // sum of exp(term - max)
    adapted.for_each_node(|idx, z| {
        let lf = log_f(z);
        if lf.is_nan() || lf == f64::INFINITY {
            return Err(Error::NonFiniteIntegrand { node: idx.to_vec() });
        }
        let mut term = lf;
        for &i in idx.iter() {
            term += adapted.log_adapted_weights[i];
        }
        if term == f64::NEG_INFINITY {
            return Ok(());
        }
        if term <= max {
            sum += (term - max).exp();
        } else {
            sum = sum * (max - term).exp() + 1.0;
            max = term;
        }
        Ok(())
    })?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(adapted.log_scale + max + sum.ln())
}
