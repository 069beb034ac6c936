//! Binary-item latent variable model kernel.
//!
//! Items are conditionally independent Bernoulli variables with logit link:
//! `P(y_j = 1 | z) = sigma(eta_j)` with `eta_j = alpha0_j + alpha_j^T z`, and
//! the latent vector `z` carries a standard normal prior. The central object
//! is the complete-data negative log density
//!
//! ```text
//! L(z) = sum_j [ log(1 + exp(eta_j)) - y_j eta_j ] + (q/2) log(2 pi) + z^T z / 2
//! ```
//!
//! together with its derivatives in `z` up to fourth order, which drive the
//! posterior mode solves, the quadrature adaptation, and the second-order
//! density correction. All logistic quantities are evaluated through a
//! sign-branched sigmoid and the stable `log1p` rewrite of
//! `log(1 + exp(eta))`; moderate loadings times tail quadrature nodes push
//! `|eta|` well past 30, where the naive forms overflow or lose all
//! precision. The cubic and quartic scalar factors are written in terms of
//! `pi = sigma(eta)` rather than `exp(eta)`.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow for large `x`.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Item family. Only Bernoulli/logit items exist in this version; the tag
/// keeps file formats and configs forward-compatible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    BinaryLogit,
}

/// Model dimensions and the loading pattern that identifies the factors.
///
/// `loading_mask[(j, m)]` is `true` when loading `(item j, factor m)` is a
/// free parameter and `false` when it is fixed at zero. Identification
/// requires the echelon pattern: for factor `m`, the loadings of items
/// `0..m` are fixed at zero. An all-false mask (intercept-only model) is
/// also accepted; every other pattern must give each factor at least one
/// free loading.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    p: usize,
    q: usize,
    loading_mask: Array2<bool>,
    family: Family,
}

impl ModelSpec {
    pub fn new(p: usize, q: usize, loading_mask: Array2<bool>) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("item count p must be at least 1"));
        }
        if q == 0 {
            return Err(Error::invalid("factor count q must be at least 1"));
        }
        if q > p {
            return Err(Error::invalid(format!(
                "factor count q = {q} must not exceed item count p = {p}"
            )));
        }
        if loading_mask.nrows() != p || loading_mask.ncols() != q {
            return Err(Error::invalid(format!(
                "loading mask must be {p}x{q}, got {}x{}",
                loading_mask.nrows(),
                loading_mask.ncols()
            )));
        }
        let intercept_only = !loading_mask.iter().any(|&m| m);
        if !intercept_only {
            for m in 1..q {
                for j in 0..m.min(p) {
                    if loading_mask[[j, m]] {
                        return Err(Error::invalid(format!(
                            "loading mask is not identified: entry (item {j}, factor {m}) must be fixed at zero"
                        )));
                    }
                }
            }
            for m in 0..q {
                if !(0..p).any(|j| loading_mask[[j, m]]) {
                    return Err(Error::invalid(format!(
                        "factor {m} has no free loading"
                    )));
                }
            }
        }
        Ok(ModelSpec {
            p,
            q,
            loading_mask,
            family: Family::BinaryLogit,
        })
    }

    /// Echelon pattern: all loadings free except items `0..m` of factor `m`.
    pub fn echelon(p: usize, q: usize) -> Result<Self> {
        let mask = Array2::from_shape_fn((p, q), |(j, m)| j >= m);
        ModelSpec::new(p, q, mask)
    }

    /// Intercept-only model: a single (inert) factor with every loading
    /// fixed at zero.
    pub fn intercept_only(p: usize) -> Result<Self> {
        ModelSpec::new(p, 1, Array2::from_elem((p, 1), false))
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn loading_mask(&self) -> &Array2<bool> {
        &self.loading_mask
    }

    pub fn is_free(&self, item: usize, factor: usize) -> bool {
        self.loading_mask[[item, factor]]
    }

    pub fn n_free_loadings(&self) -> usize {
        self.loading_mask.iter().filter(|&&m| m).count()
    }

    /// Total free parameters: `p` intercepts plus the free loadings.
    pub fn n_free(&self) -> usize {
        self.p + self.n_free_loadings()
    }

    /// Names in flattening order: `a0_1..a0_p`, then `a{item}_{factor}` for
    /// free loadings in item-major order (1-based labels).
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.p).map(|j| format!("a0_{j}")).collect();
        for j in 0..self.p {
            for m in 0..self.q {
                if self.loading_mask[[j, m]] {
                    names.push(format!("a{}_{}", j + 1, m + 1));
                }
            }
        }
        names
    }
}

/// Model parameters: intercepts, loadings, and (frozen) scale parameters.
///
/// Masked loading entries are kept bit-zero; `flatten`/`unflatten` round-trip
/// exactly, with intercepts first and free loadings following in item-major
/// order. Scales are carried for completeness but pinned at 1 for binary
/// items, so they never enter the free-parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub intercepts: Array1<f64>,
    pub loadings: Array2<f64>,
    pub scales: Array1<f64>,
}

impl Theta {
    pub fn zeros(spec: &ModelSpec) -> Theta {
        Theta {
            intercepts: Array1::zeros(spec.p()),
            loadings: Array2::zeros((spec.p(), spec.q())),
            scales: Array1::ones(spec.p()),
        }
    }

    /// Build from explicit parts, verifying dimensions and that masked
    /// loading cells are exactly zero.
    pub fn from_parts(
        spec: &ModelSpec,
        intercepts: Array1<f64>,
        loadings: Array2<f64>,
    ) -> Result<Theta> {
        if intercepts.len() != spec.p() {
            return Err(Error::invalid(format!(
                "expected {} intercepts, got {}",
                spec.p(),
                intercepts.len()
            )));
        }
        if loadings.nrows() != spec.p() || loadings.ncols() != spec.q() {
            return Err(Error::invalid(format!(
                "loadings must be {}x{}, got {}x{}",
                spec.p(),
                spec.q(),
                loadings.nrows(),
                loadings.ncols()
            )));
        }
        for j in 0..spec.p() {
            for m in 0..spec.q() {
                if !spec.is_free(j, m) && loadings[[j, m]] != 0.0 {
                    return Err(Error::invalid(format!(
                        "loading (item {}, factor {}) is masked but non-zero",
                        j + 1,
                        m + 1
                    )));
                }
            }
        }
        Ok(Theta {
            intercepts,
            loadings,
            scales: Array1::ones(spec.p()),
        })
    }

    /// Free-parameter vector: intercepts by item, then free loadings in
    /// item-major order.
    pub fn flatten(&self, spec: &ModelSpec) -> Array1<f64> {
        let mut out = Vec::with_capacity(spec.n_free());
        out.extend(self.intercepts.iter().copied());
        for j in 0..spec.p() {
            for m in 0..spec.q() {
                if spec.is_free(j, m) {
                    out.push(self.loadings[[j, m]]);
                }
            }
        }
        Array1::from_vec(out)
    }

    /// Inverse of [`Theta::flatten`]; masked cells come back bit-zero.
    pub fn unflatten(spec: &ModelSpec, flat: ArrayView1<f64>) -> Result<Theta> {
        if flat.len() != spec.n_free() {
            return Err(Error::invalid(format!(
                "expected a free-parameter vector of length {}, got {}",
                spec.n_free(),
                flat.len()
            )));
        }
        let mut theta = Theta::zeros(spec);
        for j in 0..spec.p() {
            theta.intercepts[j] = flat[j];
        }
        let mut pos = spec.p();
        for j in 0..spec.p() {
            for m in 0..spec.q() {
                if spec.is_free(j, m) {
                    theta.loadings[[j, m]] = flat[pos];
                    pos += 1;
                }
            }
        }
        Ok(theta)
    }

    pub fn p(&self) -> usize {
        self.intercepts.len()
    }

    pub fn q(&self) -> usize {
        self.loadings.ncols()
    }
}

/// Binary response matrix, `n` subjects by `p` items, entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Array2<u8>,
}

impl Dataset {
    pub fn new(y: Array2<u8>) -> Result<Dataset> {
        if y.nrows() == 0 {
            return Err(Error::invalid("dataset must contain at least one subject"));
        }
        if y.ncols() == 0 {
            return Err(Error::invalid("dataset must contain at least one item"));
        }
        for ((l, j), &v) in y.indexed_iter() {
            if v > 1 {
                return Err(Error::invalid(format!(
                    "response at subject {l}, item {j} is {v}; entries must be 0 or 1"
                )));
            }
        }
        Ok(Dataset { y })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn row(&self, l: usize) -> ArrayView1<'_, u8> {
        self.y.row(l)
    }

    pub fn responses(&self) -> &Array2<u8> {
        &self.y
    }

    /// Per-item sample means.
    pub fn item_means(&self) -> Array1<f64> {
        let n = self.n() as f64;
        Array1::from_iter(
            (0..self.p()).map(|j| self.y.column(j).iter().map(|&v| v as f64).sum::<f64>() / n),
        )
    }
}

/// Linear predictors `eta_j = alpha0_j + alpha_j^T z`.
pub fn eta(theta: &Theta, z: ArrayView1<f64>) -> Array1<f64> {
    let p = theta.p();
    let q = theta.q();
    let mut out = theta.intercepts.clone();
    for j in 0..p {
        let mut acc = 0.0;
        for m in 0..q {
            acc += theta.loadings[[j, m]] * z[m];
        }
        out[j] += acc;
    }
    out
}

/// Complete-data negative log density `L(z)` for one subject.
pub fn neg_log_joint(theta: &Theta, y: ArrayView1<u8>, z: ArrayView1<f64>) -> f64 {
    let q = theta.q() as f64;
    let mut acc = 0.5 * q * LN_2PI;
    for m in 0..theta.q() {
        acc += 0.5 * z[m] * z[m];
    }
    for j in 0..theta.p() {
        let mut e = theta.intercepts[j];
        for m in 0..theta.q() {
            e += theta.loadings[[j, m]] * z[m];
        }
        acc += log1p_exp(e) - (y[j] as f64) * e;
    }
    acc
}

/// Gradient of `L`: `-sum_j alpha_j (y_j - pi_j(z)) + z`.
pub fn neg_log_joint_grad(theta: &Theta, y: ArrayView1<u8>, z: ArrayView1<f64>) -> Array1<f64> {
    let q = theta.q();
    let mut g = Array1::<f64>::zeros(q);
    for m in 0..q {
        g[m] = z[m];
    }
    for j in 0..theta.p() {
        let mut e = theta.intercepts[j];
        for m in 0..q {
            e += theta.loadings[[j, m]] * z[m];
        }
        let resid = (y[j] as f64) - sigmoid(e);
        for m in 0..q {
            g[m] -= theta.loadings[[j, m]] * resid;
        }
    }
    g
}

/// Hessian of `L`: `sum_j alpha_j alpha_j^T pi_j (1 - pi_j) + I`. Positive
/// definite for every finite `z`, with smallest eigenvalue at least 1.
pub fn neg_log_joint_hess(theta: &Theta, z: ArrayView1<f64>) -> Array2<f64> {
    let q = theta.q();
    let mut h = Array2::<f64>::eye(q);
    for j in 0..theta.p() {
        let mut e = theta.intercepts[j];
        for m in 0..q {
            e += theta.loadings[[j, m]] * z[m];
        }
        let pi = sigmoid(e);
        let w = pi * (1.0 - pi);
        for a in 0..q {
            let la = theta.loadings[[j, a]];
            if la == 0.0 {
                continue;
            }
            for b in 0..q {
                h[[a, b]] += la * theta.loadings[[j, b]] * w;
            }
        }
    }
    h
}

/// Third derivative array of the joint log density `log g(y|z) + log h(z)`
/// (the negative of the third derivative of `L`), arranged as a `q^2 x q`
/// matrix whose row `a + q b`, column `c` holds the `(a, b, c)` entry:
///
/// `-sum_j alpha_a alpha_b alpha_c * pi (1 - pi) (1 - 2 pi)`.
pub fn log_joint_d3(theta: &Theta, z: ArrayView1<f64>) -> Array2<f64> {
    let q = theta.q();
    let mut out = Array2::<f64>::zeros((q * q, q));
    for j in 0..theta.p() {
        let mut e = theta.intercepts[j];
        for m in 0..q {
            e += theta.loadings[[j, m]] * z[m];
        }
        let pi = sigmoid(e);
        let s3 = pi * (1.0 - pi) * (1.0 - 2.0 * pi);
        if s3 == 0.0 {
            continue;
        }
        for a in 0..q {
            let la = theta.loadings[[j, a]];
            if la == 0.0 {
                continue;
            }
            for b in 0..q {
                let lab = la * theta.loadings[[j, b]];
                if lab == 0.0 {
                    continue;
                }
                for c in 0..q {
                    out[[a + q * b, c]] -= lab * theta.loadings[[j, c]] * s3;
                }
            }
        }
    }
    out
}

/// Fourth derivative array of the joint log density, arranged as a
/// `q^3 x q` matrix whose row `a + q b + q^2 c`, column `d` holds
///
/// `-sum_j alpha_a alpha_b alpha_c alpha_d * pi (1 - pi) (1 - 6 pi + 6 pi^2)`.
pub fn log_joint_d4(theta: &Theta, z: ArrayView1<f64>) -> Array2<f64> {
    let q = theta.q();
    let mut out = Array2::<f64>::zeros((q * q * q, q));
    for j in 0..theta.p() {
        let mut e = theta.intercepts[j];
        for m in 0..q {
            e += theta.loadings[[j, m]] * z[m];
        }
        let pi = sigmoid(e);
        let s4 = pi * (1.0 - pi) * (1.0 - 6.0 * pi + 6.0 * pi * pi);
        if s4 == 0.0 {
            continue;
        }
        for a in 0..q {
            let la = theta.loadings[[j, a]];
            if la == 0.0 {
                continue;
            }
            for b in 0..q {
                let lab = la * theta.loadings[[j, b]];
                if lab == 0.0 {
                    continue;
                }
                for c in 0..q {
                    let labc = lab * theta.loadings[[j, c]];
                    if labc == 0.0 {
                        continue;
                    }
                    for d in 0..q {
                        out[[a + q * b + q * q * c, d]] -= labc * theta.loadings[[j, d]] * s4;
                    }
                }
            }
        }
    }
    out
}
