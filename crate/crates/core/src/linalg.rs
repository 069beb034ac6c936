//! Small dense linear algebra used throughout the crate.
//!
//! The matrices here are tiny (latent dimension at most 8, free-parameter
//! blocks below ~100), so plain textbook factorizations are faster and more
//! predictable than a BLAS round trip, and keep results bit-reproducible
//! across platforms and thread counts.

use ndarray::{Array1, Array2};

/// Compensated (Kahan) accumulator; summation order stays the caller's
/// responsibility, which keeps reductions deterministic.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn add(&mut self, value: f64) {
        let y = value - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` when a pivot is non-positive or non-finite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the lower Cholesky factor.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Inverse of `L L^T` given the lower Cholesky factor.
pub fn chol_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = chol_solve(l, &e);
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    // The inverse is symmetric in exact arithmetic; enforce it.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    inv
}

/// `log det(L L^T) = 2 sum_i log L_ii`.
pub fn chol_log_det(l: &Array2<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>()
}

/// LU factorization with partial pivoting. Returns the packed factors and
/// the row permutation, or `None` if the matrix is numerically singular.
pub struct Lu {
    packed: Array2<f64>,
    perm: Vec<usize>,
}

pub fn lu_factor(a: &Array2<f64>) -> Option<Lu> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut m = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = m[[col, col]].abs();
        for r in (col + 1)..n {
            let v = m[[r, col]].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if !(pivot_val > f64::EPSILON * 16.0 * (n as f64)) || !pivot_val.is_finite() {
            return None;
        }
        if pivot_row != col {
            perm.swap(col, pivot_row);
            for c in 0..n {
                let tmp = m[[col, c]];
                m[[col, c]] = m[[pivot_row, c]];
                m[[pivot_row, c]] = tmp;
            }
        }
        let piv = m[[col, col]];
        for r in (col + 1)..n {
            let factor = m[[r, col]] / piv;
            m[[r, col]] = factor;
            for c in (col + 1)..n {
                m[[r, c]] -= factor * m[[col, c]];
            }
        }
    }
    Some(Lu { packed: m, perm })
}

impl Lu {
    pub fn solve_vec(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.perm.len();
        let mut x = Array1::<f64>::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        for i in 0..n {
            for k in 0..i {
                let f = self.packed[[i, k]] * x[k];
                x[i] -= f;
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let f = self.packed[[i, k]] * x[k];
                x[i] -= f;
            }
            x[i] /= self.packed[[i, i]];
        }
        x
    }

    /// Solve `A X = B` column by column.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let n = self.perm.len();
        let mut out = Array2::<f64>::zeros((n, b.ncols()));
        for j in 0..b.ncols() {
            let col = self.solve_vec(&b.column(j).to_owned());
            for i in 0..n {
                out[[i, j]] = col[i];
            }
        }
        out
    }
}

/// Eigenvalues and first eigenvector components of a symmetric tridiagonal
/// matrix, via the implicit-shift QL sweep with Wilkinson shifts.
///
/// Only the first component of each eigenvector is accumulated: that is all
/// a Golub-Welsch quadrature construction needs (the weight of node `i` is
/// `mu0 * q_{0i}^2`).
///
/// Returns `(eigenvalues, first_components)` sorted by ascending eigenvalue.
pub fn sym_tridiag_eigen(diag: &[f64], off: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    assert_eq!(off.len(), n.saturating_sub(1));
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    // first row of the accumulated rotation product, starts as e_1^T
    let mut q0 = vec![0.0f64; n];
    q0[0] = 1.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            // find the first small off-diagonal at or after l
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 50, "tridiagonal QL did not converge");

            // Wilkinson shift from the leading 2x2 of the active block
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let sign_r = if g >= 0.0 { r } else { -r };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                // accumulate the rotation into the tracked first row
                f = q0[i + 1];
                q0[i + 1] = s * q0[i] + c * f;
                q0[i] = c * q0[i] - s * f;
            }
            if r == 0.0 && m > l + 1 {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap());
    let values = order.iter().map(|&i| d[i]).collect();
    let firsts = order.iter().map(|&i| q0[i]).collect();
    (values, firsts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn cholesky_round_trip() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let l = cholesky(&a).unwrap();
        let back = l.dot(&l.t());
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(back[[i, j]], a[[i, j]], epsilon = 1e-12);
            }
        }
        let b = array![1.0, -2.0, 0.5];
        let x = chol_solve(&l, &b);
        let r = a.dot(&x);
        for i in 0..3 {
            assert_relative_eq!(r[i], b[i], epsilon = 1e-10);
        }
        let inv = chol_inverse(&l);
        let ident = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(ident[[i, j]], expect, epsilon = 1e-10);
            }
        }
        assert_relative_eq!(
            chol_log_det(&l),
            (4.0f64 * 5.0 * 3.0
                - 4.0 * 1.0 * 1.0
                - 2.0 * 2.0 * 3.0
                + 2.0 * 1.0 * 0.6
                + 0.6 * 2.0 * 1.0
                - 0.6 * 5.0 * 0.6)
                .ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a).is_none());
    }

    #[test]
    fn lu_solves_nonsymmetric() {
        let a = array![[0.0, 2.0, 1.0], [1.0, -1.0, 0.5], [3.0, 0.1, -2.0]];
        let lu = lu_factor(&a).unwrap();
        let b = array![1.0, 2.0, 3.0];
        let x = lu.solve_vec(&b);
        let r = a.dot(&x);
        for i in 0..3 {
            assert_relative_eq!(r[i], b[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn lu_rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(lu_factor(&a).is_none());
    }

    #[test]
    fn tridiag_eigen_2x2() {
        // [[0, b], [b, 0]] has eigenvalues -b, +b with first components
        // (1/sqrt(2), 1/sqrt(2)) up to sign.
        let b = (0.5f64).sqrt();
        let (vals, firsts) = sym_tridiag_eigen(&[0.0, 0.0], &[b]);
        assert_relative_eq!(vals[0], -b, epsilon = 1e-14);
        assert_relative_eq!(vals[1], b, epsilon = 1e-14);
        assert_relative_eq!(firsts[0] * firsts[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(firsts[1] * firsts[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn kahan_matches_exact_on_ill_conditioned_sum() {
        let mut acc = KahanSum::default();
        for _ in 0..10_000 {
            acc.add(0.1);
        }
        assert_relative_eq!(acc.value(), 1000.0, epsilon = 1e-12);
    }
}
