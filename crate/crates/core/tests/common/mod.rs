//! Shared test oracles, independent of the library's implementation paths.
#![allow(dead_code)]

use gllvm_core::model::{log1p_exp, sigmoid, Theta};
use gllvm_core::{Dataset, ModelSpec};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const SQRT_PI: f64 = 1.7724538509055159;

/// Trapezoid rule on [-12, 12] with `points` samples for the single-factor
/// marginal density `integral of prod_j g_j(y_j | z) phi(z) dz`. The
/// integrand decays like a Gaussian, so the trapezoid rule here is accurate
/// to roundoff well before 1e6 points.
pub fn trapezoid_log_marginal(theta: &Theta, y: ArrayView1<u8>, points: usize) -> f64 {
    assert_eq!(theta.q(), 1, "trapezoid oracle is univariate");
    let (a, b) = (-12.0f64, 12.0f64);
    let h = (b - a) / (points as f64 - 1.0);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..points {
        let z = a + h * i as f64;
        let mut log_g = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
        for j in 0..theta.p() {
            let eta = theta.intercepts[j] + theta.loadings[[j, 0]] * z;
            log_g += (y[j] as f64) * eta - log1p_exp(eta);
        }
        let mut v = log_g.exp();
        if i == 0 || i == points - 1 {
            v *= 0.5;
        }
        // compensated accumulation
        let t = v - comp;
        let s = sum + t;
        comp = (s - sum) - t;
        sum = s;
    }
    (sum * h).ln()
}

/// Hermite polynomial values H_k(x) and H_{k-1}(x) by the physicists'
/// recurrence H_{n+1} = 2 x H_n - 2 n H_{n-1}.
fn hermite_pair(k: usize, x: f64) -> (f64, f64) {
    let mut hm = 1.0f64; // H_0
    let mut h = 2.0 * x; // H_1
    if k == 0 {
        return (hm, 0.0);
    }
    for n in 1..k {
        let next = 2.0 * x * h - 2.0 * (n as f64) * hm;
        hm = h;
        h = next;
    }
    (h, hm) // (H_k, H_{k-1})
}

/// Root-finding oracle for the Gauss-Hermite rule: brackets the k roots of
/// H_k on a uniform scan and polishes them by bisection, then applies the
/// classical weight formula `w_i = 2^{k-1} k! sqrt(pi) / (k^2 H_{k-1}(x_i)^2)`.
/// A construction entirely independent of the Jacobi eigendecomposition.
pub fn hermite_rule_oracle(k: usize) -> (Vec<f64>, Vec<f64>) {
    let bound = (2.0 * k as f64 + 1.0).sqrt() + 2.0;
    let scan = 20_000usize;
    let step = 2.0 * bound / scan as f64;
    let mut roots = Vec::with_capacity(k);
    let mut prev_x = -bound;
    let mut prev_v = hermite_pair(k, prev_x).0;
    for i in 1..=scan {
        let x = -bound + step * i as f64;
        let v = hermite_pair(k, x).0;
        if prev_v == 0.0 {
            roots.push(prev_x);
        } else if prev_v.signum() != v.signum() {
            let (mut lo, mut hi) = (prev_x, x);
            let mut flo = prev_v;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let fm = hermite_pair(k, mid).0;
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if flo.signum() == fm.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev_x = x;
        prev_v = v;
    }
    assert_eq!(roots.len(), k, "oracle found {} of {k} roots", roots.len());
    let mut factorial = 1.0f64;
    for i in 2..=k {
        factorial *= i as f64;
    }
    let coeff = 2.0f64.powi(k as i32 - 1) * factorial * SQRT_PI / (k * k) as f64;
    let weights = roots
        .iter()
        .map(|&x| {
            let (_, hk1) = hermite_pair(k, x);
            coeff / (hk1 * hk1)
        })
        .collect();
    (roots, weights)
}

/// Central finite difference of a scalar function of a vector.
pub fn central_diff<F>(f: F, x: &Array1<f64>, i: usize, h: f64) -> f64
where
    F: Fn(&Array1<f64>) -> f64,
{
    let mut plus = x.clone();
    plus[i] += h;
    let mut minus = x.clone();
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Naive index-loop evaluation of the second-order correction coefficient.
/// Builds the symmetric derivative tensors of the joint log density
/// directly from the loadings (no calls into the library's derivative
/// arrays) and contracts them with explicit loops over q^4 and q^6 terms,
/// mirroring the Kronecker/vec patterns:
///
/// ```text
/// term1 = sum_{a,b,c,d}       Psi[a,b] Psi[c,d] T4[a,b,c,d]
/// term2 = sum_{a,b,c,e,f,g}   T3[a,b,c] T3[e,f,g] Psi[a,c] Psi[f,g] Psi[b,e]
/// c1    = term1 / 8 + 5 term2 / 24
/// ```
pub fn c1_naive(theta: &Theta, mode: &Array1<f64>, psi: &Array2<f64>) -> f64 {
    let q = theta.q();
    let p = theta.p();
    let mut t3 = vec![0.0f64; q * q * q];
    let mut t4 = vec![0.0f64; q * q * q * q];
    for j in 0..p {
        let mut eta = theta.intercepts[j];
        for m in 0..q {
            eta += theta.loadings[[j, m]] * mode[m];
        }
        let pi = sigmoid(eta);
        let s3 = pi * (1.0 - pi) * (1.0 - 2.0 * pi);
        let s4 = pi * (1.0 - pi) * (1.0 - 6.0 * pi + 6.0 * pi * pi);
        for a in 0..q {
            for b in 0..q {
                for c in 0..q {
                    let prod3 =
                        theta.loadings[[j, a]] * theta.loadings[[j, b]] * theta.loadings[[j, c]];
                    t3[(a * q + b) * q + c] -= prod3 * s3;
                    for d in 0..q {
                        t4[((a * q + b) * q + c) * q + d] -= prod3 * theta.loadings[[j, d]] * s4;
                    }
                }
            }
        }
    }
    let mut term1 = 0.0f64;
    for a in 0..q {
        for b in 0..q {
            for c in 0..q {
                for d in 0..q {
                    term1 += psi[[a, b]] * psi[[c, d]] * t4[((a * q + b) * q + c) * q + d];
                }
            }
        }
    }
    let mut term2 = 0.0f64;
    for a in 0..q {
        for b in 0..q {
            for c in 0..q {
                let left = t3[(a * q + b) * q + c];
                if left == 0.0 {
                    continue;
                }
                for e in 0..q {
                    for f in 0..q {
                        for g in 0..q {
                            term2 += left
                                * t3[(e * q + f) * q + g]
                                * psi[[a, c]]
                                * psi[[f, g]]
                                * psi[[b, e]];
                        }
                    }
                }
            }
        }
    }
    term1 / 8.0 + term2 * 5.0 / 24.0
}

/// Deterministic random model instance: loadings in [0.3, 1.5] on the
/// echelon mask, intercepts in [-1, 1].
pub fn random_instance(rng: &mut ChaCha20Rng, p: usize, q: usize) -> (ModelSpec, Theta) {
    let spec = ModelSpec::echelon(p, q).unwrap();
    let mut theta = Theta::zeros(&spec);
    for j in 0..p {
        theta.intercepts[j] = rng.random_range(-1.0..1.0);
        for m in 0..q {
            if spec.is_free(j, m) {
                theta.loadings[[j, m]] = rng.random_range(0.3..1.5);
            }
        }
    }
    (spec, theta)
}

pub fn random_response(rng: &mut ChaCha20Rng, p: usize) -> Array1<u8> {
    Array1::from_iter((0..p).map(|_| rng.random_range(0..=1u8)))
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn dataset_from_rows(rows: Vec<Vec<u8>>) -> Dataset {
    let n = rows.len();
    let p = rows[0].len();
    let mut y = Array2::<u8>::zeros((n, p));
    for (l, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            y[[l, j]] = v;
        }
    }
    Dataset::new(y).unwrap()
}

/// Double factorial (2m-1)!! of the standard normal moments:
/// `E[u^{2m}] = (2m-1)!!`, odd moments zero.
pub fn standard_normal_moment(e: usize) -> f64 {
    if e % 2 == 1 {
        return 0.0;
    }
    let mut v = 1.0f64;
    let mut k = e as i64 - 1;
    while k > 1 {
        v *= k as f64;
        k -= 2;
    }
    v
}
