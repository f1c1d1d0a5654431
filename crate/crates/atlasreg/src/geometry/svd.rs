//! Singular value decomposition for the small (2x2 / 3x3) linear blocks of
//! affine maps, via cyclic Jacobi on A^T A. Returns full U, sigma, V so the
//! scaling penalty can form its gradient sum_i sign(sigma_i - 1) u_i v_i^T.

#[derive(Debug, Clone)]
pub struct SmallSvd {
    pub n: usize,
    /// Singular values, sorted descending, all >= 0.
    pub sigma: Vec<f64>,
    /// Left singular vectors, column i = u_i (row-major n x n).
    pub u: Vec<f64>,
    /// Right singular vectors, column i = v_i (row-major n x n).
    pub v: Vec<f64>,
}

/// Jacobi eigendecomposition of a symmetric n x n matrix (n <= 3).
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_sym(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..30 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q].abs();
            }
        }
        if off < 1e-300 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

pub fn svd_small(a: &[f64], n: usize) -> SmallSvd {
    assert!(n == 2 || n == 3, "svd_small supports n in {{2,3}}");
    assert_eq!(a.len(), n * n);

    // A^T A is symmetric positive semidefinite; its eigenvectors are V and
    // eigenvalues are sigma^2.
    let mut ata = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[k * n + i] * a[k * n + j];
            }
            ata[i * n + j] = s;
        }
    }
    let (eig, vraw) = jacobi_sym(ata, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());

    let mut sigma = vec![0.0; n];
    let mut v = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        sigma[col] = eig[src].max(0.0).sqrt();
        for r in 0..n {
            v[r * n + col] = vraw[r * n + src];
        }
    }

    // u_i = A v_i / sigma_i; near-zero singular values get an orthonormal
    // completion instead.
    let mut u = vec![0.0; n * n];
    let tol = 1e-12 * (1.0 + sigma[0]);
    for i in 0..n {
        if sigma[i] > tol {
            for r in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[r * n + k] * v[k * n + i];
                }
                u[r * n + i] = s / sigma[i];
            }
        } else {
            // Gram-Schmidt a basis vector against the existing columns.
            for cand in 0..n {
                let mut w = vec![0.0; n];
                w[cand] = 1.0;
                for j in 0..i {
                    let dot: f64 = (0..n).map(|r| u[r * n + j] * w[r]).sum();
                    for (r, wr) in w.iter_mut().enumerate() {
                        *wr -= dot * u[r * n + j];
                    }
                }
                let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for r in 0..n {
                        u[r * n + i] = w[r] / norm;
                    }
                    break;
                }
            }
        }
    }

    SmallSvd { n, sigma, u, v }
}

/// d/dA of sum_i |sigma_i(A) - 1| = sum_i sign(sigma_i - 1) u_i v_i^T
/// (a subgradient at sigma_i == 1 and at singular-value crossings).
pub fn scaling_penalty_grad(a: &[f64], n: usize) -> Vec<f64> {
    let svd = svd_small(a, n);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let s = svd.sigma[i] - 1.0;
        let sign = if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign != 0.0 {
            for r in 0..n {
                for c in 0..n {
                    g[r * n + c] += sign * svd.u[r * n + i] * svd.v[c * n + i];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    c[i * n + j] += a[i * n + k] * b[k * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn reconstructs_matrix() {
        let a = [1.2, -0.3, 0.5, 2.0, 0.1, -0.7, 0.4, 0.9, 1.5];
        let svd = svd_small(&a, 3);
        // A = U diag(sigma) V^T
        let mut us = vec![0.0; 9];
        for r in 0..3 {
            for i in 0..3 {
                us[r * 3 + i] = svd.u[r * 3 + i] * svd.sigma[i];
            }
        }
        let mut vt = vec![0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                vt[r * 3 + c] = svd.v[c * 3 + r];
            }
        }
        let rec = matmul(&us, &vt, 3);
        for (x, y) in rec.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn diagonal_singular_values() {
        let a = [2.0, 0.0, 0.0, 0.5];
        let svd = svd_small(&a, 2);
        assert!((svd.sigma[0] - 2.0).abs() < 1e-12);
        assert!((svd.sigma[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_difference() {
        let a = [1.3, 0.2, -0.4, 0.8, 1.1, 0.3, 0.05, -0.2, 0.9];
        let penalty = |m: &[f64]| -> f64 {
            svd_small(m, 3).sigma.iter().map(|s| (s - 1.0).abs()).sum()
        };
        let g = scaling_penalty_grad(&a, 3);
        let h = 1e-6;
        for i in 0..9 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (penalty(&ap) - penalty(&am)) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() < 1e-6,
                "entry {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }
}
