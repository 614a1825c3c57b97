//! Eigenvalues of small symmetric matrices via the cyclic Jacobi method.
//!
//! Gram matrices at desk scale are a few hundred rows, where Jacobi sweeps
//! converge in a handful of passes and are simple to make deterministic.

/// Eigenvalues of the symmetric `n x n` matrix `a` (row-major, full storage),
/// in descending order. Convergence is declared when the off-diagonal
/// Frobenius norm falls below `1e-14` relative to the matrix norm.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix storage does not match n");
    if n == 0 {
        return Vec::new();
    }
    let mut m = a.to_vec();
    let norm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(1.0);

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = m[i * n + p];
                    let aiq = m[i * n + q];
                    m[i * n + p] = c * aip - s * aiq;
                    m[p * n + i] = m[i * n + p];
                    m[i * n + q] = s * aip + c * aiq;
                    m[q * n + i] = m[i * n + q];
                }
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).expect("eigenvalues are finite"));
    eig
}
