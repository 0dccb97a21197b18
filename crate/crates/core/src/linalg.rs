//! Dense Householder QR and cyclic Jacobi eigen-decomposition.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Result of a Householder least-squares solve.
#[derive(Debug, Clone)]
pub struct QrSolve {
    pub coef: Array1<f64>,
    /// Upper-triangular factor, `n × n`.
    pub r: Array2<f64>,
    /// Columns whose diagonal of `R` vanished relative to the column norm.
    pub dependent: Vec<usize>,
}

/// Relative threshold on `|R_jj| / ||a_j||` below which column `j` counts as dependent.
pub const RANK_TOL: f64 = 1e-9;

/// Least squares `min ||A x - b||` by Householder reflections. `A` is `m × n`, `m ≥ n`.
pub fn qr_lstsq(a: ArrayView2<f64>, b: ArrayView1<f64>) -> QrSolve {
    let (m, n) = a.dim();
    assert!(m >= n, "qr_lstsq needs m >= n");
    assert_eq!(b.len(), m);
    let mut w = a.to_owned();
    let mut y = b.to_owned();
    let col_norms: Vec<f64> = (0..n).map(|j| w.column(j).dot(&w.column(j)).sqrt()).collect();
    let mut dependent = Vec::new();

    for k in 0..n {
        let mut norm = 0.0;
        for i in k..m {
            norm += w[[i, k]] * w[[i, k]];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if w[[k, k]] > 0.0 { -norm } else { norm };
        // v = x - alpha e1, stored in place below the diagonal
        let mut v: Vec<f64> = (k..m).map(|i| w[[i, k]]).collect();
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        for j in k..n {
            let mut s = 0.0;
            for (t, i) in (k..m).enumerate() {
                s += v[t] * w[[i, j]];
            }
            let f = 2.0 * s / vtv;
            for (t, i) in (k..m).enumerate() {
                w[[i, j]] -= f * v[t];
            }
        }
        let mut s = 0.0;
        for (t, i) in (k..m).enumerate() {
            s += v[t] * y[i];
        }
        let f = 2.0 * s / vtv;
        for (t, i) in (k..m).enumerate() {
            y[i] -= f * v[t];
        }
    }

    let mut r = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            r[[i, j]] = w[[i, j]];
        }
    }
    for j in 0..n {
        if col_norms[j] == 0.0 || r[[j, j]].abs() <= RANK_TOL * col_norms[j] {
            dependent.push(j);
        }
    }

    let mut coef = Array1::<f64>::zeros(n);
    if dependent.is_empty() {
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= r[[i, j]] * coef[j];
            }
            coef[i] = s / r[[i, i]];
        }
    }
    QrSolve { coef, r, dependent }
}

/// `(RᵀR)⁻¹ = R⁻¹ R⁻ᵀ` for an invertible upper-triangular `R`.
pub fn r_inverse_gram(r: &Array2<f64>) -> Array2<f64> {
    let n = r.nrows();
    let mut rinv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        rinv[[j, j]] = 1.0 / r[[j, j]];
        for i in (0..j).rev() {
            let mut s = 0.0;
            for k in i + 1..=j {
                s += r[[i, k]] * rinv[[k, j]];
            }
            rinv[[i, j]] = -s / r[[i, i]];
        }
    }
    rinv.dot(&rinv.t())
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls below `tol`.
pub fn jacobi_eigen(a: ArrayView2<f64>, tol: f64) -> SymEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigen needs a square matrix");
    let mut m: Vec<f64> = a.iter().copied().collect();
    // symmetrize against round-off in the caller's assembly
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += m[i * n + j] * m[i * n + j];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut sweeps = 0;
    while sweeps < 100 && off(&m) >= tol {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[a * n + a].total_cmp(&m[b * n + b]).then(a.cmp(&b)));
    let values = order.iter().map(|&j| m[j * n + j]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, dst]] = v[k * n + src];
        }
    }
    SymEigen {
        values,
        vectors,
        sweeps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn qr_solves_exact_system() {
        let a = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]];
        let b = array![1.0, 3.0, 5.0];
        let s = qr_lstsq(a.view(), b.view());
        assert!(s.dependent.is_empty());
        assert_relative_eq!(s.coef[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(s.coef[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn qr_flags_dependent_column() {
        let a = array![[1.0, 2.0, 0.0], [1.0, 2.0, 1.0], [1.0, 2.0, 5.0], [1.0, 2.0, 2.0]];
        let b = array![1.0, 2.0, 3.0, 4.0];
        assert_eq!(qr_lstsq(a.view(), b.view()).dependent, vec![1]);
    }

    #[test]
    fn gram_inverse_matches_direct() {
        let a = array![[2.0, 1.0], [0.0, 3.0], [1.0, 1.0]];
        let s = qr_lstsq(a.view(), array![0.0, 0.0, 0.0].view());
        let g = r_inverse_gram(&s.r);
        let ata = a.t().dot(&a);
        let id = ata.dot(&g);
        assert_relative_eq!(id[[0, 0]], 1.0, epsilon = 1e-12);
        assert_relative_eq!(id[[0, 1]], 0.0, epsilon = 1e-12);
        assert_relative_eq!(id[[1, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = array![[4.0, 1.0, 2.0], [1.0, 3.0, 0.5], [2.0, 0.5, 1.0]];
        let e = jacobi_eigen(a.view(), 1e-12);
        let recon = e.vectors.dot(&Array2::from_diag(&Array1::from(e.values.clone()))).dot(&e.vectors.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-10);
        }
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        // trace is preserved
        assert_relative_eq!(e.values.iter().sum::<f64>(), 8.0, epsilon = 1e-12);
    }
}
