//! Small dense linear algebra: inversion and symmetric eigenvalues.

use alloc::vec::Vec;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &Tensor) -> Result<Tensor, TensorError> {
    let n = a.rows();
    if n != a.cols() {
        return Err(TensorError::ShapeMismatch { op: "inverse", lhs: a.shape(), rhs: (n, n) });
    }
    let mut m = a.data().to_vec();
    let mut inv = Tensor::identity(n).into_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap_or(col);
        let p = m[pivot * n + col];
        if p.abs() < 1e-300 {
            return Err(TensorError::RankDeficient(0.0));
        }
        if pivot != col {
            for c in 0..n {
                m.swap(pivot * n + c, col * n + c);
                inv.swap(pivot * n + c, col * n + c);
            }
        }
        for c in 0..n {
            m[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m[r * n + c] -= f * m[col * n + c];
                inv[r * n + c] -= f * inv[col * n + c];
            }
        }
    }
    Tensor::from_vec(n, n, inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>, TensorError> {
    let n = a.rows();
    if n != a.cols() {
        return Err(TensorError::ShapeMismatch { op: "symmetric_eigenvalues", lhs: a.shape(), rhs: (n, n) });
    }
    let mut m = a.data().to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sgn / (theta.abs() + crate::math::sqrt(theta * theta + 1.0));
                let c = 1.0 / crate::math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}
