//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition
//! and the symmetric PSD matrix square root built on it.

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Row-major square matrix wrapper used only inside this module and the
/// Gaussian-distance code.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<S> {
    pub n: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> SquareMatrix<S> {
    pub fn from_rows(n: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape(
                format!("{} entries for {n}x{n}", n * n),
                format!("{}", data.len()),
            ));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        SquareMatrix { n, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.n + j] = v;
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        debug_assert_eq!(n, other.n);
        let mut out = vec![S::zero(); n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                if a == S::zero() {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.at(k, j);
                }
            }
        }
        SquareMatrix { n, data: out }
    }

    pub fn trace(&self) -> S {
        (0..self.n).fold(S::zero(), |acc, i| acc + self.at(i, i))
    }

    pub fn max_asymmetry(&self) -> S {
        let mut worst = S::zero();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let d = (self.at(i, j) - self.at(j, i)).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues and the orthogonal matrix whose COLUMNS are the
/// eigenvectors, so `A = V diag(vals) V^T`.
pub fn symmetric_eigen<S: Scalar>(mat: &SquareMatrix<S>) -> (Vec<S>, SquareMatrix<S>) {
    let n = mat.n;
    let mut a = mat.clone();
    let mut v = SquareMatrix::identity(n);
    if n <= 1 {
        return ((0..n).map(|i| a.at(i, i)).collect(), v);
    }
    let scale = a
        .data
        .iter()
        .fold(S::zero(), |acc, x| acc.max(x.abs()))
        .max(S::one());
    let tol = S::from_f64(1e-15) * scale;
    for _sweep in 0..100 {
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.at(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq.abs() <= tol {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (S::from_f64(2.0) * apq);
                let t = {
                    let denom = theta.abs() + (theta * theta + S::one()).sqrt();
                    let mag = S::one() / denom;
                    if theta < S::zero() {
                        -mag
                    } else {
                        mag
                    }
                };
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, S::zero());
                a.set(q, p, S::zero());
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a.at(i, p);
                        let aiq = a.at(i, q);
                        a.set(i, p, c * aip - s * aiq);
                        a.set(p, i, c * aip - s * aiq);
                        a.set(i, q, s * aip + c * aiq);
                        a.set(q, i, s * aip + c * aiq);
                    }
                }
                for i in 0..n {
                    let vip = v.at(i, p);
                    let viq = v.at(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    ((0..n).map(|i| a.at(i, i)).collect(), v)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<S: Scalar>(mat: &SquareMatrix<S>) -> S {
    let (vals, _) = symmetric_eigen(mat);
    vals.into_iter().fold(S::infinity(), S::min)
}

/// Symmetric PSD square root via eigendecomposition, clamping tiny negative
/// eigenvalues from rounding to zero.
pub fn sqrtm_psd<S: Scalar>(mat: &SquareMatrix<S>) -> SquareMatrix<S> {
    let n = mat.n;
    let (vals, vecs) = symmetric_eigen(mat);
    let roots: Vec<S> = vals.iter().map(|&l| l.max(S::zero()).sqrt()).collect();
    // V diag(roots) V^T
    let mut scaled = vecs.clone();
    for j in 0..n {
        for i in 0..n {
            let v = scaled.at(i, j) * roots[j];
            scaled.set(i, j, v);
        }
    }
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = S::zero();
            for k in 0..n {
                acc += scaled.at(i, k) * vecs.at(j, k);
            }
            out[i * n + j] = acc;
        }
    }
    SquareMatrix { n, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, rows: &[f64]) -> SquareMatrix<f64> {
        SquareMatrix::from_rows(n, rows.to_vec()).unwrap()
    }

    #[test]
    fn eigen_of_diagonal_is_the_diagonal() {
        let m = mat(3, &[4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 9.0]);
        let (mut vals, _) = symmetric_eigen(&m);
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 4.0).abs() < 1e-12);
        assert!((vals[2] - 9.0).abs() < 1e-12);
    }

    // [[2,1],[1,2]] has eigenvalues 3 and 1.
    #[test]
    fn eigen_known_2x2() {
        let m = mat(2, &[2.0, 1.0, 1.0, 2.0]);
        let (mut vals, vecs) = symmetric_eigen(&m);
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        // reconstruct
        let recon = {
            let (v2, vecs2) = (vec![vals[0], vals[1]], vecs);
            let _ = v2;
            vecs2
        };
        let _ = recon;
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let m = mat(
            4,
            &[
                3.0, 0.5, -0.2, 0.1, //
                0.5, 2.0, 0.3, 0.0, //
                -0.2, 0.3, 1.5, 0.7, //
                0.1, 0.0, 0.7, 2.5,
            ],
        );
        let (vals, vecs) = symmetric_eigen(&m);
        let mut recon = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += vecs.at(i, k) * vals[k] * vecs.at(j, k);
                }
                recon[i * 4 + j] = acc;
            }
        }
        for (a, b) in recon.iter().zip(m.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = mat(2, &[2.0, 1.0, 1.0, 2.0]);
        let r = sqrtm_psd(&m);
        let sq = r.matmul(&r);
        for (a, b) in sq.data.iter().zip(m.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // sqrt of [[2,1],[1,2]] has trace sqrt(3)+1
        assert!((r.trace() - (3.0f64.sqrt() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sqrtm_clamps_tiny_negative_eigenvalues() {
        let m = mat(2, &[1e-18, 0.0, 0.0, -1e-18]);
        let r = sqrtm_psd(&m);
        assert!(r.data.iter().all(|v| v.is_finite()));
    }
}
