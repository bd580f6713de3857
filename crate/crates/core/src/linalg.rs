//! Small dense helpers on top of nalgebra.
//!
//! Everything here works on `DMatrix<f64>`; the state dimensions handled by
//! the workbench are small (tens), so dense spectral methods are fine.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.singular_values().max()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).norm()
}

/// `‖m − mᵀ‖ ≤ rel·max(‖m‖, tiny)`.
pub fn is_symmetric(m: &Mat, rel: f64) -> bool {
    m.is_square() && asymmetry(m) <= rel * m.norm().max(f64::MIN_POSITIVE)
}

/// Eigen-decomposition of the symmetric part of `m`.
pub fn sym_eigen(m: &Mat) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.min()
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.max()
}

/// Applies a scalar function to the spectrum of a symmetric matrix.
pub fn sym_apply(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let eig = sym_eigen(m);
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let fj = f(*lambda);
        scaled.column_mut(j).scale_mut(fj);
    }
    symmetrize(&(scaled * v.transpose()))
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues below zero (roundoff) are clamped.
pub fn sqrt_psd(m: &Mat) -> Mat {
    sym_apply(m, |l| l.max(0.0).sqrt())
}

/// Orthogonal projector onto the span of eigenvectors with eigenvalue above `tol·λ_max`.
pub fn range_projector(m: &Mat, rel_tol: f64) -> Mat {
    let eig = sym_eigen(m);
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let cutoff = rel_tol * lmax;
    let n = m.nrows();
    let mut p = Mat::zeros(n, n);
    if lmax == 0.0 {
        return p;
    }
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        if *lambda > cutoff {
            let v = eig.eigenvectors.column(j);
            p += v * v.transpose();
        }
    }
    symmetrize(&p)
}

/// Matrix exponential. Symmetric input goes through the spectral route,
/// anything else through nalgebra's Padé scaling-and-squaring.
pub fn expm(m: &Mat) -> Mat {
    if m.nrows() == 1 {
        return Mat::from_element(1, 1, m[(0, 0)].exp());
    }
    if is_symmetric(m, 1e-14) {
        sym_apply(m, f64::exp)
    } else {
        m.exp()
    }
}

/// Solves `Eᵀ X + X E = R` for square `E` through the Kronecker form.
pub struct LyapunovOperator {
    n: usize,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl LyapunovOperator {
    pub fn new(e: &Mat) -> Result<Self> {
        let n = e.nrows();
        let nn = n * n;
        let et = e.transpose();
        // column-major vec: vec(Eᵀ X) = (I ⊗ Eᵀ) vec X, vec(X E) = (Eᵀ ⊗ I) vec X
        let mut k = Mat::zeros(nn, nn);
        for bj in 0..n {
            for bi in 0..n {
                for i in 0..n {
                    // I ⊗ Eᵀ
                    if bi == bj {
                        for j in 0..n {
                            k[(bi * n + i, bj * n + j)] += et[(i, j)];
                        }
                    }
                    // Eᵀ ⊗ I
                    k[(bi * n + i, bj * n + i)] += et[(bi, bj)];
                }
            }
        }
        let lu = k.lu();
        if !lu.is_invertible() {
            return Err(Error::NonConvergence {
                method: "lyapunov solve".into(),
                detail: "singular Kronecker operator".into(),
            });
        }
        Ok(Self { n, lu })
    }

    pub fn solve(&self, r: &Mat) -> Result<Mat> {
        let n = self.n;
        let rhs = Vector::from_column_slice(r.as_slice());
        let x = self.lu.solve(&rhs).ok_or_else(|| Error::NonConvergence {
            method: "lyapunov solve".into(),
            detail: "LU back-substitution failed".into(),
        })?;
        Ok(Mat::from_column_slice(n, n, x.as_slice()))
    }
}

/// `⟨a, m b⟩` without allocating the product.
pub fn bilinear(a: &Vector, m: &Mat, b: &Vector) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        let bj = b[j];
        if bj == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..m.nrows() {
            s += a[i] * col[i];
        }
        acc += s * bj;
    }
    acc
}
