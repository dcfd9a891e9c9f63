//! Small dense linear algebra for d×d covariance work (d is at most a handful).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = a`.
pub fn cholesky<T: Scalar>(a: ArrayView2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: a.ncols() });
    }
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag = diag - l[[j, k]] * l[[j, k]];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite("cholesky pivot"));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s = s - l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// `log det(a)` from its Cholesky factor.
pub fn log_det_from_cholesky<T: Scalar>(l: ArrayView2<T>) -> T {
    (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<T>() * T::c(2.0)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_substitute<T: Scalar>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = Array1::<T>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn back_substitute_transposed<T: Scalar>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = Array1::<T>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s = s - l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn solve_spd<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>) -> Result<Array1<T>> {
    let l = cholesky(a)?;
    let y = forward_substitute(l.view(), b);
    Ok(back_substitute_transposed(l.view(), y.view()))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn inverse_spd<T: Scalar>(a: ArrayView2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<T>::zeros(n);
        e[j] = T::one();
        let y = forward_substitute(l.view(), e.view());
        let x = back_substitute_transposed(l.view(), y.view());
        inv.column_mut(j).assign(&x);
    }
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn symmetrize<T: Scalar>(a: &mut Array2<T>) {
    let n = a.nrows();
    let half = T::c(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let m = (a[[i, j]] + a[[j, i]]) * half;
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

pub fn max_asymmetry<T: Scalar>(a: ArrayView2<T>) -> T {
    let n = a.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues (unsorted) and the matrix whose columns are the
/// corresponding eigenvectors.
pub fn symmetric_eigen<T: Scalar>(a: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    symmetrize(&mut m);
    let mut v = Array2::<T>::eye(n);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off + m[[i, j]] * m[[i, j]];
            }
        }
        let scale: T = m.iter().map(|x| *x * *x).sum::<T>();
        if off <= T::epsilon() * T::epsilon() * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (T::c(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (m.diag().to_owned(), v)
}

pub fn min_eigenvalue<T: Scalar>(a: ArrayView2<T>) -> T {
    let (values, _) = symmetric_eigen(a);
    values.iter().fold(T::infinity(), |m, &x| m.min(x))
}

/// Symmetrizes `a` and raises every eigenvalue below `floor` to `floor`.
///
/// Returns the repaired matrix and whether any eigenvalue was raised.
pub fn floor_eigenvalues<T: Scalar>(a: ArrayView2<T>, floor: T) -> (Array2<T>, bool) {
    let mut sym = a.to_owned();
    symmetrize(&mut sym);
    let (values, vectors) = symmetric_eigen(sym.view());
    if values.iter().all(|&x| x >= floor) {
        return (sym, false);
    }
    let n = a.nrows();
    let mut out = Array2::<T>::zeros((n, n));
    for (k, &lambda) in values.iter().enumerate() {
        let lambda = lambda.max(floor);
        let vk = vectors.column(k);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] = out[[i, j]] + lambda * vk[i] * vk[j];
            }
        }
    }
    symmetrize(&mut out);
    (out, true)
}
