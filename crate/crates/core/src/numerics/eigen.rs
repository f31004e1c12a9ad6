//! Symmetric eigendecomposition by cyclic Jacobi rotations, and a thin SVD
//! built on the eigendecomposition of the smaller Gram matrix.

use super::matrix::{axpy, dot, norm2, DenseMatrix};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, eigenvalues in non-increasing order.
#[derive(Debug, Clone)]
pub struct EigDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors stored as columns.
    pub eigenvectors: DenseMatrix,
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `rows × r`, orthonormal columns.
    pub u: DenseMatrix,
    /// Non-negative, non-increasing.
    pub singular_values: Vec<f64>,
    /// `r × cols`, orthonormal rows.
    pub vt: DenseMatrix,
}

pub fn sym_eig_desc(s: &DenseMatrix) -> Result<EigDecomposition> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::dim(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if !s.is_finite() {
        return Err(Error::invalid("matrix contains non-finite entries"));
    }
    let scale = s.max_abs();
    for i in 0..n {
        for j in 0..i {
            if (s[(i, j)] - s[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::dim(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }

    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let mut v = DenseMatrix::identity(n);
    jacobi_sweeps(&mut a, &mut v);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    apply_sign_convention(&mut eigenvectors);
    Ok(EigDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn jacobi_sweeps(a: &mut DenseMatrix, v: &mut DenseMatrix) {
    let n = a.rows();
    let total = a.frobenius_norm();
    if total == 0.0 {
        return;
    }
    let negligible = 1e-17 * total / n as f64;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Skip rotations that can no longer change the diagonal.
                if apq.abs() < 1e-18 * (app.abs() + aqq.abs()) || apq.abs() < negligible {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    a[(k, p)] = new_kp;
                    a[(p, k)] = new_kp;
                    a[(k, q)] = new_kq;
                    a[(q, k)] = new_kq;
                }
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
}

/// Flips each column so that its largest-magnitude entry is positive.
pub fn apply_sign_convention(m: &mut DenseMatrix) {
    for j in 0..m.cols() {
        let mut best = 0.0f64;
        for i in 0..m.rows() {
            let x = m[(i, j)];
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            for i in 0..m.rows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

pub fn thin_svd(a: &DenseMatrix) -> Result<ThinSvd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::invalid("SVD of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("matrix contains non-finite entries"));
    }
    if m <= n {
        // Eigenvectors of A Aᵀ are the left singular vectors.
        let eig = sym_eig_desc(&a.gram_rows())?;
        let u_cols: Vec<Vec<f64>> = (0..m).map(|j| eig.eigenvectors.col(j)).collect();
        let (s, v_cols) = complete_side(a, &u_cols, true)?;
        let u = cols_to_matrix(&u_cols, m);
        let vt = DenseMatrix::from_rows(&v_cols)?;
        Ok(ThinSvd {
            u,
            singular_values: s,
            vt,
        })
    } else {
        let eig = sym_eig_desc(&a.gram_cols())?;
        let v_cols: Vec<Vec<f64>> = (0..n).map(|j| eig.eigenvectors.col(j)).collect();
        let (s, u_cols) = complete_side(a, &v_cols, false)?;
        let u = cols_to_matrix(&u_cols, m);
        let vt = DenseMatrix::from_rows(&v_cols)?;
        Ok(ThinSvd {
            u,
            singular_values: s,
            vt,
        })
    }
}

/// Given orthonormal singular vectors on one side, computes singular values as
/// the norms of their images and returns the orthonormalized images.
fn complete_side(
    a: &DenseMatrix,
    basis: &[Vec<f64>],
    basis_is_left: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let dim = if basis_is_left { a.cols() } else { a.rows() };
    let mut values = Vec::with_capacity(basis.len());
    let mut images = Vec::with_capacity(basis.len());
    for b in basis {
        let img = if basis_is_left {
            a.t_matvec(b)?
        } else {
            a.matvec(b)?
        };
        values.push(norm2(&img));
        images.push(img);
    }
    // Norms follow the Gram eigenvalue order up to rounding.
    for k in 1..values.len() {
        values[k] = values[k].min(values[k - 1]);
    }
    let s_max = values.iter().cloned().fold(0.0, f64::max);
    let cutoff = s_max * 1e-13;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    let mut next_axis = 0usize;
    for (k, mut img) in images.into_iter().enumerate() {
        let accept = values[k] > cutoff && values[k] > 0.0 && {
            let inv = 1.0 / values[k];
            img.iter_mut().for_each(|x| *x *= inv);
            orthonormalize_against(&mut img, &out)
        };
        if !accept {
            values[k] = if values[k] > cutoff { values[k] } else { 0.0 };
            let completion = loop {
                if next_axis >= dim {
                    return Err(Error::Numeric(
                        "could not complete an orthonormal basis".into(),
                    ));
                }
                let mut e = vec![0.0; dim];
                e[next_axis] = 1.0;
                next_axis += 1;
                if orthonormalize_against(&mut e, &out) {
                    break e;
                }
            };
            img = completion;
        }
        out.push(img);
    }
    Ok((values, out))
}

/// Two passes of modified Gram-Schmidt; returns false if `v` is (numerically)
/// inside the span of `basis`.
fn orthonormalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let start = norm2(v);
    if start == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            axpy(-c, b, v);
        }
    }
    let n = norm2(v);
    if n < 0.5 * start {
        // Lost too much mass; one more pass decides.
        for b in basis {
            let c = dot(v, b);
            axpy(-c, b, v);
        }
        let n2 = norm2(v);
        if n2 < 1e-8 * start {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n2);
        return true;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn cols_to_matrix(cols: &[Vec<f64>], rows: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Largest absolute deviation of `QᵀQ` from the identity, for column-orthonormal `q`.
pub fn orthonormality_error(q: &DenseMatrix) -> f64 {
    let g = q.gram_cols();
    let mut worst = 0.0f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}
