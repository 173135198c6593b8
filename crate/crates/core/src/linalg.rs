//! Dense symmetric kernels with explicit contracts: LDL' factorization with
//! pivot reporting, log-determinant, eigenvalue extremes, nullspace extraction.
//!
//! All reductions run in a fixed order so that repeated calls on identical
//! inputs are bitwise identical.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// LDL' factorization of a symmetric matrix, without pivoting.
///
/// `success` is true iff every pivot was strictly positive and finite, i.e.
/// the input was numerically positive definite.
#[derive(Debug, Clone)]
pub struct SymFactor {
    /// Strictly lower triangle of the unit factor L.
    l: DMatrix<f64>,
    /// Diagonal pivots d_1..d_k (stops early on failure).
    d: Vec<f64>,
    pub n: usize,
    pub success: bool,
    pub min_pivot: f64,
}

/// Factor a symmetric matrix as L D L'. Only the lower triangle is read.
pub fn sym_factor(m: &DMatrix<f64>) -> SymFactor {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut d = Vec::with_capacity(n);
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut dj = m[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        min_pivot = min_pivot.min(dj);
        if !(dj > 0.0) || !dj.is_finite() {
            return SymFactor {
                l,
                d,
                n,
                success: false,
                min_pivot,
            };
        }
        d.push(dj);
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = v / dj;
        }
    }
    if n == 0 {
        min_pivot = 0.0;
    }
    SymFactor {
        l,
        d,
        n,
        success: true,
        min_pivot,
    }
}

impl SymFactor {
    /// Solve M x = rhs for one column. Requires `success`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        debug_assert!(self.success);
        let mut x = rhs.clone();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut DVector<f64>) {
        let n = self.n;
        for i in 0..n {
            let mut v = x[i];
            for k in 0..i {
                v -= self.l[(i, k)] * x[k];
            }
            x[i] = v;
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in (i + 1)..n {
                v -= self.l[(k, i)] * x[k];
            }
            x[i] = v;
        }
    }

    /// Solve M X = RHS for several columns.
    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rhs.clone();
        for mut col in out.column_iter_mut() {
            let n = self.n;
            for i in 0..n {
                let mut v = col[i];
                for k in 0..i {
                    v -= self.l[(i, k)] * col[k];
                }
                col[i] = v;
            }
            for i in 0..n {
                col[i] /= self.d[i];
            }
            for i in (0..n).rev() {
                let mut v = col[i];
                for k in (i + 1)..n {
                    v -= self.l[(k, i)] * col[k];
                }
                col[i] = v;
            }
        }
        out
    }

    /// log det M = sum of log pivots. Requires `success`.
    pub fn logdet(&self) -> f64 {
        debug_assert!(self.success);
        self.d.iter().map(|p| p.ln()).sum()
    }

    /// Inverse of M via the factorization. Requires `success`.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_mat(&DMatrix::identity(self.n, self.n))
    }
}

/// Convenience wrapper that converts a failed factorization into an error.
pub fn try_sym_factor(m: &DMatrix<f64>) -> Result<SymFactor> {
    let f = sym_factor(m);
    if f.success {
        Ok(f)
    } else {
        Err(Error::NotDefinite {
            positive: true,
            pivot: f.min_pivot,
            index: f.d.len(),
        })
    }
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn eig_extremes(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    debug_assert_eq!(m.nrows(), m.ncols());
    if m.nrows() == 0 {
        return Ok((0.0, 0.0));
    }
    let eig = m
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or(Error::EigNoConvergence)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Orthonormal basis N of the nullspace of A: AN = 0, N'N = I.
///
/// Columns of A whose singular value falls below `tol * sigma_max` are treated
/// as rank-deficient directions.
pub fn nullspace_basis(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested V^T");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let thresh = tol * smax;
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > thresh && smax > 0.0)
        .count();
    // Nullspace = rows rank..n of V^T (as columns of N), plus any columns of V
    // beyond the number of computed singular values.
    let dim = n - rank;
    let mut nbasis = DMatrix::<f64>::zeros(n, dim);
    let nsv = v_t.nrows();
    for (k, row) in (rank..nsv).enumerate() {
        for j in 0..n {
            nbasis[(j, k)] = v_t[(row, j)];
        }
    }
    // v_t has min(m, n) rows; if m < n the remaining nullspace directions are
    // not returned by the thin SVD, so complete the basis by orthogonalizing
    // random-free deterministic unit vectors against A's row space.
    let have = nsv.saturating_sub(rank);
    if have < dim {
        complete_basis(a, &mut nbasis, have);
    }
    nbasis
}

/// Complete `nbasis` (whose first `have` columns are valid) to a full
/// orthonormal nullspace basis by Gram-Schmidt over the coordinate directions.
fn complete_basis(a: &DMatrix<f64>, nbasis: &mut DMatrix<f64>, have: usize) {
    let n = a.ncols();
    let dim = nbasis.ncols();
    // Orthonormal basis of the row space of A.
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd V^T");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > 1e-12 * smax && smax > 0.0 {
            rows.push(v_t.row(i).transpose());
        }
    }
    let mut cols: Vec<DVector<f64>> = (0..have).map(|k| nbasis.column(k).into_owned()).collect();
    let mut e = 0usize;
    while cols.len() < dim && e < n {
        let mut v = DVector::<f64>::zeros(n);
        v[e] = 1.0;
        e += 1;
        for r in &rows {
            let c = r.dot(&v);
            v.axpy(-c, r, 1.0);
        }
        for c0 in &cols {
            let c = c0.dot(&v);
            v.axpy(-c, c0, 1.0);
        }
        let nrm = v.norm();
        if nrm > 1e-8 {
            v /= nrm;
            cols.push(v);
        }
    }
    for (k, c) in cols.iter().enumerate() {
        nbasis.set_column(k, c);
    }
}

/// Minimum-norm least-squares solution of A x = b via SVD.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(a.ncols()));
    }
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(b, tol)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(x)
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Infinity norm of a vector.
pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}
