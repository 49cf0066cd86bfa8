//! Small dense linear-algebra kernels.
//!
//! Every system solved in this crate is symmetric positive definite and
//! modest in size (tens of rows), so a hand-rolled Cholesky plus a power
//! iteration for spectral norms keeps the crate free of external BLAS/LAPACK
//! linkage.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Only the lower triangle of `a` is read. Fails with [`Error::Numeric`] when
/// a pivot is not strictly positive.
pub(crate) fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidDimension(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Numeric(format!(
                "matrix not positive definite: pivot {diag:e} at index {j}"
            )));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L L^T x = b` given the lower Cholesky factor `l`.
pub(crate) fn cholesky_solve(l: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let mut x = b.to_owned();
    // Forward: L y = b.
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    // Backward: L^T x = y.
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves the SPD system `a x = b`.
pub(crate) fn solve_spd(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    Ok(cholesky_solve(l.view(), b))
}

/// `log |A|` for SPD `A` given its Cholesky factor.
pub(crate) fn logdet_from_cholesky(l: ArrayView2<'_, f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Householder tridiagonalization of a symmetric matrix, `A = Q T Q^T`,
/// with the orthogonal factor kept in the cheap product-of-reflectors form.
///
/// Only the lower triangle of the input is read. `Q` is the product
/// `H_0 H_1 ... H_{n-3}` where `H_k` acts on rows `k+1..n`; applying `Q` or
/// `Q^T` to a vector costs `n^2 / 2` flops instead of the `n^3` it would take
/// to materialize the factor.
#[derive(Debug, Clone)]
pub(crate) struct SymmetricTridiagonal {
    /// `(offset, coefficient, vector)` per reflector: `H = I - beta v v^T` on
    /// the trailing coordinates starting at `offset`.
    reflectors: Vec<(usize, f64, Array1<f64>)>,
    pub diag: Array1<f64>,
    /// Subdiagonal, length `n - 1`.
    pub off: Array1<f64>,
}

impl SymmetricTridiagonal {
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidDimension(format!(
                "tridiagonalization needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut work = a.to_owned();
        // Symmetrize from the lower triangle so later views agree.
        for i in 0..n {
            for j in (i + 1)..n {
                work[[i, j]] = work[[j, i]];
            }
        }
        let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
        for k in 0..n.saturating_sub(2) {
            let m = n - k - 1;
            let mut v = Array1::zeros(m);
            for i in 0..m {
                v[i] = work[[k + 1 + i, k]];
            }
            let norm = v.dot(&v).sqrt();
            if norm == 0.0 {
                continue;
            }
            // Reflect onto `alpha e_1` with the stable sign choice.
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vsq = v.dot(&v);
            if vsq == 0.0 {
                continue;
            }
            let beta = 2.0 / vsq;
            // Two-sided update of the trailing block via the symmetric
            // rank-two form: A <- A - v w^T - w v^T with
            // w = beta (A v - (beta/2) (v^T A v) v).
            let mut p = Array1::zeros(m);
            for i in 0..m {
                let mut s = 0.0;
                for j in 0..m {
                    s += work[[k + 1 + i, k + 1 + j]] * v[j];
                }
                p[i] = beta * s;
            }
            let half = 0.5 * beta * p.dot(&v);
            let w = &p - &v.mapv(|x| x * half);
            for i in 0..m {
                for j in 0..m {
                    work[[k + 1 + i, k + 1 + j]] -= v[i] * w[j] + w[i] * v[j];
                }
            }
            work[[k + 1, k]] = alpha;
            for i in 1..m {
                work[[k + 1 + i, k]] = 0.0;
            }
            reflectors.push((k + 1, beta, v));
        }
        let diag = Array1::from_shape_fn(n, |i| work[[i, i]]);
        let off = Array1::from_shape_fn(n.saturating_sub(1), |i| work[[i + 1, i]]);
        Ok(Self {
            reflectors,
            diag,
            off,
        })
    }

    fn apply_reflector(offset: usize, beta: f64, v: &Array1<f64>, x: &mut Array1<f64>) {
        let m = v.len();
        let mut s = 0.0;
        for i in 0..m {
            s += v[i] * x[offset + i];
        }
        s *= beta;
        for i in 0..m {
            x[offset + i] -= s * v[i];
        }
    }

    /// `x <- Q^T x`.
    pub fn apply_qt(&self, x: &mut Array1<f64>) {
        for (offset, beta, v) in &self.reflectors {
            Self::apply_reflector(*offset, *beta, v, x);
        }
    }

    /// `x <- Q x`.
    pub fn apply_q(&self, x: &mut Array1<f64>) {
        for (offset, beta, v) in self.reflectors.iter().rev() {
            Self::apply_reflector(*offset, *beta, v, x);
        }
    }

    /// A magnitude scale of the tridiagonal entries, for relative ridges.
    pub fn magnitude(&self) -> f64 {
        let d = self.diag.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let e = self.off.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        d.max(e)
    }
}

/// Solves `(T + shift I) x = b` for symmetric tridiagonal `T` given as
/// diagonal and subdiagonal, by unpivoted `L D L^T`. Returns `None` when a
/// pivot is not strictly positive, i.e. the shifted matrix is not positive
/// definite.
pub(crate) fn shifted_tridiag_solve(
    diag: &Array1<f64>,
    off: &Array1<f64>,
    shift: f64,
    b: &Array1<f64>,
) -> Option<Array1<f64>> {
    let n = diag.len();
    debug_assert_eq!(off.len(), n.saturating_sub(1));
    debug_assert_eq!(b.len(), n);
    if n == 0 {
        return Some(Array1::zeros(0));
    }
    let mut pivots = Array1::zeros(n);
    let mut lower = Array1::zeros(n.saturating_sub(1));
    let mut prev = diag[0] + shift;
    if !(prev > 0.0) || !prev.is_finite() {
        return None;
    }
    pivots[0] = prev;
    for i in 1..n {
        let l = off[i - 1] / prev;
        lower[i - 1] = l;
        prev = diag[i] + shift - l * off[i - 1];
        if !(prev > 0.0) || !prev.is_finite() {
            return None;
        }
        pivots[i] = prev;
    }
    let mut x = b.clone();
    for i in 1..n {
        let correction = lower[i - 1] * x[i - 1];
        x[i] -= correction;
    }
    for i in 0..n {
        x[i] /= pivots[i];
    }
    for i in (0..n.saturating_sub(1)).rev() {
        let correction = lower[i] * x[i + 1];
        x[i] -= correction;
    }
    Some(x)
}
