//! Small dense linear-algebra helpers shared by the GP code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter is multiplied by this factor on every failed factorization attempt.
const JITTER_GROWTH: f64 = 10.0;
/// Number of escalations after the first attempt.
const JITTER_RETRIES: usize = 3;

/// Cholesky factorization of `a + jitter * I`, escalating the jitter by 10x
/// up to three times when the factorization fails.
///
/// Returns the factor together with the jitter that was actually used.
pub fn jittered_cholesky(a: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut current = jitter;
    for attempt in 0..=JITTER_RETRIES {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += current;
        }
        if let Some(chol) = Cholesky::new(m) {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok((chol, current));
            }
        }
        if attempt < JITTER_RETRIES {
            current = if current > 0.0 { current * JITTER_GROWTH } else { 1e-10 };
        }
    }
    Err(Error::NotPositiveDefinite { jitter: current })
}

/// Inverse of a lower-triangular matrix.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::<f64>::identity(n, n);
    // Column-by-column forward substitution; column j of the inverse is zero above row j.
    for j in 0..n {
        for i in j..n {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in j..i {
                s -= l[(i, k)] * inv[(k, j)];
            }
            inv[(i, j)] = s / l[(i, i)];
        }
    }
    inv
}

/// Lower triangle of `m` with its diagonal halved.
pub fn phi_lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => m[(i, j)],
        std::cmp::Ordering::Equal => 0.5 * m[(i, j)],
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Zero the strict upper triangle in place.
pub fn keep_lower(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 1..n {
        for i in 0..j.min(m.nrows()) {
            m[(i, j)] = 0.0;
        }
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Squared Euclidean norm of every column.
pub fn column_sq_norms(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.norm_squared()))
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
