//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Empirical covariance with divisor n. `fill(i, buf)` writes row i of the
/// (virtual) n × dim data matrix into `buf`.
pub fn covariance<F>(n: usize, dim: usize, mut fill: F) -> DMatrix<f64>
where
    F: FnMut(usize, &mut [f64]),
{
    let mut buf = vec![0.0; dim];
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        fill(i, &mut buf);
        for (m, v) in mean.iter_mut().zip(&buf) {
            *m += v;
        }
    }
    let nf = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= nf);

    let mut acc = vec![0.0; dim * dim];
    for i in 0..n {
        fill(i, &mut buf);
        for (b, m) in buf.iter_mut().zip(&mean) {
            *b -= m;
        }
        for a in 0..dim {
            let va = buf[a];
            if va == 0.0 {
                continue;
            }
            let row = &mut acc[a * dim..(a + 1) * dim];
            for b in a..dim {
                row[b] += va * buf[b];
            }
        }
    }
    let mut out = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in a..dim {
            let v = acc[a * dim + b] / nf;
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Nearest PSD matrix in Frobenius norm: symmetrize, clip eigenvalues at 0.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky factor of `m`, adding `jitter · I` (escalating tenfold, up to
/// eight times) when the plain factorization fails.
pub fn cholesky_jittered(m: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let mut eps = jitter;
    for _ in 0..8 {
        let shifted = m + DMatrix::<f64>::identity(n, n) * eps;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix of size {n} is not positive definite even with jitter {eps:.1e}"
    )))
}

/// Solves `m x = b` for symmetric positive (semi)definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, jitter: f64) -> Result<DVector<f64>> {
    Ok(cholesky_jittered(m, jitter)?.solve(b))
}

pub fn spd_inverse(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky_jittered(m, jitter)?.inverse()))
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}
