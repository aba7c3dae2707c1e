//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix with eigenvalues in ascending order.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

pub fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
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

/// tr(PKP) for the centering projector P = I - 11'/n.
pub fn centered_trace(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows() as f64;
    k.trace() - k.sum() / n
}

/// Greedy column selection by modified Gram-Schmidt.
///
/// Columns are visited in order; a column is kept when its component
/// orthogonal to the kept ones exceeds `rel_tol` times its own norm.
pub fn independent_columns(x: &DMatrix<f64>, rel_tol: f64) -> Vec<bool> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = vec![false; x.ncols()];
    for (j, flag) in keep.iter_mut().enumerate() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = col;
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        // second pass for numerical orthogonality
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let rnorm = v.norm();
        if rnorm > rel_tol * norm {
            basis.push(v / rnorm);
            *flag = true;
        }
    }
    keep
}

pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    independent_columns(x, 1e-9).iter().filter(|&&k| k).count()
}

pub fn select_columns(x: &DMatrix<f64>, keep: &[bool]) -> DMatrix<f64> {
    let idx: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| j).collect();
    x.select_columns(idx.iter())
}

/// Ordinary least squares via Cholesky of the normal equations.
/// Returns coefficients and the residual sum of squares.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if x.ncols() == 0 {
        return Ok((DVector::zeros(0), y.norm_squared()));
    }
    let xtx = x.transpose() * x;
    let ch = cholesky(&xtx, "X'X")?;
    let beta = ch.solve(&(x.transpose() * y));
    let resid = y - x * &beta;
    Ok((beta, resid.norm_squared()))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the n-1 denominator.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Pearson correlation; NaN when either side has zero variance.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
