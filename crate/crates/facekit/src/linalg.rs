//! Minimal dense linear algebra for the recognizers: a row-major matrix,
//! cyclic Jacobi symmetric eigendecomposition, and the whitening solve for
//! the LDA generalized eigenproblem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (|a[{i}][{j}] - a[{j}][{i}]| = {diff:e})")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        out
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

/// Result of a symmetric eigendecomposition: `a * vectors[:,i] =
/// values[i] * vectors[:,i]`, eigenvalues descending, eigenvector columns
/// orthonormal with the largest-magnitude component pinned positive.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// `tol` bounds the accepted off-diagonal mass relative to the matrix
/// magnitude; defaults used throughout the crate are `1e-10` and 100
/// sweeps.
pub fn jacobi_eigen_symmetric(
    a: &Matrix,
    tol: f64,
    max_sweeps: usize,
) -> Result<SymmetricEigen, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let scale = a.max_abs();
    for i in 0..n {
        for j in i + 1..n {
            let diff = (a.get(i, j) - a.get(j, i)).abs();
            if diff > 1e-10 * scale.max(1e-300) {
                return Err(LinalgError::NotSymmetric { i, j, diff });
            }
        }
    }

    let mut m = a.clone();
    // symmetrize exactly so rotations stay consistent
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);

    if n > 1 && scale > 0.0 {
        let threshold = tol * scale;
        let mut converged = false;
        for _sweep in 0..max_sweeps {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    off = off.max(m.get(p, q).abs());
                }
            }
            if off <= threshold {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m.get(p, q);
                    if apq.abs() <= threshold * 1e-4 {
                        continue;
                    }
                    let app = m.get(p, p);
                    let aqq = m.get(q, q);
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let mkp = m.get(k, p);
                        let mkq = m.get(k, q);
                        m.set(k, p, c * mkp - s * mkq);
                        m.set(k, q, s * mkp + c * mkq);
                    }
                    for k in 0..n {
                        let mpk = m.get(p, k);
                        let mqk = m.get(q, k);
                        m.set(p, k, c * mpk - s * mqk);
                        m.set(q, k, s * mpk + c * mqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        if !converged {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    off = off.max(m.get(p, q).abs());
                }
            }
            if off > threshold {
                return Err(LinalgError::NoConvergence(max_sweeps));
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap());

    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        values.push(m.get(src, src));
        let mut column: Vec<f64> = (0..n).map(|k| v.get(k, src)).collect();
        pin_sign(&mut column);
        for (k, &val) in column.iter().enumerate() {
            vectors.set(k, col, val);
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Flip the vector so its largest-magnitude component is positive
/// (first such component on ties). Eigenvectors are sign-ambiguous; this
/// makes serialized models reproducible.
pub(crate) fn pin_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Discriminant directions solving `S_b w = lambda S_w w` by whitening.
#[derive(Debug, Clone)]
pub struct LdaDirections {
    /// `d x m'` matrix whose columns are the directions, best first.
    pub directions: Matrix,
    /// True when fewer than the requested `m` columns could be produced.
    pub rank_deficient: bool,
}

/// Whitening solve for LDA: eigendecompose `S_w`, drop near-null modes
/// (cutoff `1e-10 * d_max`), whiten, eigendecompose the projected `S_b`,
/// and map the top `m` eigenvectors back.
pub fn lda_directions(
    s_w: &Matrix,
    s_b: &Matrix,
    m: usize,
) -> Result<LdaDirections, LinalgError> {
    if s_w.rows != s_b.rows || s_w.cols != s_b.cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "s_w is {}x{}, s_b is {}x{}",
            s_w.rows, s_w.cols, s_b.rows, s_b.cols
        )));
    }
    let d = s_w.rows;
    let ew = jacobi_eigen_symmetric(s_w, 1e-10, 100)?;
    let d_max = ew.values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = 1e-10 * d_max;
    let kept: Vec<usize> = (0..d).filter(|&i| ew.values[i] > cutoff).collect();

    if kept.is_empty() {
        return Ok(LdaDirections {
            directions: Matrix::zeros(d, 0),
            rank_deficient: m > 0,
        });
    }

    // T = U_kept * D^{-1/2}: whitens S_w on the retained modes
    let mut t = Matrix::zeros(d, kept.len());
    for (c, &i) in kept.iter().enumerate() {
        let inv_sqrt = 1.0 / ew.values[i].sqrt();
        for r in 0..d {
            t.set(r, c, ew.vectors.get(r, i) * inv_sqrt);
        }
    }

    let projected = t.transpose().matmul(s_b).matmul(&t);
    let eb = jacobi_eigen_symmetric(&projected, 1e-10, 100)?;

    // discard whitened modes with no between-class mass
    let b_max = eb.values.first().copied().unwrap_or(0.0).max(0.0);
    let useful = eb
        .values
        .iter()
        .filter(|&&v| v > 1e-10 * b_max && v > 0.0)
        .count();
    let take = m.min(useful).min(kept.len());

    let mut w = Matrix::zeros(d, take);
    for c in 0..take {
        let mut col = t.matvec(&eb.vectors.column(c));
        pin_sign(&mut col);
        for (r, &val) in col.iter().enumerate() {
            w.set(r, c, val);
        }
    }
    Ok(LdaDirections {
        directions: w,
        rank_deficient: take < m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        a
    }

    fn residual(a: &Matrix, e: &SymmetricEigen) -> f64 {
        let n = a.rows();
        let mut worst = 0.0f64;
        for c in 0..n {
            let v = e.vectors.column(c);
            let av = a.matvec(&v);
            for k in 0..n {
                worst = worst.max((av[k] - e.values[c] * v[k]).abs());
            }
        }
        worst
    }

    fn orthonormality_defect(v: &Matrix) -> f64 {
        let g = v.transpose().matmul(v);
        let mut worst = 0.0f64;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - want).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_matrix() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
        let e = jacobi_eigen_symmetric(&a, 1e-10, 100).unwrap();
        assert_eq!(e.values, vec![2.0, 1.0]);
        assert_eq!(e.vectors.column(0), vec![1.0, 0.0]);
        assert_eq!(e.vectors.column(1), vec![0.0, 1.0]);
    }

    #[test]
    fn exchange_matrix_analytic() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let e = jacobi_eigen_symmetric(&a, 1e-10, 100).unwrap();
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] + 1.0).abs() < 1e-12);
        let v0 = e.vectors.column(0);
        let v1 = e.vectors.column(1);
        assert!((v0[0] - inv_sqrt2).abs() < 1e-12 && (v0[1] - inv_sqrt2).abs() < 1e-12);
        // sign pinned: the max-magnitude component is positive
        assert!((v1[0] - inv_sqrt2).abs() < 1e-12 && (v1[1] + inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn random_matrices_meet_residual_and_orthonormality_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..100 {
            let n = rng.gen_range(2..=20);
            let a = random_symmetric(&mut rng, n);
            let e = jacobi_eigen_symmetric(&a, 1e-10, 100).unwrap();
            assert!(residual(&a, &e) <= 1e-8, "trial {trial} residual too big");
            assert!(
                orthonormality_defect(&e.vectors) <= 1e-10,
                "trial {trial} not orthonormal"
            );
            let sum: f64 = e.values.iter().sum();
            let tr = a.trace();
            assert!(
                (sum - tr).abs() <= 1e-9 * tr.abs().max(1.0),
                "trial {trial} trace mismatch"
            );
            for w in e.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn rejects_asymmetry_and_non_square() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(
            jacobi_eigen_symmetric(&a, 1e-10, 100),
            Err(LinalgError::NotSymmetric { .. })
        ));
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            jacobi_eigen_symmetric(&b, 1e-10, 100),
            Err(LinalgError::NotSquare { .. })
        ));
    }

    #[test]
    fn lda_identity_within_reduces_to_plain_eigen() {
        let s_w = Matrix::identity(3);
        let s_b = Matrix::from_rows(&[
            vec![4.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ]);
        let lda = lda_directions(&s_w, &s_b, 2).unwrap();
        assert_eq!(lda.directions.cols(), 2);
        assert!(!lda.rank_deficient);
        let c0 = lda.directions.column(0);
        assert!((c0[0].abs() - 1.0).abs() < 1e-9 && c0[1].abs() < 1e-9);
    }

    #[test]
    fn lda_two_class_toy_finds_the_separating_axis() {
        // classes separated along x, within-class noise along y
        let s_w = Matrix::from_rows(&[vec![0.1, 0.0], vec![0.0, 4.0]]);
        let s_b = Matrix::from_rows(&[vec![9.0, 0.0], vec![0.0, 0.0]]);
        let lda = lda_directions(&s_w, &s_b, 1).unwrap();
        let dir = lda.directions.column(0);
        let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let cos_angle = dir[0].abs() / norm;
        assert!(cos_angle.acos().to_degrees() < 1.0, "direction {dir:?}");
    }

    #[test]
    fn lda_rank_bound_returns_fewer_columns() {
        let s_w = Matrix::identity(3);
        // rank-1 between-class scatter
        let s_b = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ]);
        let lda = lda_directions(&s_w, &s_b, 3).unwrap();
        assert!(lda.directions.cols() < 3);
        assert!(lda.rank_deficient);
    }

    #[test]
    fn lda_top_direction_maximizes_rayleigh_quotient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s_w = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]);
        let s_b = Matrix::from_rows(&[vec![1.0, 0.8], vec![0.8, 3.0]]);
        let lda = lda_directions(&s_w, &s_b, 1).unwrap();
        let w = lda.directions.column(0);
        let quot = |v: &[f64]| {
            let bv = s_b.matvec(v);
            let wv = s_w.matvec(v);
            let num: f64 = v.iter().zip(&bv).map(|(a, b)| a * b).sum();
            let den: f64 = v.iter().zip(&wv).map(|(a, b)| a * b).sum();
            num / den
        };
        let best = quot(&w);
        for _ in 0..1000 {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = [theta.cos(), theta.sin()];
            assert!(best + 1e-9 >= quot(&r));
        }
    }

    #[test]
    fn lda_generalized_relation_holds_on_retained_modes() {
        let s_w = Matrix::from_rows(&[vec![1.5, 0.2], vec![0.2, 0.7]]);
        let s_b = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]]);
        let lda = lda_directions(&s_w, &s_b, 2).unwrap();
        assert!(lda.directions.cols() >= 1);
        for c in 0..lda.directions.cols() {
            let w = lda.directions.column(c);
            let bw = s_b.matvec(&w);
            let ww = s_w.matvec(&w);
            let num: f64 = w.iter().zip(&bw).map(|(a, b)| a * b).sum();
            let den: f64 = w.iter().zip(&ww).map(|(a, b)| a * b).sum();
            let lambda = num / den;
            let scale = bw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
            for k in 0..2 {
                assert!(
                    (bw[k] - lambda * ww[k]).abs() <= 1e-6 * scale,
                    "column {c} residual"
                );
            }
        }
    }
}
