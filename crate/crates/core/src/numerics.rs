//! Dense `f64` linear algebra used everywhere else in the crate: a row-major
//! matrix type, a one-sided Jacobi SVD, norms, a softmax restricted to an
//! index subset, and a plain-text matrix dump that round-trips exactly.
//!
//! Everything here is deterministic: no threads, no hash maps, no hidden
//! tolerances besides the documented ones.

use crate::error::{Error, Result};

/// Hard cap on either dimension accepted by [`svd`].
pub const SVD_DIM_LIMIT: usize = 2048;

/// Maximum number of full Jacobi sweeps before giving up.
const MAX_SWEEPS: usize = 100;

/// Pairwise rotation threshold: columns p,q count as orthogonal when
/// |<p,q>| <= JACOBI_EPS * ||p|| * ||q||.
const JACOBI_EPS: f64 = 1e-14;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from a nested row slice; rows must all have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dim(format!(
                    "ragged rows: expected {c} entries, found {}",
                    row.len()
                )));
            }
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dim(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = rhs.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`; rows of both operands are contiguous, so this is the
    /// cheap way to form products like `W_O * W_V^T`.
    pub fn matmul_transpose(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.cols {
            return Err(Error::Dim(format!(
                "matmul_transpose: {}x{} * ({}x{})^T",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dim(format!(
                "scaled_add: {}x{} += {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain-text dump: one line per row, entries comma-separated, rendered
    /// with `f64`'s shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let row = self.row(i);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                s.push_str(&format!("{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Inverse of [`to_text`](Self::to_text); rejects ragged rows.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|e| {
                        Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `A = U diag(sigma) V^T` with
/// `k = min(rows, cols)` columns in both factors and `sigma` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

/// One-sided cyclic Jacobi SVD.
///
/// Guarantees, for matrices within [`SVD_DIM_LIMIT`]:
/// reconstruction error `||A - U diag(sigma) V^T||_F <= 1e-10 * (1 + ||A||_F)`
/// and columns of U, V orthonormal to 1e-10. Zero singular directions get
/// their U columns from an orthonormal completion, so U is always full.
pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    if a.rows().max(a.cols()) > SVD_DIM_LIMIT {
        return Err(Error::TooLarge {
            rows: a.rows(),
            cols: a.cols(),
            limit: SVD_DIM_LIMIT,
        });
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows() < a.cols() {
        // Tall case does the work; A = (U' S V'^T)^T swaps the factors.
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }

    let m = a.rows();
    let n = a.cols();
    // Work on B^T so each column of the evolving B = A * (rotations) is a
    // contiguous row. V^T is accumulated the same way.
    let mut bt = a.transpose();
    let mut vt = DenseMatrix::identity(n);

    // Columns whose norm falls below rounding level of the whole matrix are
    // snapped to exact zero: for rank-deficient inputs they otherwise keep
    // collecting rounding junk that never drops below a relative threshold.
    let zero_tol = f64::EPSILON * a.frobenius_norm();

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let rp = bt.row(p);
                    let rq = bt.row(q);
                    (dot(rp, rp), dot(rq, rq), dot(rp, rq))
                };
                if alpha <= zero_tol * zero_tol {
                    bt.row_mut(p).fill(0.0);
                    continue;
                }
                if beta <= zero_tol * zero_tol {
                    bt.row_mut(q).fill(0.0);
                    continue;
                }
                if gamma.abs() <= JACOBI_EPS * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                // Asymptotic branch keeps zeta*zeta from overflowing.
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut bt, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConverge(MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|i| dot(bt.row(i), bt.row(i)).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut sigma = Vec::with_capacity(n);
    let mut u = DenseMatrix::zeros(m, n);
    let mut v = DenseMatrix::zeros(n, n);
    let tiny = f64::EPSILON * (m as f64) * norms[order[0]].max(1.0);
    let mut deficient = Vec::new();
    for (k, &idx) in order.iter().enumerate() {
        let s = norms[idx];
        sigma.push(s);
        for j in 0..n {
            v.set(j, k, vt.get(idx, j));
        }
        if s > tiny {
            let col = bt.row(idx);
            for i in 0..m {
                u.set(i, k, col[i] / s);
            }
        } else {
            deficient.push(k);
        }
    }
    if !deficient.is_empty() {
        complete_orthonormal(&mut u, &deficient);
    }

    Ok(Svd { u, sigma, v })
}

/// In-place plane rotation of rows p and q:
/// row_p <- c*row_p - s*row_q, row_q <- s*row_p + c*row_q.
fn rotate_rows(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let (lo, hi) = (p.min(q), p.max(q));
    let (head, tail) = m.data_mut().split_at_mut(hi * cols);
    let row_hi = &mut tail[..cols];
    let row_lo = &mut head[lo * cols..lo * cols + cols];
    let (rp, rq): (&mut [f64], &mut [f64]) = if p < q { (row_lo, row_hi) } else { (row_hi, row_lo) };
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

/// Fills the listed zero columns of `u` with unit vectors orthonormal to all
/// other columns, picking for each slot the standard basis vector with the
/// largest residual after two Gram-Schmidt passes.
fn complete_orthonormal(u: &mut DenseMatrix, deficient: &[usize]) {
    let m = u.rows();
    let n = u.cols();
    let filled: Vec<usize> = (0..n).filter(|k| !deficient.contains(k)).collect();
    let mut done: Vec<usize> = filled;
    for &slot in deficient {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _pass in 0..2 {
                for &k in &done {
                    let proj: f64 = (0..m).map(|i| cand[i] * u.get(i, k)).sum();
                    for (i, ci) in cand.iter_mut().enumerate() {
                        *ci -= proj * u.get(i, k);
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("m >= 1");
        for (i, ci) in cand.iter().enumerate() {
            u.set(i, slot, ci / norm);
        }
        done.push(slot);
    }
}

/// Sum of singular values.
pub fn nuclear_norm(a: &DenseMatrix) -> Result<f64> {
    Ok(svd(a)?.sigma.iter().sum())
}

/// Softmax of `logits` restricted to `subset`, returned in subset order.
/// Uses max subtraction, so any finite logits are safe.
pub fn softmax_over_subset(logits: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut max = f64::NEG_INFINITY;
    for &i in subset {
        if i >= logits.len() {
            return Err(Error::Dim(format!(
                "softmax index {i} out of range for {} logits",
                logits.len()
            )));
        }
        if !logits[i].is_finite() {
            return Err(Error::NonFinite("softmax logits"));
        }
        max = max.max(logits[i]);
    }
    let mut out: Vec<f64> = subset.iter().map(|&i| (logits[i] - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    Ok(out)
}
