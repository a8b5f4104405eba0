//! Dense real linear algebra used by the moment analysis.
//!
//! Matrices are stored column-major. The eigenvalue solver copies its input
//! into a row-major scratch buffer because both phases (Householder reduction
//! and the Francis double-shift sweep) walk rows far more than columns.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::LinalgError;

/// Relative tolerance used when merging symmetric rows of the moment system.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Components larger than this abort moment propagation.
pub const OVERFLOW_LIMIT: f64 = 1e300;

#[derive(Clone, PartialEq)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut m = Self::zeros(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), ncols, "ragged row {i}");
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let out_col = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for k in 0..self.cols {
                let b = other[(k, j)];
                if b == 0.0 {
                    continue;
                }
                let a_col = &self.data[k * self.rows..(k + 1) * self.rows];
                for (o, a) in out_col.iter_mut().zip(a_col) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (j, xj) in x.iter().enumerate() {
            if *xj == 0.0 {
                continue;
            }
            let col = self.col(j);
            for (yi, a) in y.iter_mut().zip(col) {
                *yi += a * xj;
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * c).collect(),
        }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Self) {
        for j in 0..block.cols {
            for i in 0..block.rows {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        let mut out = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[j * self.rows + i]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[j * self.rows + i]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| format!("{:.6e}", self[(i, j)])).collect();
            writeln!(f, "  {}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

/// Column-stacking vectorization: entry `(i, j)` lands at `j * rows + i`.
pub fn vec(m: &DenseMatrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vec`] for a square `d x d` matrix.
pub fn unvec_square(v: &[f64], d: usize) -> DenseMatrix {
    assert_eq!(v.len(), d * d);
    DenseMatrix {
        rows: d,
        cols: d,
        data: v.to_vec(),
    }
}

pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows * b.rows, a.cols * b.cols);
    kron_accumulate(&mut out, 0, 0, a, b, 1.0);
    out
}

/// `out[r0.., c0..] += scale * (a ⊗ b)` without materializing the product.
pub fn kron_accumulate(
    out: &mut DenseMatrix,
    r0: usize,
    c0: usize,
    a: &DenseMatrix,
    b: &DenseMatrix,
    scale: f64,
) {
    assert!(r0 + a.rows * b.rows <= out.rows && c0 + a.cols * b.cols <= out.cols);
    for ja in 0..a.cols {
        for ia in 0..a.rows {
            let aij = a[(ia, ja)] * scale;
            if aij == 0.0 {
                continue;
            }
            for jb in 0..b.cols {
                let col = c0 + ja * b.cols + jb;
                let row0 = r0 + ia * b.rows;
                let dst = &mut out.data[col * out.rows + row0..col * out.rows + row0 + b.rows];
                for (o, bv) in dst.iter_mut().zip(b.col(jb)) {
                    *o += aij * bv;
                }
            }
        }
    }
}

/// Index bookkeeping between the `d²` entries of a vectorized symmetric
/// matrix and its `d(d+1)/2` independent slots (lower triangle, column order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetricIndexMap {
    dim: usize,
    forward: Vec<usize>,
    representative: Vec<(usize, usize)>,
}

impl SymmetricIndexMap {
    pub fn new(dim: usize) -> Self {
        let mut forward = vec![0; dim * dim];
        let mut representative = Vec::with_capacity(dim * (dim + 1) / 2);
        for col in 0..dim {
            for row in col..dim {
                let slot = representative.len();
                representative.push((row, col));
                forward[col * dim + row] = slot;
                forward[row * dim + col] = slot;
            }
        }
        Self {
            dim,
            forward,
            representative,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn full_size(&self) -> usize {
        self.dim * self.dim
    }

    pub fn reduced_size(&self) -> usize {
        self.representative.len()
    }

    /// Reduced slot holding full (column-major) index `full`.
    pub fn forward(&self, full: usize) -> usize {
        self.forward[full]
    }

    /// `(row, col)` with `row >= col` represented by reduced slot `slot`.
    pub fn representative(&self, slot: usize) -> (usize, usize) {
        self.representative[slot]
    }

    /// Expands a reduced moment vector (second moments then means) to full indexing.
    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let nr = self.reduced_size();
        assert_eq!(reduced.len(), nr + self.dim);
        let mut full = Vec::with_capacity(self.full_size() + self.dim);
        full.extend(self.forward.iter().map(|&slot| reduced[slot]));
        full.extend_from_slice(&reduced[nr..]);
        full
    }

    /// Projects a full moment vector onto the reduced slots.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        let d2 = self.full_size();
        assert_eq!(full.len(), d2 + self.dim);
        let mut out: Vec<f64> = self
            .representative
            .iter()
            .map(|&(r, c)| full[c * self.dim + r])
            .collect();
        out.extend_from_slice(&full[d2..]);
        out
    }
}

/// Removes the duplicated `(i,j)`/`(j,i)` equations from a moment system.
///
/// Columns of symmetric pairs are summed, and only the row of each pair's
/// representative is kept. The dropped row must agree with the kept one.
pub fn reduce_moment_system(
    big_a: &DenseMatrix,
    s: &[f64],
    map: &SymmetricIndexMap,
) -> Result<(DenseMatrix, Vec<f64>), LinalgError> {
    let d = map.dim();
    let d2 = map.full_size();
    let n_full = d2 + d;
    if big_a.rows() != n_full || big_a.cols() != n_full || s.len() != n_full {
        return Err(LinalgError::DimensionMismatch {
            expected: n_full,
            found: big_a.rows(),
        });
    }
    let nr = map.reduced_size();
    let n_red = nr + d;

    let reduced_col = |c: usize| if c < d2 { map.forward(c) } else { c - d2 + nr };
    let merged_row = |full_row: usize| -> Vec<f64> {
        let mut row = vec![0.0; n_red];
        for c in 0..n_full {
            row[reduced_col(c)] += big_a[(full_row, c)];
        }
        row
    };

    let mut red_a = DenseMatrix::zeros(n_red, n_red);
    let mut red_s = vec![0.0; n_red];
    for slot in 0..nr {
        let (r, c) = map.representative(slot);
        let kept = c * d + r;
        let row = merged_row(kept);
        if r != c {
            let twin = r * d + c;
            let other = merged_row(twin);
            let scale = row.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (col, (a, b)) in row.iter().zip(&other).enumerate() {
                if (a - b).abs() > SYMMETRY_TOL * scale {
                    return Err(LinalgError::InconsistentSymmetry {
                        row: slot,
                        col,
                        diff: (a - b).abs(),
                    });
                }
            }
            if (s[kept] - s[twin]).abs() > SYMMETRY_TOL * s[kept].abs().max(1.0) {
                return Err(LinalgError::InconsistentSymmetry {
                    row: slot,
                    col: n_red,
                    diff: (s[kept] - s[twin]).abs(),
                });
            }
        }
        for (col, v) in row.into_iter().enumerate() {
            red_a[(slot, col)] = v;
        }
        red_s[slot] = s[kept];
    }
    for k in 0..d {
        let row = merged_row(d2 + k);
        for (col, v) in row.into_iter().enumerate() {
            red_a[(nr + k, col)] = v;
        }
        red_s[nr + k] = s[d2 + k];
    }
    Ok((red_a, red_s))
}

/// Solves `A x = b` by LU with partial pivoting plus one refinement step.
pub fn solve_linear(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let lu = LuFactors::factor(a)?;
    let mut x = lu.solve(b);

    // One step of iterative refinement.
    let ax = a.matvec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let dx = lu.solve(&r);
    for (xi, di) in x.iter_mut().zip(&dx) {
        *xi += di;
    }
    Ok(x)
}

/// Determinant by Gaussian elimination with partial pivoting. Never fails on
/// singular input; it simply returns zero.
pub fn determinant(a: &DenseMatrix) -> Result<f64, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut det = 1.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[(i, k)].abs().total_cmp(&m[(j, k)].abs()))
            .unwrap_or(k);
        if m[(p, k)] == 0.0 {
            return Ok(0.0);
        }
        if p != k {
            det = -det;
            for j in 0..n {
                let c = m.col_mut(j);
                c.swap(p, k);
            }
        }
        let pivot = m[(k, k)];
        det *= pivot;
        for i in k + 1..n {
            let f = m[(i, k)] / pivot;
            if f != 0.0 {
                for j in k + 1..n {
                    let v = m[(k, j)];
                    m[(i, j)] -= f * v;
                }
            }
        }
    }
    Ok(det)
}

struct LuFactors {
    n: usize,
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl LuFactors {
    fn factor(a: &DenseMatrix) -> Result<Self, LinalgError> {
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let threshold = a.max_abs() * f64::EPSILON * n as f64;
        for k in 0..n {
            let col = lu.col(k);
            let (p, pivot) = col[k..]
                .iter()
                .enumerate()
                .fold((k, 0.0f64), |(bi, bv), (off, v)| {
                    if v.abs() > bv {
                        (k + off, v.abs())
                    } else {
                        (bi, bv)
                    }
                });
            if pivot <= threshold || pivot == 0.0 {
                return Err(LinalgError::SingularMatrix { pivot: k });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let c = lu.col_mut(j);
                    c.swap(p, k);
                }
            }
            let inv = 1.0 / lu[(k, k)];
            for v in &mut lu.col_mut(k)[k + 1..] {
                *v *= inv;
            }
            let (left, right) = lu.data.split_at_mut((k + 1) * n);
            let lcol = &left[k * n + k + 1..k * n + n];
            for j in 0..n - k - 1 {
                let col = &mut right[j * n..(j + 1) * n];
                let ukj = col[k];
                if ukj == 0.0 {
                    continue;
                }
                for (c, l) in col[k + 1..].iter_mut().zip(lcol) {
                    *c -= l * ukj;
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // forward substitution, unit lower
        for k in 0..n {
            let xk = x[k];
            if xk != 0.0 {
                let col = &self.lu.col(k)[k + 1..];
                for (xi, l) in x[k + 1..].iter_mut().zip(col) {
                    *xi -= l * xk;
                }
            }
        }
        for k in (0..n).rev() {
            x[k] /= self.lu[(k, k)];
            let xk = x[k];
            if xk != 0.0 {
                let col = &self.lu.col(k)[..k];
                for (xi, u) in x[..k].iter_mut().zip(col) {
                    *xi -= u * xk;
                }
            }
        }
        x
    }
}

/// All eigenvalues of a square matrix.
///
/// Balances, reduces to upper Hessenberg form with Householder reflectors and
/// runs the Francis double-shift QR iteration. Gives up after `100 n` sweeps.
pub fn spectrum(a: &DenseMatrix) -> Result<Vec<Complex64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = RowMajor::from(a);
    h.balance();
    h.hessenberg();
    h.hqr()
}

/// True when `a` is square and `|a - aᵀ| <= tol * max|a|` entrywise.
pub fn is_symmetric(a: &DenseMatrix, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.max_abs();
    let n = a.rows();
    (0..n).all(|j| (j + 1..n).all(|i| (a[(i, j)] - a[(j, i)]).abs() <= tol * scale))
}

/// Eigenvalues of a symmetric matrix in ascending order.
///
/// Householder tridiagonalization followed by implicit QL; only the lower
/// triangle of `a` is read.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // Row-major copy of the lower triangle; row i holds a[i][0..=i].
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..=i {
            m[i * n + k] = a[(i, k)];
        }
    }
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];
    let mut u = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = m[i * n..i * n + l + 1].iter().map(|v| v.abs()).sum();
            if scale == 0.0 {
                off[i] = m[i * n + l];
            } else {
                for v in &mut m[i * n..i * n + l + 1] {
                    *v /= scale;
                    h += *v * *v;
                }
                let f = m[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                off[i] = scale * g;
                h -= f * g;
                m[i * n + l] = f - g;
                u[..=l].copy_from_slice(&m[i * n..i * n + l + 1]);
                // p = A u / h using only the lower triangle
                off[..=l].iter_mut().for_each(|v| *v = 0.0);
                for j in 0..=l {
                    let row = &m[j * n..j * n + j + 1];
                    let uj = u[j];
                    let mut s = row[j] * uj;
                    for k in 0..j {
                        s += row[k] * u[k];
                        off[k] += row[k] * uj;
                    }
                    off[j] += s;
                }
                let mut f = 0.0;
                for j in 0..=l {
                    off[j] /= h;
                    f += off[j] * u[j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    off[j] -= hh * u[j];
                }
                for j in 0..=l {
                    let (uj, qj) = (u[j], off[j]);
                    let row = &mut m[j * n..j * n + j + 1];
                    for k in 0..=j {
                        row[k] -= uj * off[k] + qj * u[k];
                    }
                }
            }
        } else {
            off[i] = m[i * n + l];
        }
        diag[i] = h;
    }
    for i in 0..n {
        diag[i] = m[i * n + i];
    }

    // Implicit QL on the tridiagonal (diag, off[1..]).
    for i in 1..n {
        off[i - 1] = off[i];
    }
    off[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut mm = l;
            while mm + 1 < n {
                let dd = diag[mm].abs() + diag[mm + 1].abs();
                if off[mm].abs() <= f64::EPSILON * dd {
                    break;
                }
                mm += 1;
            }
            if mm == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(LinalgError::NoConvergence { iterations: iter });
            }
            let mut g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
            let mut r = g.hypot(1.0);
            g = diag[mm] - diag[l] + off[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..mm).rev() {
                let f = s * off[i];
                let b = c * off[i];
                r = f.hypot(g);
                off[i + 1] = r;
                if r == 0.0 {
                    diag[i + 1] -= p;
                    off[mm] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + 2.0 * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            diag[l] -= p;
            off[l] = g;
            off[mm] = 0.0;
        }
    }
    diag.sort_by(f64::total_cmp);
    Ok(diag)
}

/// Largest real part over the spectrum.
pub fn max_real_eigenvalue(a: &DenseMatrix) -> Result<f64, LinalgError> {
    Ok(spectrum(a)?.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

struct RowMajor {
    n: usize,
    a: Vec<f64>,
}

impl From<&DenseMatrix> for RowMajor {
    fn from(m: &DenseMatrix) -> Self {
        let n = m.rows();
        let mut a = vec![0.0; n * n];
        for j in 0..n {
            for (i, v) in m.col(j).iter().enumerate() {
                a[i * n + j] = *v;
            }
        }
        Self { n, a }
    }
}

impl RowMajor {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.a[i * self.n + j]
    }

    fn balance(&mut self) {
        const RADIX: f64 = 2.0;
        let n = self.n;
        let sqrdx = RADIX * RADIX;
        let mut done = false;
        while !done {
            done = true;
            for i in 0..n {
                let mut r = 0.0;
                let mut c = 0.0;
                for j in 0..n {
                    if j != i {
                        c += self.at(j, i).abs();
                        r += self.at(i, j).abs();
                    }
                }
                if c == 0.0 || r == 0.0 {
                    continue;
                }
                let s = c + r;
                let mut f = 1.0;
                let mut g = r / RADIX;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 0..n {
                        *self.at_mut(i, j) *= g;
                    }
                    for j in 0..n {
                        *self.at_mut(j, i) *= f;
                    }
                }
            }
        }
    }

    fn hessenberg(&mut self) {
        let n = self.n;
        if n < 3 {
            return;
        }
        let mut v = vec![0.0; n];
        let mut w = vec![0.0; n];
        for k in 0..n - 2 {
            let len = n - k - 1;
            let mut norm2 = 0.0;
            for i in 0..len {
                let x = self.at(k + 1 + i, k);
                v[i] = x;
                norm2 += x * x;
            }
            let norm = norm2.sqrt();
            if norm == 0.0 {
                continue;
            }
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vnorm2: f64 = v[..len].iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            let tau = 2.0 / vnorm2;

            // Left: rows k+1.., columns k..
            let wk = &mut w[k..n];
            wk.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..len {
                let vi = v[i];
                let row = &self.a[(k + 1 + i) * n + k..(k + 2 + i) * n];
                for (wj, aij) in wk.iter_mut().zip(row) {
                    *wj += vi * aij;
                }
            }
            for i in 0..len {
                let f = tau * v[i];
                let row = &mut self.a[(k + 1 + i) * n + k..(k + 2 + i) * n];
                for (aij, wj) in row.iter_mut().zip(wk.iter()) {
                    *aij -= f * wj;
                }
            }

            // Right: all rows, columns k+1..
            let vs = &v[..len];
            for i in 0..n {
                let row = &mut self.a[i * n + k + 1..(i + 1) * n];
                let s: f64 = row.iter().zip(vs).map(|(a, b)| a * b).sum();
                if s == 0.0 {
                    continue;
                }
                let f = tau * s;
                for (aij, vj) in row.iter_mut().zip(vs) {
                    *aij -= f * vj;
                }
            }

            *self.at_mut(k + 1, k) = alpha;
            for i in k + 2..n {
                *self.at_mut(i, k) = 0.0;
            }
        }
    }

    /// Eigenvalues of an upper Hessenberg matrix (destroys `self`).
    fn hqr(&mut self) -> Result<Vec<Complex64>, LinalgError> {
        let n = self.n;
        let eps = f64::EPSILON;
        let mut wr = vec![0.0; n];
        let mut wi = vec![0.0; n];
        let mut anorm = 0.0;
        for i in 0..n {
            for j in i.saturating_sub(1)..n {
                anorm += self.at(i, j).abs();
            }
        }
        let max_sweeps = 100 * n;
        let mut sweeps = 0usize;
        let mut t = 0.0;
        let mut nn = n as isize - 1;
        while nn >= 0 {
            let mut its = 0;
            loop {
                let nu = nn as usize;
                // Look for a single small subdiagonal element.
                let mut l = nu;
                while l >= 1 {
                    let mut s = self.at(l - 1, l - 1).abs() + self.at(l, l).abs();
                    if s == 0.0 {
                        s = anorm;
                    }
                    if self.at(l, l - 1).abs() <= eps * s {
                        *self.at_mut(l, l - 1) = 0.0;
                        break;
                    }
                    l -= 1;
                }
                let mut x = self.at(nu, nu);
                if l == nu {
                    wr[nu] = x + t;
                    wi[nu] = 0.0;
                    nn -= 1;
                    break;
                }
                let mut y = self.at(nu - 1, nu - 1);
                let mut w = self.at(nu, nu - 1) * self.at(nu - 1, nu);
                if l == nu - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        let z = p + z.copysign(p);
                        wr[nu - 1] = x + z;
                        wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                        wi[nu - 1] = 0.0;
                        wi[nu] = 0.0;
                    } else {
                        wr[nu - 1] = x + p;
                        wr[nu] = x + p;
                        wi[nu - 1] = -z;
                        wi[nu] = z;
                    }
                    nn -= 2;
                    break;
                }
                sweeps += 1;
                if sweeps > max_sweeps {
                    return Err(LinalgError::NoConvergence { iterations: sweeps });
                }
                if its > 0 && its % 10 == 0 {
                    // Exceptional shift.
                    t += x;
                    for i in 0..=nu {
                        *self.at_mut(i, i) -= x;
                    }
                    let s = self.at(nu, nu - 1).abs() + self.at(nu - 1, nu - 2).abs();
                    x = 0.75 * s;
                    y = x;
                    w = -0.4375 * s * s;
                }
                its += 1;

                // Look for two consecutive small subdiagonal elements.
                let mut m = nu - 2;
                let (mut p, mut q, mut r);
                loop {
                    let z = self.at(m, m);
                    let rr = x - z;
                    let ss = y - z;
                    p = (rr * ss - w) / self.at(m + 1, m) + self.at(m, m + 1);
                    q = self.at(m + 1, m + 1) - z - rr - ss;
                    r = self.at(m + 2, m + 1);
                    let s = p.abs() + q.abs() + r.abs();
                    p /= s;
                    q /= s;
                    r /= s;
                    if m == l {
                        break;
                    }
                    let u = self.at(m, m - 1).abs() * (q.abs() + r.abs());
                    let v = p.abs() * (self.at(m - 1, m - 1).abs() + z.abs() + self.at(m + 1, m + 1).abs());
                    if u <= eps * v {
                        break;
                    }
                    m -= 1;
                }
                for i in m + 2..=nu {
                    *self.at_mut(i, i - 2) = 0.0;
                    if i != m + 2 {
                        *self.at_mut(i, i - 3) = 0.0;
                    }
                }

                // Double-shift QR step on rows l..=nn and columns m..=nn.
                let mut k = m;
                while k < nu {
                    if k != m {
                        p = self.at(k, k - 1);
                        q = self.at(k + 1, k - 1);
                        r = if k != nu - 1 { self.at(k + 2, k - 1) } else { 0.0 };
                        x = p.abs() + q.abs() + r.abs();
                        if x != 0.0 {
                            p /= x;
                            q /= x;
                            r /= x;
                        }
                    }
                    let s = (p * p + q * q + r * r).sqrt().copysign(p);
                    if s != 0.0 {
                        if k == m {
                            if l != m {
                                let v = self.at(k, k - 1);
                                *self.at_mut(k, k - 1) = -v;
                            }
                        } else {
                            *self.at_mut(k, k - 1) = -s * x;
                        }
                        p += s;
                        x = p / s;
                        y = q / s;
                        let z = r / s;
                        q /= p;
                        r /= p;
                        let three = k != nu - 1;
                        for j in k..=nu {
                            let mut pp = self.at(k, j) + q * self.at(k + 1, j);
                            if three {
                                pp += r * self.at(k + 2, j);
                                *self.at_mut(k + 2, j) -= pp * z;
                            }
                            *self.at_mut(k + 1, j) -= pp * y;
                            *self.at_mut(k, j) -= pp * x;
                        }
                        let mmin = nu.min(k + 3);
                        for i in l..=mmin {
                            let mut pp = x * self.at(i, k) + y * self.at(i, k + 1);
                            if three {
                                pp += z * self.at(i, k + 2);
                                *self.at_mut(i, k + 2) -= pp * r;
                            }
                            *self.at_mut(i, k + 1) -= pp * q;
                            *self.at_mut(i, k) -= pp;
                        }
                    }
                    k += 1;
                }
            }
        }
        Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex64::new(re, im)).collect())
    }
}

/// Result of integrating the moment ODE.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub q_final: Vec<f64>,
    /// `(t, Q(t))` samples, including `t = 0` and `t = T`, when requested.
    pub samples: Vec<(f64, Vec<f64>)>,
}

/// Default RK4 step count for horizon `t_end`: `10 T (1 + ‖A‖∞)`.
pub fn default_moment_steps(big_a: &DenseMatrix, t_end: f64) -> usize {
    ((10.0 * t_end * (1.0 + big_a.norm_inf())).ceil() as usize).max(1)
}

/// Integrates `Q' = A Q + S` on `[0, T]` with classical fourth-order Runge–Kutta.
///
/// `record_every` keeps every k-th step in the returned samples.
pub fn propagate_moments(
    big_a: &DenseMatrix,
    s: &[f64],
    q0: &[f64],
    t_end: f64,
    steps: usize,
    record_every: Option<usize>,
) -> Result<MomentTrajectory, LinalgError> {
    let n = big_a.rows();
    if !big_a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: big_a.rows(),
            cols: big_a.cols(),
        });
    }
    if s.len() != n || q0.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            found: s.len().min(q0.len()),
        });
    }
    if !(t_end >= 0.0) || steps == 0 {
        return Err(LinalgError::InvalidArgument(format!(
            "need T >= 0 and steps >= 1, got T={t_end}, steps={steps}"
        )));
    }
    let h = t_end / steps as f64;
    let rhs = |q: &[f64], out: &mut [f64]| {
        big_a.matvec_into(q, out);
        for (o, si) in out.iter_mut().zip(s) {
            *o += si;
        }
    };
    let mut q = q0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut samples = Vec::new();
    if record_every.is_some() {
        samples.push((0.0, q.clone()));
    }
    for step in 1..=steps {
        rhs(&q, &mut k1);
        for i in 0..n {
            tmp[i] = q[i] + 0.5 * h * k1[i];
        }
        rhs(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = q[i] + 0.5 * h * k2[i];
        }
        rhs(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = q[i] + h * k3[i];
        }
        rhs(&tmp, &mut k4);
        for i in 0..n {
            q[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t = step as f64 * h;
        if q.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_LIMIT) {
            return Err(LinalgError::Overflow { time: t });
        }
        if let Some(every) = record_every {
            if step % every.max(1) == 0 || step == steps {
                samples.push((t, q.clone()));
            }
        }
    }
    Ok(MomentTrajectory { q_final: q, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_by_re_im(mut v: Vec<Complex64>) -> Vec<Complex64> {
        v.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
        v
    }

    #[test]
    fn vec_stacks_columns() {
        let m = DenseMatrix::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]);
        assert_eq!(vec(&m), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&DenseMatrix::column(&[5.0, 6.0, 7.0])), vec![5.0, 6.0, 7.0]);
        assert_eq!(vec(&DenseMatrix::from_rows(&[&[2.5]])), vec![2.5]);
    }

    #[test]
    fn kron_small_cases() {
        let k = kron(&DenseMatrix::from_rows(&[&[2.0]]), &DenseMatrix::from_rows(&[&[3.0]]));
        assert_eq!(k.as_slice(), &[6.0]);

        let b = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let k = kron(&DenseMatrix::identity(2), &b);
        let mut expected = DenseMatrix::zeros(4, 4);
        expected.set_block(0, 0, &b);
        expected.set_block(2, 2, &b);
        assert_eq!(k, expected);
    }

    #[test]
    fn symmetric_map_sizes() {
        let m1 = SymmetricIndexMap::new(1);
        assert_eq!((m1.full_size(), m1.reduced_size()), (1, 1));
        let m2 = SymmetricIndexMap::new(2);
        assert_eq!(m2.reduced_size() + 2, 5);
        assert_eq!(
            (0..3).map(|s| m2.representative(s)).collect::<Vec<_>>(),
            vec![(0, 0), (1, 0), (1, 1)]
        );
        // (1,0) and (0,1) share a slot
        assert_eq!(m2.forward(1), m2.forward(2));
        let m50 = SymmetricIndexMap::new(50);
        assert_eq!(m50.reduced_size(), 1275);
        assert_eq!(m50.reduced_size() + 50, 1325);
    }

    #[test]
    fn reduction_is_identity_for_scalar() {
        let a = DenseMatrix::from_rows(&[&[-1.0, 0.5], &[0.0, -2.0]]);
        let s = [1.0, 0.0];
        let (ra, rs) = reduce_moment_system(&a, &s, &SymmetricIndexMap::new(1)).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rs, s.to_vec());
    }

    #[test]
    fn reduction_rejects_asymmetric_rows() {
        let d = 2;
        let mut a = DenseMatrix::identity(d * d + d).scale(-1.0);
        a[(1, 0)] = 0.3; // row (1,0) differs from row (0,1)
        let s = vec![0.0; 6];
        let err = reduce_moment_system(&a, &s, &SymmetricIndexMap::new(d)).unwrap_err();
        assert!(matches!(err, LinalgError::InconsistentSymmetry { .. }));
    }

    #[test]
    fn spectrum_known_matrices() {
        let ev = sorted_by_re_im(spectrum(&DenseMatrix::diagonal(&[-1.0, -2.0])).unwrap());
        assert!((ev[0].re + 2.0).abs() < 1e-14 && (ev[1].re + 1.0).abs() < 1e-14);

        let rot = DenseMatrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let ev = sorted_by_re_im(spectrum(&rot).unwrap());
        assert!(ev[0].re.abs() < 1e-14 && (ev[0].im + 1.0).abs() < 1e-14);
        assert!(ev[1].re.abs() < 1e-14 && (ev[1].im - 1.0).abs() < 1e-14);

        // companion of λ² − 3λ + 2
        let comp = DenseMatrix::from_rows(&[&[3.0, -2.0], &[1.0, 0.0]]);
        let ev = sorted_by_re_im(spectrum(&comp).unwrap());
        assert!((ev[0].re - 1.0).abs() < 1e-12 && (ev[1].re - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_of_larger_nonsymmetric_matrix() {
        // Upper triangular: eigenvalues are the diagonal regardless of fill.
        let n = 7;
        let mut a = DenseMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                a[(i, j)] = if i == j { -(j as f64) - 0.5 } else { (i * 7 + j) as f64 * 0.1 };
            }
        }
        // Similarity transform with a unit lower-triangular matrix scrambles it.
        let mut l = DenseMatrix::identity(n);
        let mut linv = DenseMatrix::identity(n);
        for i in 1..n {
            l[(i, i - 1)] = 0.7;
        }
        // inverse of I + 0.7 * subdiag: entries (-0.7)^(i-j)
        for j in 0..n {
            for i in j + 1..n {
                linv[(i, j)] = (-0.7f64).powi((i - j) as i32);
            }
        }
        let b = l.matmul(&a).matmul(&linv);
        let ev = sorted_by_re_im(spectrum(&b).unwrap());
        for (k, z) in ev.iter().enumerate() {
            let expected = -((n - 1 - k) as f64) - 0.5;
            assert!((z.re - expected).abs() < 1e-9, "{z} vs {expected}");
            assert!(z.im.abs() < 1e-9);
        }
    }

    #[test]
    fn solve_small_systems() {
        let x = solve_linear(&DenseMatrix::identity(3), &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
        let x = solve_linear(&DenseMatrix::diagonal(&[2.0, 4.0]), &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_detects_singular() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            solve_linear(&a, &[1.0, 1.0]),
            Err(LinalgError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn propagate_trivial_and_scalar() {
        let zero = DenseMatrix::zeros(2, 2);
        let out = propagate_moments(&zero, &[0.0, 0.0], &[0.3, -0.7], 5.0, 10, None).unwrap();
        assert_eq!(out.q_final, vec![0.3, -0.7]);

        let a = DenseMatrix::from_rows(&[&[-2.0]]);
        let steps = default_moment_steps(&a, 1.0);
        let out = propagate_moments(&a, &[1.0], &[0.0], 1.0, steps, Some(1)).unwrap();
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((out.q_final[0] - exact).abs() < 1e-6);
        assert!((exact - 0.4323324).abs() < 1e-7);
        assert_eq!(out.samples.len(), steps + 1);
        let fine = propagate_moments(&a, &[1.0], &[0.0], 1.0, 2000, None).unwrap();
        assert!((fine.q_final[0] - exact).abs() < 1e-12);
    }

    #[test]
    fn propagate_reports_overflow() {
        let a = DenseMatrix::from_rows(&[&[50.0]]);
        let err = propagate_moments(&a, &[0.0], &[1.0], 100.0, 20_000, None).unwrap_err();
        assert!(matches!(err, LinalgError::Overflow { .. }));
    }

    #[test]
    fn determinant_small_cases() {
        let a = DenseMatrix::from_rows(&[&[0.0, 2.0], &[3.0, 1.0]]);
        assert!((determinant(&a).unwrap() + 6.0).abs() < 1e-14);
        let s = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(determinant(&s).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_eigenvalues_match_general_solver() {
        let n = 9;
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = ((i * 7 + j * 3) % 11) as f64 - 5.0 + if i == j { 2.0 } else { 0.0 };
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        assert!(is_symmetric(&a, 0.0));
        let sym = symmetric_eigenvalues(&a).unwrap();
        let mut gen: Vec<f64> = spectrum(&a).unwrap().iter().map(|z| z.re).collect();
        gen.sort_by(f64::total_cmp);
        for (x, y) in sym.iter().zip(&gen) {
            assert!((x - y).abs() < 1e-9, "{sym:?} vs {gen:?}");
        }
        let d = symmetric_eigenvalues(&DenseMatrix::diagonal(&[3.0, -1.0, 2.0])).unwrap();
        assert_eq!(d, vec![-1.0, 2.0, 3.0]);
    }
}
