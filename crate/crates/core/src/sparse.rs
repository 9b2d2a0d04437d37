//! Compressed-row sparse matrices, a sparse LU factorization and restarted GMRES.
//!
//! The LU factorization is delegated to `faer`. A CSR matrix is handed to faer as the
//! CSC representation of its transpose, and solves go through the transposed
//! triangular solves, so no format conversion is needed.

use std::io::Write;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut};

use crate::error::{Error, Result};

/// Square or rectangular matrix in compressed row storage.
///
/// Column indices are sorted and unique within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<u32>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Dimension(format!("{what} {n} exceeds 32-bit indexing")))
}

impl CsrMatrix {
    /// Validating constructor.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        indptr: Vec<u32>,
        indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != nrows + 1 || indptr[0] != 0 {
            return Err(Error::Dimension("row offsets have the wrong length".into()));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() as usize != indices.len() {
            return Err(Error::Dimension("row offsets disagree with entry count".into()));
        }
        for i in 0..nrows {
            let (a, b) = (indptr[i] as usize, indptr[i + 1] as usize);
            if a > b {
                return Err(Error::Dimension(format!("row offsets decrease at row {i}")));
            }
            let row = &indices[a..b];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&j| j as usize >= ncols) {
                return Err(Error::Dimension(format!(
                    "row {i} has unsorted, repeated or out-of-range columns"
                )));
            }
        }
        Ok(CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    /// Sum duplicate `(row, col, value)` entries.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0u32; nrows + 1];
        for &(i, j, _) in triplets {
            if i >= nrows || j >= ncols {
                return Err(Error::Dimension(format!(
                    "entry ({i}, {j}) outside a {nrows} x {ncols} matrix"
                )));
            }
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        to_u32(triplets.len(), "entry count")?;
        let mut cols = vec![0u32; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(i, j, v) in triplets {
            let p = next[i] as usize;
            cols[p] = j as u32;
            vals[p] = v;
            next[i] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0u32);
        let mut order: Vec<usize> = Vec::new();
        for i in 0..nrows {
            let (a, b) = (counts[i] as usize, counts[i + 1] as usize);
            order.clear();
            order.extend(a..b);
            order.sort_unstable_by_key(|&p| cols[p]);
            for &p in &order {
                if indices.len() > indptr[i] as usize && *indices.last().unwrap() == cols[p] {
                    *values.last_mut().unwrap() += vals[p];
                } else {
                    indices.push(cols[p]);
                    values.push(vals[p]);
                }
            }
            indptr.push(indices.len() as u32);
        }
        Ok(CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    /// Zero-valued matrix with the given per-row column sets (sorted and deduplicated here).
    pub fn from_pattern(nrows: usize, ncols: usize, mut rows: Vec<Vec<u32>>) -> Result<Self> {
        if rows.len() != nrows {
            return Err(Error::Dimension("pattern row count mismatch".into()));
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        indptr.push(0u32);
        let mut total = 0usize;
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
            total += r.len();
            indptr.push(to_u32(total, "entry count")?);
        }
        let mut indices = Vec::with_capacity(total);
        for r in rows {
            if r.last().is_some_and(|&j| j as usize >= ncols) {
                return Err(Error::Dimension("pattern column out of range".into()));
            }
            indices.extend(r);
        }
        Ok(CsrMatrix {
            nrows,
            ncols,
            indptr,
            values: vec![0.0; indices.len()],
            indices,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n as u32).collect(),
            indices: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[u32] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i] as usize, self.indptr[i + 1] as usize);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Position of entry `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = (self.indptr[i] as usize, self.indptr[i + 1] as usize);
        self.indices[a..b]
            .binary_search(&(j as u32))
            .ok()
            .map(|k| a + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    /// Add `v` to an existing structural entry; panics if `(i, j)` is not in the pattern.
    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        let p = self
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) is not in the sparsity pattern"));
        self.values[p] += v;
    }

    /// Replace row `i` by the unit row `e_i` (the diagonal must be in the pattern).
    pub fn set_identity_row(&mut self, i: usize) {
        let (a, b) = (self.indptr[i] as usize, self.indptr[i + 1] as usize);
        for p in a..b {
            self.values[p] = if self.indices[p] as usize == i { 1.0 } else { 0.0 };
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (a, b) = (self.indptr[i] as usize, self.indptr[i + 1] as usize);
            let mut s = 0.0;
            for p in a..b {
                s += self.values[p] * x[self.indices[p] as usize];
            }
            *yi = s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// `y += Aᵀ x`.
    pub fn matvec_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (a, b) = (self.indptr[i] as usize, self.indptr[i + 1] as usize);
            for p in a..b {
                y[self.indices[p] as usize] += self.values[p] * xi;
            }
        }
    }

    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.matvec_transpose_add(x, &mut y);
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0u32; self.ncols + 1];
        for &j in &self.indices {
            counts[j as usize + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (a, b) = (self.indptr[i] as usize, self.indptr[i + 1] as usize);
            for p in a..b {
                let j = self.indices[p] as usize;
                let q = next[j] as usize;
                indices[q] = i as u32;
                values[q] = self.values[p];
                next[j] += 1;
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr: counts,
            indices,
            values,
        }
    }

    /// Sparse product `A B`.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.ncols != other.nrows {
            return Err(Error::Dimension(format!(
                "cannot multiply {} x {} by {} x {}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut cols: Vec<u32> = Vec::new();
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0u32);
        for i in 0..self.nrows {
            cols.clear();
            let (ri, rv) = self.row(i);
            for (&k, &a) in ri.iter().zip(rv) {
                let (ck, cv) = other.row(k as usize);
                for (&j, &b) in ck.iter().zip(cv) {
                    let j = j as usize;
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        cols.push(j as u32);
                    }
                    acc[j] += a * b;
                }
            }
            cols.sort_unstable();
            for &j in &cols {
                indices.push(j);
                values.push(acc[j as usize]);
            }
            indptr.push(to_u32(indices.len(), "entry count")?);
        }
        Ok(CsrMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            indptr,
            indices,
            values,
        })
    }

    /// Submatrix `A[rows, cols]`; `cols` need not be sorted.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut map = vec![u32::MAX; self.ncols];
        for (k, &j) in cols.iter().enumerate() {
            map[j] = k as u32;
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0u32);
        let mut buf: Vec<(u32, f64)> = Vec::new();
        for &i in rows {
            buf.clear();
            let (ri, rv) = self.row(i);
            for (&j, &v) in ri.iter().zip(rv) {
                let m = map[j as usize];
                if m != u32::MAX {
                    buf.push((m, v));
                }
            }
            buf.sort_unstable_by_key(|e| e.0);
            for &(j, v) in &buf {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len() as u32);
        }
        CsrMatrix {
            nrows: rows.len(),
            ncols: cols.len(),
            indptr,
            indices,
            values,
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows * self.ncols];
        for i in 0..self.nrows {
            let (ri, rv) = self.row(i);
            for (&j, &v) in ri.iter().zip(rv) {
                d[i * self.ncols + j as usize] = v;
            }
        }
        d
    }

    pub fn from_dense(nrows: usize, ncols: usize, dense: &[f64]) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..nrows {
            for j in 0..ncols {
                let v = dense[i * ncols + j];
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        CsrMatrix::from_triplets(nrows, ncols, &t).expect("dense input is in range")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Matrix-market coordinate export (1-based triplets).
    pub fn write_matrix_market(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for i in 0..self.nrows {
            let (ri, rv) = self.row(i);
            for (&j, &v) in ri.iter().zip(rv) {
                writeln!(out, "{} {} {:e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Sparse LU factorization with pivoting of a square matrix.
///
/// Immutable after construction; solves allocate their own workspace, so a
/// factorization can be shared across threads.
pub struct Factorization {
    n: usize,
    lu: Option<Lu<u32, f64>>,
    symbolic: Option<SymbolicLu<u32>>,
    pattern: (Vec<u32>, Vec<u32>),
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.n).finish()
    }
}

fn lu_error(e: LuError) -> Error {
    match e {
        LuError::SymbolicSingular { index } => Error::SingularMatrix { pivot: index },
        LuError::Generic(g) => Error::Config(format!("sparse factorization failed: {g:?}")),
    }
}

impl Factorization {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        Self::build(a, None)
    }

    /// Refactorize a matrix with the same sparsity pattern, reusing the symbolic analysis
    /// when the pattern matches.
    pub fn refactor(&self, a: &CsrMatrix) -> Result<Self> {
        let same = a.nrows == self.n && a.indptr == self.pattern.0 && a.indices == self.pattern.1;
        Self::build(a, if same { self.symbolic.clone() } else { None })
    }

    fn build(a: &CsrMatrix, symbolic: Option<SymbolicLu<u32>>) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::Dimension(format!(
                "cannot factorize a {} x {} matrix",
                a.nrows, a.ncols
            )));
        }
        let n = a.nrows;
        if n == 0 {
            return Ok(Factorization {
                n,
                lu: None,
                symbolic: None,
                pattern: (a.indptr.clone(), a.indices.clone()),
            });
        }
        // the CSR arrays of A are the CSC arrays of Aᵀ
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &a.indptr, None, &a.indices);
        let mat = SparseColMatRef::new(sym, &a.values);
        let symbolic = match symbolic {
            Some(s) => s,
            None => SymbolicLu::try_new(sym).map_err(|e| Error::Config(format!("{e:?}")))?,
        };
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), mat).map_err(lu_error)?;
        let f = Factorization {
            n,
            lu: Some(lu),
            symbolic: Some(symbolic),
            pattern: (a.indptr.clone(), a.indices.clone()),
        };
        // faer does not report numerically zero pivots; they surface as non-finite solves
        let mut probe: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        f.solve_in_place(&mut probe);
        if let Some(p) = probe.iter().position(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix { pivot: p });
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        if let Some(lu) = &self.lu {
            let rhs = MatMut::from_column_major_slice_mut(b, self.n, 1);
            lu.solve_transpose_in_place_with_conj(Conj::No, rhs);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solve for `k` right-hand sides stored column-major in `b`.
    pub fn solve_many_in_place(&self, b: &mut [f64], k: usize) {
        assert_eq!(b.len(), self.n * k);
        if let (Some(lu), true) = (&self.lu, k > 0) {
            let rhs = MatMut::from_column_major_slice_mut(b, self.n, k);
            lu.solve_transpose_in_place_with_conj(Conj::No, rhs);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `y += s x`.
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GmresConfig {
    pub rel_tol: f64,
    /// Total iteration cap across restarts.
    pub max_iter: usize,
    /// Krylov subspace size per cycle.
    pub restart: usize,
}

impl Default for GmresConfig {
    fn default() -> Self {
        GmresConfig {
            rel_tol: 1e-6,
            max_iter: 1000,
            restart: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final (preconditioned) relative residual, recomputed from the returned iterate.
    pub rel_residual: f64,
    /// Least-squares residual estimate after every iteration, relative to the initial one.
    pub history: Vec<f64>,
}

/// Restarted GMRES with modified Gram-Schmidt.
///
/// Solves `A x = b` from `x = 0`, or `M⁻¹ A x = M⁻¹ b` when a left preconditioner is
/// given (the tolerance then applies to the preconditioned residual). Operator
/// errors abort the solve.
pub fn gmres<A, M>(
    mut apply: A,
    mut precond: Option<M>,
    b: &[f64],
    cfg: &GmresConfig,
) -> Result<GmresOutcome>
where
    A: FnMut(&[f64], &mut [f64]) -> Result<()>,
    M: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let rhs = match precond.as_mut() {
        Some(m) => {
            let mut pb = vec![0.0; n];
            m(b, &mut pb)?;
            pb
        }
        None => b.to_vec(),
    };
    let mut op = |v: &[f64], out: &mut [f64], tmp: &mut [f64]| -> Result<()> {
        match precond.as_mut() {
            Some(m) => {
                apply(v, tmp)?;
                m(tmp, out)
            }
            None => apply(v, out),
        }
    };
    let mut r = vec![0.0; n];
    let beta0 = norm2(&rhs);
    if beta0 == 0.0 {
        return Ok(GmresOutcome {
            x,
            iterations: 0,
            converged: true,
            rel_residual: 0.0,
            history: Vec::new(),
        });
    }
    let restart = cfg.restart.max(1);
    let mut iterations = 0usize;
    let mut history = Vec::new();
    r.copy_from_slice(&rhs);
    let mut beta = beta0;
    loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart.min(64) + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        // Hessenberg columns after Givens rotations
        let mut hcols: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<f64> = Vec::new();
        let mut sn: Vec<f64> = Vec::new();
        let mut g = vec![beta];
        let mut done = false;
        for k in 0..restart {
            if iterations >= cfg.max_iter {
                break;
            }
            let mut w = vec![0.0; n];
            op(&basis[k], &mut w, &mut tmp)?;
            iterations += 1;
            let mut h = vec![0.0; k + 2];
            let wnorm0 = norm2(&w);
            for (j, v) in basis.iter().enumerate() {
                let c = dot(&w, v);
                h[j] = c;
                axpy(-c, v, &mut w);
            }
            let mut wnorm = norm2(&w);
            let loss = basis
                .iter()
                .map(|v| dot(&w, v).abs())
                .fold(0.0, f64::max)
                / wnorm.max(f64::MIN_POSITIVE);
            if loss > 1e-8 {
                for (j, v) in basis.iter().enumerate() {
                    let c = dot(&w, v);
                    h[j] += c;
                    axpy(-c, v, &mut w);
                }
                wnorm = norm2(&w);
            }
            h[k + 1] = wnorm;
            for j in 0..k {
                let (a, bb) = (h[j], h[j + 1]);
                h[j] = cs[j] * a + sn[j] * bb;
                h[j + 1] = -sn[j] * a + cs[j] * bb;
            }
            let denom = h[k].hypot(h[k + 1]);
            let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (h[k] / denom, h[k + 1] / denom) };
            cs.push(c);
            sn.push(s);
            h[k] = c * h[k] + s * h[k + 1];
            h[k + 1] = 0.0;
            let gk = g[k];
            g[k] = c * gk;
            g.push(-s * gk);
            hcols.push(h);
            let est = g[k + 1].abs() / beta0;
            history.push(est);
            let breakdown = wnorm <= 1e-14 * wnorm0.max(f64::MIN_POSITIVE);
            if est <= cfg.rel_tol || breakdown {
                done = true;
                break;
            }
            basis.push(w.iter().map(|v| v / wnorm).collect());
        }
        // back substitution for the cycle's coefficients
        let m = hcols.len();
        let mut y = vec![0.0; m];
        for i in (0..m).rev() {
            let mut s = g[i];
            for j in i + 1..m {
                s -= hcols[j][i] * y[j];
            }
            y[i] = if hcols[i][i] != 0.0 { s / hcols[i][i] } else { 0.0 };
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &basis[j], &mut x);
        }
        // true (preconditioned) residual
        let mut ax = vec![0.0; n];
        op(&x, &mut ax, &mut tmp)?;
        for i in 0..n {
            r[i] = rhs[i] - ax[i];
        }
        beta = norm2(&r);
        let rel = beta / beta0;
        if rel <= cfg.rel_tol || iterations >= cfg.max_iter || (done && m == 0) {
            return Ok(GmresOutcome {
                x,
                iterations,
                converged: rel <= cfg.rel_tol,
                rel_residual: rel,
                history,
            });
        }
        if done && beta == 0.0 {
            return Ok(GmresOutcome {
                x,
                iterations,
                converged: true,
                rel_residual: 0.0,
                history,
            });
        }
    }
}
