//! Sparse matrices with a fixed pattern and a direct LU solver.
//!
//! Matrices are stored row-compressed. The factorization is delegated to
//! `faer`: a CSR matrix is the CSC storage of its transpose, so we factor
//! `A^T` and apply a transposed solve. The symbolic analysis depends only on
//! the pattern and can be reused across Newton iterations and parameter
//! sweeps on the same mesh.

use std::sync::{Arc, Once};

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, LuSymbolicParams, NumericLu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, Mat, Par};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("entry ({row}, {col}) outside a {n}x{n} matrix")]
    OutOfBounds { row: usize, col: usize, n: usize },
    #[error("right-hand side has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is singular: {0}")]
    Singular(String),
    #[error("solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    Inaccurate { residual: f64, tolerance: f64 },
    #[error("matrix pattern differs from the analyzed pattern")]
    PatternMismatch,
}

/// Column indices of a square CSR matrix. Rows are sorted and duplicate free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Builds a pattern from (possibly repeated) coordinates.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, LinalgError> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, j) in entries {
            if i >= n || j >= n {
                return Err(LinalgError::OutOfBounds { row: i, col: j, n });
            }
            rows[i].push(j);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(&row);
            row_ptr.push(col_idx.len());
        }
        Ok(SparsityPattern { n, row_ptr, col_idx })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_cols(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Storage position of entry `(i, j)`, if it is part of the pattern.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.row_cols(i).binary_search(&j).ok().map(|k| start + k)
    }
}

#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        SparseMatrix { pattern, values }
    }

    /// Sums duplicate coordinates.
    pub fn from_triplets(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self, LinalgError> {
        let pattern = Arc::new(SparsityPattern::from_entries(n, entries.iter().map(|&(i, j, _)| (i, j)))?);
        let mut m = SparseMatrix::zeros(pattern);
        for &(i, j, v) in entries {
            m.add(i, j, v);
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds `v` to entry `(i, j)`.
    ///
    /// # Panics
    /// If `(i, j)` is not part of the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .pattern
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) is not in the sparsity pattern"));
        self.values[k] += v;
    }

    /// Replaces row `i` by the identity row.
    pub fn set_identity_row(&mut self, i: usize) {
        for k in self.pattern.row_range(i) {
            self.values[k] = if self.pattern.col_idx[k] == i { 1.0 } else { 0.0 };
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n()];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.pattern.row_range(i) {
                s += self.values[k] * x[self.pattern.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n())
            .map(|i| self.pattern.row_range(i).map(|k| self.values[k].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n()]; self.n()];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.pattern.row_range(i) {
                row[self.pattern.col_idx[k]] += self.values[k];
            }
        }
        d
    }
}

/// Relative residual tolerance accepted after iterative refinement.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

fn init_parallelism() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(Par::Seq));
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Reusable symbolic LU analysis for one sparsity pattern.
#[derive(Clone)]
pub struct LuSolver {
    pattern: Arc<SparsityPattern>,
    symbolic: Arc<SymbolicLu<usize>>,
}

impl std::fmt::Debug for LuSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuSolver").field("n", &self.pattern.n).field("nnz", &self.pattern.nnz()).finish()
    }
}

fn transpose_view<'a>(p: &'a SparsityPattern, values: &'a [f64]) -> SparseColMatRef<'a, usize, f64> {
    let sym = SymbolicSparseColMatRef::new_checked(p.n, p.n, &p.row_ptr, None, &p.col_idx);
    SparseColMatRef::new(sym, values)
}

impl LuSolver {
    pub fn analyze(pattern: Arc<SparsityPattern>) -> Result<Self, LinalgError> {
        init_parallelism();
        let view = SymbolicSparseColMatRef::new_checked(pattern.n, pattern.n, &pattern.row_ptr, None, &pattern.col_idx);
        let symbolic = factorize_symbolic_lu(view, LuSymbolicParams::default()).map_err(|e| LinalgError::Singular(format!("{e:?}")))?;
        Ok(LuSolver { pattern, symbolic: Arc::new(symbolic) })
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    /// Solves `A x = b`, refining until the residual satisfies
    /// `|Ax - b| <= tol (|A| |x| + |b|)` in the max norm.
    pub fn solve(&self, a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.pattern.n;
        if !Arc::ptr_eq(a.pattern(), &self.pattern) && **a.pattern() != *self.pattern {
            return Err(LinalgError::PatternMismatch);
        }
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: b.len() });
        }
        if a.values.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular("non-finite input".into()));
        }
        init_parallelism();
        let par = Par::Seq;
        let sym = &*self.symbolic;
        let scratch = sym
            .factorize_numeric_lu_scratch::<f64>(par, Default::default())
            .or(sym.solve_transpose_in_place_scratch::<f64>(1, par));
        let mut buf = MemBuffer::new(scratch);
        let mut numeric = NumericLu::<usize, f64>::new();
        let lu = sym
            .factorize_numeric_lu(
                &mut numeric,
                transpose_view(&self.pattern, &a.values),
                par,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| LinalgError::Singular(format!("{e:?}")))?;

        let mut solve_t = |rhs: &[f64]| -> Vec<f64> {
            let mut col = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
            lu.solve_transpose_in_place_with_conj(Conj::No, col.as_mut(), par, MemStack::new(&mut buf));
            (0..n).map(|i| col[(i, 0)]).collect()
        };

        let mut x = solve_t(b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular("zero pivot".into()));
        }
        let a_norm = a.norm_inf();
        let b_norm = norm_inf(b);
        let mut r = vec![0.0; n];
        let mut residual = f64::INFINITY;
        let mut tolerance = 0.0;
        for _ in 0..4 {
            a.matvec_into(&x, &mut r);
            for (ri, bi) in r.iter_mut().zip(b) {
                *ri = bi - *ri;
            }
            residual = norm_inf(&r);
            tolerance = RESIDUAL_TOLERANCE * (a_norm * norm_inf(&x) + b_norm);
            if residual <= tolerance {
                return Ok(x);
            }
            let dx = solve_t(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        if !residual.is_finite() {
            return Err(LinalgError::Singular("non-finite residual".into()));
        }
        Err(LinalgError::Inaccurate { residual, tolerance })
    }
}

/// One-shot sparse solve.
pub fn solve_linear(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    LuSolver::analyze(a.pattern().clone())?.solve(a, b)
}
