//! Compressed sparse row matrices, deterministic assembly and sparse LU.

use std::panic::{catch_unwind, AssertUnwindSafe};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// CSR matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[fill[r]] = c;
            vals[fill[r]] = v;
            fill[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|e| e.0);
            for &(c, v) in &scratch {
                if col_idx.len() > row_ptr[r] && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    /// Zero matrix with a fixed pattern: `rows[i]` lists the columns of row `i`.
    pub fn from_pattern(ncols: usize, rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        for r in rows {
            let mut r = r.clone();
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self { nrows: rows.len(), ncols, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>())
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

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col_idx[k], self.values[k]))
    }

    /// Entry `(i, j)`; zero outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match cols.binary_search(&j) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    /// Adds `v` to an entry of the fixed pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let start = self.row_ptr[i];
        let cols = &self.col_idx[start..self.row_ptr[i + 1]];
        let k = cols.binary_search(&j).unwrap_or_else(|_| panic!("({i}, {j}) not in pattern"));
        self.values[start + k] += v;
    }

    pub fn set_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            d[(i, j)] += v;
        }
        d
    }

    /// Max-row-sum norm.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Product `self * other`.
    pub fn mul(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut t = Vec::new();
        for i in 0..self.nrows {
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    t.push((i, j, a * b));
                }
            }
        }
        Self::from_triplets(self.nrows, other.ncols, &t)
    }

    fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.nrows == other.nrows && self.ncols == other.ncols && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }
}

/// Dense element contribution: global dof list, matrix and vector.
pub struct ElementContribution {
    pub dofs: Vec<usize>,
    pub matrix: DMatrix<f64>,
    pub vector: DVector<f64>,
}

/// Computes element contributions in parallel and scatters them serially
/// in element order, so results do not depend on the thread count.
pub fn assemble<F>(n: usize, nelem: usize, element: F) -> Result<(CsrMatrix, Vec<f64>)>
where
    F: Fn(usize) -> Result<ElementContribution> + Sync,
{
    let parts: Vec<ElementContribution> = (0..nelem).into_par_iter().map(&element).collect::<Result<_>>()?;
    let nnz: usize = parts.iter().map(|p| p.dofs.len() * p.dofs.len()).sum();
    let mut trip = Vec::with_capacity(nnz);
    let mut rhs = vec![0.0; n];
    for p in &parts {
        for (a, &ga) in p.dofs.iter().enumerate() {
            rhs[ga] += p.vector[a];
            for (b, &gb) in p.dofs.iter().enumerate() {
                let v = p.matrix[(a, b)];
                if v != 0.0 {
                    trip.push((ga, gb, v));
                }
            }
        }
    }
    Ok((CsrMatrix::from_triplets(n, n, &trip), rhs))
}

/// Sparse LU factorization with partial pivoting.
pub struct SparseLu {
    lu: Lu<usize, f64>,
    symbolic: SymbolicLu<usize>,
    matrix: CsrMatrix,
}

fn to_faer(a: &CsrMatrix) -> Result<SparseColMat<usize, f64>> {
    let trip: Vec<Triplet<usize, usize, f64>> =
        a.triplets().into_iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
    SparseColMat::try_new_from_triplets(a.nrows, a.ncols, &trip)
        .map_err(|e| Error::Internal(format!("sparse matrix construction: {e:?}")))
}

fn quiet<T>(f: impl FnOnce() -> T) -> std::thread::Result<T> {
    catch_unwind(AssertUnwindSafe(f))
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::SingularSystem(format!("non-square {}x{} system", a.nrows, a.ncols)));
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("non-finite matrix entry".into()));
        }
        let fa = to_faer(a)?;
        let symbolic = quiet(|| SymbolicLu::try_new(fa.symbolic()))
            .map_err(|_| Error::SingularSystem("symbolic factorization failed".into()))?
            .map_err(|e| Error::SingularSystem(format!("symbolic factorization: {e:?}")))?;
        Self::numeric(a, &fa, symbolic)
    }

    fn numeric(a: &CsrMatrix, fa: &SparseColMat<usize, f64>, symbolic: SymbolicLu<usize>) -> Result<Self> {
        let lu = quiet(|| Lu::try_new_with_symbolic(symbolic.clone(), fa.as_ref()))
            .map_err(|_| Error::SingularSystem("zero pivot in sparse LU".into()))?
            .map_err(|e| Error::SingularSystem(format!("sparse LU: {e:?}")))?;
        Ok(Self { lu, symbolic, matrix: a.clone() })
    }

    /// Factors `a`, reusing the symbolic analysis when the pattern is unchanged.
    pub fn refactor(self, a: &CsrMatrix) -> Result<Self> {
        if self.matrix.same_pattern(a) {
            let fa = to_faer(a)?;
            Self::numeric(a, &fa, self.symbolic)
        } else {
            Self::factor(a)
        }
    }

    /// Solves and checks the residual; a large residual signals a
    /// (numerically) singular matrix.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.matrix.nrows;
        assert_eq!(b.len(), n);
        let mut rhs = faer::Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
        quiet(|| self.lu.solve_in_place(rhs.as_mut()))
            .map_err(|_| Error::SingularSystem("triangular solve failed".into()))?;
        let x: Vec<f64> = (0..n).map(|i| rhs[(i, 0)]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("non-finite solution".into()));
        }
        let ax = self.matrix.mul_vec(&x);
        let res = ax.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let xn = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bn = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = self.matrix.norm_inf() * xn + bn;
        if res > 1e-8 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularSystem(format!(
                "solution residual {res:e} relative to scale {scale:e}"
            )));
        }
        Ok(x)
    }
}

/// One-shot sparse solve.
pub fn solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    SparseLu::factor(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 0.5), (1, 1, -1.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 2), 1.5);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.mul_vec(&[1.0, 2.0, 3.0]), vec![6.5, -2.0]);
        assert_eq!(a.transpose().get(2, 0), 1.5);
    }

    #[test]
    fn pattern_add() {
        let mut a = CsrMatrix::from_pattern(3, &[vec![2, 0], vec![1]]);
        a.add(0, 2, 1.0);
        a.add(0, 2, 1.0);
        assert_eq!(a.get(0, 2), 2.0);
        a.set_zero();
        assert_eq!(a.get(0, 2), 0.0);
    }

    #[test]
    fn lu_solves_and_reuses_symbolic() {
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -2.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let xs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&xs);
        let lu = SparseLu::factor(&a).unwrap();
        let x = lu.solve(&b).unwrap();
        assert!(x.iter().zip(&xs).all(|(a, b)| (a - b).abs() < 1e-12));
        let t2: Vec<_> = t.iter().map(|&(i, j, v)| (i, j, 2.0 * v)).collect();
        let a2 = CsrMatrix::from_triplets(n, n, &t2);
        let x2 = lu.refactor(&a2).unwrap().solve(&b).unwrap();
        assert!(x2.iter().zip(&xs).all(|(a, b)| (2.0 * a - b).abs() < 1e-12));
    }

    #[test]
    fn singular_matrix_reported() {
        let a = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 0, 1.0), (2, 1, 1.0), (0, 1, 0.0)]);
        let r = SparseLu::factor(&a).and_then(|lu| lu.solve(&[1.0, 2.0, 4.0]));
        assert!(matches!(r, Err(Error::SingularSystem(_))));
    }

    #[test]
    fn parallel_assembly_deterministic() {
        let build = || {
            assemble(11, 10, |e| {
                Ok(ElementContribution {
                    dofs: vec![e, e + 1],
                    matrix: DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, -0.1, -0.1, 0.7]),
                    vector: DVector::from_vec(vec![0.1, 0.2]),
                })
            })
            .unwrap()
        };
        let (a, b) = build();
        let (c, d) = build();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert!((a.get(5, 5) - (0.7 + 1.0 / 3.0)).abs() < 1e-15);
    }
}
