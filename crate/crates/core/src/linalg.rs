//! Small dense/sparse linear algebra helpers shared by the QC builders and the
//! solver: a symmetric sparse matrix type, sparse row operators for congruence
//! transforms, and eigenvalue-based projections.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_MAX_ITER: usize = 100_000;

/// Symmetric sparse matrix stored as its upper triangle.
///
/// Entries are sorted by `(row, col)` with `row <= col` and never hold an
/// explicit zero, so the stored support is the structural pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SymSparse {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    pub fn zeros(dim: usize) -> Self {
        SymSparse {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        SymSparse {
            dim,
            entries: (0..dim).map(|i| (i, i, 1.0)).collect(),
        }
    }

    /// Keeps entries with `|m_ij| > tol`; only the upper triangle of `m` is read.
    pub fn from_dense(m: &DMatrix<f64>, tol: f64) -> Self {
        assert!(m.is_square(), "from_dense needs a square matrix");
        let mut b = SymBuilder::new(m.nrows());
        for j in 0..m.ncols() {
            for i in 0..=j {
                if m[(i, j)].abs() > tol {
                    b.add(i, j, m[(i, j)]);
                }
            }
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Upper-triangular entries `(i, j, value)` with `i <= j`.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.entries
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&key))
            .map(|idx| self.entries[idx].2)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        self.add_to_dense(&mut m, 1.0);
        m
    }

    /// `m += scale * self`.
    pub fn add_to_dense(&self, m: &mut DMatrix<f64>, scale: f64) {
        for &(i, j, v) in &self.entries {
            m[(i, j)] += scale * v;
            if i != j {
                m[(j, i)] += scale * v;
            }
        }
    }

    /// Frobenius inner product `<self, x>` where `x` is symmetric.
    pub fn frob_dot(&self, x: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| {
                if i == j {
                    v * x[(i, j)]
                } else {
                    2.0 * v * x[(i, j)]
                }
            })
            .sum()
    }

    pub fn quad_form(&self, z: &DVector<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| {
                if i == j {
                    v * z[i] * z[i]
                } else {
                    2.0 * v * z[i] * z[j]
                }
            })
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut b = SymBuilder::new(self.dim);
        for &(i, j, v) in &self.entries {
            b.add(i, j, s * v);
        }
        b.build()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.2.is_finite())
    }

    /// Congruence `L^T self L` where `L` has `self.dim()` rows.
    pub fn congruence(&self, l: &SparseRows) -> SymSparse {
        assert_eq!(l.nrows(), self.dim, "congruence: row count mismatch");
        let mut acc = SymBuilder::new(l.ncols());
        for &(r, c, v) in &self.entries {
            let lr = &l.rows[r];
            if r == c {
                for &(a, alpha) in lr {
                    for &(b, beta) in lr {
                        acc.add_ordered(a, b, v * alpha * beta);
                    }
                }
            } else {
                let lc = &l.rows[c];
                for &(a, alpha) in lr {
                    for &(b, beta) in lc {
                        let w = v * alpha * beta;
                        acc.add_ordered(a, b, w);
                        acc.add_ordered(b, a, w);
                    }
                }
            }
        }
        acc.build()
    }

    /// Relabels indices through `map` into a matrix of dimension `dim`.
    pub fn embed(&self, map: &[usize], dim: usize) -> SymSparse {
        assert_eq!(map.len(), self.dim, "embed: map length mismatch");
        let mut b = SymBuilder::new(dim);
        for &(i, j, v) in &self.entries {
            b.add(map[i], map[j], v);
        }
        b.build()
    }
}

/// Accumulator for [`SymSparse`].
#[derive(Debug, Clone)]
pub struct SymBuilder {
    dim: usize,
    map: BTreeMap<(usize, usize), f64>,
}

impl SymBuilder {
    pub fn new(dim: usize) -> Self {
        SymBuilder {
            dim,
            map: BTreeMap::new(),
        }
    }

    /// Adds `v` to the symmetric entry `(i, j)`, i.e. to both `m_ij` and `m_ji`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.dim && j < self.dim, "index out of bounds");
        *self.map.entry((i.min(j), i.max(j))).or_insert(0.0) += v;
    }

    /// Adds `v` to the single ordered position `m_ij`; only the upper-triangle
    /// half is kept, which is exact when the accumulated matrix is symmetric.
    fn add_ordered(&mut self, i: usize, j: usize, v: f64) {
        if i <= j {
            *self.map.entry((i, j)).or_insert(0.0) += v;
        }
    }

    pub fn add_matrix(&mut self, m: &SymSparse, scale: f64) {
        assert_eq!(m.dim, self.dim);
        for &(i, j, v) in &m.entries {
            self.add(i, j, scale * v);
        }
    }

    pub fn build(self) -> SymSparse {
        SymSparse {
            dim: self.dim,
            entries: self
                .map
                .into_iter()
                .filter(|&(_, v)| v != 0.0)
                .map(|((i, j), v)| (i, j, v))
                .collect(),
        }
    }
}

/// Row-sparse linear operator `L` (rows of `(column, value)` pairs).
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        SparseRows {
            ncols,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<(usize, f64)>) {
        debug_assert!(row.iter().all(|&(c, _)| c < self.ncols));
        self.rows
            .push(row.into_iter().filter(|&(_, v)| v != 0.0).collect());
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m[(r, c)] += v;
            }
        }
        m
    }
}

pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input"));
    }
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, EIGEN_MAX_ITER).ok_or_else(|| {
        Error::Eigen(format!(
            "no convergence on {}x{} matrix",
            m.nrows(),
            m.ncols()
        ))
    })
}

pub fn lambda_max(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let eig = symmetric_eigen(m)?;
    Ok(eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}

fn rebuild(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = f(lam);
        scaled.column_mut(j).scale_mut(s);
    }
    let out = scaled * q.transpose();
    symmetrize(&out)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius-nearest negative semidefinite matrix.
pub fn project_nsd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(&symmetrize(m))?;
    if eig.eigenvalues.iter().all(|&l| l <= 0.0) {
        return Ok(symmetrize(m));
    }
    Ok(rebuild(&eig, |l| l.min(0.0)))
}

/// Frobenius-nearest positive semidefinite matrix.
pub fn project_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(&symmetrize(m))?;
    Ok(rebuild(&eig, |l| l.max(0.0)))
}

/// Symmetric PSD square root.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(&symmetrize(m))?;
    Ok(rebuild(&eig, |l| l.max(0.0).sqrt()))
}

/// Moore–Penrose pseudoinverse of a symmetric matrix; eigenvalues with
/// `|lambda| <= rel_cutoff * max|lambda|` are treated as zero.
pub fn pinv_symmetric(m: &DMatrix<f64>, rel_cutoff: f64) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(&symmetrize(m))?;
    let smax = eig.eigenvalues.iter().fold(0.0_f64, |a, &l| a.max(l.abs()));
    let cut = rel_cutoff * smax;
    Ok(rebuild(&eig, |l| {
        if l.abs() > cut && l != 0.0 {
            1.0 / l
        } else {
            0.0
        }
    }))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
}
