//! ADMM for the block-decomposed feasibility problem
//!
//! ```text
//! find gamma >= 0, Z_k <= 0   with   Z(gamma) + margin I' = sum_k E_k^T Z_k E_k
//! ```
//!
//! with the `||gamma||^2 / 2` regularizer, where `I'` is the identity with
//! the affine coordinate zeroed. Each iteration solves the
//! equality-constrained `(gamma, v)` subproblem through a cached linear
//! system, projects every block onto the negative semidefinite cone, and
//! takes a dual ascent step. A solve is only reported as certified after the
//! dense eigenvalue check on `Z(gamma)` passes.
//!
//! The equality is imposed on covered positions only (pairs sharing a block);
//! `Z(gamma)` vanishes elsewhere by construction. On those positions the
//! coverage diagonal `D` is positive, so `(D + rho J J^T)^{-1}` is applied via
//! the Woodbury identity with a sparse Cholesky factor of
//! `rho^{-1} I + J^T D^{-1} J`, whose size is the number of multipliers.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv_symmetric, symmetric_eigen, SymBuilder, SymSparse};
use crate::qcbuild::AffineMatrixMap;
use crate::sdpcore::{check_feasible_dense, Feasibility, SdpProblem};

pub use crate::linalg::project_nsd;

/// How the nonnegativity of `gamma` enters the iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaUpdate {
    /// Extra splitting `gamma = s`, `s >= 0`, with its own dual variable.
    Split,
    /// Project `gamma` onto the orthant right after the linear solve.
    Project,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmOptions {
    pub rho: f64,
    /// Weight `w` of the `w ||gamma||^2 / 2` regularizer.
    pub reg: f64,
    /// Over-relaxation factor in `(0, 2)`; `1` is plain ADMM.
    pub alpha: f64,
    pub max_iter: usize,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub check_every: usize,
    pub final_tol: f64,
    /// The solver targets `Z(gamma) <= -margin I` (except on the affine
    /// coordinate) so that certificates land strictly inside the cone.
    pub margin: f64,
    /// Residual balancing: double or halve `rho` when one residual exceeds
    /// the other tenfold.
    pub adaptive_rho: bool,
    pub gamma_update: GammaUpdate,
    pub record_trace: bool,
    /// Solve on `D Z(gamma) D` with unit-norm basis matrices, where `D`
    /// brings large base diagonals down to one. Certificates are always
    /// checked against the unscaled problem.
    pub equilibrate: bool,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        AdmmOptions {
            rho: 1.0,
            reg: 1.0,
            alpha: 1.6,
            max_iter: 5000,
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            check_every: 10,
            final_tol: 1e-6,
            margin: 1e-4,
            adaptive_rho: false,
            gamma_update: GammaUpdate::Split,
            record_trace: false,
            equilibrate: true,
        }
    }
}

impl AdmmOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("rho", self.rho)?;
        positive("eps_primal", self.eps_primal)?;
        if !(self.reg >= 0.0) || !self.reg.is_finite() {
            return Err(Error::Invalid(format!(
                "reg must be nonnegative, got {}",
                self.reg
            )));
        }
        if self.reg == 0.0 && self.gamma_update == GammaUpdate::Project {
            return Err(Error::Invalid(
                "the projected gamma update needs reg > 0".into(),
            ));
        }
        positive("eps_dual", self.eps_dual)?;
        positive("final_tol", self.final_tol)?;
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Invalid(format!(
                "margin must be nonnegative, got {}",
                self.margin
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::Invalid(format!(
                "alpha must lie in (0, 2), got {}",
                self.alpha
            )));
        }
        if self.check_every == 0 {
            return Err(Error::Invalid("check_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Certified,
    MaxIterReached,
    Diverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    /// Largest eigenvalue over the blocks before projection.
    pub lambda_max_estimate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Solution {
    pub gamma: Vec<f64>,
    pub status: Status,
    /// `lambda_max(Z(gamma))` from the final dense check (NaN if diverged).
    pub lambda_max: f64,
    pub iters: usize,
    pub wall_time: f64,
    pub rho: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl Solution {
    pub fn certified(&self) -> bool {
        self.status == Status::Certified
    }
}

pub fn write_trace_csv(trace: &[TraceRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "iter,primal_res,dual_res,lambda_max_estimate")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{}",
            r.iter, r.primal_res, r.dual_res, r.lambda_max_estimate
        )?;
    }
    Ok(())
}

/// `x = (D + rho J J^T)^{-1} r` for positive diagonal `D` and sparse `J`,
/// via `G = rho^{-1} I + J^T D^{-1} J`.
#[derive(Clone, Debug)]
pub struct Woodbury {
    d_inv: Vec<f64>,
    /// Columns of `J`, `(row, value)` pairs.
    cols: Vec<Vec<(usize, f64)>>,
    rho: f64,
    /// `perm[new] = old`; orders multipliers so `G` is nearly banded.
    perm: Vec<usize>,
    chol: CscCholesky<f64>,
}

impl Woodbury {
    pub fn new(d: &[f64], cols: Vec<Vec<(usize, f64)>>, rho: f64) -> Result<Self> {
        if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(
                "Woodbury solve needs a positive diagonal".into(),
            ));
        }
        if !(rho > 0.0) {
            return Err(Error::Invalid(format!("rho must be positive, got {rho}")));
        }
        let m = d.len();
        if cols
            .iter()
            .flatten()
            .any(|&(r, v)| r >= m || !v.is_finite())
        {
            return Err(Error::Invalid(
                "column entry out of range or non-finite".into(),
            ));
        }
        let np = cols.len();
        let key = |c: &Vec<(usize, f64)>| c.iter().map(|e| e.0).min().unwrap_or(usize::MAX);
        let mut perm: Vec<usize> = (0..np).collect();
        perm.sort_by_key(|&i| (key(&cols[i]), i));
        let mut inv = vec![0; np];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        // Rows of J in the permuted parameter order.
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (old, c) in cols.iter().enumerate() {
            for &(r, v) in c {
                rows[r].push((inv[old], v));
            }
        }
        let d_inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
        let mut coo = CooMatrix::new(np, np);
        let mut acc = vec![0.0; np];
        let mut seen = vec![false; np];
        let mut touched = Vec::new();
        for (new, &old) in perm.iter().enumerate() {
            seen[new] = true;
            touched.push(new);
            acc[new] = 1.0 / rho;
            for &(r, v) in &cols[old] {
                let w = v * d_inv[r];
                for &(j, u) in &rows[r] {
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += w * u;
                }
            }
            for &j in &touched {
                coo.push(new, j, acc[j]);
                acc[j] = 0.0;
                seen[j] = false;
            }
            touched.clear();
        }
        let g = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&g)
            .map_err(|e| Error::Invalid(format!("KKT factorization failed: {e:?}")))?;
        Ok(Woodbury {
            d_inv,
            cols,
            rho,
            perm,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.d_inv.len()
    }

    pub fn num_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Nonzeros in the Cholesky factor of `G`.
    pub fn factor_nnz(&self) -> usize {
        self.chol.l().nnz()
    }

    /// `G^{-1} t` with `t` in the original parameter order.
    fn g_solve(&self, t: &[f64]) -> Vec<f64> {
        let np = t.len();
        let mut b = DMatrix::from_iterator(np, 1, self.perm.iter().map(|&old| t[old]));
        self.chol.solve_mut(&mut b);
        let mut out = vec![0.0; np];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = b[(new, 0)];
        }
        out
    }

    /// Returns `(x, u)` with `x = (D + rho J J^T)^{-1} r` and `u = rho J^T x`.
    pub fn solve(&self, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = self
            .cols
            .iter()
            .map(|c| c.iter().map(|&(p, v)| v * self.d_inv[p] * r[p]).sum())
            .collect();
        let u = self.g_solve(&t);
        let mut x = r.to_vec();
        for (c, ui) in self.cols.iter().zip(&u) {
            for &(p, v) in c {
                x[p] -= v * ui;
            }
        }
        for (xi, di) in x.iter_mut().zip(&self.d_inv) {
            *xi *= di;
        }
        (x, u)
    }

    /// `-(D + rho J J^T)^{-1} r`.
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        -DVector::from_vec(self.solve(r.as_slice()).0)
    }
}

/// Dense `-(D + rho J J^T)^+ r` through a symmetric eigendecomposition with
/// relative cutoff `1e-9`; handles singular systems.
#[derive(Clone, Debug)]
pub struct DensePinv {
    pinv: DMatrix<f64>,
}

pub const PINV_CUTOFF: f64 = 1e-9;

impl DensePinv {
    pub fn new(d: &DVector<f64>, j: &DMatrix<f64>, rho: f64) -> Result<Self> {
        if j.nrows() != d.len() {
            return Err(Error::Dimension(format!(
                "J has {} rows, D has {}",
                j.nrows(),
                d.len()
            )));
        }
        let m = DMatrix::from_diagonal(d) + j * j.transpose() * rho;
        Ok(DensePinv {
            pinv: pinv_symmetric(&m, PINV_CUTOFF)?,
        })
    }

    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        -(&self.pinv * r)
    }
}

/// Compressed index of the covered positions and the cached linear solve.
#[derive(Clone, Debug)]
pub struct KktCache {
    dim: usize,
    positions: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
    /// `sqrt(2)` off the diagonal, `1` on it; maps matrix to Euclidean coordinates.
    scale: Vec<f64>,
    coverage: Vec<f64>,
    /// Position id of every local upper-triangle entry `(a, b)`, `a <= b`, row-major.
    block_pos: Vec<Vec<usize>>,
    /// `Z_i` restricted to positions, matrix coordinates.
    basis_pos: Vec<Vec<(usize, f64)>>,
    base_pos: Vec<(usize, f64)>,
    /// Diagonal positions that receive the margin.
    margin_pos: Vec<usize>,
    rho_eff: f64,
    solver: Woodbury,
}

/// Weight of `rho J J^T` in the linear system for regularizer weight `reg`.
/// Every diagonal position except the affine one, which is included only
/// when the base entry there is below `-1/2`. A spec that is tight at the
/// origin pins that entry to zero, while a reachability spec has room there.
fn margin_positions(
    n: usize,
    base: &SymSparse,
    lookup: impl Fn(usize) -> Result<usize>,
) -> Result<Vec<usize>> {
    let last = if base.get(n - 1, n - 1) < -0.5 {
        n
    } else {
        n - 1
    };
    (0..last).map(lookup).collect()
}

fn effective_rho(rho: f64, update: GammaUpdate, reg: f64) -> f64 {
    match update {
        GammaUpdate::Split => rho / (reg + rho),
        GammaUpdate::Project => rho / reg,
    }
}

impl KktCache {
    pub fn new(problem: &SdpProblem, rho: f64, update: GammaUpdate, reg: f64) -> Result<Self> {
        let n = problem.dim();
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut positions = Vec::new();
        let mut coverage: Vec<f64> = Vec::new();
        let mut block_pos = Vec::with_capacity(problem.blocks().len());
        for c in problem.blocks() {
            let mut ids = Vec::with_capacity(c.len() * (c.len() + 1) / 2);
            for (a, &i) in c.iter().enumerate() {
                for &j in &c[a..] {
                    let id = *index.entry((i, j)).or_insert_with(|| {
                        positions.push((i, j));
                        coverage.push(0.0);
                        positions.len() - 1
                    });
                    coverage[id] += 1.0;
                    ids.push(id);
                }
            }
            block_pos.push(ids);
        }
        let lookup = |i: usize, j: usize| -> Result<usize> {
            index.get(&(i, j)).copied().ok_or_else(|| {
                Error::Invalid(format!("entry ({i}, {j}) is not covered by any block"))
            })
        };
        let to_pos = |m: &crate::linalg::SymSparse| -> Result<Vec<(usize, f64)>> {
            m.entries()
                .iter()
                .map(|&(i, j, v)| Ok((lookup(i, j)?, v)))
                .collect()
        };
        let zmap = problem.zmap();
        let basis_pos = zmap
            .basis()
            .iter()
            .map(to_pos)
            .collect::<Result<Vec<_>>>()?;
        let base_pos = to_pos(zmap.base())?;
        let margin_pos = margin_positions(n, zmap.base(), |i| lookup(i, i))?;
        let scale: Vec<f64> = positions
            .iter()
            .map(|&(i, j)| {
                if i == j {
                    1.0
                } else {
                    std::f64::consts::SQRT_2
                }
            })
            .collect();
        let rho_eff = effective_rho(rho, update, reg);
        let cols: Vec<Vec<(usize, f64)>> = basis_pos
            .iter()
            .map(|c| c.iter().map(|&(p, v)| (p, v * scale[p])).collect())
            .collect();
        let solver = Woodbury::new(&coverage, cols, rho_eff)?;
        Ok(KktCache {
            dim: n,
            positions,
            index,
            scale,
            coverage,
            block_pos,
            basis_pos,
            base_pos,
            margin_pos,
            rho_eff,
            solver,
        })
    }

    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Coverage count of every position.
    pub fn coverage(&self) -> &[f64] {
        &self.coverage
    }

    pub fn solver(&self) -> &Woodbury {
        &self.solver
    }

    /// Rebuilds the factorization for a new penalty.
    pub fn with_rho(&self, rho: f64, update: GammaUpdate, reg: f64) -> Result<Self> {
        let rho_eff = effective_rho(rho, update, reg);
        let cols = self.solver.cols.clone();
        let mut out = self.clone();
        out.solver = Woodbury::new(&self.coverage, cols, rho_eff)?;
        out.rho_eff = rho_eff;
        Ok(out)
    }

    /// Same positions and basis, new constant term. Used when only the base
    /// of `Z(gamma)` changes between solves.
    pub fn with_base(&self, problem: &SdpProblem) -> Result<Self> {
        if problem.zmap().num_params() != self.basis_pos.len() || problem.dim() != self.dim {
            return Err(Error::Invalid(
                "cached system does not match the problem".into(),
            ));
        }
        let mut out = self.clone();
        out.base_pos = problem
            .zmap()
            .base()
            .entries()
            .iter()
            .map(|&(i, j, v)| {
                self.index
                    .get(&(i, j))
                    .map(|&p| (p, v))
                    .ok_or_else(|| Error::Invalid(format!("entry ({i}, {j}) is not covered")))
            })
            .collect::<Result<_>>()?;
        out.margin_pos = margin_positions(self.dim, problem.zmap().base(), |i| {
            self.index
                .get(&(i, i))
                .copied()
                .ok_or_else(|| Error::Invalid(format!("entry ({i}, {i}) is not covered")))
        })?;
        Ok(out)
    }
}

/// Iterates of one ADMM run. `z`, `v`, `lambda` are stored as symmetric
/// block matrices (`vec` of these gives the vectors of the derivation).
#[derive(Clone, Debug)]
pub struct AdmmState {
    pub gamma: Vec<f64>,
    /// Nonnegative copy of `gamma` (split update only).
    pub s: Vec<f64>,
    pub mu: Vec<f64>,
    pub v: Vec<DMatrix<f64>>,
    /// Relaxed `v` and `gamma` used by the last z and dual steps.
    pub v_hat: Vec<DMatrix<f64>>,
    pub gamma_hat: Vec<f64>,
    pub z: Vec<DMatrix<f64>>,
    pub lambda: Vec<DMatrix<f64>>,
    /// Equality multiplier on covered positions, matrix coordinates.
    pub x: Vec<f64>,
    pub iter: usize,
    /// Largest block eigenvalue seen in the last z-update.
    pub block_lambda_max: f64,
}

impl AdmmState {
    pub fn zeros(problem: &SdpProblem, cache: &KktCache) -> Self {
        let blocks: Vec<DMatrix<f64>> = problem
            .blocks()
            .iter()
            .map(|c| DMatrix::zeros(c.len(), c.len()))
            .collect();
        let np = problem.zmap().num_params();
        AdmmState {
            gamma: vec![0.0; np],
            s: vec![0.0; np],
            mu: vec![0.0; np],
            v: blocks.clone(),
            v_hat: blocks.clone(),
            gamma_hat: vec![0.0; np],
            z: blocks.clone(),
            lambda: blocks,
            x: vec![0.0; cache.num_positions()],
            iter: 0,
            block_lambda_max: f64::NAN,
        }
    }

    fn all_finite(&self) -> bool {
        let mats = self.v.iter().chain(&self.z).chain(&self.lambda);
        self.gamma
            .iter()
            .chain(&self.s)
            .chain(&self.mu)
            .all(|v| v.is_finite())
            && mats.flat_map(|m| m.iter()).all(|v| v.is_finite())
    }

    /// The multiplier vector that carries the certificate.
    pub fn certificate(&self, update: GammaUpdate) -> &[f64] {
        match update {
            GammaUpdate::Split => &self.s,
            GammaUpdate::Project => &self.gamma,
        }
    }
}

/// `(gamma, v)` step. For [`GammaUpdate::Project`] this is
/// `x = -(D + rho J J^T)^{-1}(-z0 + sum_k H_k^T(z_k + lambda_k / rho))`,
/// `v_k = z_k + lambda_k / rho + H_k x`, `gamma = max(0, -rho J^T x)`.
pub fn update_gamma_v(
    state: &mut AdmmState,
    cache: &KktCache,
    problem: &SdpProblem,
    opts: &AdmmOptions,
    rho: f64,
) -> Result<()> {
    let np = state.gamma.len();
    let mask = problem.zmap().nneg_mask();
    let mut r = vec![0.0; cache.num_positions()];
    for &(p, v) in &cache.base_pos {
        r[p] += v;
    }
    for &p in &cache.margin_pos {
        r[p] += opts.margin;
    }
    // d = s + mu / rho enters only in the split update.
    let d: Vec<f64> = match opts.gamma_update {
        GammaUpdate::Split => state
            .s
            .iter()
            .zip(&state.mu)
            .map(|(s, m)| s + m / rho)
            .collect(),
        GammaUpdate::Project => Vec::new(),
    };
    if opts.gamma_update == GammaUpdate::Split {
        for (col, di) in cache.basis_pos.iter().zip(&d) {
            let c = cache.rho_eff * di;
            if c != 0.0 {
                for &(p, v) in col {
                    r[p] += c * v;
                }
            }
        }
    }
    let mut w: Vec<DMatrix<f64>> = Vec::with_capacity(state.z.len());
    for ((zk, lk), ids) in state.z.iter().zip(&state.lambda).zip(&cache.block_pos) {
        let wk = zk + lk / rho;
        let m = wk.nrows();
        let mut t = 0;
        for a in 0..m {
            for b in a..m {
                r[ids[t]] -= wk[(a, b)];
                t += 1;
            }
        }
        w.push(wk);
    }
    // Euclidean coordinates for the symmetric solve.
    for (ri, s) in r.iter_mut().zip(&cache.scale) {
        *ri *= s;
    }
    let (mut x, u) = cache.solver.solve(&r);
    for (xi, s) in x.iter_mut().zip(&cache.scale) {
        *xi /= s;
    }
    for i in 0..np {
        let g = match opts.gamma_update {
            GammaUpdate::Split => cache.rho_eff * d[i] - u[i],
            GammaUpdate::Project => -u[i],
        };
        state.gamma[i] = if opts.gamma_update == GammaUpdate::Project && mask[i] {
            g.max(0.0)
        } else {
            g
        };
    }
    for ((vk, wk), ids) in state.v.iter_mut().zip(w).zip(&cache.block_pos) {
        let m = wk.nrows();
        let mut t = 0;
        for a in 0..m {
            for b in a..m {
                let val = wk[(a, b)] + x[ids[t]];
                vk[(a, b)] = val;
                vk[(b, a)] = val;
                t += 1;
            }
        }
    }
    state.x = x;
    if state.gamma.iter().any(|g| !g.is_finite())
        || state.v.iter().any(|m| m.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("gamma/v update"));
    }
    Ok(())
}

/// `z_k = Pi_NSD(vhat_k - lambda_k / rho)` with the relaxed
/// `vhat_k = alpha v_k + (1 - alpha) z_k`; also updates `s` for the split update.
pub fn update_z(
    state: &mut AdmmState,
    problem: &SdpProblem,
    opts: &AdmmOptions,
    rho: f64,
) -> Result<()> {
    let a = opts.alpha;
    let mut top = f64::NEG_INFINITY;
    for (((zk, vk), lk), hk) in state
        .z
        .iter_mut()
        .zip(&state.v)
        .zip(&state.lambda)
        .zip(&mut state.v_hat)
    {
        *hk = vk * a + &*zk * (1.0 - a);
        let m = &*hk - lk / rho;
        let eig = symmetric_eigen(&m)?;
        top = top.max(eig.eigenvalues.max());
        let clamped = eig.eigenvalues.map(|l| l.min(0.0));
        let p = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        *zk = (&p + p.transpose()) * 0.5;
    }
    state.block_lambda_max = top;
    if opts.gamma_update == GammaUpdate::Split {
        let mask = problem.zmap().nneg_mask();
        for i in 0..state.s.len() {
            let h = a * state.gamma[i] + (1.0 - a) * state.s[i];
            state.gamma_hat[i] = h;
            let t = h - state.mu[i] / rho;
            state.s[i] = if mask[i] { t.max(0.0) } else { t };
        }
    }
    Ok(())
}

/// `lambda_k += rho (z_k - vhat_k)`, and the same for `mu` in the split update.
pub fn update_lambda(state: &mut AdmmState, opts: &AdmmOptions, rho: f64) {
    for ((lk, zk), hk) in state.lambda.iter_mut().zip(&state.z).zip(&state.v_hat) {
        *lk += (zk - hk) * rho;
    }
    if opts.gamma_update == GammaUpdate::Split {
        for i in 0..state.mu.len() {
            state.mu[i] += rho * (state.s[i] - state.gamma_hat[i]);
        }
    }
}

/// One full iteration: `(gamma, v)`, then `z`, then the duals.
pub fn step(
    state: &mut AdmmState,
    cache: &KktCache,
    problem: &SdpProblem,
    opts: &AdmmOptions,
    rho: f64,
) -> Result<()> {
    update_gamma_v(state, cache, problem, opts, rho)?;
    update_z(state, problem, opts, rho)?;
    update_lambda(state, opts, rho);
    state.iter += 1;
    Ok(())
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Frobenius norm of `Z(cert) + margin I' - sum_k scatter(Z_k)` on the
/// covered positions. The scattered blocks are negative semidefinite, so
/// `lambda_max(Z(cert)) <= slack - margin`.
fn certificate_slack(state: &AdmmState, cache: &KktCache, opts: &AdmmOptions) -> f64 {
    let mut e = vec![0.0; cache.num_positions()];
    for &(p, v) in &cache.base_pos {
        e[p] += v;
    }
    for &p in &cache.margin_pos {
        e[p] += opts.margin;
    }
    for (col, g) in cache
        .basis_pos
        .iter()
        .zip(state.certificate(opts.gamma_update))
    {
        if *g != 0.0 {
            for &(p, v) in col {
                e[p] += g * v;
            }
        }
    }
    for (zk, ids) in state.z.iter().zip(&cache.block_pos) {
        let m = zk.nrows();
        let mut t = 0;
        for a in 0..m {
            for b in a..m {
                e[ids[t]] -= zk[(a, b)];
                t += 1;
            }
        }
    }
    e.iter()
        .zip(&cache.scale)
        .map(|(v, s)| (v * s) * (v * s))
        .sum::<f64>()
        .sqrt()
}

/// Runs ADMM from zero initialization.
pub fn solve(problem: &SdpProblem, opts: &AdmmOptions) -> Result<Solution> {
    opts.validate()?;
    if !opts.equilibrate {
        let cache = KktCache::new(problem, opts.rho, opts.gamma_update, opts.reg)?;
        return solve_cached(problem, opts, &cache);
    }
    let (scaled, col) = equilibrate(problem)?;
    let cache = KktCache::new(&scaled, opts.rho, opts.gamma_update, opts.reg)?;
    let unscale = |g: &[f64]| g.iter().zip(&col).map(|(g, c)| g * c).collect::<Vec<_>>();
    let check =
        |g: &[f64]| check_feasible_dense(&problem.zmap().evaluate(&unscale(g))?, opts.final_tol);
    let mut sol = run(&scaled, opts, &cache, check)?;
    sol.gamma = unscale(&sol.gamma);
    Ok(sol)
}

/// Congruence `D Z(gamma) D` with `D_ii = 1 / sqrt(max(1, |Z0_ii|))`, then
/// every basis matrix scaled to unit Frobenius norm. Returns the scaled
/// problem and the column scales `c`, so `gamma_i = c_i gamma'_i`.
pub fn equilibrate(problem: &SdpProblem) -> Result<(SdpProblem, Vec<f64>)> {
    let zmap = problem.zmap();
    let n = zmap.dim();
    let mut d = vec![1.0; n];
    for &(i, j, v) in zmap.base().entries() {
        if i == j {
            d[i] = 1.0 / v.abs().max(1.0).sqrt();
        }
    }
    let scale = |m: &SymSparse, c: f64| {
        let mut b = SymBuilder::new(n);
        for &(i, j, v) in m.entries() {
            b.add(i, j, v * d[i] * d[j] * c);
        }
        b.build()
    };
    let mut out = AffineMatrixMap::with_base(scale(zmap.base(), 1.0));
    let mut col = Vec::with_capacity(zmap.num_params());
    for (k, z) in zmap.basis().iter().enumerate() {
        let norm = z
            .entries()
            .iter()
            .map(|&(i, j, v)| {
                let w = v * d[i] * d[j];
                if i == j {
                    w * w
                } else {
                    2.0 * w * w
                }
            })
            .sum::<f64>()
            .sqrt();
        let c = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        out.push(scale(z, c), zmap.nneg_mask()[k], zmap.labels()[k].clone());
        col.push(c);
    }
    Ok((problem.with_zmap(out)?, col))
}

/// As [`solve`], reusing a factorization built for the same blocks, basis and `rho`.
pub fn solve_cached(
    problem: &SdpProblem,
    opts: &AdmmOptions,
    cache: &KktCache,
) -> Result<Solution> {
    let check = |g: &[f64]| check_feasible_dense(&problem.zmap().evaluate(g)?, opts.final_tol);
    run(problem, opts, cache, check)
}

/// The iteration; `check` is the dense certificate test on the multipliers.
fn run(
    problem: &SdpProblem,
    opts: &AdmmOptions,
    cache: &KktCache,
    check: impl Fn(&[f64]) -> Result<Feasibility>,
) -> Result<Solution> {
    opts.validate()?;
    if cache.basis_pos.len() != problem.zmap().num_params()
        || cache.block_pos.len() != problem.blocks().len()
    {
        return Err(Error::Invalid(
            "cached system does not match the problem".into(),
        ));
    }
    let start = Instant::now();
    let mut cache = std::borrow::Cow::Borrowed(cache);
    let mut rho = opts.rho;
    if (effective_rho(rho, opts.gamma_update, opts.reg) - cache.rho_eff).abs() > 0.0 {
        cache = std::borrow::Cow::Owned(cache.with_rho(rho, opts.gamma_update, opts.reg)?);
    }
    let mut state = AdmmState::zeros(problem, &cache);
    let mut trace = Vec::new();
    let mut prev_z = state.z.clone();
    let mut prev_s = state.s.clone();
    // Unconditional dense checks catch certificates that the residual test
    // misses. They are spaced so that they cost about a tenth of the
    // iterations in between.
    let mut next_dense = 0usize;
    let mut last_check = Instant::now();
    let mut iters_since = 0usize;
    let finish =
        |state: &AdmmState, status: Status, lambda_max: f64, rho: f64, trace: Vec<TraceRow>| {
            Solution {
                gamma: state.certificate(opts.gamma_update).to_vec(),
                status,
                lambda_max,
                iters: state.iter,
                wall_time: start.elapsed().as_secs_f64(),
                rho,
                trace,
            }
        };
    while state.iter < opts.max_iter {
        match step(&mut state, &cache, problem, opts, rho) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) | Err(Error::Eigen(_)) => {
                return Ok(finish(&state, Status::Diverged, f64::NAN, rho, trace));
            }
            Err(e) => return Err(e),
        }
        if !state.all_finite() {
            return Ok(finish(&state, Status::Diverged, f64::NAN, rho, trace));
        }
        let at_check = state.iter % opts.check_every == 0 || state.iter == opts.max_iter;
        if !at_check {
            continue;
        }
        let mut primal = state
            .z
            .iter()
            .zip(&state.v)
            .fold(0.0f64, |m, (z, v)| m.max(max_abs_diff(z, v)));
        let mut dual = state
            .z
            .iter()
            .zip(&prev_z)
            .fold(0.0f64, |m, (a, b)| m.max(max_abs_diff(a, b)));
        if opts.gamma_update == GammaUpdate::Split {
            for i in 0..state.s.len() {
                primal = primal.max((state.s[i] - state.gamma[i]).abs());
                dual = dual.max((state.s[i] - prev_s[i]).abs());
            }
        }
        dual *= rho;
        if opts.record_trace {
            trace.push(TraceRow {
                iter: state.iter,
                primal_res: primal,
                dual_res: dual,
                lambda_max_estimate: state.block_lambda_max,
            });
        }
        log::trace!(
            "iter {} primal {primal:.3e} dual {dual:.3e} rho {rho}",
            state.iter
        );
        let converged = primal <= opts.eps_primal && dual <= opts.eps_dual;
        let slack_ok = certificate_slack(&state, &cache, opts) <= opts.margin + opts.final_tol;
        iters_since += opts.check_every;
        if slack_ok || converged || state.iter >= next_dense {
            let iter_time = last_check.elapsed().as_secs_f64() / iters_since as f64;
            let t0 = Instant::now();
            let check = check(state.certificate(opts.gamma_update))?;
            let check_time = t0.elapsed().as_secs_f64();
            log::debug!(
                "dense check at iter {}: lambda_max {:.3e}",
                state.iter,
                check.lambda_max
            );
            if check.feasible {
                return Ok(finish(
                    &state,
                    Status::Certified,
                    check.lambda_max,
                    rho,
                    trace,
                ));
            }
            let gap = if iter_time > 0.0 {
                (10.0 * check_time / iter_time).ceil() as usize
            } else {
                0
            };
            next_dense = state.iter + gap.max(opts.check_every);
            last_check = Instant::now();
            iters_since = 0;
        }
        if opts.adaptive_rho && !converged {
            let new_rho = if primal > 10.0 * dual {
                rho * 2.0
            } else if dual > 10.0 * primal {
                rho / 2.0
            } else {
                rho
            };
            if new_rho != rho {
                rho = new_rho;
                cache =
                    std::borrow::Cow::Owned(cache.with_rho(rho, opts.gamma_update, opts.reg)?);
            }
        }
        prev_z.clone_from(&state.z);
        prev_s.clone_from(&state.s);
    }
    let check = check(state.certificate(opts.gamma_update))?;
    let status = if check.feasible {
        Status::Certified
    } else {
        Status::MaxIterReached
    };
    Ok(finish(&state, status, check.lambda_max, rho, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chordal::DimProfile;
    use crate::qcbuild::ParamLabel;
    use crate::sdpcore::{build_problem, Mode};

    fn toy(base_diag: &[f64], with_param: bool) -> SdpProblem {
        let n = base_diag.len();
        let mut b = SymBuilder::new(n);
        for (i, v) in base_diag.iter().enumerate() {
            b.add(i, i, *v);
        }
        let mut m = AffineMatrixMap::with_base(b.build());
        if with_param {
            let mut z = SymBuilder::new(n);
            z.add(1, 1, -1.0);
            m.push(z.build(), true, ParamLabel::Input { i: 0, j: 0 });
        }
        let prof = DimProfile::new(vec![1; n - 1], 1).unwrap();
        build_problem(m, &prof, 0, Mode::Chordal).unwrap()
    }

    #[test]
    fn trivially_feasible() {
        let p = toy(&[-1.0, -1.0, -1.0], false);
        let sol = solve(&p, &AdmmOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Certified);
        assert!(sol.iters <= 20);
        assert!((sol.lambda_max + 1.0).abs() < 1e-9);
    }

    #[test]
    fn needs_multiplier() {
        // Z(g) = diag(-1, 1 - g, -1) is feasible for g >= 1.
        let p = toy(&[-1.0, 1.0, -1.0], true);
        let sol = solve(&p, &AdmmOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Certified);
        assert!(sol.gamma[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn trivially_infeasible() {
        let p = toy(&[-1.0, -1.0, 1.0], true);
        let opts = AdmmOptions {
            max_iter: 300,
            ..Default::default()
        };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, Status::MaxIterReached);
        assert!(sol.lambda_max >= 1.0 - 1e-9);
    }

    #[test]
    fn woodbury_identity_case() {
        let w = Woodbury::new(&[1.0; 4], vec![Vec::new()], 1.0).unwrap();
        let r = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(w.apply(&r), -r);
    }

    #[test]
    fn zero_fixed_point() {
        let mut m = AffineMatrixMap::new(3);
        let mut z = SymBuilder::new(3);
        z.add(0, 1, 1.0);
        m.push(z.build(), true, ParamLabel::Input { i: 0, j: 0 });
        let prof = DimProfile::new(vec![1, 1], 1).unwrap();
        let p = build_problem(m, &prof, 0, Mode::Chordal).unwrap();
        let opts = AdmmOptions {
            margin: 0.0,
            gamma_update: GammaUpdate::Project,
            ..Default::default()
        };
        let cache = KktCache::new(&p, 1.0, GammaUpdate::Project, 1.0).unwrap();
        let mut st = AdmmState::zeros(&p, &cache);
        update_gamma_v(&mut st, &cache, &p, &opts, 1.0).unwrap();
        assert!(st.x.iter().all(|&v| v == 0.0));
        assert!(st.gamma.iter().all(|&v| v == 0.0));
        assert!(st.v.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        update_z(&mut st, &p, &opts, 1.0).unwrap();
        assert!(st.z.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn lambda_step() {
        let p = toy(&[-1.0, -1.0, -1.0], false);
        let cache = KktCache::new(&p, 1.0, GammaUpdate::Split, 1.0).unwrap();
        let mut st = AdmmState::zeros(&p, &cache);
        let opts = AdmmOptions::default();
        let before = st.lambda.clone();
        update_lambda(&mut st, &opts, 1.0);
        assert_eq!(st.lambda, before);
        st.z[0][(0, 0)] = 1.0;
        update_lambda(&mut st, &opts, 1.0);
        assert_eq!(st.lambda[0][(0, 0)], 1.0);
    }

    #[test]
    fn projection_examples() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -3.0]));
        let p = project_nsd(&m).unwrap();
        assert!((p - DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -3.0]))).norm() < 1e-14);
        let nsd = -DMatrix::<f64>::identity(3, 3);
        assert_eq!(project_nsd(&nsd).unwrap(), nsd);
        let _ = SymSparse::zeros(1);
    }

    #[test]
    fn options_validation() {
        assert!(AdmmOptions::default().validate().is_ok());
        assert!(AdmmOptions {
            rho: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdmmOptions {
            check_every: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
