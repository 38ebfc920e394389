//! Quadratic-constraint builders and the affine matrix map `gamma -> Z(gamma)`.
//!
//! Every QC is represented as an [`AffineMatrixMap`]: a constant symmetric
//! matrix plus one sparse symmetric basis matrix per scalar multiplier. The
//! input, activation and safety QCs are lifted onto the `(N + 1)`-dimensional
//! stacked vector `z = (x_1, ..., x_K, 1)` by sparse congruence transforms.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chordal::{DimProfile, EdgeSet};
use crate::error::{Error, Result};
use crate::linalg::{SparseRows, SymBuilder, SymSparse};
use crate::nnmodel::{LayerBounds, Network, StackedSystem};

/// Origin of a multiplier inside `gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ParamLabel {
    /// Entry `(i, j)` of the input multiplier matrix `Lambda`.
    Input { i: usize, j: usize },
    /// `lambda_ij` of the banded sector matrix `T` (`i == j` for the diagonal).
    Sector { i: usize, j: usize },
    /// Box multiplier for neuron `i` of layer `layer + 1`.
    Adjacent { layer: usize, i: usize },
    /// Multiplier of `phi_i - u_i >= 0` (relu only).
    ReluUpper { i: usize },
    /// Multiplier of `phi_i >= 0` (relu only).
    ReluNonneg { i: usize },
}

/// Symmetric-matrix-valued affine function `gamma -> base + sum_i gamma_i basis_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMatrixMap {
    dim: usize,
    base: SymSparse,
    basis: Vec<SymSparse>,
    nneg: Vec<bool>,
    labels: Vec<ParamLabel>,
}

impl AffineMatrixMap {
    pub fn new(dim: usize) -> Self {
        AffineMatrixMap {
            dim,
            base: SymSparse::zeros(dim),
            basis: Vec::new(),
            nneg: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn with_base(base: SymSparse) -> Self {
        let mut m = AffineMatrixMap::new(base.dim());
        m.base = base;
        m
    }

    pub fn push(&mut self, mat: SymSparse, nonneg: bool, label: ParamLabel) {
        assert_eq!(mat.dim(), self.dim, "basis matrix has the wrong dimension");
        self.basis.push(mat);
        self.nneg.push(nonneg);
        self.labels.push(label);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        self.basis.len()
    }

    pub fn base(&self) -> &SymSparse {
        &self.base
    }

    pub fn set_base(&mut self, base: SymSparse) {
        assert_eq!(base.dim(), self.dim);
        self.base = base;
    }

    pub fn basis(&self) -> &[SymSparse] {
        &self.basis
    }

    pub fn nneg_mask(&self) -> &[bool] {
        &self.nneg
    }

    pub fn set_nonneg(&mut self, i: usize, nonneg: bool) {
        self.nneg[i] = nonneg;
    }

    pub fn labels(&self) -> &[ParamLabel] {
        &self.labels
    }

    fn check_gamma(&self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.basis.len() {
            return Err(Error::Dimension(format!(
                "gamma has length {} but the map has {} parameters",
                gamma.len(),
                self.basis.len()
            )));
        }
        Ok(())
    }

    /// Dense `base + sum_i gamma_i Z_i`.
    pub fn evaluate(&self, gamma: &[f64]) -> Result<DMatrix<f64>> {
        self.check_gamma(gamma)?;
        let mut m = self.base.to_dense();
        self.add_linear_part(gamma, &mut m);
        Ok(m)
    }

    /// `m += sum_i gamma_i Z_i` (the base is not added).
    pub fn add_linear_part(&self, gamma: &[f64], m: &mut DMatrix<f64>) {
        for (g, z) in gamma.iter().zip(&self.basis) {
            if *g != 0.0 {
                z.add_to_dense(m, *g);
            }
        }
    }

    /// Quadratic form `z^T Z(gamma) z` without densifying.
    pub fn quad_form(&self, gamma: &[f64], z: &DVector<f64>) -> Result<f64> {
        self.check_gamma(gamma)?;
        Ok(self.base.quad_form(z)
            + gamma
                .iter()
                .zip(&self.basis)
                .map(|(g, b)| g * b.quad_form(z))
                .sum::<f64>())
    }

    /// `L^T (.) L` applied to the base and every basis matrix.
    pub fn congruence(&self, l: &SparseRows) -> Result<AffineMatrixMap> {
        if l.nrows() != self.dim {
            return Err(Error::Dimension(format!(
                "congruence operator has {} rows, map has dimension {}",
                l.nrows(),
                self.dim
            )));
        }
        Ok(AffineMatrixMap {
            dim: l.ncols(),
            base: self.base.congruence(l),
            basis: self.basis.iter().map(|z| z.congruence(l)).collect(),
            nneg: self.nneg.clone(),
            labels: self.labels.clone(),
        })
    }

    /// Sum of two maps over the same space; parameters are concatenated.
    pub fn concat(mut self, other: AffineMatrixMap) -> Result<AffineMatrixMap> {
        if self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "cannot add maps of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let mut b = SymBuilder::new(self.dim);
        b.add_matrix(&self.base, 1.0);
        b.add_matrix(&other.base, 1.0);
        self.base = b.build();
        self.basis.extend(other.basis);
        self.nneg.extend(other.nneg);
        self.labels.extend(other.labels);
        Ok(self)
    }

    /// Union of the supports of the base and all basis matrices.
    pub fn support(&self) -> EdgeSet {
        let mut e = EdgeSet::new(self.dim);
        for m in std::iter::once(&self.base).chain(&self.basis) {
            for &(i, j, _) in m.entries() {
                e.insert(i, j);
            }
        }
        e
    }

    pub fn is_symmetric_finite(&self) -> bool {
        std::iter::once(&self.base)
            .chain(&self.basis)
            .all(|m| m.is_finite())
    }

    /// Maps a parameter vector of `other` onto this map's parameters by label;
    /// parameters absent from `other` are zero. Fails if a label of `other`
    /// has no counterpart here.
    pub fn embed_gamma(&self, other: &AffineMatrixMap, gamma: &[f64]) -> Result<Vec<f64>> {
        other.check_gamma(gamma)?;
        let index: std::collections::HashMap<ParamLabel, usize> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (*l, i))
            .collect();
        let mut out = vec![0.0; self.num_params()];
        for (label, g) in other.labels.iter().zip(gamma) {
            let i = index
                .get(label)
                .ok_or_else(|| Error::Invalid(format!("parameter {label:?} has no counterpart")))?;
            out[*i] = *g;
        }
        Ok(out)
    }
}

/// Admissible input set.
#[derive(Clone, Debug, PartialEq)]
pub enum InputSpec {
    Box {
        lo: DVector<f64>,
        hi: DVector<f64>,
    },
    Polytope {
        h: DMatrix<f64>,
        h_vec: DVector<f64>,
    },
}

impl InputSpec {
    pub fn new_box(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo
            .iter()
            .zip(hi.iter())
            .any(|(l, h)| l > h || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::Invalid("box needs finite lo <= hi".into()));
        }
        Ok(InputSpec::Box { lo, hi })
    }

    /// Box `[lo, hi]^n`.
    pub fn uniform_box(n: usize, lo: f64, hi: f64) -> Result<Self> {
        InputSpec::new_box(DVector::from_element(n, lo), DVector::from_element(n, hi))
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSpec::Box { lo, .. } => lo.len(),
            InputSpec::Polytope { h, .. } => h.ncols(),
        }
    }

    /// `(H, h)` with the set `{x : H x <= h}`; a box becomes `H = [I; -I]`, `h = [hi; -lo]`.
    pub fn to_polytope(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        match self {
            InputSpec::Box { lo, hi } => {
                let n = lo.len();
                let mut h = DMatrix::zeros(2 * n, n);
                let mut hv = DVector::zeros(2 * n);
                for i in 0..n {
                    h[(i, i)] = 1.0;
                    h[(n + i, i)] = -1.0;
                    hv[i] = hi[i];
                    hv[n + i] = -lo[i];
                }
                Ok((h, hv))
            }
            InputSpec::Polytope { h, h_vec } => {
                if h.nrows() != h_vec.len() {
                    return Err(Error::Dimension(format!(
                        "H has {} rows but h has length {}",
                        h.nrows(),
                        h_vec.len()
                    )));
                }
                Ok((h.clone(), h_vec.clone()))
            }
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        match self {
            InputSpec::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(v, (l, h))| v >= l && v <= h),
            InputSpec::Polytope { h, h_vec } => (h * x - h_vec).iter().all(|&v| v <= 0.0),
        }
    }
}

/// Polytope input QC `P(Lambda) = [H -h]^T Lambda [H -h]` over `S^{n_1 + 1}`;
/// one nonnegative parameter per entry `i <= j` of the symmetric `Lambda`.
pub fn input_qc(spec: &InputSpec) -> Result<AffineMatrixMap> {
    let (h, hv) = spec.to_polytope()?;
    let (rows, n) = h.shape();
    let mut g = SparseRows::new(n + 1);
    for r in 0..rows {
        let mut row: Vec<(usize, f64)> = (0..n).map(|c| (c, h[(r, c)])).collect();
        row.push((n, -hv[r]));
        g.push_row(row);
    }
    let mut map = AffineMatrixMap::new(n + 1);
    for i in 0..rows {
        for j in i..rows {
            let mut lam = SymBuilder::new(rows);
            lam.add(i, j, 1.0);
            map.push(lam.build().congruence(&g), true, ParamLabel::Input { i, j });
        }
    }
    Ok(map)
}

/// Sector description `[a, b]` around the point `(0, shift)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sector {
    pub a: f64,
    pub b: f64,
    /// `phi(0)`; the QC is applied to `phi(u) - shift`.
    pub shift: f64,
}

impl Sector {
    pub fn for_activation(act: crate::nnmodel::Activation) -> Self {
        let (a, b) = act.sector();
        Sector {
            a,
            b,
            shift: act.apply(0.0),
        }
    }
}

/// Number of pairs in the `beta`-banded index set over `n` indices.
pub fn band_pairs(n: usize, beta: usize) -> usize {
    (1..=beta).map(|d| n.saturating_sub(d)).sum()
}

/// Banded sector QC over `S^{2n + 1}` acting on `(u, phi(u), 1)`.
pub fn sector_qc(n: usize, beta: usize, sector: Sector) -> Result<AffineMatrixMap> {
    if n == 0 {
        return Err(Error::Invalid("sector QC needs n >= 1".into()));
    }
    if beta > n - 1 {
        return Err(Error::OutOfRange {
            name: "beta",
            value: beta as i64,
            allowed: format!("0..={}", n - 1),
        });
    }
    let Sector { a, b, shift } = sector;
    let (c11, c12, c22) = (-2.0 * a * b, a + b, -2.0);
    let dim = 2 * n + 1;
    // Shift operator (u, phi, 1) -> (u, phi - shift, 1).
    let shifter = if shift != 0.0 {
        let mut l = SparseRows::new(dim);
        for i in 0..n {
            l.push_row(vec![(i, 1.0)]);
        }
        for i in 0..n {
            l.push_row(vec![(n + i, 1.0), (2 * n, -shift)]);
        }
        l.push_row(vec![(2 * n, 1.0)]);
        Some(l)
    } else {
        None
    };
    // Q for T = sum of outer products of the sparse vector `t`.
    let block = |t: &[(usize, f64)]| {
        let mut q = SymBuilder::new(dim);
        for &(i, vi) in t {
            for &(j, vj) in t {
                if i <= j {
                    let w = vi * vj;
                    q.add(i, j, c11 * w);
                    q.add(n + i, n + j, c22 * w);
                }
                // Off-diagonal (1,2) block entries: (a+b) T at (i, n+j).
                q.add(i, n + j, c12 * vi * vj);
            }
        }
        let q = q.build();
        match &shifter {
            Some(l) => q.congruence(l),
            None => q,
        }
    };
    let mut map = AffineMatrixMap::new(dim);
    for i in 0..n {
        map.push(block(&[(i, 1.0)]), true, ParamLabel::Sector { i, j: i });
    }
    for i in 0..n {
        for j in i + 1..=(i + beta).min(n - 1) {
            map.push(
                block(&[(i, 1.0), (j, -1.0)]),
                true,
                ParamLabel::Sector { i, j },
            );
        }
    }
    Ok(map)
}

/// Linear relu facts `phi >= u` and `phi >= 0` as QCs over `S^{2n + 1}`
/// acting on `(u, phi, 1)`: `2 nu_i (phi_i - u_i) + 2 eta_i phi_i >= 0`.
pub fn relu_affine_qc(n: usize) -> AffineMatrixMap {
    let dim = 2 * n + 1;
    let mut map = AffineMatrixMap::new(dim);
    for i in 0..n {
        let mut q = SymBuilder::new(dim);
        q.add(i, 2 * n, -1.0);
        q.add(n + i, 2 * n, 1.0);
        map.push(q.build(), true, ParamLabel::ReluUpper { i });
    }
    for i in 0..n {
        let mut q = SymBuilder::new(dim);
        q.add(n + i, 2 * n, 1.0);
        map.push(q.build(), true, ParamLabel::ReluNonneg { i });
    }
    map
}

/// Activation QC lifted to `S^{N + 1}` through `[A b; B 0; 0 1]`.
pub fn build_zac(q: &AffineMatrixMap, sys: &StackedSystem) -> Result<AffineMatrixMap> {
    let expected = 2 * sys.hidden() + 1;
    if q.dim() != expected {
        return Err(Error::Dimension(format!(
            "activation QC has dimension {} but the network needs {expected}",
            q.dim()
        )));
    }
    q.congruence(&sys.lifting_rows())
}

/// Input QC lifted to `S^{N + 1}` through `[E_1; E_a]`.
pub fn build_zin(p: &AffineMatrixMap, profile: &DimProfile) -> Result<AffineMatrixMap> {
    let n1 = profile.layer_dim(1);
    if p.dim() != n1 + 1 {
        return Err(Error::Dimension(format!(
            "input QC has dimension {} but n_1 + 1 = {}",
            p.dim(),
            n1 + 1
        )));
    }
    let n = profile.n_total();
    let mut l = SparseRows::new(n + 1);
    for i in 0..n1 {
        l.push_row(vec![(i, 1.0)]);
    }
    l.push_row(vec![(n, 1.0)]);
    p.congruence(&l)
}

/// Box QC `(x_{k+1} - lo)^T diag(nu) (hi - x_{k+1}) >= 0` over
/// `S^{1 + 2 n_{k+1}}`, acting on `(W_k x_k + b_k, x_{k+1}, 1)`.
pub fn adjacent_qc(bounds: &LayerBounds, net: &Network, k: usize) -> Result<AffineMatrixMap> {
    let k_layers = net.num_layers();
    if k == 0 || k >= k_layers {
        return Err(Error::OutOfRange {
            name: "k",
            value: k as i64,
            allowed: format!("1..={}", k_layers - 1),
        });
    }
    let (lo, hi) = match (bounds.post_lo.get(k - 1), bounds.post_hi.get(k - 1)) {
        (Some(l), Some(h)) => (l, h),
        _ => {
            return Err(Error::Invalid(format!(
                "no interval bounds for layer {}",
                k + 1
            )))
        }
    };
    let n = net.weights()[k - 1].nrows();
    if lo.len() != n || hi.len() != n {
        return Err(Error::Dimension(format!(
            "bounds for layer {} have the wrong length",
            k + 1
        )));
    }
    let dim = 2 * n + 1;
    let mut map = AffineMatrixMap::new(dim);
    for i in 0..n {
        let mut q = SymBuilder::new(dim);
        q.add(n + i, n + i, -1.0);
        q.add(n + i, 2 * n, 0.5 * (lo[i] + hi[i]));
        q.add(2 * n, 2 * n, -lo[i] * hi[i]);
        map.push(q.build(), true, ParamLabel::Adjacent { layer: k, i });
    }
    Ok(map)
}

/// Lifts per-layer QCs `Q_k` into one map over `S^{2(N - n_1) + 1}` acting on
/// `(A x + b, B x, 1)`.
pub fn lift_adjacent(q_list: &[AffineMatrixMap], sys: &StackedSystem) -> Result<AffineMatrixMap> {
    let h = sys.hidden();
    let layers = sys.num_hidden_blocks();
    if q_list.len() != layers {
        return Err(Error::Invalid(format!(
            "expected {layers} adjacent-layer QCs, got {}",
            q_list.len()
        )));
    }
    let dim = 2 * h + 1;
    let mut out = AffineMatrixMap::new(dim);
    for (idx, q) in q_list.iter().enumerate() {
        let rows = sys.block_rows(idx + 1);
        let nk = rows.len();
        if q.dim() != 2 * nk + 1 {
            return Err(Error::Dimension(format!(
                "Q_{} has dimension {} but layer {} needs {}",
                idx + 1,
                q.dim(),
                idx + 2,
                2 * nk + 1
            )));
        }
        let map: Vec<usize> = rows
            .clone()
            .chain(rows.clone().map(|r| h + r))
            .chain(std::iter::once(2 * h))
            .collect();
        let mut lifted = AffineMatrixMap::with_base(q.base().embed(&map, dim));
        for ((z, &nn), &label) in q.basis().iter().zip(q.nneg_mask()).zip(q.labels()) {
            lifted.push(z.embed(&map, dim), nn, label);
        }
        out = out.concat(lifted)?;
    }
    Ok(out)
}

/// Output specification `[x; y; 1]^T S [x; y; 1] <= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyMatrix {
    pub s: DMatrix<f64>,
    /// Position `(r, r)` holding `-rho` for reachability specs.
    pub rho_slot: Option<usize>,
    pub n_in: usize,
    pub n_out: usize,
}

impl SafetyMatrix {
    pub fn dim(&self) -> usize {
        self.n_in + self.n_out + 1
    }

    pub fn quad_value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut v = DVector::zeros(self.dim());
        v.rows_mut(0, self.n_in).copy_from(x);
        v.rows_mut(self.n_in, self.n_out).copy_from(y);
        v[self.dim() - 1] = 1.0;
        (v.transpose() * &self.s * &v)[(0, 0)]
    }

    /// Replaces the radius stored in the rho slot.
    pub fn with_rho(&self, old_rho: f64, new_rho: f64) -> Result<SafetyMatrix> {
        let slot = self
            .rho_slot
            .ok_or_else(|| Error::Invalid("safety matrix has no rho slot".into()))?;
        let mut out = self.clone();
        out.s[(slot, slot)] += old_rho - new_rho;
        Ok(out)
    }
}

/// `S = diag(-kappa I, I, 0)`: `||y||^2 <= kappa ||x||^2`.
pub fn safety_l2gain(kappa: f64, n_in: usize, n_out: usize) -> Result<SafetyMatrix> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::Invalid(format!(
            "kappa must be finite and nonnegative, got {kappa}"
        )));
    }
    let dim = n_in + n_out + 1;
    let mut s = DMatrix::zeros(dim, dim);
    for i in 0..n_in {
        s[(i, i)] = -kappa;
    }
    for i in 0..n_out {
        s[(n_in + i, n_in + i)] = 1.0;
    }
    Ok(SafetyMatrix {
        s,
        rho_slot: None,
        n_in,
        n_out,
    })
}

/// `||P^{-1}(y - y_c)||^2 - rho <= 0`.
pub fn safety_ellipsoid(
    p_shape: &DMatrix<f64>,
    y_c: &DVector<f64>,
    rho: f64,
    n_in: usize,
) -> Result<SafetyMatrix> {
    let m = y_c.len();
    if p_shape.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "shape matrix is {:?} but the center has length {m}",
            p_shape.shape()
        )));
    }
    let inv = p_shape
        .clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Invalid("ellipsoid shape matrix is singular".into()))?;
    let g = inv.transpose() * &inv;
    let gy = &g * y_c;
    let dim = n_in + m + 1;
    let mut s = DMatrix::zeros(dim, dim);
    s.view_mut((n_in, n_in), (m, m)).copy_from(&g);
    for i in 0..m {
        s[(n_in + i, dim - 1)] = -gy[i];
        s[(dim - 1, n_in + i)] = -gy[i];
    }
    s[(dim - 1, dim - 1)] = y_c.dot(&gy) - rho;
    Ok(SafetyMatrix {
        s,
        rho_slot: Some(dim - 1),
        n_in,
        n_out: m,
    })
}

/// Output QC lifted to `S^{N + 1}`; constant in `gamma`.
pub fn build_zout(s: &SafetyMatrix, net: &Network) -> Result<SymSparse> {
    let n1 = net.input_dim();
    let m = net.output_dim();
    if s.n_in != n1 || s.n_out != m || s.s.shape() != (n1 + m + 1, n1 + m + 1) {
        return Err(Error::Dimension(format!(
            "safety matrix is {:?} for (n_1, m) = ({}, {}), network has ({n1}, {m})",
            s.s.shape(),
            s.n_in,
            s.n_out
        )));
    }
    let profile = net.profile();
    let n = profile.n_total();
    let k = net.num_layers();
    let xk = profile.s(k - 1);
    let w = &net.weights()[k - 1];
    let b = &net.biases()[k - 1];
    let mut l = SparseRows::new(n + 1);
    for i in 0..n1 {
        l.push_row(vec![(i, 1.0)]);
    }
    for r in 0..m {
        let mut row: Vec<(usize, f64)> = (0..w.ncols()).map(|c| (xk + c, w[(r, c)])).collect();
        row.push((n, b[r]));
        l.push_row(row);
    }
    l.push_row(vec![(n, 1.0)]);
    Ok(SymSparse::from_dense(&s.s, 0.0).congruence(&l))
}

/// Configuration for [`assemble_z`].
#[derive(Clone, Debug)]
pub struct QcConfig {
    pub beta: usize,
    pub use_adjacent: bool,
    /// Overrides the activation's default sector.
    pub sector: Option<Sector>,
    /// For relu networks, add `phi >= u`, `phi >= 0` and free the diagonal
    /// multipliers, which is valid because `phi (phi - u) = 0` holds exactly.
    pub relu_extras: bool,
}

impl QcConfig {
    pub fn new(beta: usize) -> Self {
        QcConfig {
            beta,
            use_adjacent: false,
            sector: None,
            relu_extras: true,
        }
    }
}

/// `Z(gamma) = Z_in + Z_ac + Z_out` with `gamma = (gamma_in, gamma_ac)`.
pub fn assemble_z(
    net: &Network,
    input: &InputSpec,
    safety: &SafetyMatrix,
    cfg: &QcConfig,
    bounds: Option<&LayerBounds>,
) -> Result<AffineMatrixMap> {
    let profile = net.profile();
    profile.check_beta(cfg.beta)?;
    if input.dim() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "input set has dimension {} but the network takes {}",
            input.dim(),
            net.input_dim()
        )));
    }
    let sys = crate::nnmodel::stacked_system(net);
    let z_out = build_zout(safety, net)?;
    let z_in = build_zin(&input_qc(input)?, &profile)?;
    let sector = cfg
        .sector
        .unwrap_or_else(|| Sector::for_activation(net.activation()));
    let n = sys.hidden();
    let mut q = sector_qc(n, cfg.beta, sector)?;
    if cfg.relu_extras
        && net.activation() == crate::nnmodel::Activation::Relu
        && cfg.sector.is_none()
    {
        for i in 0..n {
            q.set_nonneg(i, false);
        }
        q = q.concat(relu_affine_qc(n))?;
    }
    if cfg.use_adjacent {
        let bounds = bounds
            .ok_or_else(|| Error::Invalid("adjacent-layer QCs need interval bounds".into()))?;
        let per_layer = (1..net.num_layers())
            .map(|k| adjacent_qc(bounds, net, k))
            .collect::<Result<Vec<_>>>()?;
        q = q.concat(lift_adjacent(&per_layer, &sys)?)?;
    }
    let z_ac = build_zac(&q, &sys)?;
    let mut z = z_in.concat(z_ac)?;
    let mut base = SymBuilder::new(z.dim());
    base.add_matrix(z.base(), 1.0);
    base.add_matrix(&z_out, 1.0);
    z.set_base(base.build());
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmodel::Activation;

    #[test]
    fn unit_interval_offdiagonal_multiplier() {
        let spec = InputSpec::uniform_box(1, 0.0, 1.0).unwrap();
        let p = input_qc(&spec).unwrap();
        // Parameters are Lambda_11, Lambda_12, Lambda_22.
        assert_eq!(p.num_params(), 3);
        let m = p.evaluate(&[0.0, 1.0, 0.0]).unwrap();
        for &x in &[0.0, 0.25, 0.5, 1.0, 1.5, -0.5] {
            let v = DVector::from_vec(vec![x, 1.0]);
            let q = (v.transpose() * &m * &v)[(0, 0)];
            assert!((q - 2.0 * x * (1.0 - x)).abs() < 1e-14);
        }
        // Diagonal multipliers give the trivially nonnegative sum of squares.
        let d = p.evaluate(&[1.0, 0.0, 1.0]).unwrap();
        let v = DVector::from_vec(vec![0.3, 1.0]);
        let q = (v.transpose() * &d * &v)[(0, 0)];
        assert!((q - (0.7f64.powi(2) + 0.3f64.powi(2))).abs() < 1e-14);
    }

    #[test]
    fn zero_multipliers_give_zero() {
        let spec = InputSpec::uniform_box(2, -1.0, 1.0).unwrap();
        let p = input_qc(&spec).unwrap();
        assert_eq!(
            p.evaluate(&vec![0.0; p.num_params()]).unwrap(),
            DMatrix::zeros(3, 3)
        );
    }

    #[test]
    fn polytope_dimension_mismatch() {
        let spec = InputSpec::Polytope {
            h: DMatrix::identity(2, 2),
            h_vec: DVector::zeros(3),
        };
        assert!(matches!(input_qc(&spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn sector_parameter_counts() {
        let relu = Sector::for_activation(Activation::Relu);
        assert_eq!(sector_qc(15, 0, relu).unwrap().num_params(), 15);
        assert_eq!(sector_qc(15, 2, relu).unwrap().num_params(), 42);
        assert_eq!(band_pairs(15, 2), 27);
        assert!(sector_qc(15, 15, relu).is_err());
        assert!(sector_qc(15, 14, relu).is_ok());
    }

    #[test]
    fn sector_beta_zero_is_diagonal() {
        let q = sector_qc(4, 0, Sector::for_activation(Activation::Relu)).unwrap();
        let m = q.evaluate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        // (1,2) block is (a+b) T = T, diagonal.
        for i in 0..4 {
            for j in 0..4 {
                let t = m[(i, 4 + j)];
                if i == j {
                    assert_eq!(t, (i + 1) as f64);
                } else {
                    assert_eq!(t, 0.0);
                }
            }
        }
    }

    #[test]
    fn sigmoid_sector_is_shifted() {
        let s = Sector::for_activation(Activation::Sigmoid);
        assert_eq!(s.shift, 0.5);
        let q = sector_qc(1, 0, s).unwrap();
        // phi(0) = 1/2 lies on the boundary of the shifted sector.
        let v = DVector::from_vec(vec![0.0, 0.5, 1.0]);
        assert!(q.quad_form(&[1.0], &v).unwrap().abs() < 1e-15);
    }

    #[test]
    fn l2gain_matrix() {
        let s = safety_l2gain(1.0, 2, 2).unwrap();
        assert_eq!(
            s.s,
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -1.0, 1.0, 1.0, 0.0]))
        );
        let s0 = safety_l2gain(0.0, 2, 2).unwrap();
        assert_eq!(
            s0.s,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0, 0.0]))
        );
        assert!(safety_l2gain(-1.0, 2, 2).is_err());
    }

    #[test]
    fn ellipsoid_values() {
        let s = safety_ellipsoid(&DMatrix::identity(2, 2), &DVector::zeros(2), 1.0, 2).unwrap();
        let y = DVector::from_vec(vec![0.6, 0.8]);
        assert!((s.quad_value(&DVector::zeros(2), &y) - 0.0).abs() < 1e-14);
        let s = safety_ellipsoid(
            &(DMatrix::identity(2, 2) * 2.0),
            &DVector::from_vec(vec![1.0, 0.0]),
            4.0,
            2,
        )
        .unwrap();
        let v = s.quad_value(&DVector::zeros(2), &DVector::from_vec(vec![3.0, 0.0]));
        assert!((v + 3.0).abs() < 1e-14);
        let s5 = s.with_rho(4.0, 5.0).unwrap();
        let v5 = s5.quad_value(&DVector::zeros(2), &DVector::from_vec(vec![3.0, 0.0]));
        assert!((v5 - (v - 1.0)).abs() < 1e-14);
        assert!(safety_ellipsoid(&DMatrix::zeros(2, 2), &DVector::zeros(2), 1.0, 2).is_err());
    }

    #[test]
    fn adjacent_scalar_box() {
        let net = Network::new(
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            vec![DVector::zeros(1), DVector::zeros(1)],
            Activation::Relu,
        )
        .unwrap();
        let b = crate::nnmodel::interval_bounds(
            &net,
            &DVector::from_vec(vec![0.0]),
            &DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let q = adjacent_qc(&b, &net, 1).unwrap();
        assert_eq!(q.dim(), 3);
        for &x in &[0.0, 0.3, 1.0] {
            let v = DVector::from_vec(vec![x, x, 1.0]);
            assert!((q.quad_form(&[1.0], &v).unwrap() - x * (1.0 - x)).abs() < 1e-14);
        }
        assert_eq!(q.evaluate(&[0.0]).unwrap(), DMatrix::zeros(3, 3));
        assert!(adjacent_qc(&b, &net, 2).is_err());
    }
}
