//! Oracles and fixtures shared by the integration tests. Everything here is
//! written from the definitions, without calling the library routine under test.

#![allow(dead_code)]

use std::collections::BTreeSet;

use chordal_verify::chordal::{
    pattern_e_1k, pattern_e_a, pattern_e_beta, pattern_e_m, pattern_of_matrix,
};
use chordal_verify::linalg::SymSparse;
use chordal_verify::nnmodel::{interval_bounds, stacked_system};
use chordal_verify::qcbuild::{
    adjacent_qc, build_zac, build_zin, build_zout, input_qc, lift_adjacent, relu_affine_qc,
    safety_l2gain, sector_qc, Sector,
};
use chordal_verify::sdpcore::SdpaData;
use chordal_verify::{
    assemble_z, Activation, AffineMatrixMap, DimProfile, EdgeSet, InputSpec, Network, QcConfig,
    SdpProblem,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Network with the given layer sizes (input first, output last).
pub fn random_net(rng: &mut impl Rng, dims: &[usize], act: Activation) -> Network {
    let normal = Normal::new(0.0, 0.8).unwrap();
    let mut ws = Vec::new();
    let mut bs = Vec::new();
    for k in 0..dims.len() - 1 {
        ws.push(DMatrix::from_fn(dims[k + 1], dims[k], |_, _| {
            normal.sample(rng)
        }));
        bs.push(DVector::from_fn(dims[k + 1], |_, _| {
            0.3 * normal.sample(rng)
        }));
    }
    Network::new(ws, bs, act).unwrap()
}

/// `(layer_dims, out_dim, beta)` with `K <= 8`, widths `<= 5`, `beta <= 6`.
pub fn random_case(rng: &mut impl Rng) -> (Vec<usize>, usize, usize) {
    let k = rng.random_range(2..=8);
    let dims: Vec<usize> = (0..k).map(|_| rng.random_range(1..=5)).collect();
    let out = rng.random_range(1..=5);
    let max_beta = dims.iter().sum::<usize>() - dims[0] - 1;
    let beta = rng.random_range(0..=max_beta.min(6));
    (dims, out, beta)
}

/// Prefix sums `S(0..=K)`.
pub fn prefix(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![0];
    for d in dims {
        s.push(s.last().unwrap() + d);
    }
    s
}

/// Membership in `E_M`, written out over 1-based indices `1..=N+1`.
pub fn in_e_m(dims: &[usize], beta: usize, i: usize, j: usize) -> bool {
    let s = prefix(dims);
    let k_layers = dims.len();
    let n = s[k_layers];
    (1..k_layers).any(|k| {
        let lo = s[k - 1] + 1;
        let hi = (s[k + 1] + beta).min(n);
        (lo..=hi).contains(&i) && (lo..=hi).contains(&j)
    })
}

pub fn in_e_a(dims: &[usize], i: usize, j: usize) -> bool {
    let n: usize = dims.iter().sum();
    i == n + 1 || j == n + 1
}

pub fn in_e_1k(dims: &[usize], i: usize, j: usize) -> bool {
    let s = prefix(dims);
    let k_layers = dims.len();
    let n = s[k_layers];
    let corner = |a: usize, b: usize| a <= dims[0] && b > s[k_layers - 1] && b <= n;
    corner(i, j) || corner(j, i)
}

/// `p = min { k : S(k+1) + beta >= S(K-1) }`.
pub fn p_oracle(dims: &[usize], beta: usize) -> usize {
    let s = prefix(dims);
    let k_layers = dims.len();
    (1..k_layers)
        .find(|&k| s[k + 1] + beta >= s[k_layers - 1])
        .unwrap()
}

pub fn adjacency(e: &EdgeSet) -> Vec<Vec<bool>> {
    let n = e.n();
    let mut a = vec![vec![false; n]; n];
    for (i, j) in e.pairs() {
        a[i][j] = true;
        a[j][i] = true;
    }
    a
}

/// Textbook Bron–Kerbosch without pivoting.
pub fn maximal_cliques(adj: &[Vec<bool>]) -> BTreeSet<Vec<usize>> {
    fn rec(
        adj: &[Vec<bool>],
        r: &mut Vec<usize>,
        mut p: Vec<usize>,
        mut x: Vec<usize>,
        out: &mut BTreeSet<Vec<usize>>,
    ) {
        if p.is_empty() && x.is_empty() {
            let mut c = r.clone();
            c.sort_unstable();
            out.insert(c);
            return;
        }
        while let Some(v) = p.pop() {
            r.push(v);
            let np = p.iter().copied().filter(|&u| adj[v][u]).collect();
            let nx = x.iter().copied().filter(|&u| adj[v][u]).collect();
            rec(adj, r, np, nx, out);
            r.pop();
            x.push(v);
        }
    }
    let mut out = BTreeSet::new();
    rec(
        adj,
        &mut Vec::new(),
        (0..adj.len()).collect(),
        Vec::new(),
        &mut out,
    );
    out
}

/// Chordal iff simplicial vertices can be eliminated one by one.
pub fn chordal_by_elimination(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    let mut alive = vec![true; n];
    for _ in 0..n {
        let simplicial = (0..n).filter(|&v| alive[v]).find(|&v| {
            let nb: Vec<usize> = (0..n).filter(|&u| alive[u] && adj[v][u]).collect();
            nb.iter().all(|&a| nb.iter().all(|&b| a == b || adj[a][b]))
        });
        match simplicial {
            Some(v) => alive[v] = false,
            None => return false,
        }
    }
    true
}

/// Positions `i < j` (0-based) where `m` is nonzero at all.
pub fn offdiag_support(m: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..m.ncols() {
        for i in 0..j {
            if m[(i, j)] != 0.0 || m[(j, i)] != 0.0 {
                out.push((i, j));
            }
        }
    }
    out
}

fn sym_support(s: &SymSparse) -> Vec<(usize, usize)> {
    s.entries()
        .iter()
        .filter(|e| e.0 != e.1 && e.2 != 0.0)
        .map(|e| (e.0.min(e.1), e.0.max(e.1)))
        .collect()
}

fn map_support(m: &AffineMatrixMap) -> Vec<(usize, usize)> {
    let mut out = sym_support(m.base());
    for b in m.basis() {
        out.extend(sym_support(b));
    }
    out
}

fn random_gamma(rng: &mut impl Rng, m: &AffineMatrixMap) -> Vec<f64> {
    (0..m.num_params())
        .map(|_| rng.random_range(0.1..2.0))
        .collect()
}

fn check_set(
    what: &str,
    positions: &[(usize, usize)],
    lib: &EdgeSet,
    oracle: impl Fn(usize, usize) -> bool,
) -> Result<(), String> {
    for &(i, j) in positions {
        if !lib.contains(i, j) || !oracle(i + 1, j + 1) {
            return Err(format!("{what}: entry ({i}, {j}) lies outside its pattern"));
        }
    }
    Ok(())
}

/// All sparsity containments for one random network and `beta`: the
/// structural supports of `Z_in`, `Z_ac` (with the relu and adjacent-layer
/// QCs), `Z_out` and the evaluated `Z(gamma)`.
pub fn check_containments(
    rng: &mut impl Rng,
    dims: &[usize],
    out: usize,
    beta: usize,
    act: Activation,
) -> Result<(), String> {
    let mut all = dims.to_vec();
    all.push(out);
    let net = random_net(rng, &all, act);
    let profile = DimProfile::new(dims.to_vec(), out).unwrap();
    let lo = DVector::from_element(dims[0], -1.0);
    let hi = DVector::from_element(dims[0], 1.0);
    let input = InputSpec::new_box(lo.clone(), hi.clone()).unwrap();
    let safety = safety_l2gain(2.0, dims[0], out).unwrap();
    let bounds = interval_bounds(&net, &lo, &hi).unwrap();
    let sys = stacked_system(&net);

    let e_m = pattern_e_m(&profile, beta).unwrap();
    let e_a = pattern_e_a(&profile);
    let e_1k = pattern_e_1k(&profile);
    let e_beta = pattern_e_beta(&profile, beta).unwrap();
    let ma = e_m.union(&e_a);
    let ma1k = ma.union(&e_1k);
    if e_beta != ma1k {
        return Err("E_beta differs from E_M ∪ E_a ∪ E_1K".into());
    }
    let n1 = profile.n_total() + 1;
    for i in 1..=n1 {
        for j in (i + 1)..=n1 {
            let want = in_e_m(dims, beta, i, j) || in_e_a(dims, i, j) || in_e_1k(dims, i, j);
            if e_beta.contains(i - 1, j - 1) != want {
                return Err(format!(
                    "E_beta disagrees with the definition at ({i}, {j})"
                ));
            }
        }
    }

    let z_in = build_zin(&input_qc(&input).unwrap(), &profile).unwrap();
    let in_ma = |i, j| in_e_m(dims, beta, i, j) || in_e_a(dims, i, j);
    check_set("Z_in", &map_support(&z_in), &ma, in_ma)?;
    let g = random_gamma(rng, &z_in);
    check_set(
        "Z_in(gamma)",
        &offdiag_support(&z_in.evaluate(&g).unwrap()),
        &ma,
        in_ma,
    )?;

    let n = sys.hidden();
    let mut q = sector_qc(n, beta, Sector::for_activation(act)).unwrap();
    if act == Activation::Relu {
        q = q.concat(relu_affine_qc(n)).unwrap();
    }
    let per_layer: Vec<_> = (1..net.num_layers())
        .map(|k| adjacent_qc(&bounds, &net, k).unwrap())
        .collect();
    q = q.concat(lift_adjacent(&per_layer, &sys).unwrap()).unwrap();
    let z_ac = build_zac(&q, &sys).unwrap();
    check_set("Z_ac", &map_support(&z_ac), &ma, in_ma)?;
    let g = random_gamma(rng, &z_ac);
    check_set(
        "Z_ac(gamma)",
        &offdiag_support(&z_ac.evaluate(&g).unwrap()),
        &ma,
        in_ma,
    )?;

    let z_out = build_zout(&safety, &net).unwrap();
    let in_ma1k = |i, j| in_ma(i, j) || in_e_1k(dims, i, j);
    check_set("Z_out", &offdiag_support(&z_out.to_dense()), &ma1k, in_ma1k)?;

    for use_adjacent in [false, true] {
        let cfg = QcConfig {
            use_adjacent,
            ..QcConfig::new(beta)
        };
        let z = assemble_z(&net, &input, &safety, &cfg, Some(&bounds)).unwrap();
        let g = random_gamma(rng, &z);
        let m = z.evaluate(&g).unwrap();
        if !pattern_of_matrix(&m, 1e-12).is_subset(&e_beta) {
            return Err("pattern of Z(gamma) leaves E_beta".into());
        }
        check_set("Z(gamma)", &offdiag_support(&m), &e_beta, in_ma1k)?;
        check_set("Z", &map_support(&z), &e_beta, in_ma1k)?;
    }
    Ok(())
}

/// Dense Moore-Penrose pseudoinverse by SVD.
pub fn pinv_svd(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().pseudo_inverse(1e-10 * m.norm().max(1.0)).unwrap()
}

/// Random symmetric matrix with entries in `[-s, s]`.
pub fn random_sym(rng: &mut impl Rng, n: usize, s: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-s..s));
    (&a + a.transpose()) * 0.5
}

/// Solves the equality-constrained QP `min 1/2 x^T H x - f^T x` s.t. `A x = b`
/// with diagonal `H`, via the full KKT system.
pub fn eq_qp(h: &[f64], f: &[f64], a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let nx = h.len();
    let nc = a.nrows();
    let mut k = DMatrix::zeros(nx + nc, nx + nc);
    let mut rhs = DVector::zeros(nx + nc);
    for i in 0..nx {
        k[(i, i)] = h[i];
        rhs[i] = f[i];
    }
    for r in 0..nc {
        for c in 0..nx {
            k[(nx + r, c)] = a[(r, c)];
            k[(c, nx + r)] = a[(r, c)];
        }
        rhs[nx + r] = b[r];
    }
    let sol = k.lu().solve(&rhs).expect("KKT system is nonsingular");
    sol.iter().take(nx).copied().collect()
}

/// `Z(gamma)` rebuilt from the SDPA blocks (split variables at zero) and
/// the diagonal block holding `gamma`.
pub fn z_from_sdpa(
    data: &SdpaData,
    problem: &SdpProblem,
    gamma: &[f64],
) -> (DMatrix<f64>, Vec<f64>) {
    let mut x = vec![0.0; data.nvars];
    x[..gamma.len()].copy_from_slice(gamma);
    let n = problem.dim();
    let mut z = DMatrix::zeros(n, n);
    for (k, block) in problem.blocks().iter().enumerate() {
        let m = data.block_value(k, &x).unwrap();
        for (a, &i) in block.iter().enumerate() {
            for (b, &j) in block.iter().enumerate() {
                z[(i, j)] -= m[(a, b)];
            }
        }
    }
    let lp = data.block_value(problem.blocks().len(), &x).unwrap();
    (z, lp.diagonal().iter().copied().collect())
}
