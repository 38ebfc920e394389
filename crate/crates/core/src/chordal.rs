//! Sparsity patterns of the lifted constraint matrix, their chordal extension
//! and its maximal cliques, plus generic graph oracles (maximal-clique
//! enumeration and a chordality test) used to cross-check the closed forms.
//!
//! All vertex indices are 0-based: vertex `i` is row/column `i` of the
//! `(N + 1) x (N + 1)` matrix, with `N` the affine (constant) slot.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths `n_1, ..., n_K` and output width `m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimProfile {
    layer_dims: Vec<usize>,
    out_dim: usize,
    prefix: Vec<usize>,
}

impl DimProfile {
    pub fn new(layer_dims: Vec<usize>, out_dim: usize) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 layers, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&n| n == 0) || out_dim == 0 {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        let mut prefix = vec![0];
        for &n in &layer_dims {
            prefix.push(prefix.last().unwrap() + n);
        }
        Ok(DimProfile {
            layer_dims,
            out_dim,
            prefix,
        })
    }

    /// `K`.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    /// `n_k` for 1-based `k`.
    pub fn layer_dim(&self, k: usize) -> usize {
        self.layer_dims[k - 1]
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `S(k) = n_1 + ... + n_k`, `S(0) = 0`.
    pub fn s(&self, k: usize) -> usize {
        self.prefix[k]
    }

    /// `N = S(K)`.
    pub fn n_total(&self) -> usize {
        *self.prefix.last().unwrap()
    }

    /// Largest admissible band parameter, `N - n_1 - 1`.
    pub fn max_beta(&self) -> usize {
        self.n_total() - self.layer_dims[0] - 1
    }

    pub fn check_beta(&self, beta: usize) -> Result<()> {
        if beta > self.max_beta() {
            return Err(Error::OutOfRange {
                name: "beta",
                value: beta as i64,
                allowed: format!("0..={}", self.max_beta()),
            });
        }
        Ok(())
    }
}

/// Symmetric off-diagonal edge set over `n` vertices. Diagonal entries are
/// always treated as dense.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSet {
    n: usize,
    adj: Vec<BTreeSet<usize>>,
}

impl EdgeSet {
    pub fn new(n: usize) -> Self {
        EdgeSet {
            n,
            adj: vec![BTreeSet::new(); n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut e = EdgeSet::new(n);
        e.insert_block(0..n, 0..n);
        e
    }

    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut e = EdgeSet::new(n);
        for (i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::Invalid(format!("edge ({i}, {j}) outside [0, {n})")));
            }
            e.insert(i, j);
        }
        Ok(e)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn insert(&mut self, i: usize, j: usize) {
        if i != j {
            self.adj[i].insert(j);
            self.adj[j].insert(i);
        }
    }

    /// Inserts every pair of `rows x cols`.
    pub fn insert_block(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        for i in rows {
            for j in cols.clone() {
                self.insert(i, j);
            }
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i == j || self.adj[i].contains(&j)
    }

    pub fn neighbors(&self, v: usize) -> &BTreeSet<usize> {
        &self.adj[v]
    }

    /// Off-diagonal edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.range(i + 1..).map(move |&j| (i, j)))
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(|s| s.len()).sum::<usize>() / 2
    }

    pub fn is_subset(&self, other: &EdgeSet) -> bool {
        self.n == other.n && self.pairs().all(|(i, j)| other.contains(i, j))
    }

    pub fn union(&self, other: &EdgeSet) -> EdgeSet {
        assert_eq!(self.n, other.n);
        let mut out = self.clone();
        for (i, j) in other.pairs() {
            out.insert(i, j);
        }
        out
    }

    /// Edges of `self` missing from `other`.
    pub fn difference(&self, other: &EdgeSet) -> Vec<(usize, usize)> {
        self.pairs()
            .filter(|&(i, j)| !other.contains(i, j))
            .collect()
    }

    pub fn is_clique(&self, vs: &[usize]) -> bool {
        vs.iter()
            .enumerate()
            .all(|(a, &u)| vs[a + 1..].iter().all(|&w| self.contains(u, w)))
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeSetRepr {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Serialize for EdgeSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EdgeSetRepr {
            n: self.n,
            edges: self.pairs().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EdgeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = EdgeSetRepr::deserialize(d)?;
        EdgeSet::from_pairs(r.n, r.edges).map_err(serde::de::Error::custom)
    }
}

/// Ordered collection of sorted vertex subsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliqueSet {
    pub n: usize,
    pub cliques: Vec<Vec<usize>>,
}

impl CliqueSet {
    pub fn len(&self) -> usize {
        self.cliques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cliques.is_empty()
    }

    /// Cliques as a set, ignoring order.
    pub fn as_set(&self) -> BTreeSet<Vec<usize>> {
        self.cliques.iter().cloned().collect()
    }

    pub fn max_size(&self) -> usize {
        self.cliques.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// `E_beta = E_M ∪ E_a ∪ E_{1,K}` over `[N + 1]`.
pub fn pattern_e_beta(profile: &DimProfile, beta: usize) -> Result<EdgeSet> {
    profile.check_beta(beta)?;
    let n = profile.n_total();
    let k_layers = profile.num_layers();
    let mut e = EdgeSet::new(n + 1);
    for k in 1..k_layers {
        let lo = profile.s(k - 1);
        let hi = (profile.s(k + 1) + beta).min(n);
        e.insert_block(lo..hi, lo..hi);
    }
    e.insert_block(n..n + 1, 0..n + 1);
    e.insert_block(0..profile.layer_dim(1), profile.s(k_layers - 1)..n);
    Ok(e)
}

/// The "M" part `E_M` alone.
pub fn pattern_e_m(profile: &DimProfile, beta: usize) -> Result<EdgeSet> {
    profile.check_beta(beta)?;
    let n = profile.n_total();
    let mut e = EdgeSet::new(n + 1);
    for k in 1..profile.num_layers() {
        let lo = profile.s(k - 1);
        let hi = (profile.s(k + 1) + beta).min(n);
        e.insert_block(lo..hi, lo..hi);
    }
    Ok(e)
}

/// `E_a`: the affine row and column.
pub fn pattern_e_a(profile: &DimProfile) -> EdgeSet {
    let n = profile.n_total();
    let mut e = EdgeSet::new(n + 1);
    e.insert_block(n..n + 1, 0..n + 1);
    e
}

/// `E_{1,K}`: the corner blocks coupling `x_1` and `x_K`.
pub fn pattern_e_1k(profile: &DimProfile) -> EdgeSet {
    let n = profile.n_total();
    let mut e = EdgeSet::new(n + 1);
    e.insert_block(
        0..profile.layer_dim(1),
        profile.s(profile.num_layers() - 1)..n,
    );
    e
}

/// Chordal extension `F_beta = E_beta ∪ E_K`, filling the rows and columns of `x_K`.
pub fn chordal_extension(profile: &DimProfile, beta: usize) -> Result<EdgeSet> {
    let mut f = pattern_e_beta(profile, beta)?;
    let n = profile.n_total();
    let start = profile.s(profile.num_layers() - 1);
    f.insert_block(start..n, 0..n + 1);
    Ok(f)
}

/// Number of maximal cliques `p = min { k : S(k+1) + beta >= S(K-1) }`.
pub fn clique_count(profile: &DimProfile, beta: usize) -> Result<usize> {
    profile.check_beta(beta)?;
    let target = profile.s(profile.num_layers() - 1);
    Ok((1..profile.num_layers())
        .find(|&k| profile.s(k + 1) + beta >= target)
        .expect("k = K - 1 always satisfies the clique condition"))
}

/// Closed-form maximal cliques of `F_beta`.
pub fn theorem1_cliques(profile: &DimProfile, beta: usize) -> Result<CliqueSet> {
    let p = clique_count(profile, beta)?;
    let n = profile.n_total();
    let tail = profile.s(profile.num_layers() - 1);
    let mut cliques = Vec::with_capacity(p);
    for k in 1..p {
        let hi = (profile.s(k + 1) + beta).min(n);
        let mut c: Vec<usize> = (profile.s(k - 1)..hi).collect();
        c.extend(tail..=n);
        cliques.push(c);
    }
    cliques.push((profile.s(p - 1)..=n).collect());
    Ok(CliqueSet { n: n + 1, cliques })
}

/// Block-arrow split `(D_{k,1}, D_{k,2})` of clique `k` (1-based), as local
/// indices into the clique. The first and last cliques are not split.
pub fn double_cliques(
    profile: &DimProfile,
    beta: usize,
    k: usize,
    p: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 || k > p {
        return Err(Error::OutOfRange {
            name: "k",
            value: k as i64,
            allowed: format!("1..={p}"),
        });
    }
    let cliques = theorem1_cliques(profile, beta)?;
    if cliques.len() != p {
        return Err(Error::Invalid(format!(
            "p = {p} does not match the {} cliques of this profile",
            cliques.len()
        )));
    }
    let size = cliques.cliques[k - 1].len();
    if k == 1 || k == p {
        return Ok(((0..size).collect(), Vec::new()));
    }
    let nk = profile.layer_dim(k) + profile.layer_dim(k + 1);
    let mut d1: Vec<usize> = (0..nk + beta).collect();
    d1.push(size - 1);
    let d2: Vec<usize> = (nk..size).collect();
    Ok((d1, d2))
}

/// Maximum number of vertices accepted by [`enumerate_maximal_cliques`].
pub const CLIQUE_ENUM_LIMIT: usize = 200;

/// All maximal cliques by Bron–Kerbosch with pivoting. Intended as a test oracle.
pub fn enumerate_maximal_cliques(edges: &EdgeSet) -> Result<CliqueSet> {
    let n = edges.n();
    if n > CLIQUE_ENUM_LIMIT {
        return Err(Error::OutOfRange {
            name: "vertex count",
            value: n as i64,
            allowed: format!("<= {CLIQUE_ENUM_LIMIT}"),
        });
    }
    let nbrs: Vec<BitSet> = (0..n)
        .map(|v| BitSet::from_iter(n, edges.neighbors(v).iter().copied()))
        .collect();
    let mut out = Vec::new();
    let mut r = Vec::new();
    bron_kerbosch(&nbrs, &mut r, BitSet::full(n), BitSet::new(n), &mut out);
    out.sort();
    Ok(CliqueSet { n, cliques: out })
}

fn bron_kerbosch(
    nbrs: &[BitSet],
    r: &mut Vec<usize>,
    mut p: BitSet,
    mut x: BitSet,
    out: &mut Vec<Vec<usize>>,
) {
    if p.is_empty() && x.is_empty() {
        let mut c = r.clone();
        c.sort_unstable();
        out.push(c);
        return;
    }
    // Pivot on the vertex of P ∪ X with the most neighbours in P.
    let pivot = p
        .iter()
        .chain(x.iter())
        .max_by_key(|&u| p.intersection_count(&nbrs[u]))
        .expect("P ∪ X is non-empty");
    let candidates: Vec<usize> = p.iter().filter(|&v| !nbrs[pivot].contains(v)).collect();
    for v in candidates {
        r.push(v);
        bron_kerbosch(
            nbrs,
            r,
            p.intersection(&nbrs[v]),
            x.intersection(&nbrs[v]),
            out,
        );
        r.pop();
        p.remove(v);
        x.insert(v);
    }
}

/// Chordality test via maximum cardinality search and a perfect elimination
/// ordering check.
pub fn is_chordal(edges: &EdgeSet) -> bool {
    let n = edges.n();
    if n <= 3 {
        return true;
    }
    // Maximum cardinality search: visit[i] is the i-th visited vertex.
    let mut weight = vec![0usize; n];
    let mut visited = vec![false; n];
    let mut rank = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    for step in 0..n {
        let v = (0..n)
            .filter(|&u| !visited[u])
            .max_by_key(|&u| (weight[u], std::cmp::Reverse(u)))
            .unwrap();
        visited[v] = true;
        rank[v] = step;
        order.push(v);
        for &u in edges.neighbors(v) {
            if !visited[u] {
                weight[u] += 1;
            }
        }
    }
    // Reverse visit order is a perfect elimination ordering iff the graph is
    // chordal: the earlier-visited neighbours of v must form a clique, which
    // reduces to checking them against the latest-visited one.
    for &v in &order {
        let earlier: Vec<usize> = edges
            .neighbors(v)
            .iter()
            .copied()
            .filter(|&u| rank[u] < rank[v])
            .collect();
        if let Some(&parent) = earlier.iter().max_by_key(|&&u| rank[u]) {
            if earlier
                .iter()
                .any(|&u| u != parent && !edges.contains(parent, u))
            {
                return false;
            }
        }
    }
    true
}

/// Off-diagonal positions with `|m_ij| > tol`.
pub fn pattern_of_matrix(m: &DMatrix<f64>, tol: f64) -> EdgeSet {
    let n = m.nrows();
    let mut e = EdgeSet::new(n);
    for j in 0..n {
        for i in 0..j {
            if m[(i, j)].abs() > tol || m[(j, i)].abs() > tol {
                e.insert(i, j);
            }
        }
    }
    e
}

#[derive(Clone, Debug)]
struct BitSet {
    words: Vec<u64>,
    n: usize,
}

impl BitSet {
    fn new(n: usize) -> Self {
        BitSet {
            words: vec![0; n.div_ceil(64)],
            n,
        }
    }

    fn full(n: usize) -> Self {
        let mut b = BitSet::new(n);
        for v in 0..n {
            b.insert(v);
        }
        b
    }

    fn from_iter(n: usize, it: impl Iterator<Item = usize>) -> Self {
        let mut b = BitSet::new(n);
        for v in it {
            b.insert(v);
        }
        b
    }

    fn insert(&mut self, v: usize) {
        self.words[v / 64] |= 1 << (v % 64);
    }

    fn remove(&mut self, v: usize) {
        self.words[v / 64] &= !(1 << (v % 64));
    }

    fn contains(&self, v: usize) -> bool {
        self.words[v / 64] >> (v % 64) & 1 == 1
    }

    fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn intersection(&self, other: &BitSet) -> BitSet {
        BitSet {
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a & b)
                .collect(),
            n: self.n,
        }
    }

    fn intersection_count(&self, other: &BitSet) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&v| self.contains(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> DimProfile {
        DimProfile::new(vec![3; 6], 2).unwrap()
    }

    #[test]
    fn prefix_sums() {
        let p = DimProfile::new(vec![2, 3, 4], 1).unwrap();
        assert_eq!(p.s(0), 0);
        assert_eq!(p.s(2), 5);
        assert_eq!(p.n_total(), 9);
        assert_eq!(p.max_beta(), 6);
    }

    #[test]
    fn two_layer_pattern_is_dense() {
        let p = DimProfile::new(vec![2, 3], 2).unwrap();
        let e = pattern_e_beta(&p, 0).unwrap();
        assert_eq!(e, EdgeSet::complete(6));
        assert_eq!(chordal_extension(&p, 0).unwrap(), e);
    }

    #[test]
    fn fig1_corner_membership() {
        // 1-based (1,16) is in the orange corner, (4,16) is not.
        let e = pattern_e_beta(&fig1(), 0).unwrap();
        assert!(e.contains(0, 15));
        assert!(!e.contains(3, 15));
    }

    #[test]
    fn fig1_extension_adds_last_layer_rows() {
        let p = fig1();
        let e = pattern_e_beta(&p, 0).unwrap();
        let f = chordal_extension(&p, 0).unwrap();
        let added = f.difference(&e);
        assert!(!added.is_empty());
        // Vertices 16..18 (1-based) are 15..17 here.
        assert!(added
            .iter()
            .all(|&(i, j)| (15..18).contains(&i) || (15..18).contains(&j)));
        let mut expected = Vec::new();
        for (i, j) in EdgeSet::complete(19).pairs() {
            let touches = (15..18).contains(&i) || (15..18).contains(&j);
            if touches && !e.contains(i, j) {
                expected.push((i, j));
            }
        }
        assert_eq!(added, expected);
    }

    #[test]
    fn fig1_cliques() {
        let p = fig1();
        let c = theorem1_cliques(&p, 0).unwrap();
        assert_eq!(c.len(), 4);
        let c1: Vec<usize> = (0..6).chain(15..19).collect();
        assert_eq!(c.cliques[0], c1);
        assert_eq!(c.cliques[3], (9..19).collect::<Vec<_>>());
        assert!(c.cliques.iter().all(|c| c.len() == 10));
        assert_eq!(clique_count(&p, 2).unwrap(), 4);
        assert_eq!(clique_count(&p, 4).unwrap(), 3);
    }

    #[test]
    fn double_cliques_fig1() {
        let p = fig1();
        let (d1, d2) = double_cliques(&p, 0, 2, 4).unwrap();
        let want1: Vec<usize> = (0..6).chain(std::iter::once(9)).collect();
        assert_eq!(d1, want1);
        assert_eq!(d2, (6..10).collect::<Vec<_>>());
        let (f, e) = double_cliques(&p, 0, 1, 4).unwrap();
        assert_eq!(f.len(), 10);
        assert!(e.is_empty());
        assert!(double_cliques(&p, 0, 5, 4).is_err());
        assert!(double_cliques(&p, 0, 0, 4).is_err());
    }

    #[test]
    fn beta_out_of_range() {
        let p = fig1();
        assert!(pattern_e_beta(&p, 14).is_ok());
        assert!(matches!(
            pattern_e_beta(&p, 15),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn small_graph_cliques() {
        let tri = EdgeSet::from_pairs(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(
            enumerate_maximal_cliques(&tri).unwrap().cliques,
            vec![vec![0, 1, 2]]
        );
        let path = EdgeSet::from_pairs(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(
            enumerate_maximal_cliques(&path).unwrap().cliques,
            vec![vec![0, 1], vec![1, 2]]
        );
        let c4 = EdgeSet::from_pairs(4, [(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        assert_eq!(enumerate_maximal_cliques(&c4).unwrap().len(), 4);
        assert!(enumerate_maximal_cliques(&EdgeSet::new(201)).is_err());
    }

    #[test]
    fn chordality_basics() {
        assert!(is_chordal(&EdgeSet::complete(6)));
        let c4 = EdgeSet::from_pairs(4, [(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        assert!(!is_chordal(&c4));
        let c4_chord = EdgeSet::from_pairs(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        assert!(is_chordal(&c4_chord));
        let c5 = EdgeSet::from_pairs(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap();
        assert!(!is_chordal(&c5));
    }

    #[test]
    fn matrix_patterns() {
        assert_eq!(pattern_of_matrix(&DMatrix::zeros(4, 4), 0.0).num_edges(), 0);
        assert_eq!(
            pattern_of_matrix(&DMatrix::identity(4, 4), 0.0).num_edges(),
            0
        );
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 2)] = 1e-3;
        m[(2, 0)] = 1e-3;
        assert!(pattern_of_matrix(&m, 1e-6).contains(0, 2));
        assert!(!pattern_of_matrix(&m, 1e-2).contains(0, 2));
    }

    #[test]
    fn edge_set_json_round_trip() {
        let e = pattern_e_beta(&fig1(), 2).unwrap();
        let s = serde_json::to_string(&e).unwrap();
        let back: EdgeSet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }
}
