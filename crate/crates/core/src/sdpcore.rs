//! Problem assembly for the dense, chordal and doubly decomposed forms,
//! clique operators, the dense feasibility check, and SDPA export.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chordal::{clique_count, double_cliques, theorem1_cliques, CliqueSet, DimProfile};
use crate::error::{Error, Result};
use crate::linalg::{lambda_max, SymSparse};
use crate::qcbuild::AffineMatrixMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Chordal,
    Chordal2,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dense => "dense",
            Mode::Chordal => "chordal",
            Mode::Chordal2 => "chordal2",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "chordal" => Ok(Mode::Chordal),
            "chordal2" => Ok(Mode::Chordal2),
            _ => Err(Error::Parse(format!(
                "unknown mode {s:?} (dense, chordal, chordal2)"
            ))),
        }
    }
}

/// One LMI problem: `Z(gamma) = sum_k E_k^T Z_k E_k` with `Z_k <= 0`, where
/// the `E_k` select the solver blocks.
#[derive(Clone, Debug)]
pub struct SdpProblem {
    mode: Mode,
    beta: usize,
    zmap: AffineMatrixMap,
    cliques: CliqueSet,
    subcliques: Vec<(Vec<usize>, Vec<usize>)>,
    blocks: Vec<Vec<usize>>,
}

impl SdpProblem {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn zmap(&self) -> &AffineMatrixMap {
        &self.zmap
    }

    /// Replaces the map, keeping the decomposition. The new map must have the
    /// same dimension and be supported on covered positions.
    pub fn with_zmap(&self, zmap: AffineMatrixMap) -> Result<SdpProblem> {
        let mut out = self.clone();
        out.zmap = zmap;
        out.check_support()?;
        Ok(out)
    }

    /// Maximal cliques of `F_beta` (empty in dense mode).
    pub fn cliques(&self) -> &CliqueSet {
        &self.cliques
    }

    /// Local `(D_{k,1}, D_{k,2})` per clique (chordal2 only).
    pub fn subcliques(&self) -> &[(Vec<usize>, Vec<usize>)] {
        &self.subcliques
    }

    /// Vertex sets of the LMI blocks the solver works with, in `[N + 1]`.
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.zmap.dim()
    }

    pub fn projectors(&self) -> Vec<DMatrix<f64>> {
        self.blocks
            .iter()
            .map(|b| clique_projector(b, self.dim()).expect("blocks are sorted and in range"))
            .collect()
    }

    /// Number of blocks containing both `i` and `j`.
    pub fn coverage(&self, i: usize, j: usize) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.binary_search(&i).is_ok() && b.binary_search(&j).is_ok())
            .count()
    }

    fn check_support(&self) -> Result<()> {
        let n = self.dim();
        let mut vertex_blocks: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (k, b) in self.blocks.iter().enumerate() {
            for &v in b {
                vertex_blocks[v].push(k);
            }
        }
        for v in 0..n {
            if vertex_blocks[v].is_empty() {
                return Err(Error::Invalid(format!(
                    "vertex {v} is not covered by any block"
                )));
            }
        }
        let support = self.zmap.support();
        for (i, j) in support.pairs() {
            let shared = vertex_blocks[i]
                .iter()
                .any(|k| vertex_blocks[j].contains(k));
            if !shared {
                return Err(Error::Invalid(format!(
                    "Z(gamma) has a nonzero at ({i}, {j}) outside every block"
                )));
            }
        }
        Ok(())
    }

    /// `sum_k E_k^T X_k E_k` over the solver blocks.
    pub fn scatter_sum(&self, blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        scatter_blocks(&self.blocks, blocks, self.dim())
    }
}

/// Builds the problem in the requested form.
pub fn build_problem(
    zmap: AffineMatrixMap,
    profile: &DimProfile,
    beta: usize,
    mode: Mode,
) -> Result<SdpProblem> {
    profile.check_beta(beta)?;
    let n = profile.n_total();
    if zmap.dim() != n + 1 {
        return Err(Error::Dimension(format!(
            "Z(gamma) has dimension {} but N + 1 = {}",
            zmap.dim(),
            n + 1
        )));
    }
    let (cliques, subcliques, blocks) = match mode {
        Mode::Dense => (
            CliqueSet {
                n: n + 1,
                cliques: Vec::new(),
            },
            Vec::new(),
            vec![(0..=n).collect()],
        ),
        Mode::Chordal => {
            let c = theorem1_cliques(profile, beta)?;
            let blocks = c.cliques.clone();
            (c, Vec::new(), blocks)
        }
        Mode::Chordal2 => {
            let c = theorem1_cliques(profile, beta)?;
            let p = clique_count(profile, beta)?;
            let mut subs = Vec::with_capacity(p);
            let mut blocks = Vec::new();
            for k in 1..=p {
                let (d1, d2) = double_cliques(profile, beta, k, p)?;
                let clique = &c.cliques[k - 1];
                for d in [&d1, &d2] {
                    if !d.is_empty() {
                        blocks.push(d.iter().map(|&l| clique[l]).collect());
                    }
                }
                subs.push((d1, d2));
            }
            (c, subs, blocks)
        }
    };
    let problem = SdpProblem {
        mode,
        beta,
        zmap,
        cliques,
        subcliques,
        blocks,
    };
    problem.check_support()?;
    Ok(problem)
}

/// The `|C| x n` 0/1 matrix with `(E_C)_{ij} = 1` iff `C(i) = j`.
pub fn clique_projector(c: &[usize], n: usize) -> Result<DMatrix<f64>> {
    check_vertex_list(c, n)?;
    let mut e = DMatrix::zeros(c.len(), n);
    for (i, &j) in c.iter().enumerate() {
        e[(i, j)] = 1.0;
    }
    Ok(e)
}

fn check_vertex_list(c: &[usize], n: usize) -> Result<()> {
    if c.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(
            "vertex subset must be strictly increasing".into(),
        ));
    }
    if let Some(&last) = c.last() {
        if last >= n {
            return Err(Error::OutOfRange {
                name: "vertex",
                value: last as i64,
                allowed: format!("0..{n}"),
            });
        }
    }
    Ok(())
}

/// `sum_k E_{C_k}^T X_k E_{C_k}`.
pub fn scatter_blocks(
    sets: &[Vec<usize>],
    blocks: &[DMatrix<f64>],
    n: usize,
) -> Result<DMatrix<f64>> {
    if sets.len() != blocks.len() {
        return Err(Error::Dimension(format!(
            "{} blocks for {} cliques",
            blocks.len(),
            sets.len()
        )));
    }
    let mut out = DMatrix::zeros(n, n);
    for (k, (c, x)) in sets.iter().zip(blocks).enumerate() {
        check_vertex_list(c, n)?;
        if x.shape() != (c.len(), c.len()) {
            return Err(Error::Dimension(format!(
                "block {k} is {:?} but its clique has {} vertices",
                x.shape(),
                c.len()
            )));
        }
        for (a, &i) in c.iter().enumerate() {
            for (b, &j) in c.iter().enumerate() {
                out[(i, j)] += x[(a, b)];
            }
        }
    }
    Ok(out)
}

/// Result of the eigenvalue feasibility oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub lambda_max: f64,
}

/// `Z <= 0` up to `tol`, decided by the largest eigenvalue.
pub fn check_feasible_dense(z: &DMatrix<f64>, tol: f64) -> Result<Feasibility> {
    if !z.is_square() {
        return Err(Error::Dimension(format!("matrix is {:?}", z.shape())));
    }
    let lambda_max = lambda_max(z)?;
    Ok(Feasibility {
        feasible: lambda_max <= tol,
        lambda_max,
    })
}

/// Vectorized clique operators over column-major `vec` of `(N + 1)^2` entries.
/// Intended for inspection and tests; the solver uses its own compressed layout.
#[derive(Clone, Debug)]
pub struct VecOps {
    n: usize,
    sets: Vec<Vec<usize>>,
    /// Diagonal of `D = sum_k H_k^T H_k`.
    pub d: DVector<f64>,
    /// `vec(base)`.
    pub z0: DVector<f64>,
    basis: Vec<SymSparse>,
}

pub fn vec_ops(problem: &SdpProblem) -> Result<VecOps> {
    if problem.mode() == Mode::Dense {
        return Err(Error::Invalid(
            "vector operators need a chordal problem".into(),
        ));
    }
    let n = problem.dim();
    let mut d = DVector::zeros(n * n);
    for c in problem.blocks() {
        for &i in c {
            for &j in c {
                d[j * n + i] += 1.0;
            }
        }
    }
    Ok(VecOps {
        n,
        sets: problem.blocks().to_vec(),
        d,
        z0: vec_of(&problem.zmap().base().to_dense()),
        basis: problem.zmap().basis().to_vec(),
    })
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`] for square matrices.
pub fn mat_of(v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = (v.len() as f64).sqrt().round() as usize;
    if n * n != v.len() {
        return Err(Error::Dimension(format!(
            "length {} is not a square",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

impl VecOps {
    pub fn num_blocks(&self) -> usize {
        self.sets.len()
    }

    /// `H_k x = vec(E_k X E_k^T)`.
    pub fn h_apply(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let c = &self.sets[k];
        let m = c.len();
        let mut out = DVector::zeros(m * m);
        for (b, &j) in c.iter().enumerate() {
            for (a, &i) in c.iter().enumerate() {
                out[b * m + a] = x[j * self.n + i];
            }
        }
        out
    }

    /// `H_k^T x_k = vec(E_k^T X_k E_k)`.
    pub fn h_adjoint(&self, k: usize, xk: &DVector<f64>) -> DVector<f64> {
        let c = &self.sets[k];
        let m = c.len();
        let mut out = DVector::zeros(self.n * self.n);
        for (b, &j) in c.iter().enumerate() {
            for (a, &i) in c.iter().enumerate() {
                out[j * self.n + i] += xk[b * m + a];
            }
        }
        out
    }

    /// Column `i` of `J`, `vec(Z_i)`.
    pub fn j_column(&self, i: usize) -> DVector<f64> {
        vec_of(&self.basis[i].to_dense())
    }

    /// `z0 + J gamma`.
    pub fn affine(&self, gamma: &[f64]) -> DVector<f64> {
        let mut out = self.z0.clone();
        for (i, g) in gamma.iter().enumerate() {
            out += self.j_column(i) * *g;
        }
        out
    }
}

/// Writes the feasibility problem `-Z(gamma) >= 0`, `gamma >= 0` in SDPA sparse
/// format with objective `sum_i gamma_i`. In chordal modes each block is one
/// LMI and entries shared between blocks are split with free variables, so the
/// block matrices sum to `-Z(gamma)`.
pub fn export_sdpa(problem: &SdpProblem, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if problem.zmap().num_params() == 0 {
        return Err(Error::Invalid(
            "problem has no multipliers to export".into(),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_sdpa(problem, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn sdpa_string(problem: &SdpProblem) -> String {
    let mut buf = Vec::new();
    write_sdpa(problem, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("SDPA output is ASCII")
}

fn write_sdpa(problem: &SdpProblem, w: &mut impl Write) -> std::io::Result<()> {
    let zmap = problem.zmap();
    let np = zmap.num_params();
    let blocks = problem.blocks();
    // Local index of every vertex in every block.
    let local: Vec<HashMap<usize, usize>> = blocks
        .iter()
        .map(|b| b.iter().enumerate().map(|(a, &v)| (v, a)).collect())
        .collect();
    let containing = |i: usize, j: usize| -> Vec<usize> {
        (0..blocks.len())
            .filter(|&k| local[k].contains_key(&i) && local[k].contains_key(&j))
            .collect()
    };
    // Owner block of each upper-triangle position and its split variables.
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    let mut splits: Vec<(usize, usize, usize, usize)> = Vec::new(); // (i, j, owner, other)
    let n = problem.dim();
    for i in 0..n {
        for j in i..n {
            let ks = containing(i, j);
            if let Some((&first, rest)) = ks.split_first() {
                owner.insert((i, j), first);
                for &k in rest {
                    splits.push((i, j, first, k));
                }
            }
        }
    }
    let nvars = np + splits.len();
    let lp_block = blocks.len() + 1;
    writeln!(w, "{nvars}")?;
    writeln!(w, "{}", blocks.len() + 1)?;
    let sizes: Vec<String> = blocks
        .iter()
        .map(|b| b.len().to_string())
        .chain(std::iter::once(format!("-{np}")))
        .collect();
    writeln!(w, "{}", sizes.join(" "))?;
    let obj: Vec<String> = (0..nvars)
        .map(|v| if v < np { "1".into() } else { "0".into() })
        .collect();
    writeln!(w, "{}", obj.join(" "))?;
    // F_0: X = sum_i F_i x_i - F_0, block matrix is -(Z0 + sum gamma_i Z_i) on owners.
    let emit = |w: &mut dyn Write, var: usize, m: &SymSparse, sign: f64| -> std::io::Result<()> {
        for &(i, j, v) in m.entries() {
            let k = owner[&(i, j)];
            let (a, b) = (local[k][&i], local[k][&j]);
            let (a, b) = (a.min(b), a.max(b));
            writeln!(w, "{var} {} {} {} {}", k + 1, a + 1, b + 1, sign * v)?;
        }
        Ok(())
    };
    emit(w, 0, zmap.base(), 1.0)?;
    for (i, z) in zmap.basis().iter().enumerate() {
        emit(w, i + 1, z, -1.0)?;
        writeln!(w, "{} {lp_block} {} {} 1", i + 1, i + 1, i + 1)?;
    }
    for (s, &(i, j, own, other)) in splits.iter().enumerate() {
        let var = np + s + 1;
        for (k, sign) in [(own, -1.0), (other, 1.0)] {
            let (a, b) = (local[k][&i], local[k][&j]);
            let (a, b) = (a.min(b), a.max(b));
            writeln!(w, "{var} {} {} {} {}", k + 1, a + 1, b + 1, sign)?;
        }
    }
    Ok(())
}

/// Parsed SDPA sparse problem: `X = sum_i F_i x_i - F_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdpaData {
    pub nvars: usize,
    /// Block sizes; negative for diagonal blocks.
    pub block_sizes: Vec<i64>,
    pub objective: Vec<f64>,
    /// `(var, block, i, j, value)`, all 0-based, `i <= j`.
    pub entries: Vec<(usize, usize, usize, usize, f64)>,
}

impl SdpaData {
    /// Dense block `k` of `sum_i F_i x_i - F_0` for variables `x`.
    pub fn block_value(&self, k: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.nvars {
            return Err(Error::Dimension(format!(
                "{} variables, expected {}",
                x.len(),
                self.nvars
            )));
        }
        let size = self
            .block_sizes
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("no block {k}")))?
            .unsigned_abs() as usize;
        let mut m = DMatrix::zeros(size, size);
        for &(var, block, i, j, v) in &self.entries {
            if block != k {
                continue;
            }
            let coef = if var == 0 { -1.0 } else { x[var - 1] };
            m[(i, j)] += coef * v;
            if i != j {
                m[(j, i)] += coef * v;
            }
        }
        Ok(m)
    }
}

pub fn parse_sdpa(text: &str) -> Result<SdpaData> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('"') && !l.starts_with('*'));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing {what}")))
    };
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad number {s:?}")))
    };
    let split = |s: &str| -> Vec<String> {
        s.split(|c: char| {
            c.is_whitespace() || c == ',' || c == '{' || c == '}' || c == '(' || c == ')'
        })
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
    };
    let nvars = num(&split(next("variable count")?)[0])? as usize;
    let nblocks = num(&split(next("block count")?)[0])? as usize;
    let block_sizes: Vec<i64> = split(next("block sizes")?)
        .iter()
        .take(nblocks)
        .map(|t| num(t).map(|v| v as i64))
        .collect::<Result<_>>()?;
    if block_sizes.len() != nblocks {
        return Err(Error::Parse("too few block sizes".into()));
    }
    let objective: Vec<f64> = split(next("objective")?)
        .iter()
        .map(|t| num(t))
        .collect::<Result<_>>()?;
    if objective.len() != nvars {
        return Err(Error::Parse(format!(
            "objective has {} entries, expected {nvars}",
            objective.len()
        )));
    }
    let mut entries = Vec::new();
    for line in lines {
        let t = split(line);
        if t.len() != 5 {
            return Err(Error::Parse(format!("bad entry line {line:?}")));
        }
        let idx = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad index {s:?}")))
        };
        let (var, block, i, j) = (idx(&t[0])?, idx(&t[1])?, idx(&t[2])?, idx(&t[3])?);
        if var > nvars || block == 0 || block > nblocks || i == 0 || j == 0 {
            return Err(Error::Parse(format!("entry out of range: {line:?}")));
        }
        let size = block_sizes[block - 1].unsigned_abs() as usize;
        if i > size || j > size {
            return Err(Error::Parse(format!(
                "entry outside block {block}: {line:?}"
            )));
        }
        let (i, j) = (i.min(j) - 1, i.max(j) - 1);
        entries.push((var, block - 1, i, j, num(&t[4])?));
    }
    Ok(SdpaData {
        nvars,
        block_sizes,
        objective,
        entries,
    })
}

pub fn read_sdpa(path: impl AsRef<Path>) -> Result<SdpaData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_sdpa(&text)
}
