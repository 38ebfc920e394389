//! Feedforward network model: evaluation, the stacked linear system
//! `B x = phi(A x + b)`, block selectors, interval bounds and the random
//! benchmark generator.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chordal::DimProfile;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Tanh => u.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-u).exp()),
        }
    }

    pub fn apply_vec(self, u: &DVector<f64>) -> DVector<f64> {
        u.map(|v| self.apply(v))
    }

    /// Default sector `[a, b]`; all three supported activations are `[0, 1]`.
    pub fn sector(self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Parse(format!("unknown activation '{other}'"))),
        }
    }
}

/// A `K`-layer feedforward network `f(x_1) = W_K x_K + b_K` with
/// `x_{k+1} = phi(W_k x_k + b_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

impl Network {
    pub fn new(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Invalid(format!(
                "a network needs at least 2 layers, got {}",
                weights.len()
            )));
        }
        if biases.len() != weights.len() {
            return Err(Error::Invalid(format!(
                "{} weight matrices but {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let layer = k + 1;
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::Shape {
                    layer,
                    msg: "empty weight matrix".into(),
                });
            }
            if b.len() != w.nrows() {
                return Err(Error::Shape {
                    layer,
                    msg: format!("bias has length {} but W has {} rows", b.len(), w.nrows()),
                });
            }
            if k > 0 && w.ncols() != weights[k - 1].nrows() {
                return Err(Error::Shape {
                    layer,
                    msg: format!(
                        "W has {} columns but the previous layer outputs {}",
                        w.ncols(),
                        weights[k - 1].nrows()
                    ),
                });
            }
            if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
                return Err(Error::Shape {
                    layer,
                    msg: "non-finite parameter".into(),
                });
            }
        }
        Ok(Network {
            weights,
            biases,
            activation,
        })
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `K`, the number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].nrows()
    }

    /// `(n_1, ..., n_K, m)`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.weights.iter().map(|w| w.ncols()).collect();
        d.push(self.output_dim());
        d
    }

    pub fn profile(&self) -> DimProfile {
        let d = self.dims();
        DimProfile::new(d[..d.len() - 1].to_vec(), d[d.len() - 1])
            .expect("a validated network always has a valid profile")
    }

    /// Layer states `x_1, ..., x_K` for input `x`.
    pub fn trajectory(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_input(x)?;
        let k = self.num_layers();
        let mut xs = Vec::with_capacity(k);
        xs.push(x.clone());
        for i in 0..k - 1 {
            let pre = &self.weights[i] * &xs[i] + &self.biases[i];
            xs.push(self.activation.apply_vec(&pre));
        }
        Ok(xs)
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xs = self.trajectory(x)?;
        let k = self.num_layers();
        Ok(&self.weights[k - 1] * &xs[k - 1] + &self.biases[k - 1])
    }

    /// Stacked state `vcat(x_1, ..., x_K)` of length `N`.
    pub fn stacked_state(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xs = self.trajectory(x)?;
        let n: usize = xs.iter().map(|v| v.len()).sum();
        let mut out = DVector::zeros(n);
        let mut off = 0;
        for v in &xs {
            out.rows_mut(off, v.len()).copy_from(v);
            off += v.len();
        }
        Ok(out)
    }

    /// Lifted vector `vcat(x_1, ..., x_K, 1)` of length `N + 1`.
    pub fn lifted_state(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.stacked_state(x)?.push(1.0))
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {} but the network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_network()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&NetworkFile::from(self))
            .expect("network serialization is infallible")
    }
}

/// On-disk JSON layout; weights are row-major nested arrays.
#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl NetworkFile {
    fn into_network(self) -> Result<Network> {
        if self.weights.len() + 1 != self.dims.len() {
            return Err(Error::Invalid(format!(
                "dims lists {} entries but there are {} weight matrices",
                self.dims.len(),
                self.weights.len()
            )));
        }
        let mut weights = Vec::with_capacity(self.weights.len());
        for (k, rows) in self.weights.iter().enumerate() {
            let layer = k + 1;
            let (nr, nc) = (self.dims[k + 1], self.dims[k]);
            if rows.len() != nr {
                return Err(Error::Shape {
                    layer,
                    msg: format!("expected {nr} rows, found {}", rows.len()),
                });
            }
            if let Some(bad) = rows.iter().position(|r| r.len() != nc) {
                return Err(Error::Shape {
                    layer,
                    msg: format!("row {} has {} columns, expected {nc}", bad, rows[bad].len()),
                });
            }
            weights.push(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]));
        }
        let biases = self.biases.into_iter().map(DVector::from_vec).collect();
        Network::new(weights, biases, self.activation)
    }
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        NetworkFile {
            dims: net.dims(),
            activation: net.activation,
            weights: net
                .weights
                .iter()
                .map(|w| w.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| b.iter().copied().collect())
                .collect(),
        }
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_json_str(&text)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, net.to_json_string()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// `sigma = 2 / sqrt(w ln w)`.
    Scalability,
    /// `sigma = 1 / sqrt(2)`.
    Reachability,
}

impl SigmaMode {
    pub fn sigma(self, width: usize) -> f64 {
        match self {
            SigmaMode::Scalability => {
                let w = width as f64;
                2.0 / (w * w.ln()).sqrt()
            }
            SigmaMode::Reachability => std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalability" => Ok(SigmaMode::Scalability),
            "reachability" => Ok(SigmaMode::Reachability),
            other => Err(Error::Parse(format!("unknown sigma mode '{other}'"))),
        }
    }
}

/// Random ReLU network with `depth` hidden layers of `width` neurons,
/// i.i.d. Gaussian weights and zero biases.
pub fn random_network(
    width: usize,
    depth: usize,
    in_dim: usize,
    out_dim: usize,
    mode: SigmaMode,
    seed: u64,
) -> Result<Network> {
    if width == 0 || depth == 0 || in_dim == 0 || out_dim == 0 {
        return Err(Error::Invalid(format!(
            "width, depth, in_dim and out_dim must be positive (got {width}, {depth}, {in_dim}, {out_dim})"
        )));
    }
    let sigma = mode.sigma(width);
    if !sigma.is_finite() {
        return Err(Error::Invalid(format!(
            "sigma is undefined for width {width}"
        )));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![in_dim];
    dims.extend(std::iter::repeat_n(width, depth));
    dims.push(out_dim);
    let mut weights = Vec::with_capacity(depth + 1);
    let mut biases = Vec::with_capacity(depth + 1);
    for k in 0..=depth {
        let (nr, nc) = (dims[k + 1], dims[k]);
        weights.push(DMatrix::from_fn(nr, nc, |_, _| normal.sample(&mut rng)));
        biases.push(DVector::zeros(nr));
    }
    Network::new(weights, biases, Activation::Relu)
}

/// `A`, `B`, `b` with `B x = phi(A x + b)` for every forward trajectory `x`.
#[derive(Clone, Debug)]
pub struct StackedSystem {
    pub a: DMatrix<f64>,
    pub b_sel: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub n_total: usize,
    /// Row offset of layer `k`'s block (0-based `k`) inside `A x + b`.
    block_offsets: Vec<usize>,
    block_sizes: Vec<usize>,
    /// Column offset of `x_k` inside the stacked state.
    state_offsets: Vec<usize>,
}

impl StackedSystem {
    /// Number of rows `N - n_1`.
    pub fn hidden(&self) -> usize {
        self.a.nrows()
    }

    /// Number of activation blocks `K - 1`.
    pub fn num_hidden_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    /// Row range of `W_k x_k + b_k` (1-based `k`) inside `A x + b`.
    pub fn block_rows(&self, k: usize) -> std::ops::Range<usize> {
        let off = self.block_offsets[k - 1];
        off..off + self.block_sizes[k - 1]
    }

    /// Column range of `x_k` (1-based `k`) inside the stacked state.
    pub fn state_cols(&self, k: usize) -> std::ops::Range<usize> {
        let off = self.state_offsets[k - 1];
        let end = self.state_offsets.get(k).copied().unwrap_or(self.n_total);
        off..end
    }

    /// The `(2(N - n_1) + 1) x (N + 1)` operator `[A b; B 0; 0 1]` in sparse rows.
    pub fn lifting_rows(&self) -> crate::linalg::SparseRows {
        let n = self.n_total;
        let h = self.hidden();
        let mut l = crate::linalg::SparseRows::new(n + 1);
        for r in 0..h {
            let mut row: Vec<(usize, f64)> = (0..n)
                .filter(|&c| self.a[(r, c)] != 0.0)
                .map(|c| (c, self.a[(r, c)]))
                .collect();
            row.push((n, self.bias[r]));
            l.push_row(row);
        }
        for r in 0..h {
            let row = (0..n)
                .filter(|&c| self.b_sel[(r, c)] != 0.0)
                .map(|c| (c, self.b_sel[(r, c)]))
                .collect();
            l.push_row(row);
        }
        l.push_row(vec![(n, 1.0)]);
        l
    }
}

pub fn stacked_system(net: &Network) -> StackedSystem {
    let profile = net.profile();
    let k_layers = net.num_layers();
    let n = profile.n_total();
    let n1 = profile.layer_dim(1);
    let h = n - n1;
    let mut a = DMatrix::zeros(h, n);
    let mut b_sel = DMatrix::zeros(h, n);
    let mut bias = DVector::zeros(h);
    let mut block_offsets = Vec::new();
    let mut block_sizes = Vec::new();
    let mut row = 0;
    for k in 1..k_layers {
        let w = &net.weights()[k - 1];
        let col = profile.s(k - 1);
        a.view_mut((row, col), (w.nrows(), w.ncols())).copy_from(w);
        bias.rows_mut(row, w.nrows())
            .copy_from(&net.biases()[k - 1]);
        let next = profile.s(k);
        for i in 0..w.nrows() {
            b_sel[(row + i, next + i)] = 1.0;
        }
        block_offsets.push(row);
        block_sizes.push(w.nrows());
        row += w.nrows();
    }
    StackedSystem {
        a,
        b_sel,
        bias,
        n_total: n,
        block_offsets,
        block_sizes,
        state_offsets: (1..=k_layers).map(|k| profile.s(k - 1)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    /// `x_k`, 1-based.
    Layer(usize),
    /// The trailing constant `1`.
    Affine,
}

/// 0/1 selector `E` with `E z = x_k` (or `E_a z = 1`) on the lifted vector `z`.
#[derive(Clone, Debug)]
pub struct Selector {
    pub block: Block,
    pub matrix: DMatrix<f64>,
}

pub fn selector(block: Block, profile: &DimProfile) -> Result<Selector> {
    let n = profile.n_total();
    let (start, len) = match block {
        Block::Affine => (n, 1),
        Block::Layer(k) => {
            if k == 0 || k > profile.num_layers() {
                return Err(Error::OutOfRange {
                    name: "k",
                    value: k as i64,
                    allowed: format!("1..={}", profile.num_layers()),
                });
            }
            (profile.s(k - 1), profile.layer_dim(k))
        }
    };
    let mut matrix = DMatrix::zeros(len, n + 1);
    for i in 0..len {
        matrix[(i, start + i)] = 1.0;
    }
    Ok(Selector { block, matrix })
}

/// Interval bounds on pre- and post-activation values of layers `2..=K`.
///
/// Index `k - 1` holds bounds on `W_k x_k + b_k` (pre) and `x_{k+1}` (post).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBounds {
    pub pre_lo: Vec<DVector<f64>>,
    pub pre_hi: Vec<DVector<f64>>,
    pub post_lo: Vec<DVector<f64>>,
    pub post_hi: Vec<DVector<f64>>,
}

impl LayerBounds {
    pub fn contains_trajectory(&self, xs: &[DVector<f64>], slack: f64) -> bool {
        xs.iter().skip(1).enumerate().all(|(i, x)| {
            x.iter()
                .zip(self.post_lo[i].iter().zip(self.post_hi[i].iter()))
                .all(|(&v, (&lo, &hi))| v >= lo - slack && v <= hi + slack)
        })
    }
}

/// Interval-arithmetic bound propagation over the hidden layers, widened
/// outward to cover rounding.
pub fn interval_bounds(
    net: &Network,
    input_lo: &DVector<f64>,
    input_hi: &DVector<f64>,
) -> Result<LayerBounds> {
    let n1 = net.input_dim();
    if input_lo.len() != n1 || input_hi.len() != n1 {
        return Err(Error::Dimension(format!(
            "input box has lengths ({}, {}) but the network expects {n1}",
            input_lo.len(),
            input_hi.len()
        )));
    }
    if input_lo.iter().zip(input_hi.iter()).any(|(l, h)| l > h) {
        return Err(Error::Invalid("input box has lo > hi".into()));
    }
    let act = net.activation();
    let mut lo = input_lo.clone();
    let mut hi = input_hi.clone();
    let mut out = LayerBounds {
        pre_lo: Vec::new(),
        pre_hi: Vec::new(),
        post_lo: Vec::new(),
        post_hi: Vec::new(),
    };
    for k in 0..net.num_layers() - 1 {
        let w = &net.weights()[k];
        let b = &net.biases()[k];
        let wp = w.map(|v| v.max(0.0));
        let wn = w.map(|v| v.min(0.0));
        // Widen by the rounding error bound of a length-n dot product, so
        // that floating-point evaluations of the network stay inside.
        let mag = w.abs() * lo.abs().sup(&hi.abs()) + b.abs();
        let slack = mag * ((w.ncols() + 2) as f64 * f64::EPSILON);
        let plo = (&wp * &lo + &wn * &hi + b - &slack).map(f64::next_down);
        let phi = (&wp * &hi + &wn * &lo + b + &slack).map(f64::next_up);
        lo = act.apply_vec(&plo);
        hi = act.apply_vec(&phi);
        out.pre_lo.push(plo);
        out.pre_hi.push(phi);
        out.post_lo.push(lo.clone());
        out.post_hi.push(hi.clone());
    }
    Ok(out)
}
