//! Safety certification and reachability by bisection on the ellipsoid radius.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmOptions, Solution};
use crate::error::{Error, Result};
use crate::linalg::{sqrtm_psd, SymBuilder};
use crate::nnmodel::{interval_bounds, Network};
use crate::qcbuild::{
    assemble_z, safety_ellipsoid, AffineMatrixMap, InputSpec, QcConfig, SafetyMatrix,
};
use crate::sdpcore::{build_problem, check_feasible_dense, Mode, SdpProblem};

#[derive(Clone, Debug)]
pub struct VerifyRequest {
    pub network: Network,
    pub input: InputSpec,
    pub safety: SafetyMatrix,
    pub beta: usize,
    pub mode: Mode,
    pub use_adjacent: bool,
    pub options: AdmmOptions,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyOutcome {
    /// True only with an eigenvalue-checked certificate; false means unknown.
    pub certified: bool,
    pub solution: Solution,
    pub wall_time: f64,
}

fn qc_config(beta: usize, use_adjacent: bool) -> QcConfig {
    QcConfig {
        use_adjacent,
        ..QcConfig::new(beta)
    }
}

fn input_box(input: &InputSpec) -> Result<(DVector<f64>, DVector<f64>)> {
    match input {
        InputSpec::Box { lo, hi } => Ok((lo.clone(), hi.clone())),
        InputSpec::Polytope { .. } => Err(Error::Invalid(
            "interval bounds need a box input set".into(),
        )),
    }
}

/// Assembles `Z(gamma)` and the decomposed problem for a request.
pub fn build_request_problem(req: &VerifyRequest) -> Result<SdpProblem> {
    let bounds = if req.use_adjacent {
        let (lo, hi) = input_box(&req.input)?;
        Some(interval_bounds(&req.network, &lo, &hi)?)
    } else {
        None
    };
    let zmap = assemble_z(
        &req.network,
        &req.input,
        &req.safety,
        &qc_config(req.beta, req.use_adjacent),
        bounds.as_ref(),
    )?;
    build_problem(zmap, &req.network.profile(), req.beta, req.mode)
}

pub fn verify_safety(req: &VerifyRequest) -> Result<VerifyOutcome> {
    let start = Instant::now();
    let problem = build_request_problem(req)?;
    let solution = admm::solve(&problem, &req.options)?;
    Ok(VerifyOutcome {
        certified: solution.certified(),
        solution,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// `n` points drawn uniformly from the box.
pub fn sample_box(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            DVector::from_iterator(
                lo.len(),
                lo.iter()
                    .zip(hi.iter())
                    .map(|(&l, &h)| rng.random_range(l..=h)),
            )
        })
        .collect()
}

fn check_box(lo: &DVector<f64>, hi: &DVector<f64>, net: &Network) -> Result<()> {
    if lo.len() != net.input_dim() || hi.len() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "box has dimension {} but the network takes {}",
            lo.len(),
            net.input_dim()
        )));
    }
    if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
        return Err(Error::Invalid("box has lo > hi".into()));
    }
    Ok(())
}

/// Largest sampled `||f(x)||^2 / ||x||^2` over the box (points with `x = 0` skipped).
pub fn empirical_l2_gain(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    check_box(lo, hi, net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for x in sample_box(lo, hi, n, &mut rng) {
        let nx = x.norm_squared();
        if nx > 0.0 {
            best = best.max(net.eval(&x)?.norm_squared() / nx);
        }
    }
    Ok(best)
}

/// Sample mean of the outputs and `P = sqrtm(cov + reg I)`.
pub fn estimate_ellipsoid(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n_samples: usize,
    reg: f64,
    seed: u64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_box(lo, hi, net)?;
    if n_samples < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    if !(reg > 0.0) {
        return Err(Error::Invalid(format!(
            "regularization must be positive, got {reg}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys = sample_box(lo, hi, n_samples, &mut rng)
        .iter()
        .map(|x| net.eval(x))
        .collect::<Result<Vec<_>>>()?;
    let m = net.output_dim();
    let mean = ys.iter().fold(DVector::zeros(m), |acc, y| acc + y) / n_samples as f64;
    let mut cov = DMatrix::zeros(m, m);
    for y in &ys {
        let d = y - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n_samples - 1) as f64;
    let p = sqrtm_psd(&(cov + DMatrix::identity(m, m) * reg))?;
    Ok((mean, p))
}

fn ellipsoid_radius(p_inv: &DMatrix<f64>, y_c: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (p_inv * (y - y_c)).norm_squared()
}

fn invert_shape(p_shape: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    p_shape
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Invalid("ellipsoid shape matrix is singular".into()))
}

/// Largest sampled `||P^{-1}(f(x) - y_c)||^2` over the box.
pub fn max_sampled_radius(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    y_c: &DVector<f64>,
    p_shape: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    check_box(lo, hi, net)?;
    let p_inv = invert_shape(p_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for x in sample_box(lo, hi, n, &mut rng) {
        best = best.max(ellipsoid_radius(&p_inv, y_c, &net.eval(&x)?));
    }
    Ok(best)
}

/// Number of sampled inputs whose output leaves `||P^{-1}(y - y_c)||^2 <= rho`.
#[allow(clippy::too_many_arguments)]
pub fn soundness_check(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    y_c: &DVector<f64>,
    p_shape: &DMatrix<f64>,
    rho: f64,
    n: usize,
    seed: u64,
) -> Result<usize> {
    if n == 0 {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    check_box(lo, hi, net)?;
    let p_inv = invert_shape(p_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for x in sample_box(lo, hi, n, &mut rng) {
        if ellipsoid_radius(&p_inv, y_c, &net.eval(&x)?) > rho {
            count += 1;
        }
    }
    Ok(count)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BisectOptions {
    pub rho_lo: f64,
    /// Unit of the radius grid `rho_hi * 2^j`.
    pub rho_hi: f64,
    /// Bisection stops once the bracket is at most `tol` times the smallest
    /// certified power of two.
    pub tol: f64,
    pub rho_cap: f64,
    /// Samples used to rule out radii below the sampled maximum without a solve.
    pub witness_samples: usize,
    pub seed: u64,
}

impl Default for BisectOptions {
    fn default() -> Self {
        BisectOptions {
            rho_lo: 0.0,
            rho_hi: 1.0,
            tol: 1.0 / 16.0,
            rho_cap: 1.1e12,
            witness_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachConfig {
    pub beta: usize,
    pub mode: Mode,
    pub use_adjacent: bool,
    pub admm: AdmmOptions,
    pub bisect: BisectOptions,
}

impl ReachConfig {
    pub fn new(beta: usize, mode: Mode) -> Self {
        ReachConfig {
            beta,
            mode,
            use_adjacent: true,
            admm: AdmmOptions {
                rho: 1e4,
                max_iter: 3000,
                ..AdmmOptions::default()
            },
            bisect: BisectOptions::default(),
        }
    }
}

/// What decided a bisection step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evidence {
    /// ADMM solve followed by the dense check.
    Solver,
    /// A sampled output violates the ellipsoid, so no certificate exists.
    Witness,
    /// The certificate of a smaller `beta`, embedded and re-checked.
    Embedded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub rho: f64,
    pub certified: bool,
    pub evidence: Evidence,
    pub iters: usize,
    pub lambda_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total: f64,
    pub solver: f64,
    pub solves: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachResult {
    /// Smallest certified radius; `None` if the cap was hit without a certificate.
    pub rho_star: Option<f64>,
    /// Largest radius shown uncertifiable or left uncertified.
    pub rho_fail: f64,
    pub y_c: Vec<f64>,
    pub p_shape: Vec<Vec<f64>>,
    pub trace: Vec<TraceEntry>,
    pub timings: Timings,
    pub config: ReachConfig,
    /// Multipliers certifying `rho_star`.
    pub gamma: Vec<f64>,
}

/// Certificate from a previous solve, usable for any radius at or above `rho`.
#[derive(Clone, Debug)]
pub struct Hint<'a> {
    pub zmap: &'a AffineMatrixMap,
    pub gamma: &'a [f64],
    pub rho: f64,
}

/// Problem for the ellipsoid spec at radius zero.
struct ReachSetup {
    problem: SdpProblem,
    last: usize,
}

fn reach_setup(
    net: &Network,
    input: &InputSpec,
    y_c: &DVector<f64>,
    p_shape: &DMatrix<f64>,
    cfg: &ReachConfig,
) -> Result<ReachSetup> {
    let safety = safety_ellipsoid(p_shape, y_c, 0.0, net.input_dim())?;
    let req = VerifyRequest {
        network: net.clone(),
        input: input.clone(),
        safety,
        beta: cfg.beta,
        mode: cfg.mode,
        use_adjacent: cfg.use_adjacent,
        options: cfg.admm.clone(),
    };
    let problem = build_request_problem(&req)?;
    cfg.admm.validate()?;
    let last = problem.dim() - 1;
    Ok(ReachSetup { problem, last })
}

/// `Z(gamma)` for radius `rho`: the radius only enters the corner entry.
fn map_at_radius(base: &AffineMatrixMap, last: usize, rho: f64) -> AffineMatrixMap {
    let mut b = SymBuilder::new(base.dim());
    b.add_matrix(base.base(), 1.0);
    b.add(last, last, -rho);
    let mut out = base.clone();
    out.set_base(b.build());
    out
}

/// Smallest certified ellipsoid radius by bisection.
pub fn reach_rho(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    y_c: &DVector<f64>,
    p_shape: &DMatrix<f64>,
    cfg: &ReachConfig,
) -> Result<ReachResult> {
    reach_rho_with_hint(net, lo, hi, y_c, p_shape, cfg, None)
}

/// As [`reach_rho`]; radii at or above the hint's radius that the solver
/// misses are re-checked with the hint's multipliers.
#[allow(clippy::too_many_arguments)]
pub fn reach_rho_with_hint(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    y_c: &DVector<f64>,
    p_shape: &DMatrix<f64>,
    cfg: &ReachConfig,
    hint: Option<Hint<'_>>,
) -> Result<ReachResult> {
    let start = Instant::now();
    check_box(lo, hi, net)?;
    let b = &cfg.bisect;
    if !(b.tol > 0.0) || !(b.rho_lo >= 0.0) || !(b.rho_hi > b.rho_lo) || !(b.rho_cap >= b.rho_hi) {
        return Err(Error::Invalid(format!(
            "bisection needs tol > 0 and 0 <= rho_lo < rho_hi <= rho_cap (got {b:?})"
        )));
    }
    let input = InputSpec::new_box(lo.clone(), hi.clone())?;
    let setup = reach_setup(net, &input, y_c, p_shape, cfg)?;
    let witness = if b.witness_samples > 0 {
        max_sampled_radius(net, lo, hi, y_c, p_shape, b.witness_samples, b.seed)?
    } else {
        0.0
    };
    let hint_gamma = match &hint {
        Some(h) => Some(setup.problem.zmap().embed_gamma(h.zmap, h.gamma)?),
        None => None,
    };
    let mut timings = Timings::default();
    let mut trace = Vec::new();
    let test = |rho: f64,
                trace: &mut Vec<TraceEntry>,
                timings: &mut Timings|
     -> Result<Option<Vec<f64>>> {
        if rho < witness {
            trace.push(TraceEntry {
                rho,
                certified: false,
                evidence: Evidence::Witness,
                iters: 0,
                lambda_max: f64::NAN,
            });
            return Ok(None);
        }
        let zmap = map_at_radius(setup.problem.zmap(), setup.last, rho);
        let problem = setup.problem.with_zmap(zmap)?;
        let t0 = Instant::now();
        let sol = admm::solve(&problem, &cfg.admm)?;
        timings.solver += t0.elapsed().as_secs_f64();
        timings.solves += 1;
        log::debug!("rho {rho}: {:?} after {} iterations", sol.status, sol.iters);
        if sol.certified() {
            trace.push(TraceEntry {
                rho,
                certified: true,
                evidence: Evidence::Solver,
                iters: sol.iters,
                lambda_max: sol.lambda_max,
            });
            return Ok(Some(sol.gamma));
        }
        if let (Some(h), Some(g)) = (&hint, &hint_gamma) {
            if rho >= h.rho {
                let check = check_feasible_dense(&problem.zmap().evaluate(g)?, cfg.admm.final_tol)?;
                if check.feasible {
                    trace.push(TraceEntry {
                        rho,
                        certified: true,
                        evidence: Evidence::Embedded,
                        iters: sol.iters,
                        lambda_max: check.lambda_max,
                    });
                    return Ok(Some(g.clone()));
                }
            }
        }
        trace.push(TraceEntry {
            rho,
            certified: false,
            evidence: Evidence::Solver,
            iters: sol.iters,
            lambda_max: sol.lambda_max,
        });
        Ok(None)
    };
    let uncertified = |rho_fail: f64, trace: Vec<TraceEntry>, mut timings: Timings| {
        timings.total = start.elapsed().as_secs_f64();
        ReachResult {
            rho_star: None,
            rho_fail,
            y_c: y_c.iter().copied().collect(),
            p_shape: rows_of(p_shape),
            trace,
            timings,
            config: cfg.clone(),
            gamma: Vec::new(),
        }
    };
    // Radii live on the grid rho_hi * 2^j, so runs for different beta test
    // the same points. First the smallest certified power of two is found
    // by binary search on j, then that octave is bisected.
    let grid = |j: i64| b.rho_hi * 2f64.powi(j as i32);
    let mut j_hi = (b.rho_cap / b.rho_hi).log2().floor() as i64;
    let mut best_gamma = match test(grid(j_hi), &mut trace, &mut timings)? {
        Some(g) => g,
        None => return Ok(uncertified(grid(j_hi), trace, timings)),
    };
    // Grid points below the sampled radius are uncertifiable.
    let mut j_lo = if witness > b.rho_hi {
        ((witness / b.rho_hi).log2().ceil() as i64 - 1).min(j_hi - 1)
    } else {
        -1
    };
    if j_lo >= 0 {
        trace.push(TraceEntry {
            rho: grid(j_lo),
            certified: false,
            evidence: Evidence::Witness,
            iters: 0,
            lambda_max: f64::NAN,
        });
    }
    while j_hi - j_lo > 1 {
        let mid = (j_lo + j_hi) / 2;
        match test(grid(mid), &mut trace, &mut timings)? {
            Some(g) => {
                j_hi = mid;
                best_gamma = g;
            }
            None => j_lo = mid,
        }
    }
    let mut hi_r = grid(j_hi);
    let mut lo_r = if j_lo < 0 { b.rho_lo } else { grid(j_lo) };
    let width = b.tol * hi_r;
    while hi_r - lo_r > width {
        let mid = 0.5 * (lo_r + hi_r);
        match test(mid, &mut trace, &mut timings)? {
            Some(g) => {
                hi_r = mid;
                best_gamma = g;
            }
            None => lo_r = mid,
        }
    }
    timings.total = start.elapsed().as_secs_f64();
    Ok(ReachResult {
        rho_star: Some(hi_r),
        rho_fail: lo_r,
        y_c: y_c.iter().copied().collect(),
        p_shape: rows_of(p_shape),
        trace,
        timings,
        config: cfg.clone(),
        gamma: best_gamma,
    })
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Runs [`reach_rho`] for increasing `beta`, passing each certificate on to
/// the next value as a hint. The map for `beta` embeds into the one for
/// `beta + 1` (new band multipliers set to zero), so the hint stays valid.
#[allow(clippy::too_many_arguments)]
pub fn reach_sweep(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    y_c: &DVector<f64>,
    p_shape: &DMatrix<f64>,
    betas: &[usize],
    cfg: &ReachConfig,
) -> Result<Vec<ReachResult>> {
    if betas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(
            "beta values must be strictly increasing".into(),
        ));
    }
    let input = InputSpec::new_box(lo.clone(), hi.clone())?;
    let mut out: Vec<ReachResult> = Vec::with_capacity(betas.len());
    let mut prev: Option<(AffineMatrixMap, Vec<f64>, f64)> = None;
    for &beta in betas {
        let mut c = cfg.clone();
        c.beta = beta;
        let hint = prev.as_ref().map(|(z, g, r)| Hint {
            zmap: z,
            gamma: g,
            rho: *r,
        });
        let res = reach_rho_with_hint(net, lo, hi, y_c, p_shape, &c, hint)?;
        prev = match res.rho_star {
            Some(r) => {
                let setup = reach_setup(net, &input, y_c, p_shape, &c)?;
                Some((setup.problem.zmap().clone(), res.gamma.clone(), r))
            }
            None => None,
        };
        out.push(res);
    }
    Ok(out)
}
