use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chordal_verify::chordal::{
    chordal_extension, clique_count, double_cliques, pattern_e_1k, pattern_e_a, pattern_e_beta,
    pattern_e_m, theorem1_cliques,
};
use chordal_verify::nnmodel::{load_network, random_network, save_network};
use chordal_verify::qcbuild::{safety_ellipsoid, safety_l2gain};
use chordal_verify::sdpcore::export_sdpa;
use chordal_verify::verify::{
    build_request_problem, estimate_ellipsoid, reach_rho, reach_sweep, sample_box, verify_safety,
    ReachConfig,
};
use chordal_verify::{
    AdmmOptions, DimProfile, Error, InputSpec, Network, ReachResult, Result, SafetyMatrix,
    VerifyRequest,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{ExportArgs, GenArgs, ProblemArgs, ReachArgs, SparsityArgs, VerifyArgs};

pub enum Outcome {
    Certified,
    NotCertified,
}

/// Regularization of the sampled output covariance.
const COV_REG: f64 = 1e-3;

enum Spec {
    L2Gain(f64),
    Ellipsoid(Option<f64>),
}

fn parse_spec(s: &str) -> Result<Spec> {
    let bad = || {
        Error::Parse(format!(
            "spec {s:?} is not l2gain:K, ellipsoid or ellipsoid:R"
        ))
    };
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let num = |a: &str| a.trim().parse::<f64>().map_err(|_| bad());
    match (kind, arg) {
        ("l2gain", Some(a)) => Ok(Spec::L2Gain(num(a)?)),
        ("ellipsoid", None) => Ok(Spec::Ellipsoid(None)),
        ("ellipsoid", Some(a)) => Ok(Spec::Ellipsoid(Some(num(a)?))),
        _ => Err(bad()),
    }
}

fn check_beta(beta: i64, profile: &DimProfile) -> Result<usize> {
    if beta < 0 || beta as u64 > profile.max_beta() as u64 {
        return Err(Error::OutOfRange {
            name: "beta",
            value: beta,
            allowed: format!("0..={}", profile.max_beta()),
        });
    }
    Ok(beta as usize)
}

fn box_of(bounds: &[f64], net: &Network) -> Result<(DVector<f64>, DVector<f64>)> {
    let (lo, hi) = (bounds[0], bounds[1]);
    if !(lo <= hi) {
        return Err(Error::Invalid(format!(
            "box needs LO <= HI, got {lo} > {hi}"
        )));
    }
    let n = net.input_dim();
    Ok((DVector::from_element(n, lo), DVector::from_element(n, hi)))
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    match out {
        Some(path) => fs::write(path, text + "\n").map_err(|e| io_err(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn request(p: &ProblemArgs, options: AdmmOptions) -> Result<(VerifyRequest, serde_json::Value)> {
    let net = load_network(&p.net)?;
    let beta = check_beta(p.beta, &net.profile())?;
    let (lo, hi) = box_of(&p.bounds, &net)?;
    let (safety, spec_json): (SafetyMatrix, _) = match parse_spec(&p.spec)? {
        Spec::L2Gain(k) => (
            safety_l2gain(k, net.input_dim(), net.output_dim())?,
            json!({ "kind": "l2gain", "kappa": k }),
        ),
        Spec::Ellipsoid(None) => {
            return Err(Error::Invalid(
                "this command needs an explicit radius, ellipsoid:R".into(),
            ));
        }
        Spec::Ellipsoid(Some(r)) => {
            let (yc, shape) = estimate_ellipsoid(&net, &lo, &hi, p.samples, COV_REG, p.seed)?;
            let s = safety_ellipsoid(&shape, &yc, r, net.input_dim())?;
            let rows: Vec<Vec<f64>> = shape
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect();
            (
                s,
                json!({ "kind": "ellipsoid", "rho": r, "y_c": yc.as_slice(), "p_shape": rows }),
            )
        }
    };
    let req = VerifyRequest {
        network: net,
        input: InputSpec::new_box(lo, hi)?,
        safety,
        beta,
        mode: p.mode,
        use_adjacent: p.adjacent.on(),
        options,
    };
    Ok((req, spec_json))
}

pub fn verify(a: &VerifyArgs) -> Result<Outcome> {
    let options = AdmmOptions {
        rho: a.rho,
        max_iter: a.max_iter,
        ..AdmmOptions::default()
    };
    let (req, spec) = request(&a.problem, options)?;
    let out = verify_safety(&req)?;
    let s = &out.solution;
    log::info!(
        "{:?} after {} iterations, lambda_max {:.3e}",
        s.status,
        s.iters,
        s.lambda_max
    );
    let result = json!({
        "net": a.problem.net,
        "beta": req.beta,
        "mode": req.mode,
        "adjacent": req.use_adjacent,
        "spec": spec,
        "certified": out.certified,
        "status": s.status,
        "lambda_max": s.lambda_max,
        "iters": s.iters,
        "wall_time": out.wall_time,
        "gamma": s.gamma,
    });
    write_json(&result, a.out.as_deref())?;
    if let Some(path) = &a.csv {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let status = serde_json::to_value(s.status).map_err(|e| Error::Parse(e.to_string()))?;
        let row = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            if fresh {
                writeln!(w, "net,beta,mode,iters,wall_time,status")?;
            }
            writeln!(
                w,
                "{},{},{},{},{:.6},{}",
                a.problem.net.display(),
                req.beta,
                req.mode,
                s.iters,
                out.wall_time,
                status.as_str().unwrap_or_default()
            )?;
            w.flush()
        };
        row(&mut w).map_err(|e| io_err(path, e))?;
    }
    Ok(if out.certified {
        Outcome::Certified
    } else {
        Outcome::NotCertified
    })
}

fn sibling_csv(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.samples.csv"))
}

pub fn reach(a: &ReachArgs) -> Result<Outcome> {
    if !matches!(parse_spec(&a.spec)?, Spec::Ellipsoid(None)) {
        return Err(Error::Invalid(format!(
            "reach estimates the ellipsoid itself; use --spec ellipsoid (got {:?})",
            a.spec
        )));
    }
    if a.jobs == 0 {
        return Err(Error::Invalid("--jobs must be at least 1".into()));
    }
    let net = load_network(&a.net)?;
    let profile = net.profile();
    let betas = a
        .beta
        .iter()
        .map(|&b| check_beta(b, &profile))
        .collect::<Result<Vec<_>>>()?;
    if betas.is_empty() {
        return Err(Error::Invalid("no beta values given".into()));
    }
    let (lo, hi) = box_of(&a.bounds, &net)?;
    let (yc, shape) = estimate_ellipsoid(&net, &lo, &hi, a.samples, COV_REG, a.seed)?;
    let mut cfg = ReachConfig::new(betas[0], a.mode);
    cfg.use_adjacent = a.adjacent.on();
    cfg.admm.rho = a.rho;
    cfg.admm.max_iter = a.max_iter;
    cfg.bisect.witness_samples = a.samples;
    cfg.bisect.seed = a.seed.wrapping_add(1);

    let results: Vec<ReachResult> = if a.jobs == 1 {
        let mut sorted = betas.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let swept = reach_sweep(&net, &lo, &hi, &yc, &shape, &sorted, &cfg)?;
        betas
            .iter()
            .map(|b| swept[sorted.binary_search(b).expect("beta was swept")].clone())
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ReachResult>>>> =
            Mutex::new((0..betas.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..a.jobs.min(betas.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= betas.len() {
                        break;
                    }
                    let mut c = cfg.clone();
                    c.beta = betas[i];
                    let r = reach_rho(&net, &lo, &hi, &yc, &shape, &c);
                    slots.lock().expect("no worker panicked")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("no worker panicked")
            .into_iter()
            .map(|r| r.expect("every cell was run"))
            .collect::<Result<_>>()?
    };

    for r in &results {
        match r.rho_star {
            Some(rho) => eprintln!(
                "beta {}: rho_star {rho:.6e} ({} solves, {:.1} s)",
                r.config.beta, r.timings.solves, r.timings.total
            ),
            None => eprintln!(
                "beta {}: not certified up to {:.3e}",
                r.config.beta, r.rho_fail
            ),
        }
    }
    let value = serde_json::to_value(&results).map_err(|e| Error::Parse(e.to_string()))?;
    write_json(&value, a.out.as_deref())?;
    if let Some(out) = &a.out {
        let path = sibling_csv(out);
        write_samples(&net, &lo, &hi, a.samples, a.seed.wrapping_add(2), &path)?;
    }
    Ok(if results.iter().all(|r| r.rho_star.is_some()) {
        Outcome::Certified
    } else {
        Outcome::NotCertified
    })
}

fn write_samples(
    net: &Network,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = (0..net.input_dim())
        .map(|i| format!("x{i}"))
        .chain((0..net.output_dim()).map(|i| format!("y{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(|e| io_err(path, e))?;
    for x in sample_box(lo, hi, n, &mut rng) {
        let y = net.eval(&x)?;
        let row: Vec<String> = x.iter().chain(y.iter()).map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn sparsity(a: &SparsityArgs) -> Result<Outcome> {
    let profile = match &a.net {
        Some(path) => load_network(path)?.profile(),
        None => DimProfile::new(a.dims.clone(), a.out_dim)?,
    };
    let beta = check_beta(a.beta, &profile)?;
    let p = clique_count(&profile, beta)?;
    let cliques = theorem1_cliques(&profile, beta)?;
    let doubles = (1..=p)
        .map(|k| {
            let (d1, d2) = double_cliques(&profile, beta, k, p)?;
            let c = &cliques.cliques[k - 1];
            Ok(json!([
                d1.iter().map(|&i| c[i]).collect::<Vec<_>>(),
                d2.iter().map(|&i| c[i]).collect::<Vec<_>>()
            ]))
        })
        .collect::<Result<Vec<_>>>()?;
    let value = json!({
        "layer_dims": profile.layer_dims(),
        "out_dim": profile.out_dim(),
        "beta": beta,
        "dim": profile.n_total() + 1,
        "p": p,
        "e_beta": pattern_e_beta(&profile, beta)?,
        "families": {
            "e_m": pattern_e_m(&profile, beta)?,
            "e_a": pattern_e_a(&profile),
            "e_1k": pattern_e_1k(&profile),
        },
        "f_beta": chordal_extension(&profile, beta)?,
        "cliques": cliques.cliques,
        "double_cliques": doubles,
    });
    write_json(&value, a.out.as_deref())?;
    Ok(Outcome::Certified)
}

pub fn gen(a: &GenArgs) -> Result<Outcome> {
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for &w in &a.widths {
        for &d in &a.depths {
            // One seed per cell so adding cells leaves the others unchanged.
            let seed = a.seed ^ ((w as u64) << 32) ^ d as u64;
            let net = random_network(w, d, a.in_dim, a.out_dim, a.sigma, seed)?;
            let path = a.out.join(format!("w{w}_d{d}.json"));
            save_network(&net, &path)?;
            eprintln!("{}", path.display());
        }
    }
    Ok(Outcome::Certified)
}

pub fn export(a: &ExportArgs) -> Result<Outcome> {
    let (req, _) = request(&a.problem, AdmmOptions::default())?;
    let problem = build_request_problem(&req)?;
    export_sdpa(&problem, &a.out)?;
    eprintln!(
        "{}: {} blocks, {} multipliers",
        a.out.display(),
        problem.blocks().len(),
        problem.zmap().num_params()
    );
    Ok(Outcome::Certified)
}
