//! Problem builders shared by the benchmarks.

use chordal_verify::admm::{equilibrate, AdmmState, KktCache};
use chordal_verify::nnmodel::{random_network, SigmaMode};
use chordal_verify::qcbuild::safety_l2gain;
use chordal_verify::verify::build_request_problem;
use chordal_verify::{AdmmOptions, InputSpec, Mode, Network, SdpProblem, VerifyRequest};

/// Random relu net with two inputs and outputs, `depth` hidden layers.
pub fn bench_network(width: usize, depth: usize, seed: u64) -> Network {
    random_network(width, depth, 2, 2, SigmaMode::Scalability, seed).expect("valid grid cell")
}

/// L2-gain request over `[-1, 1]^2`.
pub fn bench_request(net: &Network, beta: usize, mode: Mode) -> VerifyRequest {
    VerifyRequest {
        network: net.clone(),
        input: InputSpec::uniform_box(2, -1.0, 1.0).expect("valid box"),
        safety: safety_l2gain(10.0, 2, 2).expect("valid spec"),
        beta,
        mode,
        use_adjacent: false,
        options: AdmmOptions::default(),
    }
}

/// Equilibrated problem, its cache and a zero state, ready for `admm::step`.
pub fn iteration_setup(
    width: usize,
    depth: usize,
    beta: usize,
    mode: Mode,
) -> (SdpProblem, KktCache, AdmmState) {
    let net = bench_network(width, depth, 0);
    let problem = build_request_problem(&bench_request(&net, beta, mode)).expect("problem builds");
    let (problem, _) = equilibrate(&problem).expect("problem scales");
    let opts = AdmmOptions::default();
    let cache =
        KktCache::new(&problem, opts.rho, opts.gamma_update, opts.reg).expect("system factors");
    let state = AdmmState::zeros(&problem, &cache);
    (problem, cache, state)
}
