use std::path::PathBuf;
use std::process::ExitCode;

use chordal_verify::nnmodel::SigmaMode;
use chordal_verify::Mode;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Certify feedforward networks with chordally decomposed DeepSDP.
#[derive(Parser, Debug)]
#[command(name = "chordal-verify", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check one safety spec over an input box.
    Verify(VerifyArgs),
    /// Smallest certified output ellipsoid, one bisection per beta.
    Reach(ReachArgs),
    /// Dump the sparsity pattern, its chordal extension and the cliques.
    Sparsity(SparsityArgs),
    /// Write random networks for a grid of widths and depths.
    Gen(GenArgs),
    /// Write the problem in SDPA sparse format.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn on(self) -> bool {
        self == OnOff::On
    }
}

/// Network, input box and spec shared by `verify` and `export`.
#[derive(Args, Debug)]
struct ProblemArgs {
    #[arg(long)]
    net: PathBuf,
    /// Same bounds in every input coordinate.
    #[arg(long = "box", num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, required = true)]
    bounds: Vec<f64>,
    /// `l2gain:K`, or `ellipsoid:R` for a sampled ellipsoid of radius R.
    #[arg(long, default_value = "l2gain:1")]
    spec: String,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    beta: i64,
    #[arg(long, default_value = "chordal2", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, value_enum, default_value = "off")]
    adjacent: OnOff,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples for ellipsoid estimation.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// ADMM penalty.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// JSON result; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append a `net,beta,mode,iters,wall_time,status` row here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReachArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long = "box", num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, required = true)]
    bounds: Vec<f64>,
    /// Only `ellipsoid` is accepted; center and shape come from samples.
    #[arg(long, default_value = "ellipsoid")]
    spec: String,
    /// Comma-separated list, e.g. `0,1,2,3,4`.
    #[arg(
        long,
        default_value = "0",
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    beta: Vec<i64>,
    #[arg(long, default_value = "chordal2", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, value_enum, default_value = "on")]
    adjacent: OnOff,
    #[arg(long, default_value_t = 1e4)]
    rho: f64,
    #[arg(long, default_value_t = 3000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples for the ellipsoid estimate, the witness radius and the CSV.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// JSON results; the sampled points go next to it as `<stem>.samples.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. With more than one, beta values are solved
    /// independently instead of passing certificates forward.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct SparsityArgs {
    /// Hidden-state layer sizes `n_1,...,n_{K-1}` (first entry is the input).
    #[arg(
        long,
        value_delimiter = ',',
        conflicts_with = "net",
        required_unless_present = "net"
    )]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    out_dim: usize,
    /// Take the profile from a network file instead.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    beta: i64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    widths: Vec<usize>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "5,10,15,20,25,30,35,40,45,50"
    )]
    depths: Vec<usize>,
    #[arg(long, default_value = "scalability", value_parser = parse_sigma)]
    sigma: SigmaMode,
    #[arg(long, default_value_t = 2)]
    in_dim: usize,
    #[arg(long, default_value_t = 2)]
    out_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Destination `.dat-s` file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: chordal_verify::Error| e.to_string())
}

fn parse_sigma(s: &str) -> Result<SigmaMode, String> {
    s.parse().map_err(|e: chordal_verify::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHORDAL_VERIFY_LOG", "warn"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Verify(a) => commands::verify(&a),
        Command::Reach(a) => commands::reach(&a),
        Command::Sparsity(a) => commands::sparsity(&a),
        Command::Gen(a) => commands::gen(&a),
        Command::Export(a) => commands::export(&a),
    };
    match result {
        Ok(commands::Outcome::Certified) => ExitCode::SUCCESS,
        Ok(commands::Outcome::NotCertified) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
