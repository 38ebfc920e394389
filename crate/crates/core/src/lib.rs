//! Neural network verification with chordally decomposed semidefinite programs.
//!
//! The pipeline is: load or generate a [`Network`], describe the admissible
//! inputs ([`InputSpec`]) and the output property ([`SafetyMatrix`]), assemble
//! the affine matrix map `gamma -> Z(gamma)` with [`assemble_z`], pick a
//! decomposition with [`build_problem`] and hand it to [`admm::solve`].
//! [`verify`] wraps these steps for safety certification and reachability.

pub mod admm;
pub mod chordal;
pub mod error;
pub mod linalg;
pub mod nnmodel;
pub mod qcbuild;
pub mod sdpcore;
pub mod verify;

pub use admm::{AdmmOptions, Solution, Status};
pub use chordal::{CliqueSet, DimProfile, EdgeSet};
pub use error::{Error, Result};
pub use nnmodel::{Activation, LayerBounds, Network};
pub use qcbuild::{assemble_z, AffineMatrixMap, InputSpec, QcConfig, SafetyMatrix};
pub use sdpcore::{build_problem, Mode, SdpProblem};
pub use verify::{ReachResult, VerifyRequest};
