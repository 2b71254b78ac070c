//! Simulation and analysis of federated learning with peer-to-peer averaging.
//!
//! Agents run local SGD, average parameters with their graph neighbors after
//! every step, and periodically synchronize through a server that polls a few
//! of them. The crate generates the communication graphs and the non-iid
//! regression workload, runs the algorithm and its FedAvg baseline, and checks
//! measured behavior against the convergence bound and its lemmas.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`graph`] | geographic and Erdős–Rényi graphs, Laplacian, connectivity |
//! | [`mixing`] | doubly stochastic weights, link failures, `λ̂₂` and `α` |
//! | [`problem`] | synthetic least squares, gradients, optimum, constants |
//! | [`algorithms`] | the training loop and its trace |
//! | [`theory`] | bound evaluation and empirical monitors |
//! | [`harness`] | experiment specs, orchestration, CSV output |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod error;
pub mod graph;
pub mod harness;
pub mod mixing;
pub mod problem;
pub mod rng;
pub mod theory;

pub use algorithms::{run, Algorithm, Mixing, RunConfig, RunTrace};
pub use error::{Error, Result};
pub use graph::{Graph, GraphKind};
pub use mixing::{MixingMatrix, MixingModel, SpectralReport, WeightRule};
pub use problem::{ProblemConstants, RegressionProblem};
pub use rng::{Stream, Streams};
pub use theory::{TheoryConstants, TheoryInputs};
