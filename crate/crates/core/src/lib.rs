//! Latent-space neural combinatorial optimization for routing problems.
//!
//! The crate is organised bottom-up:
//!
//! - [`problems`]: TSP/CVRP instances, feasibility, costs, generators and the
//!   dihedral augmentation.
//! - [`diffnum`]: a small dense-array tape with reverse-mode gradients.
//! - [`gradcheck`]: finite-difference checks of the reverse sweep.
//! - [`model`]: the instance-conditioned Gaussian latent encoder and the
//!   autoregressive attention decoder.
//! - [`training`]: weighted, entropy-regularised REINFORCE with Adam.
//! - [`inference`]: interacting Metropolis–Hastings over latent/solution pairs
//!   with stochastic-approximation updates of the decoder, plus the baseline
//!   methods it is compared against.
//! - [`oracle`]: brute-force references (exact optima, enumerated policies and
//!   targets, detailed balance, total variation) used by the test suites.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffnum;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod model;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use problems::{ProblemInstance, ProblemKind, Solution};
