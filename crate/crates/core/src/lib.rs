//! Self-supervised discrete diffusion for combinatorial optimization problems
//! whose solutions are binary matrices over two item sets.
//!
//! The crate is `no_std` (with `alloc`) so that the algorithmic pieces can be
//! embedded anywhere; file formats, the CLI and wallclock measurement live in
//! the `icdc` companion crate.
//!
//! Module map:
//!  * [`problems`]: ATSP, PMSP and navigation instances, scoring and feasibility.
//!  * [`diffusion`]: the categorical corruption process and its posteriors.
//!  * [`tape`]: a small reverse-mode autodiff tape over dense matrices.
//!  * [`model`]: the bipartite problem encoder and the anisotropic GNN denoiser.
//!  * [`decoding`]: unconstrained and feasibility-enforced sampling.
//!  * [`training`]: replay buffer, cloning losses, REINFORCE improvement, training loop.
//!  * [`baselines`]: heuristics, metaheuristics and exact desk-scale oracles.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod baselines;
pub mod decoding;
pub mod diffusion;
mod error;
pub mod math;
pub mod matrix;
pub mod model;
pub mod problems;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use matrix::{Matrix, SolutionMatrix};
pub use problems::{Instance, Reward};

/// Deterministic random number generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
