//! K-free community detection on node-attributed graphs.
//!
//! A two-layer attention autoencoder learns node embeddings by reconstructing
//! masked attributes. A graph-convolutional readout maps the same embeddings to
//! nonnegative community affiliations trained with a pairwise ranking loss
//! over observed edges. An L2,1 penalty on the readout's final weight drives
//! whole affiliation columns to zero, so the number of communities is found
//! during training instead of being supplied up front.
//!
//! Module map:
//!
//! * [`graph`]: attributed graphs, file I/O, adjacency normalization, planted
//!   partition generator.
//! * [`autodiff`]: dense/sparse kernels on a small reverse-mode tape, Adam,
//!   finite-difference gradient checks.
//! * [`model`]: attention encoder/decoder, affiliation readout, checkpoints.
//! * [`losses`]: scaled cosine error, BPR with negative sampling, group
//!   sparsity.
//! * [`training`]: the fit loop and unsupervised checkpoint selection.
//! * [`metrics`]: EDGE, NMI, modularity, Calinski-Harabasz.
//! * [`baselines`]: label propagation.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use graph::AttributedGraph;

/// Deterministic RNG used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a plain integer seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
