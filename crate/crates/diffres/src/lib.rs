//! Diffusion-augmented residual networks and the machinery around them.
//!
//! The crate is organized around a single idea: interleave the layers of a
//! residual network with discrete diffusion steps on a graph built over the
//! samples, so that features drift toward their neighbours while the network
//! trains. Modules:
//!
//! - [`points`]: point sets with optional labels, CSV in/out.
//! - [`graph`]: Gaussian-kernel weights, top-k sparsification, symmetric
//!   normalization, Laplacians, connected components.
//! - [`eigen`]: dense Jacobi eigendecomposition (the spectral workhorse).
//! - [`diffusion`]: the explicit diffusion scheme, stability guards, and the
//!   closed-form spectral solution used as a convergence oracle.
//! - [`resnet`]: residual blocks with diffusion stages, exact reverse-mode
//!   gradients, losses, SGD with momentum, and the training loop.
//! - [`fewshot`]: episodic evaluation — feature transforms, prototypes,
//!   label propagation, and the method ablation grid.
//! - [`theory`]: separation statistics, separating-flow constructions, and
//!   verifiable stability/separability claims.
//! - [`datasets`]: synthetic benchmark generators and graph-dataset loading.

pub mod datasets;
pub mod diffusion;
pub mod eigen;
pub mod error;
pub mod fewshot;
pub mod graph;
pub mod points;
pub mod resnet;
pub mod theory;

pub use error::{Error, Result};

/// Derives a child seed from a base seed and a stream index, so independent
/// runs (per split, per episode, per init) get decorrelated but reproducible
/// randomness. SplitMix64 finalizer.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
