//! Desk-scale training and evaluation lab for teacher-aligned image
//! tokenizers.
//!
//! The crate bundles: a procedural attribute-labelled dataset, frozen
//! patch-feature teachers, a convolutional VAE with a noise-injected
//! alignment objective mediated by a transformer mapper, a class-conditional
//! latent flow model with ODE/SDE samplers, and a latent-space evaluation
//! suite (linear probes, density uniformity, mixture discrimination,
//! Frechet-style distances, pixel metrics, correlation analysis), all tied
//! together by a manifest-driven experiment runner.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod graph;
pub mod mapper;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod svtf;
pub mod synthdata;
pub mod teacher;
pub mod vae;

pub use error::{Error, Result};

use std::sync::Once;

/// CLI entry point; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::main_with_args(std::env::args_os())
}

static THREAD_INIT: Once = Once::new();

/// Builds the global rayon pool, honoring `SENDVAE_NUM_THREADS`.
///
/// Output stays deterministic regardless of thread count: parallel kernels
/// split work into fixed chunks.
pub fn init_threads() {
    THREAD_INIT.call_once(|| {
        if let Ok(v) = std::env::var("SENDVAE_NUM_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
