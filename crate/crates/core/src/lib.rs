//! Weakly-supervised multi-label image classification with squeeze-and-excitation
//! transitions, a multi-map transfer layer and max-min spatial pooling, built on a
//! small reverse-mode autodiff tape.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Sizes the global worker pool. Only the first call in a process takes effect.
pub fn configure_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
