//! Training harness for flow-based sequence autoencoders: run configuration,
//! Adam optimization with checkpoint/resume, evaluation, sampling, and plot
//! emission. The numerical core lives in `rnf-core`; this crate only
//! orchestrates it and talks to the filesystem.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod plots;
pub mod sample;
pub mod train;

use std::fmt;

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rnf_core::{CoreError, Tensor};

/// Harness-level error. The variant decides the process exit code: config
/// problems exit 2, numerical aborts exit 3, everything else 1.
#[derive(Debug)]
pub enum HarnessError {
    /// Bad or inconsistent run configuration (unknown key, unreadable value,
    /// missing artifact, checkpoint/config mismatch).
    Config(String),
    /// Training produced a non-finite quantity and stopped. The last good
    /// checkpoint on disk is left untouched.
    Numerical(String),
    /// An unexpected failure inside the numerical core (shape errors and the
    /// like indicate a bug rather than a recoverable condition).
    Core(CoreError),
    Io(std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(msg) => write!(f, "configuration error: {msg}"),
            HarnessError::Numerical(msg) => write!(f, "numerical abort: {msg}"),
            HarnessError::Core(e) => write!(f, "core error: {e}"),
            HarnessError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. }
            | CoreError::SingularFlow { .. }
            | CoreError::DegenerateDirection { .. } => HarnessError::Numerical(e.to_string()),
            CoreError::Io(io) => HarnessError::Io(io),
            other => HarnessError::Core(other),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Mix a base seed with two role tags into an independent stream seed
/// (splitmix64 finalizer, applied twice so close tags decorrelate).
pub fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    fn split(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^ (x >> 31)
    }
    split(split(seed ^ split(tag)) ^ split(index))
}

/// Draw a `rows x cols` matrix of standard normals in row-major order.
pub fn standard_normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data by construction")
}
