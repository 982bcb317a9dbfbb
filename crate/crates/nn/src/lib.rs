//! Minimal reverse-mode autodiff tape plus the layers and optimizer used by
//! the spectrogram-generation models in this workspace.
//!
//! The distinguishing feature is higher-order differentiation: backward rules
//! are built from the same tape primitives they differentiate, so expressions
//! containing gradients (e.g. a gradient penalty on a critic's input
//! gradient) can themselves be differentiated for training.

pub mod blob;
pub mod conv;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use blob::{read_blob, write_blob};
pub use conv::{ConvGeom, GatherMap};
pub use layers::{
    apply_bn_updates, conv2d, global_avg_pool, max_pool2d, one_hot, softmax_cross_entropy,
    BatchNorm2d, BoundVars, Conv2d, Embedding, Forward, Init, Linear, VarStore,
};
pub use optim::{Adam, GradMap};
pub use rng::{derive_seed, seeded_rng};
pub use scalar::Scalar;
pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors from checkpoint/blob I/O.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}
