//! Desk-scale video anomaly detection for ego-view driving.
//!
//! The pipeline learns normality from synthetic driving clips in two stages —
//! optical-flow reconstruction through a memory-augmented autoencoder and
//! flow-guided future-frame prediction through a conditional VAE — then fuses
//! the two error sources into frame-wise and localized pixel-wise anomaly
//! scores and evaluates them with AUROC / FPR95 / IoU.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod cvae;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod flow;
pub mod image;
pub mod memae;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod scenegen;
pub mod scoring;
pub mod stc;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError, VadError};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
