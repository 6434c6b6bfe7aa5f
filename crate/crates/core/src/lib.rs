//! Metric learning with Euclidean margin softmax losses.
//!
//! The crate covers the whole pipeline for cross-domain (sketch/photo)
//! retrieval at toy scale:
//!
//! * [`losses`]: softmax, EMS, squared EMS, prototypical, A-Softmax and LMCL
//!   with analytic gradients, plus [`gradcheck`] to verify them.
//! * [`geometry`]: decision regions of the EMS classifier and the margin
//!   bounds that make every class compact relative to its neighbours.
//! * [`encoder`]: a small MLP whose hidden layers are gated by a conditional
//!   squeeze-excitation block fed with the domain bit.
//! * [`training`]: Adam with linear learning-rate decay over encoder and
//!   prototypes.
//! * [`hashing`]: an autoencoder over prototypes producing binary codes.
//! * [`retrieval`]: ranking, MAP, precision@k and distance diagnostics.
//! * [`dataset`]: synthetic two-domain data, zero-shot splits and the
//!   `EMB1` embedding file.

pub mod batch;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod hashing;
pub mod linalg;
pub mod losses;
pub mod retrieval;
pub mod training;

pub use batch::{Domain, EmbeddingBatch};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use losses::{
    AngularParams, AngularVariant, ClassifierWeights, Head, LossConfig, LossKind, LossResult,
    PrototypeSet,
};
