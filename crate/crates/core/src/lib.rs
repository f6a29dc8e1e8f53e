//! Conditional optimal-transport flow matching in a linear latent space,
//! with classifier-free guidance and Euler sampling.
//!
//! The pieces, bottom-up:
//!
//! - [`numerics`]: dense `f64` vectors/matrices and a counter-based RNG.
//! - [`datasets`]: synthetic class-conditional data.
//! - [`fm_path`]: the conditional OT path and its velocity target.
//! - [`vector_field`]: the conditioned MLP velocity field and its gradients.
//! - [`trainer`]: AdamW training with condition dropout; loss-floor oracle.
//! - [`sampler`]: guided Euler/midpoint integration.
//! - [`latent_codec`] and [`pipeline`]: data lift and linear autoencoder.
//! - [`evaluation`]: Fréchet distance, mode accuracy, field oracles, sweeps.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod fm_path;
pub mod gradcheck;
pub mod latent_codec;
pub mod numerics;
pub mod pipeline;
pub mod sampler;
pub mod trainer;
pub mod vector_field;

pub use datasets::{default_spec, ConditionId, DatasetKind, DatasetSpec};
pub use error::{Error, Result};
pub use evaluation::{GaussianFit, MetricReport};
pub use fm_path::{PathConfig, PathSample};
pub use latent_codec::{CodecConfig, CodecMode, DataLift, LatentCodec};
pub use numerics::{DenseMat, DenseVec, RngStream};
pub use pipeline::Pipeline;
pub use sampler::{GuidanceConfig, Scheme, SolverConfig, Trajectory};
pub use trainer::{AdamWState, TrainConfig, Trainer};
pub use vector_field::{GradientBundle, NetConfig, VectorFieldNet};
