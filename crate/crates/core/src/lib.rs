//! First-frame propagation toolkit.
//!
//! Adaptive spatio-temporal rotary embeddings, attention-head taxonomy and
//! identity-propagation self-distillation, built around a toy diffusion
//! transformer trained on synthetic video pairs with known ground truth.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod dit;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod latent;
pub mod losses;
pub mod optim;
pub mod predictor;
pub mod probe;
pub mod rng;
pub mod rope;
pub mod train;

pub use dit::{dit_forward, BlockTapSet, DitParams, ModelConfig, ModelParams, RopeRouting};
pub use error::{FfpError, Result};
pub use heads::{HeadKind, HeadPartition};
pub use latent::{assemble_conditioning, ConditioningPack, LatentShape, VideoLatent};
pub use rope::{PositionGrid, RopeCoefficients, RopeFrequencyConfig};
