//! Style-transfer data augmentation.
//!
//! Synthesizes "domain-noised" versions of source images by optimizing
//! pixels against Gram-matrix style and feature-space content losses, mixes
//! them into training sets at a fixed replacement ratio, and measures the
//! effect with a small classifier over repeated seeded runs.

pub mod error;
pub mod experiment;
pub mod harness;
pub mod imageio;
pub mod layers;
pub mod losses;
pub mod network;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod transfer;
pub mod weights;

pub use error::{Error, Result};
pub use network::{ActivationSet, Network, NetworkSpec};
pub use tensor::Tensor;
pub use transfer::{TransferConfig, TransferResult};
pub use weights::WeightStore;
