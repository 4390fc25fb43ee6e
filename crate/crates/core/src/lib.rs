//! Connectivity-regularized training and pruning for layered feed-forward
//! networks.
//!
//! The crate trains small dense networks under a differentiable connectivity
//! regularizer, scores parameters for pruning (magnitude, connectivity
//! saliency, channel flow, loss-aware one-shot), builds keep/drop masks,
//! fine-tunes the pruned models, and verifies the method's structural
//! properties against independent oracles.

pub mod autodiff;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod model_io;
pub mod network;
pub mod objective;
pub mod pruning;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::Mat;
pub use network::{Activation, LayeredNetwork, PruneMask, ScalingLayer};
