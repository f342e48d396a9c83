//! Neural-network substrate: dense tensors, reverse-mode autodiff, and the
//! attention/latent primitives the forecasting model is assembled from.

pub mod attention;
pub mod encoding;
pub mod gaussian;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use attention::{agent_aware_attention, build_agent_mask, causal_additive_mask, AgentMask, AttentionHead};
pub use encoding::temporal_encoding;
pub use gaussian::{gaussian_kl, reparameterize, standard_kl, GaussianParams};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, matmul_nt, matmul_tn, real, Real, Tensor};

use thiserror::Error;

/// Errors raised by the network primitives on malformed inputs.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("{context}: expected shape {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("model width {dim} is not divisible by {heads} attention heads")]
    Heads { dim: usize, heads: usize },
    #[error("{0} must be non-empty")]
    Empty(&'static str),
}
