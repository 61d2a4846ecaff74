//! A small laboratory for cross-lingual alignment in a toy decoder-only
//! transformer: synthetic multilingual worlds, alignment objectives,
//! activation steering, and the transfer-localization evaluation plane.

pub mod analysis;
pub mod error;
pub mod evalplane;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod steering;
pub mod svg;
pub mod worldgen;

pub use error::{Error, Result};
pub use model::{forward_with_trace, init_model, ActivationTrace, ModelConfig, Parameters, TokenId};
pub use steering::{SteerKind, SteeringPlan, SteeringVector};
