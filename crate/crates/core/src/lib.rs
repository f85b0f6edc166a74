//! Split learning: train one network across a client and a server that only
//! exchange boundary activations and gradients.
//!
//! Segments without labels are trained with an auxiliary target
//! `ĉ = c + dL/dc` under a residual-sum-of-squares loss, which reproduces the
//! unsplit gradient exactly; see [`bridge`].

pub mod bridge;
pub mod error;
pub mod exec;
pub mod harness;
pub mod layer;
pub mod loss;
pub mod plan;
pub mod runtime;
pub mod segment;
pub mod tensor;
pub mod transport;
pub mod wire;

pub use bridge::{auxiliary_backward, make_auxiliary_target, AuxReduction, AuxiliaryTarget, BoundaryGradient};
pub use error::{Error, Result};
pub use layer::{Activation, LayerParams, LayerSpec};
pub use loss::LossKind;
pub use plan::{SplitMode, SplitPlan, ValidatedPlan};
pub use segment::{ForwardCache, Gradients, HyperParams, Role, Segment};
pub use tensor::Tensor;
pub use transport::{LinkCounters, TcpTransport, Transport};
