//! Reverse-mode differentiation utilities: a scalar tape with checkpointed
//! composite operations, flat named parameter vectors, and small dense
//! networks with manual backprop.

pub mod mlp;
pub mod params;
pub mod tape;

pub use mlp::{record_mlp, Activation, MlpArch, MlpCache};
pub use params::{GradAccumulator, ParamVector};
pub use tape::{Tape, Var, VjpOp};
