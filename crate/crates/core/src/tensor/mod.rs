//! Dense `f64` tensors, a reverse-mode differentiation tape and RMSprop.

mod array;
pub mod kernels;
mod optim;
mod tape;

pub use array::{Tensor, Var};
pub use optim::{rmsprop_update, RmsProp};
pub use tape::{BatchNormConfig, Gradients, Mode, Tape};

pub(crate) use tape::sq_dist;
