//! Minimal learning substrate: tensors, a reverse-mode tape, MLPs, Adam.

mod gradcheck;
mod mlp;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{central_differences, finite_diff_check, max_relative_discrepancy};
pub use mlp::{mlp_forward, Activation, BoundMlp, Linear, Mlp};
pub use optim::{adam_step, multistep_lr, AdamState};
pub use tape::{swish, swish_scalar, Gradients, Tape, TapeStats, Var};
pub use tensor::DenseTensor;
