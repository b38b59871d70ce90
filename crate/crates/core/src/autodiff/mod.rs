//! Minimal reverse-mode automatic differentiation over a dynamically built
//! computation graph: dense tensors, a tape of recorded ops, named parameter
//! storage with Adam state, seeded MLP construction, and a finite-difference
//! checking harness.

mod gradcheck;
mod mlp;
mod params;
mod tape;
pub(crate) mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckEntry, GradCheckReport};
pub use mlp::{Activation, MlpSpec};
pub(crate) use mlp::gaussian;
pub use params::{adam_step, AdamConfig, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{wrap_angle, Tensor};
