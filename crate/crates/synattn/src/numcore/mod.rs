//! Dense-tensor numeric core: f64 tensors, a reverse-mode tape, finite
//! difference verification, and the checkpoint format.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use params::{CheckpointError, ParamSet, ParamVars, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::{NumError, Tensor};
