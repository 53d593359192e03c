//! Dense tensors, a reverse-mode tape, named parameters, and the
//! finite-difference oracle used to validate every gradient rule.

pub mod fd;
pub mod store;
pub mod tape;
pub mod tensor;

pub use fd::{finite_difference_grad, relative_error};
pub use store::{Param, ParameterStore};
pub use tape::{NodeId, Tape, LOG_CLAMP};
pub use tensor::{mm_nn, mm_nt, mm_tn, sq_dist, Tensor};
