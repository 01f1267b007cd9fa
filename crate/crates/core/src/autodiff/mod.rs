//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

pub mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, FdReport};
pub use ops::OpKind;
pub use tape::Tape;
