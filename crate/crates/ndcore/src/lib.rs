//! Minimal dense tensors (rank ≤ 4, `f32`/`f64`) with tape-based reverse-mode
//! automatic differentiation, sized for training small convolutional nets on
//! a CPU.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, ScalarFn, Stencil};
pub use graph::{Gradients, Graph, Var};
pub use ops::{BinaryOp, Divisor, ReduceOp};
pub use tensor::{DType, Scalar, Tensor, TensorMeta};
