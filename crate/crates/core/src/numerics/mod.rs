//! Dense tensors and the reverse-mode autodiff tape behind every forward pass
//! and loss gradient in the toolkit.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, OpTag, Var};
pub use kernels::{gelu, l2_normalize_rows, layer_norm, log_softmax_rows, matmul, matmul_nt, softmax_rows, transpose};
pub use tensor::{is_checked, set_checked, Tensor, MAX_RANK};
