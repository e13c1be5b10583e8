//! Learnable tile-level hybrid sparsity.
//!
//! Each weight matrix is split into tiles that are either kept dense or
//! pruned to a 2:4 pattern. Tile and pattern choices are relaxed with
//! Gumbel-Softmax and learned against a frozen model, then hardened and
//! stored in a compressed hybrid format that a tiled kernel executes.

pub mod autodiff;
mod codec;
pub mod error;
pub mod hybrid;
pub mod lm;
pub mod mask;
pub mod oneshot;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
