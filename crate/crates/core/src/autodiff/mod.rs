//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Var`] is a
//! cheap handle to a recorded node. Binary operations broadcast with
//! trailing-dimension alignment (numpy rules) and return a
//! [`Error::Shape`](crate::Error::Shape) naming both shapes on mismatch.
//!
//! ```
//! use lflow::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = tape.leaf(Tensor::scalar(3.0));
//! let z = x.mul(y).unwrap();
//! let g = tape.backward(z).unwrap();
//! assert_eq!(g.wrt(x).item(), Some(3.0));
//! assert_eq!(g.wrt(y).item(), Some(2.0));
//! ```

mod conv;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheck};
pub use params::{BoundParams, ParamStore};
pub use tape::{ncp_log_jacobian, ncp_shift, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Periodic ("circular padding") 2D cross-correlation.
///
/// `input` is `[C_in, H, W]` or batched `[B, C_in, H, W]`, `kernel` is
/// `[C_out, C_in, k, k]` with odd `k`, `bias` is `[C_out]`. The output has
/// the same spatial size as the input:
///
/// `out[o, y, x] = bias[o] + sum kernel[o, i, ky, kx] * in[i, (y + ky - k/2) mod H, (x + kx - k/2) mod W]`.
///
/// Because the spatial size is preserved and weights do not depend on it,
/// the same kernels apply to any lattice volume.
pub fn conv2d_periodic<'t>(input: Var<'t>, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    input.conv2d_periodic(kernel, bias)
}
