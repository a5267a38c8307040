//! Dense tensors, a reverse-mode tape over them, and the finite-difference
//! oracle every other module is verified against.
//!
//! Everything runs single-threaded in `f64`, so identical inputs give
//! bitwise-identical outputs.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradReport, DEFAULT_EPS, DEFAULT_TOLERANCE};
pub use graph::{concat_rows, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Differentiable primitives the tape provides, by name.
pub fn required_primitives() -> &'static [&'static str] {
    &[
        "matmul",
        "bmm",
        "conv2d",
        "conv_transpose2d",
        "add",
        "sub",
        "mul",
        "affine",
        "add_const",
        "mul_const",
        "add_bias",
        "add_channel_bias",
        "layer_norm",
        "softmax",
        "gelu",
        "tanh",
        "sigmoid",
        "ln",
        "clamp",
        "sum",
        "mean",
        "mean_tokens",
        "mse",
        "gather_rows",
        "concat_rows",
        "permute",
        "reshape",
        "cross_entropy",
    ]
}

/// Mean squared error between two vars of equal shape.
pub fn mse<'g>(a: Var<'g>, b: Var<'g>) -> crate::Result<Var<'g>> {
    Ok(a.sub(b)?.square().mean())
}
