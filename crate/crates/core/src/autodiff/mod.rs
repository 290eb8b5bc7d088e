//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] is built fresh for every training step: leaves are registered
//! with [`Tape::param`] (trainable) or [`Tape::constant`], each op appends a
//! node holding its forward value, and [`Tape::backward`] walks the nodes in
//! reverse recording order. Broadcasting is limited to the row ops
//! (`add_row`, `mul_row`), which apply a vector over the leading dimensions.

pub(crate) mod kernels;
mod tape;
mod tensor;

pub use kernels::LAYERNORM_EPS;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn finite_difference(
    x: &Tensor,
    eps: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}
