use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule at ReLU sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    /// Exact adjoint: pass where the input was positive.
    Plain,
    /// Guided backpropagation: additionally drop negative upstream signal.
    Guided,
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

fn backward_with(grad_out: &Tensor, input: &Tensor, pass: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "relu grad {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| pass(g, x))
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Gradient flows where `input > 0`; the derivative at exactly 0 is 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    backward_with(grad_out, input, |g, x| if x > 0.0 { g } else { 0.0 })
}

pub fn relu_guided_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    backward_with(grad_out, input, |g, x| if x > 0.0 && g > 0.0 { g } else { 0.0 })
}

pub(crate) fn relu_backward_rule(grad_out: &Tensor, input: &Tensor, rule: ReluRule) -> Result<Tensor> {
    match rule {
        ReluRule::Plain => relu_backward(grad_out, input),
        ReluRule::Guided => relu_guided_backward(grad_out, input),
    }
}
