use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b` over flattened features.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub weight: Tensor,
    pub bias: Vec<Scalar>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: vec![0.0; outputs],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// `input` is `N × in`; returns `N × out`.
pub fn linear_forward(input: &Tensor, layer: &Linear) -> Result<Tensor> {
    let (n, f) = input.dims2()?;
    let (o, wf) = layer.weight.dims2()?;
    if f != wf || layer.bias.len() != o {
        return Err(Error::Shape(format!("linear {o}x{wf} applied to {n}x{f}")));
    }
    let w = layer.weight.data();
    let x = input.data();
    let mut out = Vec::with_capacity(n * o);
    for b in 0..n {
        let row = &x[b * f..][..f];
        for k in 0..o {
            let dot: Scalar = w[k * f..][..f].iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(dot + layer.bias[k]);
        }
    }
    Tensor::from_vec(&[n, o], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(grad_out: &Tensor, input: &Tensor, layer: &Linear) -> Result<(Tensor, Tensor, Vec<Scalar>)> {
    let (n, f) = input.dims2()?;
    let (o, _) = layer.weight.dims2()?;
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape(format!("linear grad {:?}, expected [{n}, {o}]", grad_out.shape())));
    }
    let w = layer.weight.data();
    let x = input.data();
    let g = grad_out.data();
    let mut gi = vec![0.0; n * f];
    let mut gw = vec![0.0; o * f];
    let mut gb = vec![0.0; o];
    for b in 0..n {
        let row = &x[b * f..][..f];
        let gi_row = &mut gi[b * f..][..f];
        for k in 0..o {
            let gk = g[b * o + k];
            gb[k] += gk;
            let wk = &w[k * f..][..f];
            let gwk = &mut gw[k * f..][..f];
            for j in 0..f {
                gwk[j] += gk * row[j];
                gi_row[j] += gk * wk[j];
            }
        }
    }
    Ok((Tensor::from_vec(&[n, f], gi)?, Tensor::from_vec(&[o, f], gw)?, gb))
}
