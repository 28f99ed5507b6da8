use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Scalar, Tensor)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let z = logits.data();
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &z[b * c..][..c];
        let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
        let sum: Scalar = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total += log_sum - row[label];
        for k in 0..c {
            let p = (row[k] - log_sum).exp();
            grad[b * c + k] = (p - if k == label { 1.0 } else { 0.0 }) / n as Scalar;
        }
    }
    Ok((total / n as Scalar, Tensor::from_vec(&[n, c], grad)?))
}
