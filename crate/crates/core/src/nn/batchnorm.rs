use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Vec<Scalar>,
    pub beta: Vec<Scalar>,
    pub running_mean: Vec<Scalar>,
    pub running_var: Vec<Scalar>,
    /// Weight of the new batch statistic in the running average.
    pub momentum: Scalar,
    pub eps: Scalar,
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mode: Mode,
    pub x_hat: Tensor,
    /// `1/sqrt(var + eps)` per channel, batch variance in train mode and
    /// running variance in eval mode.
    pub inv_std: Vec<Scalar>,
}

/// Batch statistics from a train-mode pass. `var` is unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Scalar>,
    pub var: Vec<Scalar>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Pure forward pass. In train mode the returned statistics have not yet
    /// been folded into the running averages; see [`Self::update_running`].
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, BnCache, Option<BatchStats>)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.channels() {
            return Err(Error::Shape(format!("batch norm over {} channels got {c}", self.channels())));
        }
        let plane = h * w;
        let m = (n * plane) as Scalar;
        let x = input.data();
        let (mean, inv_std, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Shape("train-mode batch norm needs a batch of at least 2".into()));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x[(b * c + ch) * plane..][..plane].iter().sum::<Scalar>();
                    }
                    mean[ch] = s / m;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += x[(b * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<Scalar>();
                    }
                    var[ch] = q / m;
                }
                let inv_std: Vec<Scalar> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let unbiased = var.iter().map(|v| v * m / (m - 1.0).max(1.0)).collect();
                (mean.clone(), inv_std, Some(BatchStats { mean, var: unbiased }))
            }
            Mode::Eval => {
                let inv_std = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                (self.running_mean.clone(), inv_std, None)
            }
        };

        let mut x_hat = Tensor::zeros(input.shape());
        let mut out = Tensor::zeros(input.shape());
        {
            let xh = x_hat.data_mut();
            let o = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        xh[i] = (x[i] - mean[ch]) * inv_std[ch];
                        o[i] = self.gamma[ch] * xh[i] + self.beta[ch];
                    }
                }
            }
        }
        Ok((out, BnCache { mode, x_hat, inv_std }, stats))
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Train-mode forward that also updates the running statistics.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, BnCache)> {
        let (out, cache, stats) = self.forward(input, Mode::Train)?;
        self.update_running(stats.as_ref().expect("train mode yields stats"));
        Ok((out, cache))
    }

    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, Mode::Eval)?.0)
    }
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
///
/// Train mode differentiates through the batch statistics; eval mode treats
/// the normalization as the fixed affine map it is.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    cache: Option<&BnCache>,
    gamma: &[Scalar],
) -> Result<(Tensor, Vec<Scalar>, Vec<Scalar>)> {
    let cache = cache.ok_or_else(|| Error::MissingCache("batch norm backward without a forward pass".into()))?;
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::Shape(format!(
            "batch norm grad {:?} vs cached {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let (n, c, h, w) = grad_out.dims4()?;
    if gamma.len() != c {
        return Err(Error::Shape(format!("gamma has {} entries for {c} channels", gamma.len())));
    }
    let plane = h * w;
    let m = (n * plane) as Scalar;
    let dy = grad_out.data();
    let xh = cache.x_hat.data();

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                grad_beta[ch] += dy[i];
                grad_gamma[ch] += dy[i] * xh[i];
            }
        }
    }

    let mut grad_in = Tensor::zeros(grad_out.shape());
    let gi = grad_in.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let sum_dy = grad_beta[ch];
                    let sum_dy_xh = grad_gamma[ch];
                    for i in off..off + plane {
                        gi[i] = scale / m * (m * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                    }
                }
                Mode::Eval => {
                    for i in off..off + plane {
                        gi[i] = scale * dy[i];
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_gamma, grad_beta))
}
