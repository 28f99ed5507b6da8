use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const KERNEL_SIZE: usize = 3;

/// 3×3 convolution (cross-correlation) with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `Cout × Cin × 3 × 3`.
    pub weight: Tensor,
    pub bias: Vec<Scalar>,
    pub stride: usize,
    pub padding: usize,
    /// A bias directly followed by batch norm is cancelled by the mean
    /// subtraction; such biases are kept at zero and left out of training.
    pub bias_trainable: bool,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, KERNEL_SIZE, KERNEL_SIZE]),
            bias: vec![0.0; cout],
            stride,
            padding,
            bias_trainable: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d_forward(input, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn backward(&self, grad_out: &Tensor, input: &Tensor) -> Result<(Tensor, Tensor, Vec<Scalar>)> {
        conv2d_backward(grad_out, input, &self.weight, self.stride, self.padding)
    }
}

/// `floor((n + 2·padding − 3) / stride) + 1`, or `None` if the padded input
/// is smaller than the kernel.
pub fn output_extent(n: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || padded < KERNEL_SIZE {
        return None;
    }
    Some((padded - KERNEL_SIZE) / stride + 1)
}

/// Output indices `o` in `[lo, hi)` for which `o·stride + k − padding` is a
/// valid input index.
fn valid_outputs(out_len: usize, in_len: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    if in_len + padding < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + padding - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn geometry(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Geometry> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if kh != KERNEL_SIZE || kw != KERNEL_SIZE {
        return Err(Error::Shape(format!("kernel must be 3x3, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::Shape(format!("input has {cin} channels, kernel expects {wcin}")));
    }
    let (oh, ow) = match (output_extent(h, stride, padding), output_extent(w, stride, padding)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Shape(format!(
                "input {h}x{w} with padding {padding} stride {stride} yields no output"
            )))
        }
    };
    Ok(Geometry { n, cin, cout, h, w, oh, ow })
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &[Scalar],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = geometry(input, weight, stride, padding)?;
    if bias.len() != g.cout {
        return Err(Error::Shape(format!("bias length {} for {} output channels", bias.len(), g.cout)));
    }
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let x = input.data();
    let wt = weight.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ys: Vec<_> = (0..KERNEL_SIZE).map(|k| valid_outputs(g.oh, g.h, stride, padding, k)).collect();
    let xs: Vec<_> = (0..KERNEL_SIZE).map(|k| valid_outputs(g.ow, g.w, stride, padding, k)).collect();

    let o = out.data_mut();
    for b in 0..g.n {
        for co in 0..g.cout {
            let out_plane = &mut o[(b * g.cout + co) * plane_out..][..plane_out];
            out_plane.fill(bias[co]);
            for ci in 0..g.cin {
                let in_plane = &x[(b * g.cin + ci) * plane_in..][..plane_in];
                let kernel = &wt[(co * g.cin + ci) * 9..][..9];
                for ky in 0..KERNEL_SIZE {
                    let (oy0, oy1) = ys[ky];
                    for kx in 0..KERNEL_SIZE {
                        let (ox0, ox1) = xs[kx];
                        let wv = kernel[ky * KERNEL_SIZE + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let in_row = &in_plane[iy * g.w..][..g.w];
                            let out_row = &mut out_plane[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * in_row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Vec<Scalar>)> {
    let g = geometry(input, weight, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = vec![0.0; g.cout];
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ys: Vec<_> = (0..KERNEL_SIZE).map(|k| valid_outputs(g.oh, g.h, stride, padding, k)).collect();
    let xs: Vec<_> = (0..KERNEL_SIZE).map(|k| valid_outputs(g.ow, g.w, stride, padding, k)).collect();

    let gi = grad_in.data_mut();
    let gw = grad_w.data_mut();
    for b in 0..g.n {
        for co in 0..g.cout {
            let go_plane = &go[(b * g.cout + co) * plane_out..][..plane_out];
            grad_b[co] += go_plane.iter().sum::<Scalar>();
            for ci in 0..g.cin {
                let in_off = (b * g.cin + ci) * plane_in;
                let k_off = (co * g.cin + ci) * 9;
                for ky in 0..KERNEL_SIZE {
                    let (oy0, oy1) = ys[ky];
                    for kx in 0..KERNEL_SIZE {
                        let (ox0, ox1) = xs[kx];
                        let wv = wt[k_off + ky * KERNEL_SIZE + kx];
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let row_off = in_off + iy * g.w;
                            let go_row = &go_plane[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - padding;
                                acc += go_row[ox] * x[row_off + ix];
                                gi[row_off + ix] += wv * go_row[ox];
                            }
                        }
                        gw[k_off + ky * KERNEL_SIZE + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct four-loop reference with explicit bounds checks.
    fn reference(input: &Tensor, weight: &Tensor, bias: &[Scalar], stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, w) = input.dims4().unwrap();
        let cout = weight.shape()[0];
        let oh = (h + 2 * pad - 3) / stride + 1;
        let ow = (w + 2 * pad - 3) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += weight.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * input.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let input = Tensor::from_vec(&[1, 1, 4, 5], (0..20).map(|v| v as Scalar * 0.5 - 3.0).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let out = conv2d_forward(&input, &k, &[0.0], 1, 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let input = Tensor::from_vec(&[2, 1, 4, 4], vec![1.5; 32]).unwrap();
        let out = conv2d_forward(&input, &Tensor::zeros(&[2, 1, 3, 3]), &[0.25, -2.0], 2, 1).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2, 2]);
        for (i, v) in out.data().iter().enumerate() {
            let co = (i / 4) % 2;
            assert_eq!(*v, [0.25, -2.0][co]);
        }
    }

    #[test]
    fn ramp_matches_reference() {
        let input = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as Scalar).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25, 3.0, 0.75, -2.0]).unwrap();
        let got = conv2d_forward(&input, &k, &[0.1], 1, 1).unwrap();
        let want = reference(&input, &k, &[0.1], 1, 1);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // hand value at (0,0): taps (1,1),(1,2),(2,1),(2,2) on pixels 0,1,4,5
        let expected = 0.1 + 1.5 * 0.0 + (-0.25) * 1.0 + 0.75 * 4.0 + (-2.0) * 5.0;
        assert!((got.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn random_shapes_match_reference() {
        let mut rng = crate::rng::stream(crate::rng::Domain::Check, 1, 0);
        for _ in 0..30 {
            let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let stride = rng.random_range(1..5);
            let pad = rng.random_range(0..3);
            if output_extent(h, stride, pad).is_none() || output_extent(w, stride, pad).is_none() {
                continue;
            }
            let input = Tensor::from_vec(&[n, cin, h, w], (0..n * cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let k = Tensor::from_vec(&[cout, cin, 3, 3], (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let bias: Vec<Scalar> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv2d_forward(&input, &k, &bias, stride, pad).unwrap();
            let want = reference(&input, &k, &bias, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::from_vec(&[1, 2, 5, 5], (0..50).map(|v| v as Scalar).collect()).unwrap();
        let k = Tensor::from_vec(&[3, 2, 3, 3], vec![0.3; 54]).unwrap();
        let (gi, gw, gb) = conv2d_backward(&Tensor::zeros(&[1, 3, 5, 5]), &input, &k, 1, 1).unwrap();
        assert!(gi.data().iter().chain(gw.data()).chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_grad_is_channel_sum() {
        let input = Tensor::zeros(&[2, 1, 4, 4]);
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        let go = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|v| v as Scalar * 0.1).collect()).unwrap();
        let (_, _, gb) = conv2d_backward(&go, &input, &k, 1, 1).unwrap();
        for (co, g) in gb.iter().enumerate() {
            let mut s = 0.0;
            for b in 0..2 {
                s += go.data()[(b * 2 + co) * 16..][..16].iter().sum::<Scalar>();
            }
            assert!((g - s).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_grads_match_finite_differences() {
        let mut rng = crate::rng::stream(crate::rng::Domain::Check, 2, 0);
        for &(stride, pad) in &[(1, 1), (4, 1), (2, 0)] {
            let input = Tensor::from_vec(&[2, 2, 9, 9], (0..324).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut k = Tensor::from_vec(&[2, 2, 3, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let bias = vec![0.1, -0.2];
            let out = conv2d_forward(&input, &k, &bias, stride, pad).unwrap();
            let probe: Vec<Scalar> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |k: &Tensor, x: &Tensor| -> Scalar {
                let o = conv2d_forward(x, k, &bias, stride, pad).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let go = Tensor::from_vec(out.shape(), probe.clone()).unwrap();
            let (gi, gw, _) = conv2d_backward(&go, &input, &k, stride, pad).unwrap();
            let h = 1e-5;
            for j in 0..k.len() {
                let orig = k.data()[j];
                k.data_mut()[j] = orig + h;
                let up = loss(&k, &input);
                k.data_mut()[j] = orig - h;
                let down = loss(&k, &input);
                k.data_mut()[j] = orig;
                let num = (up - down) / (2.0 * h);
                let a = gw.data()[j];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-8) < 1e-6, "w[{j}] {a} vs {num}");
            }
            let mut x = input.clone();
            for j in (0..x.len()).step_by(7) {
                let orig = x.data()[j];
                x.data_mut()[j] = orig + h;
                let up = loss(&k, &x);
                x.data_mut()[j] = orig - h;
                let down = loss(&k, &x);
                x.data_mut()[j] = orig;
                let num = (up - down) / (2.0 * h);
                let a = gi.data()[j];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-8) < 1e-6, "x[{j}] {a} vs {num}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(conv2d_forward(&input, &Tensor::zeros(&[1, 3, 3, 3]), &[0.0], 1, 1).is_err());
        assert!(conv2d_forward(&input, &Tensor::zeros(&[1, 2, 3, 3]), &[0.0, 0.0], 1, 1).is_err());
        assert!(conv2d_forward(&Tensor::zeros(&[1, 2, 1, 1]), &Tensor::zeros(&[1, 2, 3, 3]), &[0.0], 1, 0).is_err());
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(output_extent(128, 4, 1), Some(32));
        assert_eq!(output_extent(32, 1, 1), Some(32));
        assert_eq!(output_extent(32, 4, 1), Some(8));
        assert_eq!(output_extent(16, 4, 1), Some(4));
        assert_eq!(output_extent(1, 1, 0), None);
    }
}
