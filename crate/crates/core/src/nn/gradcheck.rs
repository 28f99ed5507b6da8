use serde::Serialize;

use super::{softmax_cross_entropy, Mode, Model, Scalar, Tensor, Trace};
use crate::error::Result;

/// Perturbations this close to a ReLU kink are not compared.
pub const KINK_RADIUS: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±h or ±[`KINK_RADIUS`] perturbation flips some ReLU.
    pub excluded: usize,
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn relu_pattern(trace: &Trace) -> Vec<bool> {
    trace.pre_relu.iter().flat_map(|t| t.data().iter().map(|&v| v > 0.0)).collect()
}

/// Central-difference check of every trainable parameter and every input
/// coordinate against the analytic gradient of the mean cross-entropy.
///
/// Runs in `mode` without touching running statistics. Coordinates that lie
/// within [`KINK_RADIUS`] of a ReLU kink are counted as excluded.
pub fn gradient_check(model: &Model, input: &Tensor, labels: &[usize], h: f64, mode: Mode) -> Result<GradCheckReport> {
    let mut work = model.clone();
    let base = work.forward_pure(input, mode)?;
    let (_, grad_logits) = softmax_cross_entropy(&base.logits, labels)?;
    let grad_input = work.backward(&base, &grad_logits)?;
    let pattern = relu_pattern(&base);
    let step = h as Scalar;
    let radius = KINK_RADIUS as Scalar;

    let eval = |m: &Model, x: &Tensor| -> Result<(f64, bool)> {
        let t = m.forward_pure(x, mode)?;
        let (loss, _) = softmax_cross_entropy(&t.logits, labels)?;
        Ok((loss as f64, relu_pattern(&t) == pattern))
    };
    let same = |m: &Model, x: &Tensor| -> Result<bool> { Ok(relu_pattern(&m.forward_pure(x, mode)?) == pattern) };

    let mut groups = Vec::new();
    for group in work.param_groups() {
        let analytic = work.grad(group).to_vec();
        let mut err = GroupError { name: group.name(), checked: 0, excluded: 0, max_rel_error: 0.0, worst: None };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work.param(group)[j];
            work.param_mut(group)[j] = orig + step;
            let (up, same_up) = eval(&work, input)?;
            work.param_mut(group)[j] = orig - step;
            let (down, same_down) = eval(&work, input)?;
            let mut smooth = same_up && same_down;
            if smooth && radius > step {
                work.param_mut(group)[j] = orig + radius;
                smooth = same(&work, input)?;
                work.param_mut(group)[j] = orig - radius;
                smooth = smooth && same(&work, input)?;
            }
            work.param_mut(group)[j] = orig;
            record(&mut err, j, a as f64, (up - down) / (2.0 * h), smooth);
        }
        groups.push(err);
    }

    let mut err = GroupError { name: "input".into(), checked: 0, excluded: 0, max_rel_error: 0.0, worst: None };
    let mut x = input.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + step;
        let (up, same_up) = eval(&work, &x)?;
        x.data_mut()[j] = orig - step;
        let (down, same_down) = eval(&work, &x)?;
        let mut smooth = same_up && same_down;
        if smooth && radius > step {
            x.data_mut()[j] = orig + radius;
            smooth = same(&work, &x)?;
            x.data_mut()[j] = orig - radius;
            smooth = smooth && same(&work, &x)?;
        }
        x.data_mut()[j] = orig;
        record(&mut err, j, grad_input.data()[j] as f64, (up - down) / (2.0 * h), smooth);
    }
    groups.push(err);

    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { step: h, groups, max_rel_error })
}

fn record(err: &mut GroupError, j: usize, analytic: f64, numeric: f64, smooth: bool) {
    if !smooth {
        err.excluded += 1;
        return;
    }
    err.checked += 1;
    let e = relative_error(analytic, numeric);
    if err.worst.is_none() || e > err.max_rel_error {
        err.max_rel_error = e;
        err.worst = Some((j, analytic, numeric));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;
    use rand::Rng;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-10) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn small_net_passes_in_train_and_eval_mode() {
        let mut m = Model::new(Arch::Small, 16, 3).unwrap();
        m.init_params(1.0, 21);
        let mut rng = crate::rng::stream(crate::rng::Domain::Check, 21, 0);
        for b in &mut m.blocks {
            for g in &mut b.bn.gamma {
                *g = rng.random_range(0.5..1.5);
            }
            for v in &mut b.bn.beta {
                *v = rng.random_range(-0.3..0.3);
            }
            for v in &mut b.bn.running_mean {
                *v = rng.random_range(-0.2..0.2);
            }
            // trained nets have running variances well below the init value of 1
            for v in &mut b.bn.running_var {
                *v = rng.random_range(0.02..0.2);
            }
        }
        let x = Tensor::from_vec(&[4, 1, 16, 16], (0..1024).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let report = gradient_check(&m, &x, &[0, 1, 2, 0], 1e-5, mode).unwrap();
            assert!(report.passes(1e-5), "{mode:?}: {report:#?}");
            assert!(report.groups.iter().all(|g| g.checked > 0));
        }
    }
}
