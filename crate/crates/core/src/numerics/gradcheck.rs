//! Central finite-difference gradient verification.
//!
//! The numerical side perturbs parameter values in place and re-runs the
//! forward function, so it is completely independent of the reverse-mode
//! path it checks.

use super::optim::Parameter;
use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Guarded relative error: small gradients are compared absolutely.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compare reverse-mode gradients of `model_fn` against central differences
/// with step `h` for every parameter. `model_fn` must be scalar-valued and
/// deterministic; determinism is verified by a repeated evaluation.
pub fn grad_check<F>(
    mut model_fn: F,
    params: &[Parameter],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[Parameter]) -> Result<Tensor, TensorError>,
{
    let loss_a = model_fn(params)?;
    let loss_b = model_fn(params)?;
    if loss_a.item().to_bits() != loss_b.item().to_bits() {
        return Err(TensorError::NonDeterministic { a: loss_a.item(), b: loss_b.item() });
    }
    for p in params {
        p.tensor.zero_grad();
    }
    let loss = model_fn(params)?;
    loss.backward()?;
    let mut checks = Vec::with_capacity(params.len());
    for p in params {
        let autograd = p.tensor.grad().ok_or_else(|| TensorError::MissingGrad {
            name: p.name.clone(),
        })?;
        let mut worst = 0.0f64;
        for i in 0..p.tensor.len() {
            p.tensor.nudge(i, h);
            let up = model_fn(params)?.item();
            p.tensor.nudge(i, -2.0 * h);
            let down = model_fn(params)?.item();
            p.tensor.nudge(i, h);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(autograd[i], numeric));
        }
        checks.push(ParamCheck { name: p.name.clone(), max_rel_error: worst });
        p.tensor.zero_grad();
    }
    Ok(GradCheckReport { checks, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_passes() {
        let w = Parameter::new("w", Tensor::leaf(&[3, 2], vec![0.3, -0.5, 0.7, 0.1, -0.2, 0.9]).unwrap());
        let b = Parameter::new("b", Tensor::leaf(&[2], vec![0.05, -0.4]).unwrap());
        let x = Tensor::new(&[2, 3], vec![1.0, -0.3, 0.6, 0.2, 1.2, -0.8]).unwrap();
        let params = vec![w, b];
        let report = grad_check(
            |p| x.matmul(&p[0].tensor)?.bias_add(&p[1].tensor)?.square()?.sum_all(),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn softmax_ce_head_passes() {
        let w = Parameter::new("w", Tensor::leaf(&[3, 4], (0..12).map(|i| (i as f64 - 6.0) * 0.2).collect()).unwrap());
        let x = Tensor::new(&[2, 3], vec![0.4, -1.0, 0.9, 1.3, 0.2, -0.7]).unwrap();
        let params = vec![w];
        let report = grad_check(
            |p| x.matmul(&p[0].tensor)?.cross_entropy(&[1, 3], &[true, true]),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn corrupted_gradient_fails() {
        let w = Parameter::new("w", Tensor::leaf(&[2], vec![0.8, -1.1]).unwrap());
        let x = Tensor::new(&[2], vec![1.5, 2.5]).unwrap();
        let params = vec![w];
        // Scale the loss by 1.01 only for the analytic pass, corrupting the
        // recorded gradient relative to the unscaled numeric probe.
        let mut calls = 0u32;
        let report = grad_check(
            move |p| {
                calls += 1;
                let base = x.mul(&p[0].tensor)?.sum_all()?;
                if calls == 3 {
                    base.scale(1.01) // the backward pass happens on call 3
                } else {
                    Ok(base)
                }
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn nondeterministic_fn_rejected() {
        use std::cell::Cell;
        let w = Parameter::new("w", Tensor::leaf(&[1], vec![1.0]).unwrap());
        let params = vec![w];
        let flip = Cell::new(0.0);
        let err = grad_check(
            |p| {
                flip.set(flip.get() + 1.0);
                p[0].tensor.scale(flip.get())?.sum_all()
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic { .. }));
    }

    #[test]
    fn three_op_chain_matches_finite_differences() {
        let w = Parameter::new("w", Tensor::leaf(&[4], vec![0.3, -0.8, 1.2, 0.5]).unwrap());
        let params = vec![w];
        let report = grad_check(
            |p| p[0].tensor.tanh()?.square()?.sum_all(),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }
}
