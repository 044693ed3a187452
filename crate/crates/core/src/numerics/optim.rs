use super::tensor::{Tensor, TensorError};

/// Named trainable tensor. Names are unique within a model and double as
/// checkpoint keys.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter { name: name.into(), tensor }
    }

    /// Fan-in-scaled uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Parameter, TensorError> {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        Ok(Parameter::new(name, Tensor::leaf(shape, values)?))
    }

    /// Zero-initialized parameter (biases, gates).
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Result<Parameter, TensorError> {
        Ok(Parameter::new(name, Tensor::leaf(shape, vec![0.0; shape.iter().product()])?))
    }
}

/// Plain stochastic gradient descent: p <- p - lr * g, grads zeroed after
/// the step.
pub struct Sgd {
    pub learning_rate: f64,
    pub step_count: u64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Sgd {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Sgd { learning_rate, step_count: 0 }
    }

    pub fn step(&mut self, params: &[Parameter]) -> Result<(), TensorError> {
        for p in params {
            let grad = p.tensor.grad().ok_or_else(|| TensorError::MissingGrad {
                name: p.name.clone(),
            })?;
            let mut updated = p.tensor.to_vec();
            for (v, g) in updated.iter_mut().zip(&grad) {
                *v -= self.learning_rate * g;
            }
            p.tensor.set_values(&updated)?;
            p.tensor.zero_grad();
        }
        self.step_count += 1;
        Ok(())
    }

    pub fn zero_grads(&self, params: &[Parameter]) {
        for p in params {
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_update() {
        let p = Parameter::new("w", Tensor::leaf(&[1], vec![1.0]).unwrap());
        p.tensor.accumulate_grad(&[2.0]);
        Sgd::new(0.1).step(std::slice::from_ref(&p)).unwrap();
        assert!((p.tensor.item() - 0.8).abs() < 1e-15);
        assert!(p.tensor.grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let p = Parameter::new("w", Tensor::leaf(&[1], vec![0.7]).unwrap());
        p.tensor.accumulate_grad(&[0.0]);
        Sgd::new(0.5).step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.tensor.item(), 0.7);
    }

    #[test]
    fn quadratic_converges_in_two_steps() {
        // loss = p^2, g = 2p, lr = 0.5: 1 -> 0 -> 0
        let p = Parameter::new("w", Tensor::leaf(&[1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.5);
        for _ in 0..2 {
            let loss = p.tensor.square().unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            opt.step(std::slice::from_ref(&p)).unwrap();
        }
        assert_eq!(p.tensor.item(), 0.0);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let p = Parameter::new("encoder.w", Tensor::leaf(&[1], vec![1.0]).unwrap());
        let err = Sgd::new(0.1).step(std::slice::from_ref(&p)).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
    }
}
