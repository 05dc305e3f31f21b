use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Bias-corrected Adam state for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with zero moments for parameters of the given sizes.
    pub fn new(sizes: &[usize], learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {learning_rate} must be positive")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        Ok(AdamState {
            step: 0,
            m: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
            v: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
            beta1,
            beta2,
            epsilon,
            learning_rate,
        })
    }

    /// Defaults: decay rates 0.9 / 0.999, epsilon 1e-8.
    pub fn with_defaults(sizes: &[usize], learning_rate: f64) -> Result<Self> {
        Self::new(sizes, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        let conv = |vs: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            vs.iter()
                .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect())
                .collect()
        };
        AdamState {
            step: self.step,
            m: conv(&self.m),
            v: conv(&self.v),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            learning_rate: self.learning_rate,
        }
    }

    /// One update using the gradient buffer of every parameter whose
    /// `trainable` flag is set. Frozen tensors and their moments are untouched.
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], trainable: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || trainable.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} (mask {})",
                self.m.len(),
                params.len(),
                trainable.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "parameter {i} has {} values, optimizer state has {}",
                    p.len(),
                    self.m[i].len()
                )));
            }
            if trainable[i] {
                if let Some(g) = p.grad() {
                    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "non-finite gradient in parameter {i} at index {j}"
                        )));
                    }
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.epsilon);

        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor<f64> {
        let mut t = Tensor::scalar(value);
        t.grad_mut()[0] = grad;
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(1.5, 0.0);
        let mut s = AdamState::<f64>::with_defaults(&[1], 0.001).unwrap();
        s.step(&mut [&mut p], &[true]).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0, 1.0);
        let mut s = AdamState::<f64>::with_defaults(&[1], 0.001).unwrap();
        s.step(&mut [&mut p], &[true]).unwrap();
        assert!((p.data()[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    /// Textbook scalar Adam, written without reference to the tensor code.
    fn oracle(x0: f64, steps: usize) -> f64 {
        let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t as i32));
            let vh = v / (1.0 - f64::powi(b2, t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn quadratic_sequence_matches_oracle() {
        let mut p = Tensor::scalar(0.5f64);
        let mut s = AdamState::<f64>::with_defaults(&[1], 0.001).unwrap();
        for _ in 0..5 {
            let g = 2.0 * (p.data()[0] - 3.0);
            p.grad_mut()[0] = g;
            s.step(&mut [&mut p], &[true]).unwrap();
        }
        assert!((p.data()[0] - oracle(0.5, 5)).abs() < 1e-10);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn frozen_tensor_untouched() {
        let mut a = scalar_param(1.0, 1.0);
        let mut b = scalar_param(2.0, 1.0);
        let mut s = AdamState::<f64>::with_defaults(&[1, 1], 0.01).unwrap();
        s.step(&mut [&mut a, &mut b], &[false, true]).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_ne!(b.data(), &[2.0]);
        assert_eq!(s.m[0], vec![0.0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut a = scalar_param(1.0, 1.0);
        let mut b = scalar_param(2.0, f64::NAN);
        let mut s = AdamState::<f64>::with_defaults(&[1, 1], 0.01).unwrap();
        assert!(matches!(
            s.step(&mut [&mut a, &mut b], &[true, true]),
            Err(Error::Numerical(_))
        ));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(AdamState::<f32>::with_defaults(&[1], 0.0).is_err());
    }
}
