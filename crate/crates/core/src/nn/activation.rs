use crate::error::{Error, Result};
use crate::nn::{Mode, RngStream, Scalar, Tensor};

pub const ELU_ALPHA: f64 = 1.0;

/// Exponential linear unit: `x` for `x >= 0`, `alpha·(eˣ − 1)` otherwise.
pub fn elu<T: Scalar>(input: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("ELU alpha must be positive, got {alpha}")));
    }
    let a = T::of(alpha);
    let zero = T::zero();
    // Branch-free so the loop stays predictable on mixed-sign activations.
    let data = input
        .data()
        .iter()
        .map(|&v| v.max(zero) + a * (v.min(zero).exp_nonpositive() - T::one()))
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Gradient of [`elu`] expressed through its output: `1` on the positive branch,
/// `y + alpha` on the negative one.
pub fn elu_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if grad_out.shape() != output.shape() {
        return Err(Error::Contract("ELU gradient shape mismatch".into()));
    }
    let a = T::of(alpha);
    let zero = T::zero();
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&d, &y)| if y < zero { d * (y + a) } else { d })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// Inverted dropout mask: zero with probability `p`, otherwise `1/(1−p)`.
#[derive(Debug, Clone)]
pub struct DropoutMask<T: Scalar = f32> {
    scale: Vec<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn apply(&self, grad: &Tensor<T>) -> Tensor<T> {
        let mut out = grad.clone();
        for (v, s) in out.data_mut().iter_mut().zip(&self.scale) {
            *v *= *s;
        }
        out
    }
}

/// Inverted dropout. Infer mode, or `p = 0`, is the identity and draws nothing
/// from `rng`.
pub fn dropout<T: Scalar>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    let mut out = input.clone();
    out.clear_grad();
    if mode == Mode::Infer || p == 0.0 {
        return Ok((out, None));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let scale: Vec<T> = (0..input.len())
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect();
    for (v, s) in out.data_mut().iter_mut().zip(&scale) {
        *v *= *s;
    }
    Ok((out, Some(DropoutMask { scale })))
}

/// Mean over the spatial extent: batch x C x H x W → batch x C.
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Contract("global average pool over an empty plane".into()));
    }
    let plane = h * w;
    let inv = T::of(1.0 / plane as f64);
    let data: Vec<T> = input
        .data()
        .chunks_exact(plane)
        .map(|chunk| chunk.iter().copied().sum::<T>() * inv)
        .collect();
    debug_assert_eq!(data.len(), n * c);
    Tensor::from_vec(&[n, c], data)
}

pub fn global_average_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::Contract("pooling input must be rank 4".into()));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::Contract("pooling gradient shape mismatch".into()));
    }
    let plane = h * w;
    let inv = T::of(1.0 / plane as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (chunk, g) in dx.data_mut().chunks_exact_mut(plane).zip(grad_out.data()) {
        chunk.fill(*g * inv);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn elu_branches() {
        let y = elu(&t(&[2.0, 0.0, -1.0]), 1.0).unwrap();
        assert_eq!(y.data()[0], 2.0);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[2] - (-0.632_120_558_828_557_7)).abs() < 1e-12);
        assert!(elu(&t(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn elu_gradient_via_output() {
        let x = t(&[1.5, -0.3]);
        let y = elu(&x, 1.0).unwrap();
        let g = elu_backward(&t(&[1.0, 1.0]), &y, 1.0).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!((g.data()[1] - (-0.3f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = RngStream::new("d", 0);
        let x = t(&[1.0, -2.0, 3.0]);
        let (y, m) = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(m.is_none());
        let (y, _) = dropout(&x, 0.5, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survival_rate_and_scale() {
        let mut rng = RngStream::new("dropout", 42);
        let x = Tensor::<f32>::full(&[1_000_000], 1.0);
        let (y, _) = dropout(&x, 0.25, Mode::Train, &mut rng).unwrap();
        let survivors: Vec<f32> = y.data().iter().copied().filter(|v| *v != 0.0).collect();
        let frac = survivors.len() as f64 / 1e6;
        assert!((frac - 0.75).abs() < 0.01, "{frac}");
        assert!(survivors.iter().all(|v| *v == 4.0f32 / 3.0));
    }

    #[test]
    fn pooling_means() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap();
        assert_eq!(global_average_pool(&x).unwrap().data(), &[8.5]);
        let mut two = vec![1.0; 4];
        two.extend(vec![2.0; 4]);
        let x = Tensor::from_vec(&[1, 2, 2, 2], two).unwrap();
        assert_eq!(global_average_pool(&x).unwrap().data(), &[1.0, 2.0]);
        let c = Tensor::full(&[2, 3, 3, 3], 0.7);
        assert!(global_average_pool(&c).unwrap().data().iter().all(|v| (*v - 0.7f64).abs() < 1e-15));
    }

    #[test]
    fn pooling_backward_spreads_evenly() {
        let g = Tensor::from_vec(&[1, 2], vec![4.0, 8.0]).unwrap();
        let dx = global_average_pool_backward(&g, &[1, 2, 2, 2]).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
