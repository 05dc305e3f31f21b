use crate::error::{Error, Result};
use crate::nn::{RngStream, Scalar, Tensor};

/// Glorot-uniform initialization: i.i.d. draws on `±√(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config("Xavier fans must be positive".into()));
    }
    let bound = xavier_bound(fan_in, fan_out);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::of(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_for_equal_fans() {
        assert_eq!(xavier_bound(3, 3), 1.0);
        let mut rng = RngStream::new("init", 1);
        let t: Tensor<f64> = xavier_init(&[1000], 3, 3, &mut rng).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sample_mean_near_zero() {
        let mut rng = RngStream::new("init", 2024);
        let t: Tensor<f32> = xavier_init(&[1_000_000], 3, 3, &mut rng).unwrap();
        let mean = t.data().iter().map(|v| *v as f64).sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn deterministic_under_seed() {
        let a: Tensor<f32> = xavier_init(&[4, 4], 8, 8, &mut RngStream::new("init", 9)).unwrap();
        let b: Tensor<f32> = xavier_init(&[4, 4], 8, 8, &mut RngStream::new("init", 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_fan_rejected() {
        let mut rng = RngStream::new("init", 0);
        assert!(xavier_init::<f32>(&[2], 0, 1, &mut rng).is_err());
    }
}
