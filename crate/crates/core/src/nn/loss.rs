use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Lower bound applied to a probability before taking its logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("softmax input {i} is not finite")));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|v| (*v - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    Ok(out)
}

/// Row-wise softmax of a batch x G tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, g] = logits.shape() else {
        return Err(Error::Contract(format!(
            "softmax_rows expects batch x G, got {:?}",
            logits.shape()
        )));
    };
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(g) {
        data.extend(softmax(row)?);
    }
    Tensor::from_vec(logits.shape(), data)
}

/// Negative log-likelihood of `label` and the gradient of the combined
/// softmax + cross-entropy with respect to the logits (`probs − one_hot`).
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= probs.len() {
        return Err(Error::Contract(format!(
            "label {label} outside 0..{}",
            probs.len()
        )));
    }
    let p = probs[label].as_f64();
    if p < PROB_FLOOR {
        log::debug!("probability {p:e} of label {label} clamped to {PROB_FLOOR:e}");
    }
    let loss = T::of(-p.max(PROB_FLOOR).ln());
    let mut grad = probs.to_vec();
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over a batch of logits, with the gradient of the
/// mean with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let probs = softmax_rows(logits)?;
    let g = logits.shape()[1];
    let batch = logits.shape()[0];
    if labels.len() != batch {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let inv = T::of(1.0 / batch as f64);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in probs.data().chunks_exact(g).zip(labels) {
        let (loss, dl) = cross_entropy(row, label)?;
        total += loss.as_f64();
        grad.extend(dl.into_iter().map(|v| v * inv));
    }
    Ok((total / batch as f64, Tensor::from_vec(logits.shape(), grad)?))
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate().skip(1) {
        if *v > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let p = softmax(&[0.0f64; 8]).unwrap();
        assert!(p.iter().all(|v| (*v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn analytic_two_class() {
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn three_logits_reference_values() {
        // exp(k - 3) / Σ exp(j - 3), evaluated independently
        let z: f64 = (-2f64).exp() + (-1f64).exp() + 1.0;
        let want = [(-2f64).exp() / z, (-1f64).exp() / z, 1.0 / z];
        let p = softmax(&[1.0f32, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        assert!((want[0] - 0.090031).abs() < 1e-6);
        assert!((want[1] - 0.244728).abs() < 1e-6);
        assert!((want[2] - 0.665241).abs() < 1e-6);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(softmax(&[1.0f32, f32::NAN]), Err(Error::Contract(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&[0.125f64; 8], 3).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[0.5f64, 0.5], 0).unwrap();
        assert!((l - 0.693_147_2).abs() < 1e-7);
        let (l, g) = cross_entropy(&[0.0f64, 1.0, 0.0], 1).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        let (l, _) = cross_entropy(&[1.0f64, 0.0], 1).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(cross_entropy(&[0.5f64, 0.5], 2).is_err());
    }

    #[test]
    fn batch_gradient_is_mean() {
        let logits = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.0, 0.0, 0.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g.data(), &[-0.25, 0.25, 0.25, -0.25]);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.1f32, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.25f32; 4]), 0);
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 2..16),
            c in -50.0f64..50.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|x| *x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            prop_assert_eq!(argmax(&p), argmax(&v));
        }
    }
}
