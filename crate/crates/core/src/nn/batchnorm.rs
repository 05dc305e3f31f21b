use crate::error::{Error, Result};
use crate::nn::{Mode, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Weight of the batch statistic in the running-average update.
    pub momentum: f64,
    pub epsilon: f64,
}

/// Saved activations for the train-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar = f32> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
            epsilon: self.epsilon,
        }
    }
}

fn layout<T: Scalar>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    let (batch, c, plane) = match input.shape() {
        [n, c] => (*n, *c, 1),
        [n, c, h, w] => (*n, *c, h * w),
        s => {
            return Err(Error::Contract(format!(
                "batch norm expects rank 2 or 4 input, got {s:?}"
            )))
        }
    };
    if c != channels {
        return Err(Error::Contract(format!(
            "batch norm has {channels} channels, input has {c}"
        )));
    }
    Ok((batch, plane))
}

const LANES: usize = 8;

/// Sum of `f(x)` with a fixed number of interleaved accumulators: vectorizes,
/// and the reduction order is a pure function of the length.
#[inline]
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += f(*v);
        }
    }
    let mut total = chunks.remainder().iter().fold(T::zero(), |t, v| t + f(*v));
    for a in acc {
        total += a;
    }
    total
}

#[inline]
fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut cx = xs.chunks_exact(LANES);
    let mut cy = ys.chunks_exact(LANES);
    for (a, b) in (&mut cx).zip(&mut cy) {
        for i in 0..LANES {
            acc[i] += a[i] * b[i];
        }
    }
    let mut total = cx.remainder().iter().zip(cy.remainder()).fold(T::zero(), |t, (a, b)| t + *a * *b);
    for a in acc {
        total += a;
    }
    total
}

/// Infer-mode normalization with the running statistics; never mutates `params`.
pub fn batchnorm_infer<T: Scalar>(input: &Tensor<T>, params: &BatchNorm<T>) -> Result<Tensor<T>> {
    let channels = params.channels();
    let (batch, plane) = layout(input, channels)?;
    let eps = T::of(params.epsilon);
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let y = out.data_mut();
    for c in 0..channels {
        let inv = (params.running_var.data()[c] + eps).sqrt().recip();
        let scale = params.gamma.data()[c] * inv;
        let shift = params.beta.data()[c] - params.running_mean.data()[c] * scale;
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for (o, v) in y[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *o = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Normalizes per channel. Train mode uses batch statistics and updates the
/// running averages; infer mode reads the running averages only.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    if params.epsilon <= 0.0 {
        return Err(Error::Config("batch norm epsilon must be positive".into()));
    }
    let channels = params.channels();
    let (batch, plane) = layout(input, channels)?;
    let eps = T::of(params.epsilon);
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());

    match mode {
        Mode::Infer => Ok((batchnorm_infer(input, params)?, None)),
        Mode::Train => {
            if batch < 2 {
                return Err(Error::Config(
                    "batch norm in train mode needs a batch of at least 2".into(),
                ));
            }
            let count = batch * plane;
            let inv_count = T::of(1.0 / count as f64);
            let momentum = T::of(params.momentum);
            let mut normalized = Tensor::zeros(input.shape());
            let mut inv_std = vec![T::zero(); channels];
            for c in 0..channels {
                let mut mean = T::zero();
                for n in 0..batch {
                    let base = (n * channels + c) * plane;
                    mean += lane_sum(&x[base..base + plane], |v| v);
                }
                mean = mean * inv_count;
                let mut var = T::zero();
                for n in 0..batch {
                    let base = (n * channels + c) * plane;
                    var += lane_sum(&x[base..base + plane], |v| (v - mean) * (v - mean));
                }
                let biased = var * inv_count;
                let unbiased = var / T::of((count - 1) as f64);
                let inv = (biased + eps).sqrt().recip();
                inv_std[c] = inv;
                let gamma = params.gamma.data()[c];
                let beta = params.beta.data()[c];
                let (xh, y) = (normalized.data_mut(), out.data_mut());
                for n in 0..batch {
                    let r = (n * channels + c) * plane..(n * channels + c + 1) * plane;
                    for ((h, o), v) in xh[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                        let z = (*v - mean) * inv;
                        *h = z;
                        *o = gamma * z + beta;
                    }
                }
                let rm = &mut params.running_mean.data_mut()[c];
                *rm = (T::one() - momentum) * *rm + momentum * mean;
                let rv = &mut params.running_var.data_mut()[c];
                *rv = (T::one() - momentum) * *rv + momentum * unbiased;
            }
            Ok((out, Some(BnCache { normalized, inv_std })))
        }
    }
}

/// Returns (input grad, gamma grad, beta grad) for a train-mode forward pass.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    params: &BatchNorm<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::Contract(format!(
            "upstream gradient shape {:?} differs from forward output {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let channels = params.channels();
    let (batch, plane) = layout(grad_out, channels)?;
    let count = T::of((batch * plane) as f64);
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut dx = Tensor::zeros(grad_out.shape());
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for n in 0..batch {
            let r = (n * channels + c) * plane..(n * channels + c + 1) * plane;
            sum_dy += lane_sum(&dy[r.clone()], |v| v);
            sum_dy_xh += lane_dot(&dy[r.clone()], &xh[r]);
        }
        dgamma.data_mut()[c] = sum_dy_xh;
        dbeta.data_mut()[c] = sum_dy;
        let k = params.gamma.data()[c] * cache.inv_std[c] / count;
        let d = dx.data_mut();
        for n in 0..batch {
            let r = (n * channels + c) * plane..(n * channels + c + 1) * plane;
            for ((o, g), h) in d[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xh[r]) {
                *o = k * (count * *g - sum_dy - *h * sum_dy_xh);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Backward pass through an infer-mode (fixed statistics) normalization; this is
/// a per-channel scale.
pub fn batchnorm_infer_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    params: &BatchNorm<T>,
) -> Result<Tensor<T>> {
    let channels = params.channels();
    let (batch, plane) = layout(grad_out, channels)?;
    let eps = T::of(params.epsilon);
    let mut dx = grad_out.clone();
    let d = dx.data_mut();
    for c in 0..channels {
        let scale = params.gamma.data()[c] / (params.running_var.data()[c] + eps).sqrt();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for v in &mut d[base..base + plane] {
                *v *= scale;
            }
        }
    }
    Ok(dx)
}
