//! Central-difference verification of analytic gradients at 64-bit precision.

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, elu, elu_backward,
    global_average_pool, global_average_pool_backward, BatchNorm, BnCache, Conv2d, Mode, RngStream,
    Tensor,
};

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient vanishes (e.g. a conv bias feeding a batch norm) compare on an
/// absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Something with a scalar objective whose gradients can be verified.
pub trait Differentiable {
    fn objective(&mut self, input: &Tensor<f64>) -> Result<f64>;

    /// Objective plus analytic gradients. Parameter gradients are left in each
    /// parameter's gradient buffer; the input gradient is returned.
    fn gradients(&mut self, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)>;

    fn param_count(&self) -> usize;
    fn param_name(&self, index: usize) -> String;
    fn param(&mut self, index: usize) -> &mut Tensor<f64>;
    fn param_trainable(&self, index: usize) -> bool;
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub check_input: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-3,
            coords_per_tensor: None,
            check_input: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub trainable: bool,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude seen; exactly zero for frozen tensors.
    pub max_abs_analytic: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn pick_coords(len: usize, limit: Option<usize>, rng: &mut RngStream) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..len).collect(),
    }
}

/// Compares analytic gradients of `fragment` against central differences.
/// Frozen parameters must report an all-zero analytic gradient.
pub fn finite_difference_check<F: Differentiable + ?Sized>(
    fragment: &mut F,
    input: &Tensor<f64>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let h = config.step;
    let mut rng = RngStream::new("gradcheck", config.seed);
    for i in 0..fragment.param_count() {
        fragment.param(i).clear_grad();
    }
    let (_, input_grad) = fragment.gradients(input)?;
    let analytic: Vec<Vec<f64>> = (0..fragment.param_count())
        .map(|i| {
            let p = fragment.param(i);
            p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut tensors = Vec::new();
    for (i, grads) in analytic.iter().enumerate() {
        let name = fragment.param_name(i);
        let trainable = fragment.param_trainable(i);
        let max_abs_analytic = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !trainable {
            tensors.push(TensorCheck {
                name,
                trainable,
                max_rel_error: if max_abs_analytic == 0.0 { 0.0 } else { f64::INFINITY },
                max_abs_analytic,
                coords_checked: 0,
            });
            continue;
        }
        let coords = pick_coords(grads.len(), config.coords_per_tensor, &mut rng);
        let mut worst = 0.0f64;
        for &j in &coords {
            let orig = fragment.param(i).data()[j];
            fragment.param(i).data_mut()[j] = orig + h;
            let plus = fragment.objective(input)?;
            fragment.param(i).data_mut()[j] = orig - h;
            let minus = fragment.objective(input)?;
            fragment.param(i).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grads[j], numeric));
        }
        tensors.push(TensorCheck {
            name,
            trainable,
            max_rel_error: worst,
            max_abs_analytic,
            coords_checked: coords.len(),
        });
    }

    if config.check_input {
        let coords = pick_coords(input.len(), config.coords_per_tensor, &mut rng);
        let mut x = input.clone();
        let mut worst = 0.0f64;
        for &j in &coords {
            let orig = x.data()[j];
            x.data_mut()[j] = orig + h;
            let plus = fragment.objective(&x)?;
            x.data_mut()[j] = orig - h;
            let minus = fragment.objective(&x)?;
            x.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(input_grad.data()[j], numeric));
        }
        tensors.push(TensorCheck {
            name: "input".into(),
            trainable: true,
            max_rel_error: worst,
            max_abs_analytic: input_grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs())),
            coords_checked: coords.len(),
        });
    }

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < config.tolerance,
        tensors,
        max_rel_error,
        tolerance: config.tolerance,
    })
}

/// Building block of a [`Sequential`] fragment.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d<f64>),
    /// Train-mode batch normalization.
    BatchNorm(BatchNorm<f64>),
    Elu(f64),
    GlobalAveragePool,
}

enum Cache {
    Input(Tensor<f64>),
    Bn(BnCache<f64>),
    Output(Tensor<f64>),
    Shape(Vec<usize>),
}

/// Feed-forward stack of layers with objective `Σ output ⊙ projection`, where
/// the projection is a fixed random tensor drawn from `seed`.
pub struct Sequential {
    layers: Vec<Layer>,
    frozen: Vec<bool>,
    seed: u64,
    projection: Option<Tensor<f64>>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Self {
        let frozen = vec![false; layers.len()];
        Sequential {
            layers,
            frozen,
            seed,
            projection: None,
        }
    }

    pub fn freeze(&mut self, layer: usize) {
        self.frozen[layer] = true;
    }

    fn param_slots(&self) -> Vec<(usize, usize)> {
        let mut slots = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(_) | Layer::BatchNorm(_) => {
                    slots.push((l, 0));
                    slots.push((l, 1));
                }
                _ => {}
            }
        }
        slots
    }

    fn forward(&mut self, input: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<Cache>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, cache) = match layer {
                Layer::Conv(c) => (conv2d_forward(&x, c)?, Cache::Input(x)),
                Layer::BatchNorm(bn) => {
                    let (y, cache) = batchnorm_forward(&x, bn, Mode::Train)?;
                    (y, Cache::Bn(cache.expect("train mode caches")))
                }
                Layer::Elu(alpha) => {
                    let y = elu(&x, *alpha)?;
                    (y.clone(), Cache::Output(y))
                }
                Layer::GlobalAveragePool => {
                    (global_average_pool(&x)?, Cache::Shape(x.shape().to_vec()))
                }
            };
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    fn projection_for(&mut self, output: &Tensor<f64>) -> Tensor<f64> {
        if self.projection.as_ref().map(|p| p.shape()) != Some(output.shape()) {
            let mut rng = RngStream::new("projection", self.seed);
            let data = (0..output.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            self.projection = Some(Tensor::from_vec(output.shape(), data).expect("sized"));
        }
        self.projection.clone().expect("set above")
    }
}

impl Differentiable for Sequential {
    fn objective(&mut self, input: &Tensor<f64>) -> Result<f64> {
        let (y, _) = self.forward(input)?;
        let proj = self.projection_for(&y);
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    }

    fn gradients(&mut self, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let (y, caches) = self.forward(input)?;
        let proj = self.projection_for(&y);
        let value = y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
        let mut grad = proj;
        for (l, cache) in caches.into_iter().enumerate().rev() {
            let frozen = self.frozen[l];
            grad = match (&mut self.layers[l], cache) {
                (Layer::Conv(c), Cache::Input(x)) => {
                    let g = conv2d_backward(&grad, &x, c, true)?;
                    if !frozen {
                        c.weight.grad_mut().copy_from_slice(g.weight.data());
                        c.bias.grad_mut().copy_from_slice(g.bias.data());
                    }
                    g.input.expect("requested")
                }
                (Layer::BatchNorm(bn), Cache::Bn(cache)) => {
                    let (dx, dg, db) = batchnorm_backward(&grad, &cache, bn)?;
                    if !frozen {
                        bn.gamma.grad_mut().copy_from_slice(dg.data());
                        bn.beta.grad_mut().copy_from_slice(db.data());
                    }
                    dx
                }
                (Layer::Elu(alpha), Cache::Output(out)) => elu_backward(&grad, &out, *alpha)?,
                (Layer::GlobalAveragePool, Cache::Shape(shape)) => {
                    global_average_pool_backward(&grad, &shape)?
                }
                _ => return Err(Error::Usage("layer cache out of sync".into())),
            };
        }
        Ok((value, grad))
    }

    fn param_count(&self) -> usize {
        self.param_slots().len()
    }

    fn param_name(&self, index: usize) -> String {
        let (l, which) = self.param_slots()[index];
        let kind = match (&self.layers[l], which) {
            (Layer::Conv(_), 0) => "weight",
            (Layer::Conv(_), _) => "bias",
            (_, 0) => "gamma",
            _ => "beta",
        };
        format!("layer{l}.{kind}")
    }

    fn param(&mut self, index: usize) -> &mut Tensor<f64> {
        let (l, which) = self.param_slots()[index];
        match (&mut self.layers[l], which) {
            (Layer::Conv(c), 0) => &mut c.weight,
            (Layer::Conv(c), _) => &mut c.bias,
            (Layer::BatchNorm(b), 0) => &mut b.gamma,
            (Layer::BatchNorm(b), _) => &mut b.beta,
            _ => unreachable!("slots only index parameterized layers"),
        }
    }

    fn param_trainable(&self, index: usize) -> bool {
        !self.frozen[self.param_slots()[index].0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new("input", seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap()
    }

    fn conv(in_c: usize, out_c: usize, k: usize, r: usize, seed: u64) -> Conv2d<f64> {
        let mut rng = RngStream::new("conv", seed);
        let mut c = Conv2d::xavier(in_c, out_c, k, r, &mut rng).unwrap();
        for b in c.bias.data_mut() {
            *b = rng.uniform_range(-0.1, 0.1);
        }
        c
    }

    #[test]
    fn single_elu_node() {
        let mut f = Sequential::new(vec![Layer::Elu(1.0)], 1);
        let x = random_input(&[1, 1, 4, 4], 1);
        let r = finite_difference_check(&mut f, &x, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_bn_elu_stack() {
        let mut f = Sequential::new(
            vec![
                Layer::Conv(conv(1, 3, 3, 1, 2)),
                Layer::BatchNorm(BatchNorm::new(3)),
                Layer::Elu(1.0),
            ],
            2,
        );
        let x = random_input(&[2, 1, 8, 8], 2);
        let r = finite_difference_check(&mut f, &x, &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-3);
    }

    #[test]
    fn frozen_layer_reports_zero_gradient() {
        let mut f = Sequential::new(
            vec![Layer::Conv(conv(1, 2, 3, 1, 3)), Layer::Elu(1.0), Layer::Conv(conv(2, 2, 1, 1, 4))],
            3,
        );
        f.freeze(0);
        let x = random_input(&[2, 1, 5, 5], 3);
        let r = finite_difference_check(&mut f, &x, &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
        for t in r.tensors.iter().filter(|t| t.name.starts_with("layer0")) {
            assert!(!t.trainable);
            assert_eq!(t.max_abs_analytic, 0.0);
        }
    }
}
