use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, FreezeMask, CONV_LAYERS};
use crate::nn::{
    argmax, batchnorm_backward, batchnorm_forward, batchnorm_infer, batchnorm_infer_backward,
    conv2d_backward, conv2d_forward, dropout, elu, elu_backward, global_average_pool,
    global_average_pool_backward, softmax_cross_entropy, softmax_rows, BatchNorm, BnCache, Conv2d,
    DropoutMask, Mode, RngStream, Scalar, Tensor, ELU_ALPHA,
};

pub const DEFAULT_DROPOUT: f64 = 0.25;

/// Stage index of the input batch norm; conv blocks are stages `1..=8`.
pub const INPUT_STAGE: usize = 0;
pub const STAGES: usize = CONV_LAYERS + 1;

/// Conv → BN → ELU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T: Scalar = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug)]
struct StageCache<T: Scalar> {
    conv_input: Option<Tensor<T>>,
    bn: Option<BnCache<T>>,
    activation: Option<Tensor<T>>,
    dropout: Option<DropoutMask<T>>,
}

#[derive(Debug)]
struct ForwardCache<T: Scalar> {
    start: usize,
    stages: Vec<Option<StageCache<T>>>,
    pooled_shape: Vec<usize>,
}

/// The All-ConvNet: input BN, eight conv blocks, global average pooling and
/// a weight-free softmax over the G pooled maps.
///
/// Frozen stages run in infer mode during training (running statistics, no
/// dropout) and receive no gradient.
#[derive(Debug)]
pub struct AllConvNet<T: Scalar = f32> {
    arch: ArchitectureSpec,
    pub input_bn: BatchNorm<T>,
    pub blocks: Vec<ConvBlock<T>>,
    mask: FreezeMask,
    dropout: f64,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Clone for AllConvNet<T> {
    fn clone(&self) -> Self {
        AllConvNet {
            arch: self.arch.clone(),
            input_bn: self.input_bn.clone(),
            blocks: self.blocks.clone(),
            mask: self.mask.clone(),
            dropout: self.dropout,
            cache: None,
        }
    }
}

impl<T: Scalar> AllConvNet<T> {
    /// Xavier-initialized network for `arch`; every stage trainable.
    pub fn new(arch: ArchitectureSpec, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let blocks = arch
            .layers
            .iter()
            .map(|l| {
                Ok(ConvBlock {
                    conv: Conv2d::xavier(l.in_channels, l.out_channels, l.kernel, l.stride, rng)?,
                    bn: BatchNorm::new(l.out_channels),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AllConvNet {
            input_bn: BatchNorm::new(arch.input[0]),
            blocks,
            arch,
            mask: FreezeMask::all_trainable(),
            dropout: DEFAULT_DROPOUT,
            cache: None,
        })
    }

    /// Builds the network for `gestures` classes with per-layer width multipliers.
    pub fn build(gestures: usize, width_multiplier: &[f64], rng: &mut RngStream) -> Result<Self> {
        Self::new(ArchitectureSpec::new(gestures, width_multiplier)?, rng)
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn gestures(&self) -> usize {
        self.arch.gestures
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: FreezeMask) {
        self.mask = mask;
        self.cache = None;
    }

    /// Drops activations cached by a train-mode pass.
    pub fn discard_cache(&mut self) {
        self.cache = None;
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        self.dropout = p;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params()
            .iter()
            .zip(self.trainable_flags())
            .filter(|(_, t)| *t)
            .map(|(p, _)| p.len())
            .sum()
    }

    /// Names of the learnable tensors in canonical order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["input_bn.gamma".to_string(), "input_bn.beta".to_string()];
        for i in 1..=self.blocks.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
            names.push(format!("bn{i}.gamma"));
            names.push(format!("bn{i}.beta"));
        }
        names
    }

    /// Stage owning each learnable tensor, aligned with [`Self::param_names`].
    pub fn param_stages(&self) -> Vec<usize> {
        let mut stages = vec![INPUT_STAGE, INPUT_STAGE];
        for i in 1..=self.blocks.len() {
            stages.extend([i; 4]);
        }
        stages
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.input_bn.gamma, &self.input_bn.beta];
        for b in &self.blocks {
            out.extend([&b.conv.weight, &b.conv.bias, &b.bn.gamma, &b.bn.beta]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.input_bn.gamma, &mut self.input_bn.beta];
        for b in &mut self.blocks {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.param_stages()
            .into_iter()
            .map(|s| self.mask.is_trainable(s))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Lowest stage that receives gradients, if any.
    pub fn first_trainable_stage(&self) -> Option<usize> {
        (0..STAGES).find(|s| self.mask.is_trainable(*s))
    }

    pub fn cast<U: Scalar>(&self) -> AllConvNet<U> {
        AllConvNet {
            arch: self.arch.clone(),
            input_bn: self.input_bn.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv: b.conv.cast(),
                    bn: b.bn.cast(),
                })
                .collect(),
            mask: self.mask.clone(),
            dropout: self.dropout,
            cache: None,
        }
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if [c, h, w] != self.arch.input {
            return Err(Error::Contract(format!(
                "expected images of shape {:?}, got {c}x{h}x{w}",
                self.arch.input
            )));
        }
        Ok(())
    }

    /// Shape of the tensor entering `stage`, per sample.
    fn stage_input_shape(&self, stage: usize) -> [usize; 3] {
        if stage <= 1 {
            return self.arch.input;
        }
        let sizes = self.arch.spatial_sizes();
        let l = &self.arch.layers[stage - 2];
        [l.out_channels, sizes[stage - 1], sizes[stage - 1]]
    }

    fn check_stage_input(&self, x: &Tensor<T>, stage: usize) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let want = self.stage_input_shape(stage);
        if [c, h, w] != want {
            return Err(Error::Contract(format!(
                "stage {stage} expects {want:?} per sample, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Infer-mode pass through stages `[0, end)` returning the activation that
    /// enters stage `end`. Used to precompute features of a frozen prefix.
    pub fn infer_prefix(&self, images: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut x = images.clone();
        for stage in 0..end.min(STAGES) {
            x = self.infer_stage(&x, stage)?;
        }
        Ok(x)
    }

    fn infer_stage(&self, x: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        if stage == INPUT_STAGE {
            return batchnorm_infer(x, &self.input_bn);
        }
        let b = &self.blocks[stage - 1];
        let y = conv2d_forward(x, &b.conv)?;
        let y = batchnorm_infer(&y, &b.bn)?;
        elu(&y, ELU_ALPHA)
    }

    /// Pre-softmax class scores (the pooled Conv8 maps) in infer mode.
    pub fn infer_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.infer_prefix(images, STAGES)?;
        global_average_pool(&x)
    }

    /// Class probabilities in infer mode. Does not touch any state, so a shared
    /// reference can serve concurrent callers.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        softmax_rows(&self.infer_logits(images)?)
    }

    /// Class probabilities. Train mode uses batch statistics and dropout on
    /// trainable stages and caches activations for [`Self::backward`].
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode, rng: &mut RngStream) -> Result<Tensor<T>> {
        match mode {
            Mode::Infer => self.infer(images),
            Mode::Train => {
                self.check_images(images)?;
                softmax_rows(&self.forward_train_from(images, INPUT_STAGE, rng)?)
            }
        }
    }

    /// Train-mode pass from `start` (whose input is `x`) to the pooled logits.
    /// Stages below `start` must be frozen; their output is what `x` holds.
    pub fn forward_train_from(&mut self, x: &Tensor<T>, start: usize, rng: &mut RngStream) -> Result<Tensor<T>> {
        if (0..start).any(|s| self.mask.is_trainable(s)) {
            return Err(Error::Usage(format!(
                "cannot start a training pass at stage {start}: a lower stage is trainable"
            )));
        }
        self.check_stage_input(x, start)?;
        let first_grad = self.first_trainable_stage().unwrap_or(STAGES);
        let mut stages: Vec<Option<StageCache<T>>> = (0..STAGES).map(|_| None).collect();
        let mut cur = x.clone();
        for stage in start..STAGES {
            let frozen = !self.mask.is_trainable(stage);
            let keep = stage >= first_grad;
            if frozen && !keep {
                cur = self.infer_stage(&cur, stage)?;
                continue;
            }
            let mode = if frozen { Mode::Infer } else { Mode::Train };
            let mut cache = StageCache {
                conv_input: None,
                bn: None,
                activation: None,
                dropout: None,
            };
            let out = if stage == INPUT_STAGE {
                let (y, bn) = batchnorm_forward(&cur, &mut self.input_bn, mode)?;
                cache.bn = bn;
                y
            } else {
                let b = &mut self.blocks[stage - 1];
                let y = conv2d_forward(&cur, &b.conv)?;
                cache.conv_input = Some(std::mem::replace(&mut cur, Tensor::zeros(&[0])));
                let (y, bn) = batchnorm_forward(&y, &mut b.bn, mode)?;
                cache.bn = bn;
                let y = elu(&y, ELU_ALPHA)?;
                cache.activation = Some(y.clone());
                y
            };
            cur = if stage < STAGES - 1 && !frozen {
                let (y, m) = dropout(&out, self.dropout, Mode::Train, rng)?;
                cache.dropout = m;
                y
            } else {
                out
            };
            stages[stage] = Some(cache);
        }
        let pooled_shape = cur.shape().to_vec();
        let logits = global_average_pool(&cur)?;
        self.cache = Some(ForwardCache {
            start,
            stages,
            pooled_shape,
        });
        Ok(logits)
    }

    /// Backpropagates `grad_logits` (batch x G) through the cached train-mode
    /// pass, accumulating into the gradient buffers of trainable tensors.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called without a train-mode forward pass".into()))?;
        let Some(first_grad) = self.first_trainable_stage() else {
            return Ok(());
        };
        let lowest = first_grad.max(cache.start);
        let mut grad = global_average_pool_backward(grad_logits, &cache.pooled_shape)?;
        let mut stages = cache.stages;
        for stage in (lowest..STAGES).rev() {
            let sc = stages[stage]
                .take()
                .ok_or_else(|| Error::Usage(format!("no cached activations for stage {stage}")))?;
            let trainable = self.mask.is_trainable(stage);
            if let Some(m) = &sc.dropout {
                grad = m.apply(&grad);
            }
            let need_input = stage > lowest;
            if stage == INPUT_STAGE {
                if trainable {
                    let bn_cache = sc.bn.as_ref().ok_or_else(|| Error::Usage("missing BN cache".into()))?;
                    let (_, dg, db) = batchnorm_backward(&grad, bn_cache, &self.input_bn)?;
                    add_into(self.input_bn.gamma.grad_mut(), dg.data());
                    add_into(self.input_bn.beta.grad_mut(), db.data());
                }
                break;
            }
            let block = &mut self.blocks[stage - 1];
            let act = sc
                .activation
                .as_ref()
                .ok_or_else(|| Error::Usage("missing activation cache".into()))?;
            grad = elu_backward(&grad, act, ELU_ALPHA)?;
            grad = match (&sc.bn, trainable) {
                (Some(bn_cache), true) => {
                    let (dx, dg, db) = batchnorm_backward(&grad, bn_cache, &block.bn)?;
                    add_into(block.bn.gamma.grad_mut(), dg.data());
                    add_into(block.bn.beta.grad_mut(), db.data());
                    dx
                }
                _ => batchnorm_infer_backward(&grad, &block.bn)?,
            };
            let input = sc
                .conv_input
                .as_ref()
                .ok_or_else(|| Error::Usage("missing convolution input cache".into()))?;
            if trainable || need_input {
                let g = conv2d_backward(&grad, input, &block.conv, need_input)?;
                if trainable {
                    add_into(block.conv.weight.grad_mut(), g.weight.data());
                    add_into(block.conv.bias.grad_mut(), g.bias.data());
                }
                if let Some(gi) = g.input {
                    grad = gi;
                }
            }
        }
        Ok(())
    }

    /// Forward from `start`, mean softmax cross-entropy against `labels`, and
    /// backward. Gradient buffers are zeroed first. Returns the batch loss.
    pub fn loss_and_gradients(
        &mut self,
        x: &Tensor<T>,
        start: usize,
        labels: &[usize],
        rng: &mut RngStream,
    ) -> Result<f64> {
        self.zero_grad();
        let logits = self.forward_train_from(x, start, rng)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training loss is {loss}")));
        }
        self.backward(&grad)?;
        Ok(loss)
    }

    /// Argmax class for every row of an infer-mode pass.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.infer_logits(images)?;
        let g = self.gestures();
        Ok(logits.data().chunks_exact(g).map(argmax).collect())
    }

    /// Per-stage activations of a single image (infer mode), for inspection.
    pub fn activation_maps(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_images(image)?;
        let mut x = image.clone();
        let mut maps = Vec::with_capacity(CONV_LAYERS);
        for stage in 0..STAGES {
            x = self.infer_stage(&x, stage)?;
            if stage != INPUT_STAGE {
                maps.push(x.clone());
            }
        }
        Ok(maps)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Argmax with ties resolved to the lowest index.
pub fn predict(scores: &[f32]) -> usize {
    argmax(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = RngStream::new("img", seed);
        let data = (0..n * 256).map(|_| rng.uniform() as f32).collect();
        Tensor::from_vec(&[n, 1, 16, 16], data).unwrap()
    }

    #[test]
    fn builds_table_architecture() {
        let net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 0)).unwrap();
        assert_eq!(net.parameter_count(), 462_490);
        assert_eq!(net.trainable_parameter_count(), 462_490);
        assert_eq!(net.params().len(), net.param_names().len());
    }

    #[test]
    fn rows_are_distributions() {
        let net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 1)).unwrap();
        let out = net.infer(&images(3, 1)).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        for row in out.data().chunks_exact(8) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_images_identical_rows() {
        let net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 2)).unwrap();
        let one = images(1, 5);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 1, 16, 16], data).unwrap();
        let out = net.infer(&two).unwrap();
        assert_eq!(&out.data()[..8], &out.data()[8..]);
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let mut net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 3)).unwrap();
        for b in &mut net.blocks {
            b.conv.weight.data_mut().fill(0.0);
        }
        let out = net.infer(&images(2, 3)).unwrap();
        assert!(out.data().iter().all(|v| (*v - 0.125).abs() < 1e-7));
    }

    #[test]
    fn wrong_spatial_shape_rejected() {
        let net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 4)).unwrap();
        let bad = Tensor::zeros(&[1, 1, 16, 8]);
        assert!(matches!(net.infer(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 5)).unwrap();
        let g = Tensor::zeros(&[1, 8]);
        assert!(matches!(net.backward(&g), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_stages_get_no_gradient() {
        let mut net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 6)).unwrap();
        net.set_mask(FreezeMask::frozen_prefix(3));
        let mut rng = RngStream::new("dropout", 0);
        net.loss_and_gradients(&images(4, 6), 0, &[0, 1, 2, 3], &mut rng).unwrap();
        for ((p, stage), name) in net.params().iter().zip(net.param_stages()).zip(net.param_names()) {
            if stage <= 3 {
                assert!(p.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)), "{name}");
            } else {
                assert!(p.grad().is_some(), "{name}");
            }
        }
    }

    #[test]
    fn prefix_features_feed_the_rest() {
        let mut net = AllConvNet::<f32>::build(8, &[1.0; 7], &mut RngStream::new("init", 7)).unwrap();
        net.set_mask(FreezeMask::frozen_prefix(3));
        net.set_dropout(0.0).unwrap();
        let x = images(3, 7);
        let feats = net.infer_prefix(&x, 4).unwrap();
        assert_eq!(feats.shape(), &[3, 64, 8, 8]);
        let mut r1 = RngStream::new("d", 1);
        let mut r2 = RngStream::new("d", 1);
        let a = net.forward_train_from(&x, 0, &mut r1).unwrap();
        let b = net.forward_train_from(&feats, 4, &mut r2).unwrap();
        assert_eq!(a, b);
    }
}
