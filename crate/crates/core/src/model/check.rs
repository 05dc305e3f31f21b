use crate::error::{Error, Result};
use crate::model::AllConvNet;
use crate::nn::{softmax_cross_entropy, Differentiable, RngStream, Tensor};

/// Mean cross-entropy of a whole network in train mode, for finite-difference
/// verification. Every evaluation replays the same dropout masks, so the
/// objective is a deterministic function of parameters and input.
pub struct NetObjective {
    pub net: AllConvNet<f64>,
    labels: Vec<usize>,
    seed: u64,
}

impl NetObjective {
    pub fn new(net: AllConvNet<f64>, labels: Vec<usize>, seed: u64) -> Self {
        NetObjective { net, labels, seed }
    }

    fn rng(&self) -> RngStream {
        RngStream::new("objective/dropout", self.seed)
    }
}

impl Differentiable for NetObjective {
    fn objective(&mut self, input: &Tensor<f64>) -> Result<f64> {
        let mut rng = self.rng();
        let logits = self.net.forward_train_from(input, 0, &mut rng)?;
        self.net.discard_cache();
        Ok(softmax_cross_entropy(&logits, &self.labels)?.0)
    }

    /// The input gradient is not propagated; check parameters only.
    fn gradients(&mut self, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        if self.net.first_trainable_stage() != Some(0) {
            return Err(Error::Usage("whole-network check needs a trainable input stage".into()));
        }
        let mut rng = self.rng();
        let loss = self.net.loss_and_gradients(input, 0, &self.labels, &mut rng)?;
        Ok((loss, Tensor::zeros(input.shape())))
    }

    fn param_count(&self) -> usize {
        self.net.params().len()
    }

    fn param_name(&self, index: usize) -> String {
        self.net.param_names()[index].clone()
    }

    fn param(&mut self, index: usize) -> &mut Tensor<f64> {
        self.net.params_mut().swap_remove(index)
    }

    fn param_trainable(&self, index: usize) -> bool {
        self.net.trainable_flags()[index]
    }
}
