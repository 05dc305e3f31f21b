use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::{AllConvNet, Checkpoint, CheckpointMeta, STAGES};
use crate::nn::{softmax_cross_entropy, AdamState, RngStream, Tensor};
use crate::signal::{TrialMeta, IMAGE_SIDE};

/// Frames per inference chunk when scoring whole sets.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Records zero wall time so logs are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.25,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size < 2 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "learning rate, max epochs and patience must be positive; batch size at least 2".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl EpochLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,wall_seconds\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{},{},{:.3}\n",
                r.epoch,
                r.train_loss,
                opt(r.val_loss),
                opt(r.val_accuracy),
                r.wall_seconds
            ));
        }
        out
    }
}

/// Patience bookkeeping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Trials whose frames must never reach a gradient step.
#[derive(Debug, Clone, Default)]
pub struct LeakGuard {
    forbidden: BTreeSet<TrialMeta>,
}

impl LeakGuard {
    pub fn new(forbidden: impl IntoIterator<Item = TrialMeta>) -> Self {
        LeakGuard {
            forbidden: forbidden.into_iter().collect(),
        }
    }

    pub fn check(&self, set: &ImageSet, indices: &[usize]) -> Result<()> {
        for &i in indices {
            let owner = set.owner(i);
            if self.forbidden.contains(owner) {
                return Err(Error::Split(format!("frame from held-out trial {owner:?} reached a gradient step")));
            }
        }
        Ok(())
    }
}

/// Optimizer and batching settings shared by training and adaptation.
#[derive(Debug, Clone)]
pub(crate) struct Optim {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl From<&TrainConfig> for Optim {
    fn from(c: &TrainConfig) -> Self {
        Optim {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            batch_size: c.batch_size,
            seed: c.seed,
            deterministic: c.deterministic,
        }
    }
}

pub(crate) type EpochHook<'a> = &'a mut dyn FnMut(usize, &AllConvNet<f32>) -> Result<()>;

pub(crate) struct FitPlan<'a, 'h> {
    pub epochs: usize,
    pub patience: Option<usize>,
    pub val: Option<&'a ImageSet>,
    pub guard: Option<&'a LeakGuard>,
    pub on_epoch: Option<EpochHook<'h>>,
}

pub(crate) struct Fitted {
    pub log: EpochLog,
    pub optimizer: AdamState<f32>,
}

/// Inputs to the first trainable stage for every frame, computed once through
/// the frozen prefix.
struct StageInputs {
    start: usize,
    shape: [usize; 3],
    data: Vec<f32>,
}

impl StageInputs {
    fn compute(net: &AllConvNet<f32>, set: &ImageSet, start: usize) -> Result<Self> {
        if start == 0 {
            return Ok(StageInputs {
                start,
                shape: [1, IMAGE_SIDE, IMAGE_SIDE],
                data: set.pixels().to_vec(),
            });
        }
        let mut data = Vec::new();
        let mut shape = [0; 3];
        let all: Vec<usize> = (0..set.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let (x, _) = set.batch(chunk);
            let f = net.infer_prefix(&x, start)?;
            shape.copy_from_slice(&f.shape()[1..]);
            data.extend_from_slice(f.data());
        }
        Ok(StageInputs { start, shape, data })
    }

    fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let per: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.shape;
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("shape matches")
    }
}

/// Mean cross-entropy and accuracy of the network on a set, in infer mode.
pub fn loss_and_accuracy(net: &AllConvNet<f32>, set: &ImageSet) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Contract("cannot score an empty image set".into()));
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = set.batch(chunk);
        let logits = net.infer_logits(&x)?;
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        let g = net.gestures();
        correct += logits
            .data()
            .chunks_exact(g)
            .zip(&labels)
            .filter(|(row, l)| crate::nn::argmax(row) == **l)
            .count();
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

fn offending_parameter(net: &AllConvNet<f32>) -> String {
    for (name, p) in net.param_names().iter().zip(net.params()) {
        let bad_grad = p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
        if !p.all_finite() || bad_grad {
            return name.clone();
        }
    }
    "none identified".into()
}

/// Mini-batch Adam over the trainable stages of `net`.
pub(crate) fn fit(net: &mut AllConvNet<f32>, data: &ImageSet, optim: &Optim, mut plan: FitPlan<'_, '_>) -> Result<Fitted> {
    if data.len() < 2 {
        return Err(Error::Contract(format!("training needs at least 2 frames, got {}", data.len())));
    }
    if plan.patience.is_some() && plan.val.is_none_or(|v| v.is_empty()) {
        return Err(Error::Config("early stopping needs a non-empty validation set".into()));
    }
    if let Some(bad) = data.labels().iter().find(|l| **l >= net.gestures()) {
        return Err(Error::Contract(format!("label {bad} outside 0..{}", net.gestures())));
    }
    let sizes: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::<f32>::new(&sizes, optim.learning_rate, optim.beta1, optim.beta2, optim.epsilon)?;
    let mut log = EpochLog::default();
    let Some(start) = net.first_trainable_stage() else {
        if plan.epochs > 0 {
            return Err(Error::Usage("every stage is frozen; nothing to train".into()));
        }
        return Ok(Fitted { log, optimizer: adam });
    };
    debug_assert!(start < STAGES);
    let inputs = StageInputs::compute(net, data, start)?;
    let flags = net.trainable_flags();
    let root = RngStream::new("fit", optim.seed);
    let mut dropout_rng = root.derive("dropout");
    let mut stopper = plan.patience.map(EarlyStopping::new);
    let mut best: Option<(AllConvNet<f32>, AdamState<f32>)> = None;
    let batch = optim.batch_size.max(2);

    for epoch in 1..=plan.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        root.derive(&format!("shuffle/{epoch}")).shuffle(&mut order);
        let (mut total, mut seen) = (0.0, 0usize);
        for (b, idx) in order.chunks(batch).enumerate() {
            if idx.len() < 2 {
                // a single frame cannot be batch-normalized
                continue;
            }
            if let Some(g) = plan.guard {
                g.check(data, idx)?;
            }
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let x = inputs.batch(idx);
            let loss = net
                .loss_and_gradients(&x, inputs.start, &labels, &mut dropout_rng)
                .and_then(|l| {
                    let mut params = net.params_mut();
                    adam.step(&mut params, &flags)?;
                    Ok(l)
                })
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!(
                        "epoch {epoch}, batch {}: {m} (parameter: {})",
                        b + 1,
                        offending_parameter(net)
                    )),
                    other => other,
                })?;
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = total / seen.max(1) as f64;
        let (val_loss, val_accuracy) = match plan.val {
            Some(v) if !v.is_empty() => {
                let (l, a) = loss_and_accuracy(net, v)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let wall_seconds = if optim.deterministic { 0.0 } else { clock.elapsed().as_secs_f64() };
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            wall_seconds,
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}{}",
            val_loss.map(|l| format!(", val loss {l:.4}")).unwrap_or_default()
        );
        if let Some(hook) = plan.on_epoch.as_mut() {
            hook(epoch, net)?;
        }
        if let (Some(s), Some(vl)) = (stopper.as_mut(), val_loss) {
            match s.observe(epoch, vl) {
                StopDecision::Improved => best = Some((net.clone(), adam.clone())),
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }

    match (stopper, best) {
        (Some(s), Some((net_best, adam_best))) => {
            *net = net_best;
            adam = adam_best;
            log.best_epoch = s.best_epoch();
        }
        _ => log.best_epoch = log.records.last().map(|r| r.epoch),
    }
    Ok(Fitted { log, optimizer: adam })
}

/// A trained network with its training history.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: AllConvNet<f32>,
    pub log: EpochLog,
    pub optimizer: AdamState<f32>,
}

impl Trained {
    pub fn checkpoint(&self, seed: u64, tag: &str) -> Checkpoint {
        let mut c = self.net.to_checkpoint(CheckpointMeta {
            seed,
            epoch: self.log.best_epoch.unwrap_or(0) as u32,
            tag: tag.to_string(),
        });
        c.optimizer = Some(self.optimizer.clone());
        c
    }
}

/// Trains every trainable stage with early stopping on validation loss and
/// returns the weights of the best validation epoch.
pub fn train(net: AllConvNet<f32>, train_set: &ImageSet, val_set: &ImageSet, config: &TrainConfig) -> Result<Trained> {
    train_guarded(net, train_set, val_set, config, None)
}

/// As [`train`], refusing any batch that contains a frame of a guarded trial.
pub fn train_guarded(
    mut net: AllConvNet<f32>,
    train_set: &ImageSet,
    val_set: &ImageSet,
    config: &TrainConfig,
    guard: Option<&LeakGuard>,
) -> Result<Trained> {
    config.validate()?;
    net.set_dropout(config.dropout)?;
    let fitted = fit(
        &mut net,
        train_set,
        &Optim::from(config),
        FitPlan {
            epochs: config.max_epochs,
            patience: Some(config.patience),
            val: Some(val_set),
            guard,
            on_epoch: None,
        },
    )?;
    Ok(Trained {
        net,
        log: fitted.log,
        optimizer: fitted.optimizer,
    })
}
