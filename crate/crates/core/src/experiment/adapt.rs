use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{AdaptationBudget, ImageSet};
use crate::error::{Error, Result};
use crate::experiment::train::{fit, EpochHook, EpochLog, FitPlan, LeakGuard, Optim, Trained};
use crate::model::{
    copy_prefix, freeze_for_adaptation, transfuse, trim_slim, AllConvNet, ArchitectureSpec, Checkpoint, FreezeMode,
    CONV_LAYERS,
};
use crate::nn::RngStream;

/// How a pretrained checkpoint is turned into the network that adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum AdaptMode {
    /// Fresh weights, nothing reused.
    Scratch,
    FinetuneTop,
    /// Conv1..Conv6 reused and frozen; Conv7 and Conv8 re-initialized.
    FeatureExtractFull,
    Transfusion(usize),
    Slim,
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdaptMode::Scratch => f.write_str("scratch"),
            AdaptMode::FinetuneTop => f.write_str("finetune-top"),
            AdaptMode::FeatureExtractFull => f.write_str("feature-extract"),
            AdaptMode::Transfusion(k) => write!(f, "transfusion-{k}"),
            AdaptMode::Slim => f.write_str("slim"),
        }
    }
}

impl AdaptMode {
    /// Parses a mode name; `transfusion` takes its depth from `k`.
    pub fn parse(name: &str, k: Option<usize>) -> Result<Self> {
        let norm = name.trim().to_ascii_lowercase().replace('_', "-");
        let mode = match norm.as_str() {
            "scratch" => AdaptMode::Scratch,
            "finetune-top" | "finetune" => AdaptMode::FinetuneTop,
            "feature-extract" | "feature-extract-full" => AdaptMode::FeatureExtractFull,
            "slim" => AdaptMode::Slim,
            "transfusion" => AdaptMode::Transfusion(
                k.ok_or_else(|| Error::Usage("transfusion needs a depth (--k)".into()))?,
            ),
            other => match other.strip_prefix("transfusion-").map(str::parse::<usize>) {
                Some(Ok(k)) => AdaptMode::Transfusion(k),
                _ => return Err(Error::Config(format!("unknown adaptation mode '{name}'"))),
            },
        };
        if let AdaptMode::Transfusion(k) = mode {
            if k > CONV_LAYERS {
                return Err(Error::Config(format!("transfusion depth {k} outside 0..={CONV_LAYERS}")));
            }
        }
        Ok(mode)
    }

    /// Network to adapt, with its freeze mask already applied.
    pub fn prepare(self, pretrained: &Checkpoint, rng: &mut RngStream) -> Result<AllConvNet<f32>> {
        match self {
            AdaptMode::Scratch => AllConvNet::new(pretrained.arch.clone(), rng),
            AdaptMode::FinetuneTop => {
                let mut net = AllConvNet::from_checkpoint(pretrained)?;
                freeze_for_adaptation(&mut net, FreezeMode::FinetuneTop);
                Ok(net)
            }
            AdaptMode::FeatureExtractFull => {
                let source = AllConvNet::from_checkpoint(pretrained)?;
                let mut net = AllConvNet::new(source.arch().clone(), rng)?;
                copy_prefix(&source, &mut net, FreezeMode::FeatureExtractFull.frozen_depth())?;
                freeze_for_adaptation(&mut net, FreezeMode::FeatureExtractFull);
                Ok(net)
            }
            AdaptMode::Transfusion(k) => transfuse(pretrained, k, rng).map(|(net, _)| net),
            AdaptMode::Slim => {
                if pretrained.arch != ArchitectureSpec::full(pretrained.arch.gestures)? {
                    return Err(Error::Architecture("slim adaptation needs a full-width checkpoint".into()));
                }
                trim_slim(pretrained, rng).map(|(net, _)| net)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Fixed epoch count; adaptation never stops early.
    pub epochs: usize,
    pub budget: Option<AdaptationBudget>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::FinetuneTop,
            epochs: 100,
            budget: None,
            learning_rate: 1e-3,
            batch_size: 256,
            dropout: 0.25,
            seed: 0,
            deterministic: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size < 2 {
            return Err(Error::Config("learning rate must be positive and batch size at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn optim(&self) -> Optim {
        Optim {
            learning_rate: self.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: self.batch_size,
            seed: self.seed,
            deterministic: self.deterministic,
        }
    }
}

/// Applies the mode's transform to `pretrained` and trains on `data` for the
/// configured number of epochs.
pub fn adapt(pretrained: &Checkpoint, data: &ImageSet, config: &AdaptConfig) -> Result<Trained> {
    adapt_with(pretrained, data, config, None, None)
}

pub(crate) fn adapt_with(
    pretrained: &Checkpoint,
    data: &ImageSet,
    config: &AdaptConfig,
    guard: Option<&LeakGuard>,
    on_epoch: Option<EpochHook<'_>>,
) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("adaptation set is empty".into()));
    }
    let mut rng = RngStream::new("adapt/init", config.seed);
    let mut net = config.mode.prepare(pretrained, &mut rng)?;
    net.set_dropout(config.dropout)?;
    if config.epochs == 0 {
        let sizes: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
        let optimizer = crate::nn::AdamState::new(&sizes, config.learning_rate, 0.9, 0.999, 1e-8)?;
        return Ok(Trained {
            net,
            log: EpochLog::default(),
            optimizer,
        });
    }
    let fitted = fit(
        &mut net,
        data,
        &config.optim(),
        FitPlan {
            epochs: config.epochs,
            patience: None,
            val: None,
            guard,
            on_epoch,
        },
    )?;
    Ok(Trained {
        net,
        log: fitted.log,
        optimizer: fitted.optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in [
            AdaptMode::Scratch,
            AdaptMode::FinetuneTop,
            AdaptMode::FeatureExtractFull,
            AdaptMode::Transfusion(3),
            AdaptMode::Slim,
        ] {
            assert_eq!(AdaptMode::parse(&m.to_string(), None).unwrap(), m);
        }
        assert_eq!(AdaptMode::parse("transfusion", Some(5)).unwrap(), AdaptMode::Transfusion(5));
        assert!(AdaptMode::parse("transfusion", None).is_err());
        assert!(AdaptMode::parse("transfusion", Some(9)).is_err());
        assert!(AdaptMode::parse("adabn", None).is_err());
    }
}
