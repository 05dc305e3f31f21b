//! Parameter reuse between a pretrained checkpoint and a new network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AllConvNet, ArchitectureSpec, Checkpoint, FreezeMask, CONV_LAYERS};
use crate::nn::RngStream;

/// Which lower layers stay fixed when adapting a pretrained network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Conv1..Conv3 frozen, the rest fine-tuned.
    FinetuneTop,
    /// Conv1..Conv6 frozen as a fixed feature extractor; Conv7..Conv8 trained.
    FeatureExtractFull,
}

impl FreezeMode {
    pub fn frozen_depth(self) -> usize {
        match self {
            FreezeMode::FinetuneTop => 3,
            FreezeMode::FeatureExtractFull => 6,
        }
    }
}

/// Mask for the given adaptation mode; applied to `net` as well as returned.
pub fn freeze_for_adaptation(net: &mut AllConvNet<f32>, mode: FreezeMode) -> FreezeMask {
    let mask = FreezeMask::frozen_prefix(mode.frozen_depth());
    net.set_mask(mask.clone());
    mask
}

/// Copies the input BN and Conv1..Conv`depth` (with their BN layers, running
/// statistics included) from `source` into `target`.
pub fn copy_prefix(source: &AllConvNet<f32>, target: &mut AllConvNet<f32>, depth: usize) -> Result<()> {
    if depth > CONV_LAYERS {
        return Err(Error::Config(format!("prefix depth {depth} exceeds {CONV_LAYERS}")));
    }
    if !source.arch().prefix_matches(target.arch(), depth) {
        return Err(Error::Architecture(format!(
            "source and target differ within the first {depth} conv layers"
        )));
    }
    if depth == 0 {
        return Ok(());
    }
    target.input_bn = source.input_bn.clone();
    for i in 0..depth {
        target.blocks[i] = source.blocks[i].clone();
    }
    Ok(())
}

/// Weight transfusion: Conv1..Conv`k` copied from `source` and frozen,
/// Conv`k+1`..Conv8 freshly initialized and trainable. `k = 0` trains from
/// scratch; `k = 8` copies everything and leaves all layers trainable.
pub fn transfuse(source: &Checkpoint, k: usize, rng: &mut RngStream) -> Result<(AllConvNet<f32>, FreezeMask)> {
    if k > CONV_LAYERS {
        return Err(Error::Config(format!("transfusion depth {k} outside 0..={CONV_LAYERS}")));
    }
    let pretrained = AllConvNet::from_checkpoint(source)?;
    let mut net = AllConvNet::new(source.arch.clone(), rng)?;
    copy_prefix(&pretrained, &mut net, k)?;
    let mask = if k == CONV_LAYERS {
        FreezeMask::all_trainable()
    } else {
        FreezeMask::frozen_prefix(k)
    };
    net.set_mask(mask.clone());
    Ok((net, mask))
}

/// Network trimming: Conv1..Conv3 copied and frozen, Conv4..Conv7 rebuilt at
/// half width and Conv8 rebuilt for the narrower input, all freshly initialized.
pub fn trim_slim(source: &Checkpoint, rng: &mut RngStream) -> Result<(AllConvNet<f32>, FreezeMask)> {
    let full = ArchitectureSpec::full(source.arch.gestures)?;
    if source.arch != full {
        return Err(Error::Architecture(
            "trimming expects a full-width source checkpoint".into(),
        ));
    }
    let pretrained = AllConvNet::from_checkpoint(source)?;
    let mut net = AllConvNet::new(ArchitectureSpec::slim(source.arch.gestures)?, rng)?;
    copy_prefix(&pretrained, &mut net, 3)?;
    let mask = FreezeMask::frozen_prefix(3);
    net.set_mask(mask.clone());
    Ok((net, mask))
}
