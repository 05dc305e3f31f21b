use serde::{Deserialize, Serialize};

use crate::model::net::STAGES;

/// Trainable flag per stage: stage 0 is the input batch norm, stage `i` is
/// Conv`i` together with its batch norm. Every learnable tensor inherits the
/// flag of its stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable() -> Self {
        FreezeMask {
            frozen: vec![false; STAGES],
        }
    }

    /// Input BN and Conv1..Conv`depth` frozen; `depth = 0` freezes nothing.
    pub fn frozen_prefix(depth: usize) -> Self {
        let mut frozen = vec![false; STAGES];
        if depth > 0 {
            for f in frozen.iter_mut().take(depth.min(STAGES - 1) + 1) {
                *f = true;
            }
        }
        FreezeMask { frozen }
    }

    /// From explicit per-stage frozen flags (`STAGES` entries).
    pub fn from_frozen(frozen: Vec<bool>) -> Option<Self> {
        (frozen.len() == STAGES).then_some(FreezeMask { frozen })
    }

    pub fn is_trainable(&self, stage: usize) -> bool {
        !self.frozen[stage]
    }

    pub fn is_frozen(&self, stage: usize) -> bool {
        self.frozen[stage]
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    /// Number of frozen conv layers.
    pub fn frozen_conv_layers(&self) -> usize {
        self.frozen[1..].iter().filter(|f| **f).count()
    }
}
