//! Trial files, dataset manifests, protocol splits and synthetic data.

mod images;
mod manifest;
mod split;
mod synthetic;
mod trial_io;

pub use images::{load_images, ImageSet, Segment};
pub use manifest::{DatasetManifest, TrialEntry};
pub use split::{
    make_inter_session_split, make_inter_subject_splits, make_intra_session_splits, make_splits, AdaptationBudget,
    Fold, Scenario, SplitPlan,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticGenerator};
pub use trial_io::{
    decode_header, decode_trial, encode_trial, read_trial, read_trial_header, write_trial, TrialHeader, HEADER_LEN,
    TRIAL_MAGIC, TRIAL_VERSION,
};

use crate::error::Result;
use crate::signal::{RawTrial, TrialMeta};

/// Anything that can produce recorded trials by identity.
pub trait TrialSource: Sync {
    fn gestures(&self) -> usize;
    fn sample_rate(&self) -> u32;
    fn load(&self, meta: &TrialMeta) -> Result<RawTrial>;
}

impl TrialSource for DatasetManifest {
    fn gestures(&self) -> usize {
        self.gestures
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn load(&self, meta: &TrialMeta) -> Result<RawTrial> {
        self.read(meta)
    }
}
