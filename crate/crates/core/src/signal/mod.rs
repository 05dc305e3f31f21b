//! From raw grid recordings to mirrored 16×16 intensity images.

mod filter;
mod imaging;
mod trial;

pub use filter::{design_bandstop, BandstopFilter, Biquad};
pub use imaging::{
    filter_trial, frame_correlation, frame_to_image, images_from_filtered, intensity, mirror, trial_to_images,
    write_pgm, FilteredTrial, FrameImage, TrialImages, IMAGE_PIXELS, IMAGE_SIDE, VOLTAGE_RANGE_MV,
};
pub use trial::{RawTrial, TrialMeta, CHANNELS, GRID_COLS, GRID_ROWS};

/// Power-line band-stop used throughout the pipeline.
pub fn mains_filter(sample_rate: f64) -> crate::Result<BandstopFilter> {
    design_bandstop(sample_rate, 45.0, 55.0, 2)
}
