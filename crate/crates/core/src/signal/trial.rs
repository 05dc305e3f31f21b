use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_ROWS: usize = 16;
pub const GRID_COLS: usize = 8;
pub const CHANNELS: usize = GRID_ROWS * GRID_COLS;

/// Identity of one recorded trial. Subjects, sessions and trials are 1-based;
/// gestures are 0-based class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialMeta {
    pub subject: u16,
    pub session: u8,
    pub gesture: u16,
    pub trial: u8,
}

/// Time-major multi-channel recording; each frame is a 16×8 grid in mV,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrial {
    pub meta: TrialMeta,
    pub sample_rate: u32,
    frames: Vec<f32>,
}

impl RawTrial {
    pub fn new(meta: TrialMeta, sample_rate: u32, frames: Vec<f32>) -> Result<Self> {
        if frames.len() % CHANNELS != 0 {
            return Err(Error::Contract(format!(
                "{} samples is not a whole number of {GRID_ROWS}x{GRID_COLS} frames",
                frames.len()
            )));
        }
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        Ok(RawTrial {
            meta,
            sample_rate,
            frames,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / CHANNELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * CHANNELS..(t + 1) * CHANNELS]
    }

    pub fn samples(&self) -> &[f32] {
        &self.frames
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    /// Time series of one channel.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.frames.iter().skip(c).step_by(CHANNELS).map(|v| *v as f64).collect()
    }

    pub fn set_channel(&mut self, c: usize, series: &[f64]) {
        for (slot, v) in self.frames.iter_mut().skip(c).step_by(CHANNELS).zip(series) {
            *slot = *v as f32;
        }
    }
}
