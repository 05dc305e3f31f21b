use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::filter::BandstopFilter;
use crate::signal::trial::{RawTrial, CHANNELS, GRID_COLS};

/// Voltage mapped to intensity 0; its negation maps to 255.
pub const VOLTAGE_RANGE_MV: f32 = 2.5;
pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// 16×16 row-major intensities in [0, 255], mirror-symmetric about the
/// vertical centre line.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pixels: Vec<f32>,
}

impl FrameImage {
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    /// Checks range and mirror symmetry.
    pub fn is_well_formed(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=255.0).contains(v))
            && (0..IMAGE_SIDE).all(|r| (0..GRID_COLS).all(|j| self.at(r, j) == self.at(r, IMAGE_SIDE - 1 - j)))
    }
}

/// Images of one trial, all carrying the trial's gesture label.
#[derive(Debug, Clone)]
pub struct TrialImages {
    pub label: usize,
    pub images: Vec<FrameImage>,
}

/// A trial whose channels have been band-stop filtered. Imaging only accepts
/// this type, which fixes the filter-then-image order.
#[derive(Debug, Clone)]
pub struct FilteredTrial(RawTrial);

impl FilteredTrial {
    pub fn trial(&self) -> &RawTrial {
        &self.0
    }
}

pub fn intensity(mv: f32) -> f32 {
    ((mv + VOLTAGE_RANGE_MV) / (2.0 * VOLTAGE_RANGE_MV)).clamp(0.0, 1.0) * 255.0
}

/// Maps a 16×8 grid of mV to intensities.
pub fn frame_to_image(frame: &[f32]) -> Result<Vec<f32>> {
    if frame.len() != CHANNELS {
        return Err(Error::Contract(format!("frame has {} values, expected {CHANNELS}", frame.len())));
    }
    Ok(frame.iter().map(|v| intensity(*v)).collect())
}

/// Widens a 16×8 grid to 16×16 by appending its column reflection.
pub fn mirror(half: &[f32]) -> Result<FrameImage> {
    if half.len() != CHANNELS {
        return Err(Error::Contract(format!("mirror expects 16x8 input, got {} values", half.len())));
    }
    let mut pixels = Vec::with_capacity(IMAGE_PIXELS);
    for row in half.chunks_exact(GRID_COLS) {
        pixels.extend_from_slice(row);
        pixels.extend(row.iter().rev());
    }
    Ok(FrameImage { pixels })
}

/// Filters every channel of the trial independently.
pub fn filter_trial(trial: &RawTrial, filter: &BandstopFilter) -> Result<FilteredTrial> {
    if trial.sample_rate as f64 != filter.sample_rate {
        return Err(Error::Contract(format!(
            "trial sampled at {} Hz but filter designed for {} Hz",
            trial.sample_rate, filter.sample_rate
        )));
    }
    let mut out = trial.clone();
    for c in 0..CHANNELS {
        let filtered = filter.apply(&trial.channel(c))?;
        out.set_channel(c, &filtered);
    }
    Ok(FilteredTrial(out))
}

pub fn images_from_filtered(trial: &FilteredTrial) -> Result<TrialImages> {
    let raw = &trial.0;
    let images = (0..raw.num_frames())
        .map(|t| mirror(&frame_to_image(raw.frame(t))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialImages {
        label: raw.meta.gesture as usize,
        images,
    })
}

/// Filter each channel over time, then image every sampling instant.
pub fn trial_to_images(trial: &RawTrial, filter: &BandstopFilter) -> Result<TrialImages> {
    images_from_filtered(&filter_trial(trial, filter)?)
}

/// Pearson correlation between every pair of flattened images. A constant
/// image correlates 0 with everything, itself included.
pub fn frame_correlation(images: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    if images.len() < 2 {
        return Err(Error::Contract("correlation needs at least two images".into()));
    }
    let centred: Vec<Option<Vec<f64>>> = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mean = img.iter().map(|v| *v as f64).sum::<f64>() / img.len() as f64;
            let c: Vec<f64> = img.iter().map(|v| *v as f64 - mean).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                log::warn!("image {i} has zero variance; its correlations are reported as 0");
                None
            } else {
                Some(c.into_iter().map(|v| v / norm).collect())
            }
        })
        .collect();
    let n = images.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let r = match (&centred[i], &centred[j]) {
                (Some(a), Some(b)) if a.len() == b.len() => a.iter().zip(b).map(|(x, y)| x * y).sum(),
                (Some(_), Some(_)) => return Err(Error::Contract("images differ in size".into())),
                _ => 0.0,
            };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}

/// Binary 8-bit grayscale export; intensities are rounded here only.
pub fn write_pgm(path: &Path, width: usize, height: usize, intensities: &[f32]) -> Result<()> {
    if intensities.len() != width * height {
        return Err(Error::Contract(format!(
            "{} intensities for a {width}x{height} image",
            intensities.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = intensities.iter().map(|v| v.clamp(0.0, 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngStream;
    use crate::signal::{design_bandstop, TrialMeta, GRID_ROWS};

    fn meta() -> TrialMeta {
        TrialMeta { subject: 1, session: 1, gesture: 3, trial: 1 }
    }

    #[test]
    fn intensity_endpoints() {
        assert_eq!(intensity(-2.5), 0.0);
        assert_eq!(intensity(0.0), 127.5);
        assert_eq!(intensity(2.5), 255.0);
        assert_eq!(intensity(-3.0), 0.0);
        assert_eq!(intensity(9.0), 255.0);
    }

    #[test]
    fn mirror_layout() {
        let half: Vec<f32> = (0..CHANNELS).map(|i| (i % GRID_COLS) as f32).collect();
        let img = mirror(&half).unwrap();
        let row: Vec<f32> = img.pixels()[..16].to_vec();
        assert_eq!(row, vec![0., 1., 2., 3., 4., 5., 6., 7., 7., 6., 5., 4., 3., 2., 1., 0.]);
        for r in 0..GRID_ROWS {
            assert_eq!(img.at(r, 8), img.at(r, 7));
            for c in 0..GRID_COLS {
                assert_eq!(img.at(r, c), half[r * GRID_COLS + c]);
            }
        }
        assert!(mirror(&half[..100]).is_err());
    }

    #[test]
    fn zero_trial_is_mid_grey() {
        let f = design_bandstop(1000.0, 45.0, 55.0, 2).unwrap();
        let trial = RawTrial::new(meta(), 1000, vec![0.0; 40 * CHANNELS]).unwrap();
        let out = trial_to_images(&trial, &f).unwrap();
        assert_eq!(out.images.len(), 40);
        assert_eq!(out.label, 3);
        assert!(out.images.iter().all(|im| im.pixels().iter().all(|v| *v == 127.5)));
    }

    // Forward-backward edge transients last a few hundred samples; frames
    // beyond them must match the clean twin.
    #[test]
    fn interference_removed_after_settling() {
        let f = design_bandstop(1000.0, 45.0, 55.0, 2).unwrap();
        let n = 1000;
        let mut clean = Vec::with_capacity(n * CHANNELS);
        let mut noisy = Vec::with_capacity(n * CHANNELS);
        for t in 0..n {
            let hum = (2.0 * std::f64::consts::PI * 50.0 * t as f64 / 1000.0).sin() as f32;
            for c in 0..CHANNELS {
                let offset = (c as f32 / CHANNELS as f32) - 0.5;
                let slow = 0.8 * (2.0 * std::f32::consts::PI * 3.0 * t as f32 / 1000.0 + c as f32).sin();
                clean.push(offset + slow);
                noisy.push(offset + slow + hum);
            }
        }
        let a = trial_to_images(&RawTrial::new(meta(), 1000, clean).unwrap(), &f).unwrap();
        let b = trial_to_images(&RawTrial::new(meta(), 1000, noisy).unwrap(), &f).unwrap();
        let settle = 300;
        let worst = a.images[settle..n - settle]
            .iter()
            .zip(&b.images[settle..n - settle])
            .flat_map(|(x, y)| x.pixels().iter().zip(y.pixels()).map(|(p, q)| (p - q).abs()))
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0, "worst deviation {worst}");
    }

    #[test]
    fn sample_rate_mismatch_rejected() {
        let f = design_bandstop(1000.0, 45.0, 55.0, 2).unwrap();
        let trial = RawTrial::new(meta(), 2000, vec![0.0; 40 * CHANNELS]).unwrap();
        assert!(filter_trial(&trial, &f).is_err());
    }

    #[test]
    fn correlation_examples() {
        let mut rng = RngStream::new("corr", 7);
        let a: Vec<f32> = (0..IMAGE_PIXELS).map(|_| rng.normal() as f32).collect();
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        let b: Vec<f32> = (0..IMAGE_PIXELS).map(|_| rng.normal() as f32).collect();
        let flat = vec![1.0f32; IMAGE_PIXELS];
        let m = frame_correlation(&[&a, &a, &neg, &b, &flat]).unwrap();
        assert!((m[0][1] - 1.0).abs() < 1e-9);
        assert!((m[0][2] + 1.0).abs() < 1e-9);
        assert!(m[0][3].abs() < 0.25);
        assert_eq!(m[4][0], 0.0);
        assert_eq!(m[4][4], 0.0);
        assert!(frame_correlation(&[&a]).is_err());
    }

    #[test]
    fn pgm_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let px: Vec<f32> = (0..IMAGE_PIXELS).map(|i| i as f32 - 0.4).collect();
        write_pgm(&path, 16, 16, &px).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n16 16\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes[header.len()], 0);
        assert_eq!(bytes[header.len() + 1], 1);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
