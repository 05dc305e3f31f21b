use std::collections::BTreeSet;

use crate::data::TrialSource;
use crate::error::{Error, Result};
use crate::nn::{RngStream, Tensor};
use crate::signal::{trial_to_images, BandstopFilter, TrialMeta, IMAGE_PIXELS, IMAGE_SIDE};

/// A contiguous run of frames from one trial, in recording order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub meta: TrialMeta,
    pub start: usize,
    pub len: usize,
}

/// Network-ready images (intensity / 255) with labels and trial provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageSet {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    owners: Vec<TrialMeta>,
    segments: Vec<Segment>,
}

impl ImageSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Trial each frame was taken from.
    pub fn owner(&self, i: usize) -> &TrialMeta {
        &self.owners[i]
    }

    pub fn trials(&self) -> BTreeSet<TrialMeta> {
        self.owners.iter().copied().collect()
    }

    /// Appends one frame; a new segment starts whenever the trial changes.
    pub fn push(&mut self, meta: TrialMeta, label: usize, image: &[f32]) -> Result<()> {
        if image.len() != IMAGE_PIXELS {
            return Err(Error::Contract(format!("image has {} pixels, expected {IMAGE_PIXELS}", image.len())));
        }
        match self.segments.last_mut() {
            Some(s) if s.meta == meta && s.start + s.len == self.labels.len() => s.len += 1,
            _ => self.segments.push(Segment { meta, start: self.labels.len(), len: 1 }),
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        self.owners.push(meta);
        Ok(())
    }

    pub fn extend(&mut self, other: &ImageSet) {
        for i in 0..other.len() {
            self.push(other.owners[i], other.labels[i], other.image(i)).expect("sizes already checked");
        }
    }

    /// Frames at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut out = ImageSet::new();
        out.pixels.reserve(indices.len() * IMAGE_PIXELS);
        for &i in indices {
            out.push(self.owners[i], self.labels[i], self.image(i)).expect("sizes already checked");
        }
        out
    }

    /// Random frame-level split; returns (rest, held-out) with about
    /// `fraction` of the frames held out, each part kept in original order.
    pub fn split_random(&self, fraction: f64, rng: &mut RngStream) -> (ImageSet, ImageSet) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let held = ((self.len() as f64) * fraction).round() as usize;
        let mut held_idx: Vec<usize> = order[..held].to_vec();
        let mut rest_idx: Vec<usize> = order[held..].to_vec();
        held_idx.sort_unstable();
        rest_idx.sort_unstable();
        (self.select(&rest_idx), self.select(&held_idx))
    }

    /// `[B, 1, 16, 16]` batch of the given frames.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(&[indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("shape matches");
        (t, labels)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                c[l] += 1;
            }
        }
        c
    }
}

/// Filters and images the given trials, keeping every `stride`-th frame
/// (filtering always sees the full-rate signal).
pub fn load_images(source: &dyn TrialSource, metas: &[TrialMeta], filter: &BandstopFilter, stride: usize) -> Result<ImageSet> {
    if stride == 0 {
        return Err(Error::Config("frame stride must be at least 1".into()));
    }
    let mut set = ImageSet::new();
    for meta in metas {
        let trial = source.load(meta)?;
        let images = trial_to_images(&trial, filter)?;
        if images.label >= source.gestures() {
            return Err(Error::Manifest(format!("{meta:?}: label {} outside 0..{}", images.label, source.gestures())));
        }
        for img in images.images.iter().step_by(stride) {
            let scaled: Vec<f32> = img.pixels().iter().map(|v| v / 255.0).collect();
            set.push(*meta, images.label, &scaled)?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(trial: u8) -> TrialMeta {
        TrialMeta { subject: 1, session: 1, gesture: 0, trial }
    }

    fn set() -> ImageSet {
        let mut s = ImageSet::new();
        for t in 1..=3u8 {
            for k in 0..4 {
                s.push(meta(t), t as usize, &vec![k as f32; IMAGE_PIXELS]).unwrap();
            }
        }
        s
    }

    #[test]
    fn segments_follow_trials() {
        let s = set();
        assert_eq!(s.segments().len(), 3);
        assert_eq!(s.segments()[1], Segment { meta: meta(2), start: 4, len: 4 });
        let sub = s.select(&[0, 1, 3, 4, 5]);
        assert_eq!(sub.segments().len(), 2);
        assert_eq!(sub.segments()[0].len, 3);
    }

    #[test]
    fn random_split_partitions() {
        let s = set();
        let (rest, held) = s.split_random(0.25, &mut RngStream::new("split", 1));
        assert_eq!(held.len(), 3);
        assert_eq!(rest.len(), 9);
        assert_eq!(rest.class_counts(4).iter().sum::<usize>() + held.class_counts(4).iter().sum::<usize>(), 12);
    }

    #[test]
    fn batch_shape() {
        let (t, labels) = set().batch(&[2, 5]);
        assert_eq!(t.shape(), &[2, 1, 16, 16]);
        assert_eq!(labels, vec![1, 2]);
        assert_eq!(t.data()[0], 2.0);
        assert_eq!(t.data()[IMAGE_PIXELS], 1.0);
    }

    #[test]
    fn wrong_image_size_rejected() {
        assert!(ImageSet::new().push(meta(1), 0, &[0.0; 10]).is_err());
    }
}
