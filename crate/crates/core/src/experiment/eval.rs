use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::experiment::train::EVAL_CHUNK;
use crate::model::AllConvNet;

/// Voted accuracy at one window size. `frames` counts eligible frames;
/// `accuracy` is `None` when every segment was shorter than the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAccuracy {
    pub window: usize,
    pub accuracy: Option<f64>,
    pub frames: usize,
    pub excluded_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_frame_accuracy: f64,
    pub voted: Vec<WindowAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub frames: usize,
    pub subject: Option<u16>,
    pub fold: Option<usize>,
}

impl EvalResult {
    pub fn voted_at(&self, window: usize) -> Option<f64> {
        self.voted.iter().find(|w| w.window == window).and_then(|w| w.accuracy)
    }
}

/// Infer-mode predictions for every frame of `set`, in order.
pub fn predictions(net: &AllConvNet<f32>, set: &ImageSet) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, _) = set.batch(chunk);
        out.extend(net.predict(&x)?);
    }
    Ok(out)
}

pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&l, &p) in labels.iter().zip(predicted) {
        m[l][p] += 1;
    }
    m
}

pub fn evaluate_per_frame(net: &AllConvNet<f32>, set: &ImageSet) -> Result<EvalResult> {
    evaluate_voted(net, set, &[])
}

/// Trailing-window vote: element `t - n + 1` of the result is the modal class
/// of `predictions[t-n+1..=t]`, ties going to the lowest class. `None` when
/// the sequence is shorter than the window.
pub fn majority_vote(predictions: &[usize], n: usize) -> Option<Vec<usize>> {
    if n == 0 || n > predictions.len() {
        return None;
    }
    let classes = predictions.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    let mut out = Vec::with_capacity(predictions.len() - n + 1);
    for (t, &p) in predictions.iter().enumerate() {
        counts[p] += 1;
        if t >= n {
            counts[predictions[t - n]] -= 1;
        }
        if t + 1 >= n {
            // first maximum is the lowest index
            let mut best = 0;
            for (c, &k) in counts.iter().enumerate() {
                if k > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Some(out)
}

/// Voted accuracy over every trial segment of `set` at each window size.
pub fn voted_accuracy(set: &ImageSet, predicted: &[usize], windows: &[usize]) -> Result<Vec<WindowAccuracy>> {
    if predicted.len() != set.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} frames",
            predicted.len(),
            set.len()
        )));
    }
    let mut out = Vec::with_capacity(windows.len());
    for &n in windows {
        if n == 0 {
            return Err(Error::Config("voting window must be at least 1".into()));
        }
        let (mut correct, mut frames, mut excluded) = (0usize, 0usize, 0usize);
        for seg in set.segments() {
            let range = seg.start..seg.start + seg.len;
            let Some(votes) = majority_vote(&predicted[range.clone()], n) else {
                log::debug!("segment {:?} ({} frames) shorter than window {n}; excluded", seg.meta, seg.len);
                excluded += 1;
                continue;
            };
            let labels = &set.labels()[range][n - 1..];
            correct += votes.iter().zip(labels).filter(|(v, l)| v == l).count();
            frames += votes.len();
        }
        if excluded > 0 {
            log::info!("window {n}: {excluded} segment(s) shorter than the window were excluded");
        }
        out.push(WindowAccuracy {
            window: n,
            accuracy: (frames > 0).then(|| correct as f64 / frames as f64),
            frames,
            excluded_segments: excluded,
        });
    }
    Ok(out)
}

/// Scores precomputed predictions; shared by the network path and tests.
pub fn score(set: &ImageSet, predicted: &[usize], classes: usize, windows: &[usize]) -> Result<EvalResult> {
    if set.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty image set".into()));
    }
    if let Some(bad) = set.labels().iter().chain(predicted).find(|c| **c >= classes) {
        return Err(Error::Contract(format!("class {bad} outside 0..{classes}")));
    }
    let voted = voted_accuracy(set, predicted, windows)?;
    let confusion = confusion_matrix(set.labels(), predicted, classes);
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(EvalResult {
        per_frame_accuracy: trace as f64 / set.len() as f64,
        voted,
        confusion,
        frames: set.len(),
        subject: None,
        fold: None,
    })
}

/// Per-frame accuracy, confusion counts and voted accuracy at each window.
pub fn evaluate_voted(net: &AllConvNet<f32>, set: &ImageSet, windows: &[usize]) -> Result<EvalResult> {
    let predicted = predictions(net, set)?;
    score(set, &predicted, net.gestures(), windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictions_vote_constant() {
        for n in 1..=5 {
            assert_eq!(majority_vote(&[3; 5], n).unwrap(), vec![3; 6 - n]);
        }
    }

    #[test]
    fn small_examples() {
        assert_eq!(majority_vote(&[1, 1, 2], 3).unwrap(), vec![1]);
        assert_eq!(majority_vote(&[1, 2, 1, 2], 2).unwrap(), vec![1, 1, 1]);
        assert_eq!(majority_vote(&[1, 2], 3), None);
        assert_eq!(majority_vote(&[0, 1], 0), None);
    }
}
