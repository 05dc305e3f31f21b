use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::experiment::adapt::{adapt_with, AdaptConfig, AdaptMode};
use crate::experiment::eval::evaluate_voted;
use crate::model::{AllConvNet, Checkpoint, CONV_LAYERS};

pub const EPOCH_CHECKPOINTS: [usize; 6] = [8, 16, 32, 46, 64, 100];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub voted: Option<f64>,
    pub per_frame: f64,
}

/// Accuracy after transfusing Conv1..Conv`k`, at each epoch checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub ks: Vec<usize>,
    pub checkpoints: Vec<usize>,
    pub window: usize,
    /// `cells[row][column]` for `ks[row]` and `checkpoints[column]`.
    pub cells: Vec<Vec<SweepCell>>,
}

impl SweepTable {
    pub fn cell(&self, k: usize, epoch: usize) -> Option<&SweepCell> {
        let r = self.ks.iter().position(|x| *x == k)?;
        let c = self.checkpoints.iter().position(|x| *x == epoch)?;
        Some(&self.cells[r][c])
    }

    /// First checkpoint at which row `k` reaches `fraction` of its last
    /// checkpoint's per-frame accuracy.
    pub fn epochs_to_reach(&self, k: usize, fraction: f64) -> Option<usize> {
        let r = self.ks.iter().position(|x| *x == k)?;
        let row = &self.cells[r];
        let target = fraction * row.last()?.per_frame;
        self.checkpoints
            .iter()
            .zip(row)
            .find(|(_, c)| c.per_frame >= target)
            .map(|(e, _)| *e)
    }

    /// One row per k; each checkpoint contributes a voted and a per-frame column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k");
        for e in &self.checkpoints {
            out.push_str(&format!(",epoch{e}_voted,epoch{e}_per_frame"));
        }
        out.push('\n');
        for (k, row) in self.ks.iter().zip(&self.cells) {
            out.push_str(&k.to_string());
            for c in row {
                let v = c.voted.map(|v| format!("{v:.6}")).unwrap_or_default();
                out.push_str(&format!(",{v},{:.6}", c.per_frame));
            }
            out.push('\n');
        }
        out
    }
}

/// Adapts by transfusion at every depth in `ks`, scoring `test` whenever the
/// epoch count hits one of `checkpoints`. `base.mode` is ignored.
pub fn transfusion_sweep(
    pretrained: &Checkpoint,
    adaptation: &ImageSet,
    test: &ImageSet,
    ks: &[usize],
    checkpoints: &[usize],
    window: usize,
    base: &AdaptConfig,
) -> Result<SweepTable> {
    if ks.is_empty() || checkpoints.is_empty() {
        return Err(Error::Config("sweep needs at least one depth and one checkpoint".into()));
    }
    if let Some(k) = ks.iter().find(|k| **k > CONV_LAYERS) {
        return Err(Error::Config(format!("transfusion depth {k} outside 0..={CONV_LAYERS}")));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[0] == 0 {
        return Err(Error::Config("epoch checkpoints must be positive and increasing".into()));
    }
    let epochs = *checkpoints.last().expect("non-empty");
    let mut cells = Vec::with_capacity(ks.len());
    for &k in ks {
        let config = AdaptConfig {
            mode: AdaptMode::Transfusion(k),
            epochs,
            ..base.clone()
        };
        let mut row = Vec::with_capacity(checkpoints.len());
        let mut hook = |epoch: usize, net: &AllConvNet<f32>| -> Result<()> {
            if checkpoints.contains(&epoch) {
                let r = evaluate_voted(net, test, &[window])?;
                log::info!("k={k} epoch {epoch}: per-frame {:.4}", r.per_frame_accuracy);
                row.push(SweepCell {
                    voted: r.voted_at(window),
                    per_frame: r.per_frame_accuracy,
                });
            }
            Ok(())
        };
        adapt_with(pretrained, adaptation, &config, None, Some(&mut hook))?;
        cells.push(row);
    }
    Ok(SweepTable {
        ks: ks.to_vec(),
        checkpoints: checkpoints.to_vec(),
        window,
        cells,
    })
}

/// Parses `a:b` (inclusive) or a comma list of transfusion depths.
pub fn parse_k_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid depth range '{s}'"));
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once(':') {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if ks.is_empty() || ks.iter().any(|k| *k > CONV_LAYERS) {
        return Err(bad());
    }
    Ok(ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_ranges() {
        assert_eq!(parse_k_range("5:8").unwrap(), vec![5, 6, 7, 8]);
        assert_eq!(parse_k_range("0:8").unwrap().len(), 9);
        assert_eq!(parse_k_range("1,3").unwrap(), vec![1, 3]);
        assert!(parse_k_range("8:5").is_err());
        assert!(parse_k_range("0:9").is_err());
    }

    #[test]
    fn table_shape_and_threshold() {
        let cell = |p| SweepCell { voted: Some(p), per_frame: p };
        let t = SweepTable {
            ks: vec![0, 8],
            checkpoints: vec![8, 16, 32],
            window: 64,
            cells: vec![vec![cell(0.5), cell(0.8), cell(0.9)], vec![cell(0.9), cell(0.9), cell(0.9)]],
        };
        assert_eq!(t.to_csv().lines().count(), 3);
        assert_eq!(t.to_csv().lines().next().unwrap().split(',').count(), 7);
        assert_eq!(t.epochs_to_reach(0, 0.95), Some(32));
        assert_eq!(t.epochs_to_reach(8, 0.95), Some(8));
    }
}
