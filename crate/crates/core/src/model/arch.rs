use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input image extent (channels, height, width).
pub const INPUT_SHAPE: [usize; 3] = [1, 16, 16];
pub const CONV_LAYERS: usize = 8;

/// Channel width of Conv1..Conv7 at multiplier 1. Conv8 always emits G channels.
const BASE_WIDTHS: [usize; CONV_LAYERS - 1] = [64, 64, 64, 128, 128, 128, 128];
const KERNELS: [usize; CONV_LAYERS] = [3, 3, 3, 3, 3, 3, 1, 1];
const STRIDES: [usize; CONV_LAYERS] = [1, 1, 2, 1, 1, 2, 1, 1];

/// One convolution of the stack; each is followed by batch norm and ELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input: [usize; 3],
    pub layers: Vec<ConvSpec>,
    pub gestures: usize,
    /// Scale applied to the base widths of Conv1..Conv7.
    pub width_multiplier: Vec<f64>,
}

impl ArchitectureSpec {
    pub fn new(gestures: usize, width_multiplier: &[f64]) -> Result<Self> {
        if gestures < 2 {
            return Err(Error::Config(format!("need at least 2 gestures, got {gestures}")));
        }
        if width_multiplier.len() != CONV_LAYERS - 1 {
            return Err(Error::Config(format!(
                "width multiplier needs {} entries (Conv1..Conv7), got {}",
                CONV_LAYERS - 1,
                width_multiplier.len()
            )));
        }
        let mut layers = Vec::with_capacity(CONV_LAYERS);
        let mut in_channels = INPUT_SHAPE[0];
        for i in 0..CONV_LAYERS {
            let out_channels = if i == CONV_LAYERS - 1 {
                gestures
            } else {
                let m = width_multiplier[i];
                let scaled = BASE_WIDTHS[i] as f64 * m;
                if !(m > 0.0) || scaled.fract() != 0.0 || scaled < 1.0 {
                    return Err(Error::Config(format!(
                        "multiplier {m} gives a non-integer width {scaled} for Conv{}",
                        i + 1
                    )));
                }
                scaled as usize
            };
            layers.push(ConvSpec {
                in_channels,
                out_channels,
                kernel: KERNELS[i],
                stride: STRIDES[i],
            });
            in_channels = out_channels;
        }
        let spec = ArchitectureSpec {
            input: INPUT_SHAPE,
            layers,
            gestures,
            width_multiplier: width_multiplier.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Full-width network.
    pub fn full(gestures: usize) -> Result<Self> {
        Self::new(gestures, &[1.0; CONV_LAYERS - 1])
    }

    /// Conv4..Conv7 at half width.
    pub fn slim(gestures: usize) -> Result<Self> {
        Self::new(gestures, &[1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5])
    }

    /// Rebuilds the spec from explicit layer descriptors (e.g. from a checkpoint).
    pub fn from_layers(gestures: usize, layers: Vec<ConvSpec>) -> Result<Self> {
        let width_multiplier = layers
            .iter()
            .take(CONV_LAYERS - 1)
            .zip(BASE_WIDTHS)
            .map(|(l, base)| l.out_channels as f64 / base as f64)
            .collect();
        let spec = ArchitectureSpec {
            input: INPUT_SHAPE,
            layers,
            gestures,
            width_multiplier,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != CONV_LAYERS {
            return Err(Error::Architecture(format!(
                "expected {CONV_LAYERS} conv layers, found {}",
                self.layers.len()
            )));
        }
        let mut in_channels = self.input[0];
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != in_channels {
                return Err(Error::Architecture(format!(
                    "Conv{} expects {} input channels but receives {in_channels}",
                    i + 1,
                    l.in_channels
                )));
            }
            if l.kernel != KERNELS[i] || l.stride != STRIDES[i] {
                return Err(Error::Architecture(format!(
                    "Conv{} must be {}x{} with stride {}",
                    i + 1,
                    KERNELS[i],
                    KERNELS[i],
                    STRIDES[i]
                )));
            }
            in_channels = l.out_channels;
        }
        if in_channels != self.gestures {
            return Err(Error::Architecture(format!(
                "final conv emits {in_channels} channels for {} gestures",
                self.gestures
            )));
        }
        Ok(())
    }

    /// Spatial extent after each conv layer, starting from the input.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input[1]];
        let mut s = self.input[1];
        for l in &self.layers {
            s = s.div_ceil(l.stride);
            sizes.push(s);
        }
        sizes
    }

    /// Σ(outC·inC·k² + outC) over convs plus 2 affine values per BN channel
    /// (input BN included).
    pub fn parameter_count(&self) -> usize {
        let conv: usize = self
            .layers
            .iter()
            .map(|l| l.out_channels * l.in_channels * l.kernel * l.kernel + l.out_channels)
            .sum();
        let bn_channels: usize = self.input[0] + self.layers.iter().map(|l| l.out_channels).sum::<usize>();
        conv + 2 * bn_channels
    }

    /// True when Conv1..Conv`depth` (and the input BN) have identical shapes.
    pub fn prefix_matches(&self, other: &ArchitectureSpec, depth: usize) -> bool {
        self.input == other.input && self.layers[..depth] == other.layers[..depth]
    }
}
