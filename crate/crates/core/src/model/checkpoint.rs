//! Little-endian checkpoint container.
//!
//! ```text
//! "ACNV" | version u16 | G u16 | layer count u8
//! per layer: kind u8 | inC u16 | outC u16 | kH u8 | kW u8 | stride u8 | frozen u8
//! tensor count u32
//! per tensor: name length u16 | name | rank u8 | extents u32 × rank | f32 × len
//! seed u64 | epoch u32 | tag length u16 | tag
//! optimizer flag u8 [| step u64 | beta1 f64 | beta2 f64 | eps f64 | lr f64 | count u32 | (len u32 | m f32 × len | v f32 × len) × count]
//! ```
//!
//! Layer 0 is the input batch norm (kind 0); layers 1..=8 are conv blocks (kind 1).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AllConvNet, ArchitectureSpec, ConvSpec, FreezeMask, STAGES};
use crate::nn::{AdamState, BatchNorm, Tensor};

pub const MAGIC: &[u8; 4] = b"ACNV";
pub const FORMAT_VERSION: u16 = 1;

const KIND_INPUT_BN: u8 = 0;
const KIND_CONV_BLOCK: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u32,
    /// Source dataset tag.
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Serializable snapshot of a network: parameters, running statistics,
/// freeze flags and optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureSpec,
    pub tensors: Vec<NamedTensor>,
    pub mask: FreezeMask,
    pub meta: CheckpointMeta,
    pub optimizer: Option<AdamState<f32>>,
}

fn bn_tensors(prefix: &str, bn: &BatchNorm<f32>, out: &mut Vec<NamedTensor>) {
    for (suffix, t) in [
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
        ("running_mean", &bn.running_mean),
        ("running_var", &bn.running_var),
    ] {
        out.push(NamedTensor {
            name: format!("{prefix}.{suffix}"),
            tensor: without_grad(t),
        });
    }
}

fn without_grad(t: &Tensor<f32>) -> Tensor<f32> {
    let mut t = t.clone();
    t.clear_grad();
    t
}

impl AllConvNet<f32> {
    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut tensors = Vec::new();
        bn_tensors("input_bn", &self.input_bn, &mut tensors);
        for (i, b) in self.blocks.iter().enumerate() {
            let i = i + 1;
            tensors.push(NamedTensor {
                name: format!("conv{i}.weight"),
                tensor: without_grad(&b.conv.weight),
            });
            tensors.push(NamedTensor {
                name: format!("conv{i}.bias"),
                tensor: without_grad(&b.conv.bias),
            });
            bn_tensors(&format!("bn{i}"), &b.bn, &mut tensors);
        }
        Checkpoint {
            arch: self.arch().clone(),
            tensors,
            mask: self.mask().clone(),
            meta,
            optimizer: None,
        }
    }

    /// Restores a network; every tensor the architecture needs must be present
    /// with the right shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = crate::nn::RngStream::new("checkpoint-shell", 0);
        let mut net = AllConvNet::new(ckpt.arch.clone(), &mut rng)?;
        {
            let load_bn = |prefix: &str, bn: &mut BatchNorm<f32>| -> Result<()> {
                bn.gamma = ckpt.take(&format!("{prefix}.gamma"), bn.gamma.shape())?;
                bn.beta = ckpt.take(&format!("{prefix}.beta"), bn.beta.shape())?;
                bn.running_mean = ckpt.take(&format!("{prefix}.running_mean"), bn.running_mean.shape())?;
                bn.running_var = ckpt.take(&format!("{prefix}.running_var"), bn.running_var.shape())?;
                Ok(())
            };
            load_bn("input_bn", &mut net.input_bn)?;
            for (i, b) in net.blocks.iter_mut().enumerate() {
                let i = i + 1;
                b.conv.weight = ckpt.take(&format!("conv{i}.weight"), b.conv.weight.shape())?;
                b.conv.bias = ckpt.take(&format!("conv{i}.bias"), b.conv.bias.shape())?;
                load_bn(&format!("bn{i}"), &mut b.bn)?;
            }
        }
        net.set_mask(ckpt.mask.clone());
        Ok(net)
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Architecture(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Architecture(format!(
                "tensor {name} has shape {:?}, architecture needs {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    /// Fails unless the checkpoint was built for `gestures` classes.
    pub fn expect_gestures(&self, gestures: usize) -> Result<()> {
        if self.arch.gestures != gestures {
            return Err(Error::Architecture(format!(
                "checkpoint has {} gesture classes, run expects {gestures}",
                self.arch.gestures
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.extend_from_slice(&(self.arch.gestures as u16).to_le_bytes());
        w.push(STAGES as u8);
        let frozen = self.mask.frozen_flags();
        let in_c = self.arch.input[0] as u16;
        w.push(KIND_INPUT_BN);
        w.extend_from_slice(&in_c.to_le_bytes());
        w.extend_from_slice(&in_c.to_le_bytes());
        w.extend_from_slice(&[1, 1, 1, frozen[0] as u8]);
        for (i, l) in self.arch.layers.iter().enumerate() {
            w.push(KIND_CONV_BLOCK);
            w.extend_from_slice(&(l.in_channels as u16).to_le_bytes());
            w.extend_from_slice(&(l.out_channels as u16).to_le_bytes());
            w.extend_from_slice(&[l.kernel as u8, l.kernel as u8, l.stride as u8, frozen[i + 1] as u8]);
        }
        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            w.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            w.extend_from_slice(t.name.as_bytes());
            w.push(t.tensor.rank() as u8);
            for e in t.tensor.shape() {
                w.extend_from_slice(&(*e as u32).to_le_bytes());
            }
            for v in t.tensor.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.extend_from_slice(&self.meta.seed.to_le_bytes());
        w.extend_from_slice(&self.meta.epoch.to_le_bytes());
        w.extend_from_slice(&(self.meta.tag.len() as u16).to_le_bytes());
        w.extend_from_slice(self.meta.tag.as_bytes());
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                w.extend_from_slice(&opt.step.to_le_bytes());
                for v in [opt.beta1, opt.beta2, opt.epsilon, opt.learning_rate] {
                    w.extend_from_slice(&v.to_le_bytes());
                }
                w.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    w.extend_from_slice(&(m.len() as u32).to_le_bytes());
                    for x in m.iter().chain(v) {
                        w.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"ACNV\"")));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported format version {version}")));
        }
        let gestures = r.u16()? as usize;
        let count = r.u8()? as usize;
        if count != STAGES {
            return Err(Error::format(r.pos as u64 - 1, format!("expected {STAGES} layers, found {count}")));
        }
        let mut frozen = Vec::with_capacity(count);
        let mut layers = Vec::with_capacity(count - 1);
        for i in 0..count {
            let at = r.pos as u64;
            let kind = r.u8()?;
            let in_c = r.u16()? as usize;
            let out_c = r.u16()? as usize;
            let kh = r.u8()? as usize;
            let kw = r.u8()? as usize;
            let stride = r.u8()? as usize;
            frozen.push(r.u8()? != 0);
            let want = if i == 0 { KIND_INPUT_BN } else { KIND_CONV_BLOCK };
            if kind != want {
                return Err(Error::format(at, format!("layer {i} has kind {kind}, expected {want}")));
            }
            if kh != kw {
                return Err(Error::format(at, format!("layer {i} has a non-square kernel {kh}x{kw}")));
            }
            if i > 0 {
                layers.push(ConvSpec {
                    in_channels: in_c,
                    out_channels: out_c,
                    kernel: kh,
                    stride,
                });
            }
        }
        let arch = ArchitectureSpec::from_layers(gestures, layers)?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let len = r.u16()? as usize;
            let at = r.pos as u64;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel)?;
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::from_vec(&shape, data)?,
            });
        }
        let seed = r.u64()?;
        let epoch = r.u32()?;
        let tag_len = r.u16()? as usize;
        let at = r.pos as u64;
        let tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::format(at, "tag is not UTF-8"))?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let epsilon = r.f64()?;
                let learning_rate = r.f64()?;
                let n = r.u32()? as usize;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    m.push(r.f32s(len)?);
                    v.push(r.f32s(len)?);
                }
                Some(AdamState {
                    step,
                    m,
                    v,
                    beta1,
                    beta2,
                    epsilon,
                    learning_rate,
                })
            }
            flag => return Err(Error::format(r.pos as u64 - 1, format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mask = FreezeMask::from_frozen(frozen).expect("STAGES flags read");
        let ckpt = Checkpoint {
            arch,
            tensors,
            mask,
            meta: CheckpointMeta { seed, epoch, tag },
            optimizer,
        };
        // shape validation against the architecture
        AllConvNet::from_checkpoint(&ckpt)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {avail} remain"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.pos as u64, "tensor too large"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngStream;

    fn sample(g: usize) -> Checkpoint {
        let mut net = AllConvNet::<f32>::build(g, &[1.0; 7], &mut RngStream::new("init", 3)).unwrap();
        net.input_bn.running_mean.data_mut()[0] = 0.25;
        net.set_mask(FreezeMask::frozen_prefix(2));
        net.to_checkpoint(CheckpointMeta {
            seed: 3,
            epoch: 12,
            tag: "db-b-like".into(),
        })
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = sample(8);
        let sizes: Vec<usize> = AllConvNet::from_checkpoint(&ckpt).unwrap().params().iter().map(|p| p.len()).collect();
        let mut opt = AdamState::<f32>::with_defaults(&sizes, 0.001).unwrap();
        opt.step = 17;
        opt.m[3][5] = 0.5;
        ckpt.optimizer = Some(opt);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = sample(8).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = sample(8).to_bytes();
        let cut = &bytes[..bytes.len() / 2];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gesture_count_mismatch() {
        let ckpt = sample(8);
        assert!(matches!(ckpt.expect_gestures(12), Err(Error::Architecture(_))));
        assert!(ckpt.expect_gestures(8).is_ok());
    }
}
