//! Binary trial container: little-endian header followed by frame-major f32
//! samples in mV.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{RawTrial, TrialMeta, CHANNELS, GRID_COLS, GRID_ROWS};

pub const TRIAL_MAGIC: &[u8; 4] = b"SEMG";
pub const TRIAL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;

/// Header fields of a trial file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialHeader {
    pub meta: TrialMeta,
    pub sample_rate: u32,
    pub num_frames: u64,
}

impl TrialHeader {
    fn payload_len(&self) -> Option<u64> {
        self.num_frames.checked_mul((CHANNELS * 4) as u64)
    }
}

pub fn encode_trial(trial: &RawTrial) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + trial.samples().len() * 4);
    out.extend_from_slice(TRIAL_MAGIC);
    out.extend_from_slice(&TRIAL_VERSION.to_le_bytes());
    out.extend_from_slice(&trial.meta.subject.to_le_bytes());
    out.push(trial.meta.session);
    out.extend_from_slice(&trial.meta.gesture.to_le_bytes());
    out.push(trial.meta.trial);
    out.push(GRID_ROWS as u8);
    out.push(GRID_COLS as u8);
    out.extend_from_slice(&trial.sample_rate.to_le_bytes());
    out.extend_from_slice(&(trial.num_frames() as u64).to_le_bytes());
    for v in trial.samples() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<TrialHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != TRIAL_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != TRIAL_VERSION {
        return Err(Error::format(4, format!("unsupported trial version {version}")));
    }
    let (rows, cols) = (bytes[12] as usize, bytes[13] as usize);
    if rows != GRID_ROWS || cols != GRID_COLS {
        return Err(Error::format(
            12,
            format!(
                "grid {rows}x{cols} ({} channels) does not match the fixed {GRID_ROWS}x{GRID_COLS} layout",
                rows * cols
            ),
        ));
    }
    let sample_rate = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
    if sample_rate == 0 {
        return Err(Error::format(14, "sample rate is zero"));
    }
    let num_frames = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
    Ok(TrialHeader {
        meta: TrialMeta {
            subject: u16_at(6),
            session: bytes[8],
            gesture: u16_at(9),
            trial: bytes[11],
        },
        sample_rate,
        num_frames,
    })
}

pub fn decode_trial(bytes: &[u8]) -> Result<RawTrial> {
    let header = decode_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = header
        .payload_len()
        .ok_or_else(|| Error::format(18, "frame count overflows"))?;
    if (payload.len() as u64) < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: expected {expected} bytes for {} frames, found {}",
                header.num_frames,
                payload.len()
            ),
        ));
    }
    if payload.len() as u64 > expected {
        return Err(Error::format(
            HEADER_LEN as u64 + expected,
            format!("{} trailing bytes after payload", payload.len() as u64 - expected),
        ));
    }
    let samples = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    RawTrial::new(header.meta, header.sample_rate, samples)
}

pub fn write_trial(path: &Path, trial: &RawTrial) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_trial(trial))?;
    Ok(())
}

pub fn read_trial(path: &Path) -> Result<RawTrial> {
    decode_trial(&std::fs::read(path)?)
}

/// Reads only the header, checking the file length against it.
pub fn read_trial_header(path: &Path) -> Result<TrialHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let len = f.metadata()?.len();
    let mut buf = [0u8; HEADER_LEN];
    let n = f.read(&mut buf)?;
    let header = decode_header(&buf[..n])?;
    let expected = HEADER_LEN as u64 + header.payload_len().unwrap_or(u64::MAX);
    if len != expected {
        return Err(Error::format(
            len.min(expected),
            format!("file is {len} bytes, header implies {expected}"),
        ));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngStream;

    fn random_trial(frames: usize) -> RawTrial {
        let mut rng = RngStream::new("trial-io", 3);
        let data = (0..frames * CHANNELS).map(|_| rng.normal() as f32).collect();
        let meta = TrialMeta { subject: 7, session: 2, gesture: 5, trial: 9 };
        RawTrial::new(meta, 1000, data).unwrap()
    }

    #[test]
    fn header_is_26_bytes() {
        let bytes = encode_trial(&random_trial(0));
        assert_eq!(bytes.len(), HEADER_LEN);
    }

    #[test]
    fn round_trip_bit_identical() {
        let t = random_trial(33);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.semg");
        write_trial(&p, &t).unwrap();
        let back = read_trial(&p).unwrap();
        assert_eq!(back.meta, t.meta);
        assert_eq!(back.sample_rate, 1000);
        let same = back.samples().iter().zip(t.samples()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
        assert_eq!(read_trial_header(&p).unwrap().num_frames, 33);
    }

    #[test]
    fn truncation_reports_lengths() {
        let bytes = encode_trial(&random_trial(4));
        let cut = &bytes[..bytes.len() - 10];
        match decode_trial(cut) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("2048"), "{message}");
                assert!(message.contains("2038"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_grid() {
        let mut bytes = encode_trial(&random_trial(1));
        bytes[12] = 13;
        bytes[13] = 10;
        match decode_trial(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 12);
                assert!(message.contains("130"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_trial(&random_trial(1));
        bytes[0] = b'X';
        assert!(matches!(decode_trial(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
