use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::trial_io::{read_trial, read_trial_header};
use crate::error::{Error, Result};
use crate::signal::{RawTrial, TrialMeta};

/// One trial file; `path` is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub path: String,
    #[serde(flatten)]
    pub meta: TrialMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tag: String,
    pub gestures: usize,
    pub subjects: Vec<u16>,
    pub sessions: Vec<u8>,
    pub trials_per_gesture: u8,
    pub sample_rate: u32,
    pub trials: Vec<TrialEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        tag: impl Into<String>,
        gestures: usize,
        subjects: Vec<u16>,
        sessions: Vec<u8>,
        trials_per_gesture: u8,
        sample_rate: u32,
        trials: Vec<TrialEntry>,
    ) -> Self {
        DatasetManifest {
            tag: tag.into(),
            gestures,
            subjects,
            sessions,
            trials_per_gesture,
            sample_rate,
            trials,
            root: PathBuf::new(),
        }
    }

    /// Directory that trial paths are resolved against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Structural checks: ids within the declared sets, no duplicate keys.
    pub fn validate(&self) -> Result<()> {
        if self.gestures < 2 {
            return Err(Error::Manifest(format!("{} gestures; need at least 2", self.gestures)));
        }
        let subjects: BTreeSet<u16> = self.subjects.iter().copied().collect();
        let sessions: BTreeSet<u8> = self.sessions.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for e in &self.trials {
            let m = e.meta;
            if !subjects.contains(&m.subject) {
                return Err(Error::Manifest(format!("{}: subject {} not declared", e.path, m.subject)));
            }
            if !sessions.contains(&m.session) {
                return Err(Error::Manifest(format!("{}: session {} not declared", e.path, m.session)));
            }
            if m.gesture as usize >= self.gestures {
                return Err(Error::Manifest(format!(
                    "{}: gesture {} outside 0..{}",
                    e.path, m.gesture, self.gestures
                )));
            }
            if m.trial == 0 || m.trial > self.trials_per_gesture {
                return Err(Error::Manifest(format!(
                    "{}: trial {} outside 1..={}",
                    e.path, m.trial, self.trials_per_gesture
                )));
            }
            if !seen.insert(m) {
                return Err(Error::Manifest(format!("duplicate trial key {m:?}")));
            }
        }
        Ok(())
    }

    /// Reads every trial header and cross-checks it against its entry.
    pub fn verify_files(&self) -> Result<()> {
        for e in &self.trials {
            let h = read_trial_header(&self.resolve(e))?;
            if h.meta != e.meta {
                return Err(Error::Manifest(format!(
                    "{}: header says {:?}, manifest says {:?}",
                    e.path, h.meta, e.meta
                )));
            }
            if h.sample_rate != self.sample_rate {
                return Err(Error::Manifest(format!(
                    "{}: sampled at {} Hz, manifest declares {} Hz",
                    e.path, h.sample_rate, self.sample_rate
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &TrialEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn entry(&self, meta: &TrialMeta) -> Option<&TrialEntry> {
        self.trials.iter().find(|e| &e.meta == meta)
    }

    pub fn metas(&self) -> impl Iterator<Item = TrialMeta> + '_ {
        self.trials.iter().map(|e| e.meta)
    }

    pub fn read(&self, meta: &TrialMeta) -> Result<RawTrial> {
        let entry = self
            .entry(meta)
            .ok_or_else(|| Error::Manifest(format!("no trial {meta:?} in manifest")))?;
        let trial = read_trial(&self.resolve(entry))?;
        if trial.meta != *meta {
            return Err(Error::Manifest(format!(
                "{}: header says {:?}, manifest says {meta:?}",
                entry.path, trial.meta
            )));
        }
        Ok(trial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(subject: u16, gesture: u16, trial: u8) -> TrialEntry {
        TrialEntry {
            path: format!("s{subject}_g{gesture}_t{trial}.semg"),
            meta: TrialMeta { subject, session: 1, gesture, trial },
        }
    }

    fn manifest(trials: Vec<TrialEntry>) -> DatasetManifest {
        DatasetManifest::new("t", 2, vec![1], vec![1], 2, 1000, trials)
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(manifest(vec![entry(1, 0, 1), entry(1, 1, 1)]).validate().is_ok());
        let mut dup = entry(1, 0, 1);
        dup.path = "other".into();
        assert!(manifest(vec![entry(1, 0, 1), dup]).validate().is_err());
    }

    #[test]
    fn out_of_range_ids_rejected() {
        assert!(manifest(vec![entry(2, 0, 1)]).validate().is_err());
        assert!(manifest(vec![entry(1, 2, 1)]).validate().is_err());
        assert!(manifest(vec![entry(1, 0, 3)]).validate().is_err());
        assert!(manifest(vec![entry(1, 0, 0)]).validate().is_err());
    }

    #[test]
    fn json_round_trip_keeps_relative_paths() {
        let m = manifest(vec![entry(1, 0, 1)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/manifest.json");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.trials, m.trials);
        assert_eq!(back.root(), dir.path().join("sub"));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"subject\": 1"));
    }

    #[test]
    fn header_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry(1, 0, 1);
        let mut wrong = e.meta;
        wrong.gesture = 1;
        let t = RawTrial::new(wrong, 1000, vec![0.0; 128 * 20]).unwrap();
        crate::data::write_trial(&dir.path().join(&e.path), &t).unwrap();
        let mut m = manifest(vec![e]);
        m.set_root(dir.path());
        assert!(matches!(m.verify_files(), Err(Error::Manifest(_))));
    }
}
