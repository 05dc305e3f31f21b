//! Synthetic grid recordings with class-distinct spatial structure: each
//! gesture is a sum of Gaussian bumps on the 16×8 grid, each modulated by its
//! own slow envelope, with optional noise, mains hum, electrode shift and subject warp.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_trial, DatasetManifest, TrialEntry, TrialSource};
use crate::error::{Error, Result};
use crate::nn::RngStream;
use crate::signal::{RawTrial, TrialMeta, CHANNELS, GRID_COLS, GRID_ROWS, VOLTAGE_RANGE_MV};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tag: String,
    pub gestures: usize,
    pub subjects: u16,
    pub sessions: u8,
    pub trials_per_gesture: u8,
    pub frames_per_trial: usize,
    pub sample_rate: u32,
    /// Peak |template| in mV before envelope scaling.
    pub template_peak_mv: f64,
    pub envelope_min: f64,
    pub envelope_max: f64,
    /// Range of bump standard deviations, in electrode pitches.
    pub bump_width_min: f64,
    pub bump_width_max: f64,
    pub noise_sigma_mv: f64,
    pub interference_mv: f64,
    /// Column roll applied per session after the first.
    pub session_roll: usize,
    /// Per-channel session gains are drawn from `1 ± gain_drift`.
    pub gain_drift: f64,
    pub subject_warp: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            tag: "synthetic".into(),
            gestures: 8,
            subjects: 1,
            sessions: 1,
            trials_per_gesture: 10,
            frames_per_trial: 1000,
            sample_rate: 1000,
            template_peak_mv: 1.6,
            envelope_min: 0.5,
            envelope_max: 1.5,
            bump_width_min: 1.5,
            bump_width_max: 3.0,
            noise_sigma_mv: 0.3,
            interference_mv: 0.5,
            session_roll: 0,
            gain_drift: 0.0,
            subject_warp: 0.0,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.gestures < 2 || self.gestures > u16::MAX as usize {
            return bad(format!("gestures = {} outside 2..=65535", self.gestures));
        }
        if self.subjects == 0 || self.sessions == 0 || self.trials_per_gesture == 0 {
            return bad("subjects, sessions and trials_per_gesture must be positive".into());
        }
        if self.frames_per_trial == 0 || self.sample_rate <= 110 {
            return bad("frames_per_trial must be positive and sample_rate above 110 Hz".into());
        }
        if !(0.0 < self.envelope_min && self.envelope_min <= self.envelope_max) {
            return bad(format!("envelope range [{}, {}] invalid", self.envelope_min, self.envelope_max));
        }
        if !(0.0 < self.bump_width_min && self.bump_width_min <= self.bump_width_max) {
            return bad(format!("bump width range [{}, {}] invalid", self.bump_width_min, self.bump_width_max));
        }
        if self.template_peak_mv <= 0.0 || self.template_peak_mv * self.envelope_max > VOLTAGE_RANGE_MV as f64 {
            return bad(format!(
                "templates peak at {} mV after envelope scaling; must stay within ±{VOLTAGE_RANGE_MV} mV",
                self.template_peak_mv * self.envelope_max
            ));
        }
        if self.session_roll >= GRID_COLS {
            return bad(format!("session_roll {} must be below {GRID_COLS}", self.session_roll));
        }
        if self.noise_sigma_mv < 0.0 || self.interference_mv < 0.0 || !(0.0..1.0).contains(&self.gain_drift) || self.subject_warp < 0.0 {
            return bad("noise, interference, warp must be non-negative and gain_drift in [0, 1)".into());
        }
        Ok(())
    }
}

/// Deterministic generator; every trial is a pure function of the config and
/// the trial's identity.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    config: SyntheticConfig,
    components: Vec<Vec<Vec<f64>>>,
    templates: Vec<Vec<f64>>,
    root: RngStream,
}

/// Gaussian bumps of one gesture, scaled so their sum peaks at `peak`.
fn bump_components(rng: &mut RngStream, peak: f64, widths: (f64, f64)) -> Vec<Vec<f64>> {
    let bumps = 2 + rng.below(2);
    let mut parts = Vec::with_capacity(bumps);
    for _ in 0..bumps {
        let r0 = rng.uniform_range(0.0, (GRID_ROWS - 1) as f64);
        let c0 = rng.uniform_range(0.0, (GRID_COLS - 1) as f64);
        let width = rng.uniform_range(widths.0, widths.1);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let amp = sign * rng.uniform_range(0.5, 1.0);
        let mut t = vec![0.0; CHANNELS];
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
                t[r * GRID_COLS + c] = amp * (-d2 / (2.0 * width * width)).exp();
            }
        }
        parts.push(t);
    }
    let max = sum_parts(&parts).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for p in &mut parts {
        p.iter_mut().for_each(|v| *v *= peak / max);
    }
    parts
}

fn sum_parts(parts: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; CHANNELS];
    for p in parts {
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Largest cosine similarity allowed between two gesture templates.
const MAX_TEMPLATE_SIMILARITY: f64 = 0.6;

impl SyntheticGenerator {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new("synthetic", config.seed);
        let mut rng = root.derive("templates");
        let mut templates: Vec<Vec<f64>> = Vec::with_capacity(config.gestures);
        let mut components = Vec::with_capacity(config.gestures);
        let mut attempts = 0;
        while templates.len() < config.gestures {
            let parts = bump_components(&mut rng, config.template_peak_mv, (config.bump_width_min, config.bump_width_max));
            let t = sum_parts(&parts);
            attempts += 1;
            if attempts > 10_000 || templates.iter().all(|o| cosine(o, &t).abs() < MAX_TEMPLATE_SIMILARITY) {
                templates.push(t);
                components.push(parts);
            }
        }
        Ok(SyntheticGenerator {
            config,
            components,
            templates,
            root,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Unwarped, unshifted gesture template in mV.
    pub fn base_template(&self, gesture: usize) -> &[f64] {
        &self.templates[gesture]
    }

    /// Bumps of a gesture before warp and session transform; they sum to
    /// [`base_template`](Self::base_template).
    pub fn components(&self, gesture: usize) -> &[Vec<f64>] {
        &self.components[gesture]
    }

    /// Smooth multiplicative field for a subject; all ones without warp.
    pub fn subject_field(&self, subject: u16) -> Vec<f64> {
        let mut field = vec![1.0; CHANNELS];
        if self.config.subject_warp == 0.0 {
            return field;
        }
        let mut rng = self.root.derive(&format!("warp/s{subject}"));
        for _ in 0..2 {
            let fr = rng.uniform_range(0.3, 1.0);
            let fc = rng.uniform_range(0.3, 1.0);
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            let amp = rng.uniform_range(0.5, 1.0) * self.config.subject_warp;
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    let arg = 2.0 * PI * (fr * r as f64 / GRID_ROWS as f64 + fc * c as f64 / GRID_COLS as f64) + phase;
                    field[r * GRID_COLS + c] += amp * arg.sin();
                }
            }
        }
        field.iter().map(|v| v.max(0.2)).collect()
    }

    /// Column roll for a session (0 for the first).
    pub fn session_roll(&self, session: u8) -> usize {
        (session.saturating_sub(1) as usize * self.config.session_roll) % GRID_COLS
    }

    /// Per-channel gains of a session; all ones for the first.
    pub fn session_gains(&self, subject: u16, session: u8) -> Vec<f64> {
        if session <= 1 || self.config.gain_drift == 0.0 {
            return vec![1.0; CHANNELS];
        }
        let d = self.config.gain_drift;
        let mut rng = self.root.derive(&format!("gain/s{subject}/sess{session}"));
        (0..CHANNELS).map(|_| rng.uniform_range(1.0 - d, 1.0 + d)).collect()
    }

    /// Applies a session's roll and gains to one frame.
    pub fn session_transform(&self, subject: u16, session: u8, frame: &[f64]) -> Vec<f64> {
        let roll = self.session_roll(session);
        let gains = self.session_gains(subject, session);
        let mut out = vec![0.0; CHANNELS];
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let dst = r * GRID_COLS + (c + roll) % GRID_COLS;
                out[dst] = frame[r * GRID_COLS + c] * gains[dst];
            }
        }
        out
    }

    /// Expected frame at unit envelope, after warp and session transform.
    pub fn template(&self, subject: u16, session: u8, gesture: usize) -> Vec<f64> {
        let field = self.subject_field(subject);
        let warped: Vec<f64> = self.templates[gesture].iter().zip(&field).map(|(t, w)| t * w).collect();
        self.session_transform(subject, session, &warped)
    }

    /// Activation envelope of each bump of the trial's gesture; the bumps of
    /// one gesture wax and wane independently.
    pub fn envelopes(&self, meta: &TrialMeta) -> Vec<Vec<f64>> {
        let cfg = &self.config;
        let mid = 0.5 * (cfg.envelope_min + cfg.envelope_max);
        let half = 0.5 * (cfg.envelope_max - cfg.envelope_min);
        (0..self.components[meta.gesture as usize].len())
            .map(|j| {
                let mut rng = self
                    .root
                    .derive(&format!("envelope/s{}/g{}/t{}/b{j}", meta.subject, meta.gesture, meta.trial));
                let freq = rng.uniform_range(0.5, 2.0);
                let phase = rng.uniform_range(0.0, 2.0 * PI);
                (0..cfg.frames_per_trial)
                    .map(|t| mid + half * (2.0 * PI * freq * t as f64 / cfg.sample_rate as f64 + phase).sin())
                    .collect()
            })
            .collect()
    }

    pub fn metas(&self) -> Vec<TrialMeta> {
        let cfg = &self.config;
        let mut out = Vec::new();
        for subject in 1..=cfg.subjects {
            for session in 1..=cfg.sessions {
                for gesture in 0..cfg.gestures as u16 {
                    for trial in 1..=cfg.trials_per_gesture {
                        out.push(TrialMeta { subject, session, gesture, trial });
                    }
                }
            }
        }
        out
    }

    pub fn trial(&self, meta: &TrialMeta) -> Result<RawTrial> {
        let cfg = &self.config;
        if meta.subject == 0
            || meta.subject > cfg.subjects
            || meta.session == 0
            || meta.session > cfg.sessions
            || meta.gesture as usize >= cfg.gestures
            || meta.trial == 0
            || meta.trial > cfg.trials_per_gesture
        {
            return Err(Error::Manifest(format!("{meta:?} outside the synthetic design")));
        }
        let field = self.subject_field(meta.subject);
        let parts: Vec<Vec<f64>> = self.components[meta.gesture as usize]
            .iter()
            .map(|p| p.iter().zip(&field).map(|(t, w)| t * w).collect())
            .collect();
        let envelopes = self.envelopes(meta);
        let tag = format!("s{}/sess{}/g{}/t{}", meta.subject, meta.session, meta.gesture, meta.trial);
        let mut noise = self.root.derive(&format!("noise/{tag}"));
        let hum_phase = self.root.derive(&format!("hum/{tag}")).uniform_range(0.0, 2.0 * PI);

        let mut samples = Vec::with_capacity(cfg.frames_per_trial * CHANNELS);
        let mut frame = vec![0.0; CHANNELS];
        for t in 0..cfg.frames_per_trial {
            let hum = cfg.interference_mv * (2.0 * PI * 50.0 * t as f64 / cfg.sample_rate as f64 + hum_phase).sin();
            frame.fill(hum);
            for (p, e) in parts.iter().zip(&envelopes) {
                for (f, v) in frame.iter_mut().zip(p) {
                    *f += e[t] * v;
                }
            }
            let shifted = self.session_transform(meta.subject, meta.session, &frame);
            for v in shifted {
                let n = if cfg.noise_sigma_mv > 0.0 { cfg.noise_sigma_mv * noise.normal() } else { 0.0 };
                samples.push((v + n) as f32);
            }
        }
        RawTrial::new(*meta, cfg.sample_rate, samples)
    }

    /// Writes every trial plus `manifest.json` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(out_dir)?;
        let cfg = &self.config;
        let mut entries = Vec::new();
        for meta in self.metas() {
            let path = format!(
                "s{:02}/session{}/g{:02}_t{:02}.semg",
                meta.subject, meta.session, meta.gesture, meta.trial
            );
            write_trial(&out_dir.join(&path), &self.trial(&meta)?)?;
            entries.push(TrialEntry { path, meta });
        }
        let mut manifest = DatasetManifest::new(
            cfg.tag.clone(),
            cfg.gestures,
            (1..=cfg.subjects).collect(),
            (1..=cfg.sessions).collect(),
            cfg.trials_per_gesture,
            cfg.sample_rate,
            entries,
        );
        manifest.set_root(out_dir);
        manifest.save(&out_dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

impl TrialSource for SyntheticGenerator {
    fn gestures(&self) -> usize {
        self.config.gestures
    }

    fn sample_rate(&self) -> u32 {
        self.config.sample_rate
    }

    fn load(&self, meta: &TrialMeta) -> Result<RawTrial> {
        self.trial(meta)
    }
}

/// Writes a synthetic dataset and returns its manifest.
pub fn generate_synthetic(config: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    SyntheticGenerator::new(config.clone())?.write(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{frame_to_image, mirror};

    fn quiet() -> SyntheticConfig {
        SyntheticConfig {
            noise_sigma_mv: 0.0,
            interference_mv: 0.0,
            envelope_min: 1.0,
            envelope_max: 1.0,
            frames_per_trial: 50,
            trials_per_gesture: 2,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_frames_image_like_template() {
        let g = SyntheticGenerator::new(quiet()).unwrap();
        let meta = TrialMeta { subject: 1, session: 1, gesture: 4, trial: 2 };
        let trial = g.trial(&meta).unwrap();
        let template: Vec<f32> = g.template(1, 1, 4).iter().map(|v| *v as f32).collect();
        let expected = mirror(&frame_to_image(&template).unwrap()).unwrap();
        for t in 0..trial.num_frames() {
            assert_eq!(mirror(&frame_to_image(trial.frame(t)).unwrap()).unwrap(), expected);
        }
    }

    #[test]
    fn templates_within_range() {
        let g = SyntheticGenerator::new(SyntheticConfig::default()).unwrap();
        for k in 0..8 {
            let peak = g.base_template(k).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 1.6).abs() < 1e-12);
            assert!(peak * 1.5 <= 2.5);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SyntheticConfig { frames_per_trial: 20, ..Default::default() };
        let meta = TrialMeta { subject: 1, session: 1, gesture: 2, trial: 3 };
        let a = SyntheticGenerator::new(cfg.clone()).unwrap().trial(&meta).unwrap();
        let b = SyntheticGenerator::new(cfg.clone()).unwrap().trial(&meta).unwrap();
        assert_eq!(a, b);
        let c = SyntheticGenerator::new(SyntheticConfig { seed: 2, ..cfg }).unwrap().trial(&meta).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn second_session_is_rolled_and_scaled() {
        let cfg = SyntheticConfig { sessions: 2, session_roll: 1, gain_drift: 0.2, ..quiet() };
        let g = SyntheticGenerator::new(SyntheticConfig { envelope_min: 0.5, envelope_max: 1.5, ..cfg }).unwrap();
        let s1 = g.trial(&TrialMeta { subject: 1, session: 1, gesture: 3, trial: 1 }).unwrap();
        let s2 = g.trial(&TrialMeta { subject: 1, session: 2, gesture: 3, trial: 1 }).unwrap();
        let gains = g.session_gains(1, 2);
        for t in 0..s1.num_frames() {
            let f1: Vec<f64> = s1.frame(t).iter().map(|v| *v as f64).collect();
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    let dst = r * GRID_COLS + (c + 1) % GRID_COLS;
                    let want = (f1[r * GRID_COLS + c] * gains[dst]) as f32;
                    let got = s2.frame(t)[dst];
                    assert!((want - got).abs() <= 1e-6 * want.abs().max(1.0), "{want} vs {got}");
                }
            }
        }
    }

    #[test]
    fn subject_warp_changes_templates() {
        let g = SyntheticGenerator::new(SyntheticConfig { subjects: 2, subject_warp: 0.3, ..quiet() }).unwrap();
        assert_ne!(g.template(1, 1, 0), g.template(2, 1, 0));
        assert!(g.subject_field(1).iter().all(|v| *v >= 0.2));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SyntheticGenerator::new(SyntheticConfig { session_roll: 8, ..Default::default() }).is_err());
        assert!(SyntheticGenerator::new(SyntheticConfig { template_peak_mv: 2.0, ..Default::default() }).is_err());
        assert!(SyntheticGenerator::new(SyntheticConfig { gestures: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn writes_manifest_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { gestures: 2, trials_per_gesture: 2, frames_per_trial: 30, ..Default::default() };
        let m = generate_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(m.trials.len(), 4);
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        loaded.verify_files().unwrap();
        let meta = m.trials[3].meta;
        assert_eq!(loaded.read(&meta).unwrap(), SyntheticGenerator::new(cfg).unwrap().trial(&meta).unwrap());
    }
}
