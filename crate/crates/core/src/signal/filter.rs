use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, `a[0] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }

    /// Pole radii of `1 + a1 z⁻¹ + a2 z⁻²`.
    pub fn pole_radii(&self) -> [f64; 2] {
        let disc = Complex64::new(self.a[1] * self.a[1] - 4.0 * self.a[2], 0.0).sqrt();
        let p1 = (-self.a[1] + disc) / 2.0;
        let p2 = (-self.a[1] - disc) / 2.0;
        [p1.norm(), p2.norm()]
    }

    /// Initial state for a unit step input in transposed direct form II.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[2] * g]
    }

    fn run(&self, x: &mut [f64], mut state: [f64; 2]) {
        for v in x.iter_mut() {
            let y = self.b[0] * *v + state[0];
            state[0] = self.b[1] * *v - self.a[1] * y + state[1];
            state[1] = self.b[2] * *v - self.a[2] * y;
            *v = y;
        }
    }
}

/// Butterworth band-stop as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct BandstopFilter {
    pub sections: Vec<Biquad>,
    pub sample_rate: f64,
    pub stop_band: (f64, f64),
    /// Order of the low-pass prototype; the band-stop has twice this many poles.
    pub order: usize,
}

/// Designs a Butterworth band-stop from the analog prototype through the
/// low-pass → band-stop transform and the bilinear transform, with both band
/// edges pre-warped. Each section is scaled to unit DC gain.
pub fn design_bandstop(sample_rate: f64, f1: f64, f2: f64, order: usize) -> Result<BandstopFilter> {
    if order == 0 {
        return Err(Error::Design("filter order must be at least 1".into()));
    }
    if !(f1 > 0.0 && f1 < f2 && f2 < sample_rate / 2.0) {
        return Err(Error::Design(format!(
            "stop band [{f1}, {f2}] Hz infeasible at {sample_rate} Hz sampling"
        )));
    }
    let fs2 = 2.0 * sample_rate;
    let w1 = fs2 * (PI * f1 / sample_rate).tan();
    let w2 = fs2 * (PI * f2 / sample_rate).tan();
    let bandwidth = w2 - w1;
    let w0_sq = w1 * w2;

    let mut analog = Vec::with_capacity(2 * order);
    for k in 1..=order {
        let theta = PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let disc = (Complex64::new(bandwidth * bandwidth, 0.0) - 4.0 * p * p * w0_sq).sqrt();
        analog.push((bandwidth + disc) / (2.0 * p));
        analog.push((bandwidth - disc) / (2.0 * p));
    }
    let digital: Vec<Complex64> = analog.iter().map(|s| (fs2 + s) / (fs2 - s)).collect();

    let notch = 2.0 * (w0_sq.sqrt() / fs2).atan();
    let zero_b = [1.0, -2.0 * notch.cos(), 1.0];

    let tol = 1e-10;
    let mut denominators = Vec::with_capacity(order);
    let mut reals: Vec<f64> = Vec::new();
    for p in &digital {
        if p.im > tol {
            denominators.push([1.0, -2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= tol {
            reals.push(p.re);
        }
    }
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        match pair {
            [a, b] => denominators.push([1.0, -(a + b), a * b]),
            _ => return Err(Error::Design("unpaired real pole".into())),
        }
    }
    if denominators.len() != order {
        return Err(Error::Design(format!(
            "expected {order} second-order sections, assembled {}",
            denominators.len()
        )));
    }

    let mut sections = Vec::with_capacity(order);
    for a in denominators {
        let mut s = Biquad { b: zero_b, a };
        let g = s.dc_gain();
        for b in &mut s.b {
            *b /= g;
        }
        if s.pole_radii().iter().any(|r| *r >= 1.0) {
            return Err(Error::Design("unstable section: pole on or outside the unit circle".into()));
        }
        sections.push(s);
    }

    Ok(BandstopFilter {
        sections,
        sample_rate,
        stop_band: (f1, f2),
        order,
    })
}

impl BandstopFilter {
    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64) -> Complex64 {
        let w = 2.0 * PI * freq / self.sample_rate;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude(&self, freq: f64) -> f64 {
        self.response(freq).norm()
    }

    /// Frequency (Hz) of the transmission zeros on the unit circle.
    pub fn notch_frequency(&self) -> f64 {
        let b = self.sections[0].b;
        let cos = -b[1] / (2.0 * b[0]);
        cos.clamp(-1.0, 1.0).acos() * self.sample_rate / (2.0 * PI)
    }

    /// Edge extension on each side of the zero-phase scheme.
    pub fn pad_len(&self) -> usize {
        3 * 2 * self.sections.len()
    }

    /// Single causal pass starting from rest.
    pub fn apply_causal(&self, signal: &[f64]) -> Vec<f64> {
        let mut y = signal.to_vec();
        for s in &self.sections {
            s.run(&mut y, [0.0; 2]);
        }
        y
    }

    fn run_from_steady_state(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let mut level = first;
        for s in &self.sections {
            let st = s.step_state();
            s.run(x, [st[0] * level, st[1] * level]);
            level *= s.dc_gain();
        }
    }

    /// Zero-phase forward-backward filtering with odd-reflection padding and
    /// steady-state initial conditions, so a constant input passes unchanged.
    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        let n = signal.len();
        if n <= pad {
            return Err(Error::Contract(format!(
                "signal of {n} samples too short for zero-phase filtering (needs more than {pad})"
            )));
        }
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (signal[0], signal[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

        self.run_from_steady_state(&mut ext);
        ext.reverse();
        self.run_from_steady_state(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mains() -> BandstopFilter {
        design_bandstop(1000.0, 45.0, 55.0, 2).unwrap()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn tone(freq: f64, seconds: f64) -> Vec<f64> {
        (0..(1000.0 * seconds) as usize)
            .map(|i| (2.0 * PI * freq * i as f64 / 1000.0).sin())
            .collect()
    }

    #[test]
    fn passes_dc_and_hits_edges() {
        let f = mains();
        assert_eq!(f.sections.len(), 2);
        assert!((f.magnitude(0.0) - 1.0).abs() < 1e-6);
        let edge = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.magnitude(45.0) - edge).abs() < 1e-3);
        assert!((f.magnitude(55.0) - edge).abs() < 1e-3);
    }

    #[test]
    fn zeros_sit_on_the_unit_circle() {
        let f = mains();
        // geometric centre of the pre-warped edges, mapped back
        let fs2 = 2000.0;
        let w = |hz: f64| fs2 * (PI * hz / 1000.0).tan();
        let centre = 2.0 * ((w(45.0) * w(55.0)).sqrt() / fs2).atan() * 1000.0 / (2.0 * PI);
        assert!((f.notch_frequency() - centre).abs() < 1e-9);
        assert!(f.magnitude(f.notch_frequency()) < 1e-6);
        assert!(f.magnitude(50.0) < 5e-3);
    }

    #[test]
    fn matches_reference_design() {
        // scipy.signal.butter(2, [45, 55], 'bandstop', fs=1000) magnitudes
        let f = mains();
        assert!((f.magnitude(50.0) - 2.337_53e-3).abs() < 1e-7);
        assert!((f.magnitude(100.0) - 0.999_858_89).abs() < 1e-7);
    }

    #[test]
    fn sections_are_stable() {
        for s in &mains().sections {
            assert!(s.pole_radii().iter().all(|r| *r < 1.0));
        }
    }

    #[test]
    fn infeasible_band_rejected() {
        assert!(design_bandstop(1000.0, 55.0, 45.0, 2).is_err());
        assert!(design_bandstop(1000.0, 45.0, 600.0, 2).is_err());
        assert!(design_bandstop(1000.0, 0.0, 55.0, 2).is_err());
        assert!(design_bandstop(1000.0, 45.0, 55.0, 0).is_err());
    }

    #[test]
    fn odd_orders_design() {
        let f = design_bandstop(1000.0, 45.0, 55.0, 3).unwrap();
        assert_eq!(f.sections.len(), 3);
        assert!((f.magnitude(0.0) - 1.0).abs() < 1e-6);
        assert!((f.magnitude(45.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
    }

    #[test]
    fn constant_signal_preserved() {
        let y = mains().apply(&vec![1.7; 500]).unwrap();
        assert!(y.iter().all(|v| (v - 1.7).abs() < 1e-4));
    }

    #[test]
    fn matches_reference_forward_backward() {
        // scipy.signal.sosfiltfilt(sos, x, padlen=12) on the same tone
        let x = tone(50.0, 2.0);
        let y = mains().apply(&x).unwrap();
        assert_eq!(y.len(), x.len());
        assert!((rms(&y) / rms(&x) - 0.034_998_813_011).abs() < 1e-9);
        assert!((y[0] + 0.029_136_021_346).abs() < 1e-9);
        assert!((y[1999] + 0.201_496_283_631).abs() < 1e-9);
    }

    #[test]
    fn removes_mains_tone_away_from_edges() {
        let x = tone(50.0, 2.0);
        let y = mains().apply(&x).unwrap();
        let ratio = rms(&y[300..1700]) / rms(&x);
        assert!((ratio - 5.423_985_5e-5).abs() < 1e-10, "{ratio}");
    }

    #[test]
    fn channels_filter_independently() {
        let f = mains();
        let a = tone(50.0, 1.0);
        let b = tone(7.0, 1.0);
        let fa = f.apply(&a).unwrap();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + 2.0 * q).collect();
        let fb = f.apply(&b).unwrap();
        let fs = f.apply(&sum).unwrap();
        for i in 0..sum.len() {
            assert!((fs[i] - fa[i] - 2.0 * fb[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn keeps_low_frequency_tone() {
        let x = tone(10.0, 2.0);
        let y = mains().apply(&x).unwrap();
        assert!((rms(&y) / rms(&x) - 1.0).abs() < 0.02);
    }

    #[test]
    fn short_signal_rejected() {
        assert!(mains().apply(&[1.0; 12]).is_err());
        assert!(mains().apply(&[1.0; 13]).is_ok());
    }
}
