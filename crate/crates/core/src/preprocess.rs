//! Signal conditioning and epoch segmentation.
//!
//! Order is fixed: notch -> low-pass -> resample to 10 Hz -> robust z-score ->
//! 7-minute epochs. Both IIR filters run at the source rate (forward-backward,
//! zero phase) so the low-pass also serves as the anti-alias stage.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record_io::{EventClass, LabelTimeline, SignalRecord};

pub const TARGET_HZ: f64 = 10.0;
pub const EPOCH_S: usize = 420;
pub const EPOCH_LEN: usize = 4200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_hz: f64,
    pub notch_hz: f64,
    pub notch_q: f64,
    pub lowpass_hz: f64,
    pub lowpass_order: usize,
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    pub train_stride_s: usize,
    pub test_stride_s: usize,
    pub epoch_s: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_hz: TARGET_HZ,
            notch_hz: 60.0,
            notch_q: 30.0,
            lowpass_hz: 10.0,
            lowpass_order: 4,
            clip_lo_pct: 1.0,
            clip_hi_pct: 99.0,
            train_stride_s: 30,
            test_stride_s: 1,
            epoch_s: EPOCH_S,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_hz != TARGET_HZ || self.epoch_s != EPOCH_S {
            return Err(Error::Config(format!(
                "epoch geometry is fixed at {EPOCH_S} s x {TARGET_HZ} Hz"
            )));
        }
        if self.train_stride_s == 0 || self.test_stride_s == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.lowpass_order == 0 || !self.lowpass_order.is_multiple_of(2) {
            return Err(Error::Config(
                "lowpass_order must be a positive even number".into(),
            ));
        }
        if !(0.0..50.0).contains(&self.clip_lo_pct) || !(50.0..=100.0).contains(&self.clip_hi_pct) {
            return Err(Error::Config("clip percentiles out of range".into()));
        }
        if !(self.notch_q > 0.0) {
            return Err(Error::Config("notch_q must be positive".into()));
        }
        Ok(())
    }
}

/// A fixed-length normalized window labelled by its center second.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub samples: Vec<f32>,
    pub center_label: EventClass,
    pub record_id: String,
    pub center_time_s: f64,
}

/// Direct-form II transposed biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// RBJ cookbook notch.
    pub fn notch(sample_rate_hz: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / sample_rate_hz;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        let c = -2.0 * w0.cos();
        Biquad {
            b: [1.0 / a0, c / a0, 1.0 / a0],
            a: [c / a0, (1.0 - alpha) / a0],
        }
    }

    /// RBJ cookbook low-pass (bilinear with prewarping).
    pub fn lowpass(sample_rate_hz: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / sample_rate_hz;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha;
        let b1 = (1.0 - cw) / a0;
        Biquad {
            b: [b1 / 2.0, b1, b1 / 2.0],
            a: [-2.0 * cw / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let num_re = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let num_im = -(self.b[1] * s1 + self.b[2] * s2);
        let den_re = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let den_im = -(self.a[0] * s1 + self.a[1] * s2);
        ((num_re * num_re + num_im * num_im) / (den_re * den_re + den_im * den_im)).sqrt()
    }

    /// Steady-state DF2T delay line for a unit step.
    fn step_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * y;
        let z1 = self.b[1] - self.a[0] * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Butterworth low-pass as cascaded biquads (`order` even).
pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Vec<Biquad> {
    let n = order as f64;
    (0..order / 2)
        .map(|k| {
            let psi = PI * (2 * k + 1) as f64 / (2.0 * n);
            Biquad::lowpass(sample_rate_hz, cutoff_hz, 1.0 / (2.0 * psi.cos()))
        })
        .collect()
}

fn sos_pass(sections: &[Biquad], x: &mut [f64]) {
    let Some(&x0) = x.first() else { return };
    let mut level = x0;
    for s in sections {
        let z = s.step_state();
        s.run(x, [z[0] * level, z[1] * level]);
        level *= s.dc_gain();
    }
}

/// Zero-phase forward-backward filtering with odd-reflection padding and
/// steady-state initial conditions. Linear in the input.
pub fn filtfilt(sections: &[Biquad], samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    if n < 2 || sections.is_empty() {
        return samples.to_vec();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (samples[0], samples[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - samples[i]));
    ext.extend_from_slice(samples);
    ext.extend((1..=pad).map(|i| 2.0 * last - samples[n - 1 - i]));
    sos_pass(sections, &mut ext);
    ext.reverse();
    sos_pass(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Result of a filter stage; `skipped` is set when the cutoff is at or above Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub samples: Vec<f64>,
    pub skipped: bool,
}

fn nyquist_guard(
    samples: &[f64],
    sample_rate_hz: f64,
    freq_hz: f64,
    what: &str,
) -> Option<Filtered> {
    if freq_hz >= sample_rate_hz / 2.0 {
        log::warn!("{what} at {freq_hz} Hz skipped: at or above Nyquist for {sample_rate_hz} Hz");
        Some(Filtered {
            samples: samples.to_vec(),
            skipped: true,
        })
    } else {
        None
    }
}

pub fn notch_filter(samples: &[f64], sample_rate_hz: f64, notch_hz: f64, q: f64) -> Filtered {
    if let Some(out) = nyquist_guard(samples, sample_rate_hz, notch_hz, "notch") {
        return out;
    }
    Filtered {
        samples: filtfilt(&[Biquad::notch(sample_rate_hz, notch_hz, q)], samples),
        skipped: false,
    }
}

pub fn lowpass_filter(
    samples: &[f64],
    sample_rate_hz: f64,
    cutoff_hz: f64,
    order: usize,
) -> Filtered {
    if let Some(out) = nyquist_guard(samples, sample_rate_hz, cutoff_hz, "low-pass") {
        return out;
    }
    Filtered {
        samples: filtfilt(
            &butterworth_lowpass(order, cutoff_hz, sample_rate_hz),
            samples,
        ),
        skipped: false,
    }
}

/// Resamples to 10 Hz by Catmull-Rom interpolation at the output instants.
///
/// Band-limiting is the job of the preceding low-pass stage.
pub fn resample_to_10hz(samples: &[f64], sample_rate_hz: f64) -> Result<Vec<f64>> {
    resample(samples, sample_rate_hz, TARGET_HZ)
}

pub fn resample(samples: &[f64], sample_rate_hz: f64, target_hz: f64) -> Result<Vec<f64>> {
    if sample_rate_hz < TARGET_HZ {
        return Err(Error::RateTooLow(sample_rate_hz));
    }
    if (sample_rate_hz - target_hz).abs() < 1e-9 {
        return Ok(samples.to_vec());
    }
    let n = samples.len();
    if n < 2 {
        return Ok(samples.to_vec());
    }
    let out_len = (n as f64 * target_hz / sample_rate_hz).round() as usize;
    let step = sample_rate_hz / target_hz;
    // linear extrapolation one sample past each end
    let at = |i: isize| -> f64 {
        if i < 0 {
            2.0 * samples[0] - samples[1]
        } else if i as usize >= n {
            2.0 * samples[n - 1] - samples[n - 2]
        } else {
            samples[i as usize]
        }
    };
    Ok((0..out_len)
        .map(|k| {
            let pos = (k as f64 * step).min((n - 1) as f64);
            let i = pos.floor() as isize;
            let t = pos - i as f64;
            let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
            let t2 = t * t;
            let t3 = t2 * t;
            0.5 * (2.0 * p1
                + (p2 - p0) * t
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
                + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3)
        })
        .collect())
}

/// Percentile with linear interpolation between closest ranks, on sorted data.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and population std of the copy clipped to `[p_lo, p_hi]` percentiles.
pub fn clipped_stats(samples: &[f64], lo_pct: f64, hi_pct: f64) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    let n = samples.len() as f64;
    let clipped = || samples.iter().map(|&v| v.clamp(lo, hi));
    let mean = clipped().sum::<f64>() / n;
    let var = clipped().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const MIN_NORMALIZE_LEN: usize = 100;
pub const DEGENERATE_STD: f64 = 1e-8;

/// Z-scores the whole signal with statistics of its percentile-clipped copy.
pub fn normalize(samples: &[f64], lo_pct: f64, hi_pct: f64) -> Result<Vec<f64>> {
    if samples.len() < MIN_NORMALIZE_LEN {
        return Err(Error::InvalidRecord(format!(
            "normalization needs at least {MIN_NORMALIZE_LEN} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signal contains NaN or infinity".into()));
    }
    let (mean, std) = clipped_stats(samples, lo_pct, hi_pct);
    if !(std > DEGENERATE_STD) {
        return Err(Error::DegenerateSignal(std));
    }
    Ok(samples.iter().map(|v| (v - mean) / std).collect())
}

/// Full conditioning chain; returns the normalized 10 Hz signal.
pub fn condition(record: &SignalRecord, cfg: &PreprocessConfig) -> Result<Vec<f32>> {
    let raw: Vec<f64> = record.samples.iter().map(|&v| v as f64).collect();
    let fs = record.sample_rate_hz;
    let notched = notch_filter(&raw, fs, cfg.notch_hz, cfg.notch_q);
    let smoothed = lowpass_filter(&notched.samples, fs, cfg.lowpass_hz, cfg.lowpass_order);
    let resampled = resample(&smoothed.samples, fs, cfg.target_hz)?;
    let normalized = normalize(&resampled, cfg.clip_lo_pct, cfg.clip_hi_pct)?;
    Ok(normalized.into_iter().map(|v| v as f32).collect())
}

/// Start offsets (seconds) of every full epoch at the given stride.
pub fn epoch_starts(duration_s: usize, stride_s: usize) -> Vec<usize> {
    if duration_s < EPOCH_S || stride_s == 0 {
        return Vec::new();
    }
    (0..=(duration_s - EPOCH_S) / stride_s)
        .map(|k| k * stride_s)
        .collect()
}

/// Cuts a normalized 10 Hz signal into 7-minute epochs labelled at `t + 210 s`.
pub fn segment(
    record_id: &str,
    samples_10hz: &[f32],
    timeline: &LabelTimeline,
    stride_s: usize,
) -> Result<Vec<Epoch>> {
    let duration_s = samples_10hz.len() / TARGET_HZ as usize;
    if duration_s < EPOCH_S {
        return Err(Error::RecordTooShort {
            duration_s: samples_10hz.len() as f64 / TARGET_HZ,
            required_s: EPOCH_S as f64,
        });
    }
    if stride_s == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    epoch_starts(duration_s, stride_s)
        .into_iter()
        .map(|t| {
            let center = t + EPOCH_S / 2;
            let label = *timeline.classes.get(center).ok_or_else(|| {
                Error::InvalidRecord(format!(
                    "{record_id}: timeline of {} s does not cover second {center}",
                    timeline.len()
                ))
            })?;
            let start = t * TARGET_HZ as usize;
            Ok(Epoch {
                samples: samples_10hz[start..start + EPOCH_LEN].to_vec(),
                center_label: label,
                record_id: record_id.to_string(),
                center_time_s: center as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(freq: f64, fs: f64, seconds: f64) -> Vec<f64> {
        let n = (seconds * fs) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn notch_kills_line_noise() {
        let x = sine(60.0, 250.0, 20.0);
        let y = notch_filter(&x, 250.0, 60.0, 30.0);
        assert!(!y.skipped);
        assert!(rms(&y.samples) < 0.1 * rms(&x), "{}", rms(&y.samples));
        let b = Biquad::notch(250.0, 60.0, 30.0);
        // forward-backward doubles the attenuation in dB
        assert!(20.0 * (b.gain_at(60.0, 250.0).powi(2) + 1e-300).log10() < -20.0);
        let pass_db = 20.0 * b.gain_at(0.9, 250.0).powi(2).log10();
        assert!(pass_db.abs() < 0.5);
    }

    #[test]
    fn notch_passband() {
        let x = sine(0.3, 250.0, 60.0);
        let y = notch_filter(&x, 250.0, 60.0, 30.0);
        assert!((rms(&y.samples) / rms(&x) - 1.0).abs() < 0.01);
    }

    #[test]
    fn filters_skip_above_nyquist() {
        let x = sine(0.3, 10.0, 100.0);
        let y = notch_filter(&x, 10.0, 60.0, 30.0);
        assert!(y.skipped);
        assert_eq!(y.samples, x);
        let y = lowpass_filter(&x, 10.0, 10.0, 4);
        assert!(y.skipped);
        assert_eq!(y.samples, x);
    }

    #[test]
    fn lowpass_response() {
        let x = sine(30.0, 200.0, 20.0);
        let y = lowpass_filter(&x, 200.0, 10.0, 4);
        assert!(rms(&y.samples) < 0.1 * rms(&x));
        let sections = butterworth_lowpass(4, 10.0, 200.0);
        let g: f64 = sections.iter().map(|s| s.gain_at(20.0, 200.0)).product();
        assert!(20.0 * (g * g).log10() < -20.0);

        let x = sine(0.25, 200.0, 60.0);
        let y = lowpass_filter(&x, 200.0, 10.0, 4);
        assert!((rms(&y.samples) / rms(&x) - 1.0).abs() < 0.01);

        let dc = vec![3.25; 500];
        let y = lowpass_filter(&dc, 200.0, 10.0, 4);
        for v in &y.samples {
            assert!((v - 3.25).abs() < 1e-9);
        }
    }

    #[test]
    fn filters_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * 3.7).collect();
        let a = notch_filter(&x, 250.0, 60.0, 30.0).samples;
        let b = notch_filter(&scaled, 250.0, 60.0, 30.0).samples;
        let c = lowpass_filter(&x, 250.0, 10.0, 4).samples;
        let d = lowpass_filter(&scaled, 250.0, 10.0, 4).samples;
        for i in 0..x.len() {
            assert!((3.7 * a[i] - b[i]).abs() < 1e-9);
            assert!((3.7 * c[i] - d[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_lengths() {
        assert_eq!(resample_to_10hz(&vec![0.0; 1200], 200.0).unwrap().len(), 60);
        let x: Vec<f64> = (0..57).map(|i| i as f64).collect();
        assert_eq!(resample_to_10hz(&x, 10.0).unwrap(), x);
        assert!(matches!(
            resample_to_10hz(&x, 8.0),
            Err(Error::RateTooLow(_))
        ));
    }

    #[test]
    fn resample_reconstructs_slow_sine() {
        for fs in [125.0, 200.0, 250.0] {
            let x = sine(0.3, fs, 120.0);
            let y = resample_to_10hz(&x, fs).unwrap();
            let max_err = y
                .iter()
                .enumerate()
                .map(|(k, v)| (v - (2.0 * PI * 0.3 * k as f64 / 10.0).sin()).abs())
                .fold(0.0, f64::max);
            assert!(max_err < 1e-3, "fs {fs}: {max_err}");
        }
    }

    #[test]
    fn normalize_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..20_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let y = normalize(&x, 1.0, 99.0).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(mean.abs() < 0.05);
        let (m, s) = clipped_stats(&y, 1.0, 99.0);
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_signal_is_degenerate() {
        assert!(matches!(
            normalize(&vec![4.0; 500], 1.0, 99.0),
            Err(Error::DegenerateSignal(_))
        ));
    }

    #[test]
    fn spike_is_clipped_out_of_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let clean = normalize(&x, 1.0, 99.0).unwrap();
        x[2500] = 1e6;
        let y = normalize(&x, 1.0, 99.0).unwrap();
        let body: Vec<f64> = y
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 2500)
            .map(|(_, v)| *v)
            .collect();
        let mean = body.iter().sum::<f64>() / body.len() as f64;
        let std = (body.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / body.len() as f64).sqrt();
        assert!((std - 1.0).abs() < 0.05, "{std}");
        // one sample moving past p99 barely shifts the statistics
        assert!((y[0] - clean[0]).abs() < 0.01);
    }

    #[test]
    fn epoch_counts() {
        let tl = LabelTimeline::no_events(480);
        let x = vec![0.0f32; 4800];
        let epochs = segment("r", &x, &tl, 30).unwrap();
        assert_eq!(epochs.len(), 3);
        assert_eq!(
            epochs.iter().map(|e| e.center_time_s).collect::<Vec<_>>(),
            vec![210.0, 240.0, 270.0]
        );
        assert!(epochs.iter().all(|e| e.samples.len() == EPOCH_LEN));
        let epochs = segment("r", &vec![0.0f32; 4210], &LabelTimeline::no_events(421), 1).unwrap();
        assert_eq!(epochs.len(), 2);
        assert!(matches!(
            segment("r", &vec![0.0f32; 4100], &LabelTimeline::no_events(410), 1),
            Err(Error::RecordTooShort { .. })
        ));
    }

    #[test]
    fn epoch_label_is_center_second() {
        let mut tl = LabelTimeline::no_events(480);
        for s in 205..215 {
            tl.classes[s] = EventClass::CentralApnea;
        }
        let epochs = segment("r", &vec![0.0f32; 4800], &tl, 30).unwrap();
        assert_eq!(epochs[0].center_label, EventClass::CentralApnea);
        assert_eq!(epochs[1].center_label, EventClass::NoEvent);
    }
}
