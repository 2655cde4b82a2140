//! Synthetic effort-belt recordings with injected, ground-truthed respiratory
//! events.
//!
//! Event morphologies are deliberately simple: central apneas nearly flatten
//! the belt, obstructive apneas shrink it and add irregular effort, hypopneas
//! shrink it moderately, and RERAs build up in a crescendo before an abrupt
//! return to baseline. Each event's depth is spread around its class nominal,
//! so deep hypopneas resemble shallow obstructive apneas while central apneas
//! stay unmistakable.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record_io::{
    annotation_path_for, save_annotations, save_record, write_manifest, AnnotationEvent,
    EventClass, SignalRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub breath_rate_hz: f64,
    /// Relative depth of the slow baseline amplitude modulation.
    pub amplitude_drift: f64,
    pub noise_std: f64,
    /// Amplitude of 60 Hz mains hum added to the raw trace.
    pub line_noise: f64,
    /// Indexed by class code; entry 0 must be zero.
    pub events_per_hour: [f64; 5],
    /// Relative half-width of the per-event spread of each class's depth.
    pub depth_jitter: f64,
    pub event_median_s: f64,
    pub event_sigma: f64,
    pub min_event_s: f64,
    pub max_event_s: f64,
    /// Minimum breathing gap between consecutive events and at record edges.
    pub min_gap_s: f64,
    /// Defaults to the record duration when `None`.
    pub sleep_hours: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            duration_s: 7200.0,
            sample_rate_hz: 125.0,
            breath_rate_hz: 0.25,
            amplitude_drift: 0.15,
            noise_std: 0.03,
            line_noise: 0.05,
            events_per_hour: [0.0, 6.0, 4.0, 3.0, 6.0],
            depth_jitter: 0.35,
            event_median_s: 18.0,
            event_sigma: 0.25,
            min_event_s: 10.0,
            max_event_s: 90.0,
            min_gap_s: 15.0,
            sleep_hours: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if !(self.sample_rate_hz >= 10.0) {
            return bad("sample_rate_hz must be at least 10");
        }
        if !(0.15..=0.4).contains(&self.breath_rate_hz) {
            return bad("breath_rate_hz must lie in [0.15, 0.4]");
        }
        if self.events_per_hour[0] != 0.0 || self.events_per_hour.iter().any(|r| !(*r >= 0.0)) {
            return bad("events_per_hour must be nonnegative with no rate for class 0");
        }
        if !(self.min_event_s >= 10.0) || !(self.max_event_s >= self.min_event_s) {
            return bad("event duration bounds must satisfy 10 <= min <= max");
        }
        if !(self.event_median_s > 0.0) || !(self.event_sigma >= 0.0) {
            return bad("event duration distribution parameters out of range");
        }
        if self.noise_std < 0.0 || self.line_noise < 0.0 || self.amplitude_drift < 0.0 {
            return bad("noise and drift levels must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.depth_jitter) {
            return bad("depth_jitter must lie in [0, 1)");
        }
        if let Some(h) = self.sleep_hours {
            if !(h >= 0.0) {
                return bad("sleep_hours must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn sleep_hours(&self) -> f64 {
        self.sleep_hours.unwrap_or(self.duration_s / 3600.0)
    }
}

/// Draws a non-overlapping, sorted event schedule.
pub fn schedule_events(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<AnnotationEvent>> {
    let hours = cfg.duration_s / 3600.0;
    let mut classes = Vec::new();
    for class in EventClass::ALL.into_iter().skip(1) {
        let n = (cfg.events_per_hour[class.code() as usize] * hours).round() as usize;
        classes.extend(std::iter::repeat_n(class, n));
    }
    classes.shuffle(rng);
    let lengths = LogNormal::new(cfg.event_median_s.ln(), cfg.event_sigma)
        .map_err(|e| Error::Config(e.to_string()))?;
    // decisecond grid keeps events aligned with the 10 Hz model input
    let durations: Vec<f64> = classes
        .iter()
        .map(|_| {
            let d: f64 = lengths.sample(rng);
            (d.clamp(cfg.min_event_s, cfg.max_event_s) * 10.0).round() / 10.0
        })
        .collect();
    let k = classes.len();
    let busy: f64 = durations.iter().sum::<f64>() + (k + 1) as f64 * cfg.min_gap_s;
    let slack = cfg.duration_s - busy;
    if slack < 0.0 {
        return Err(Error::ConfigInfeasible(format!(
            "{k} events need {busy:.0} s but the record lasts {:.0} s",
            cfg.duration_s
        )));
    }
    let weights: Vec<f64> = (0..=k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = weights.iter().sum();
    let mut t = 0.0;
    let mut events = Vec::with_capacity(k);
    for (i, (&class, &dur)) in classes.iter().zip(&durations).enumerate() {
        t += cfg.min_gap_s + slack * weights[i] / total;
        let start = ((t * 10.0).floor() / 10.0).max(0.0);
        events.push(AnnotationEvent::new(start, dur, class));
        t = start + dur;
    }
    Ok(events)
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

const RAMP_S: f64 = 1.0;

/// How strongly an event is "on" at time `t`, with short cosine-like ramps at the edges.
fn event_weight(ev: &AnnotationEvent, t: f64) -> f64 {
    let up = smoothstep((t - ev.start_s) / RAMP_S + 0.5);
    let down = smoothstep((ev.end_s() - t) / RAMP_S + 0.5);
    up.min(down)
}

/// Breathing-amplitude multiplier imposed by the event schedule at time `t`.
/// `depth_scale[i]` scales the nominal depth of `events[i]`.
pub fn event_envelope(events: &[AnnotationEvent], depth_scale: &[f64], t: f64) -> f64 {
    // events are sorted and separated by gaps, so at most one is active
    let idx = events.partition_point(|e| e.end_s() + RAMP_S < t);
    let Some(ev) = events.get(idx) else {
        return 1.0;
    };
    let w = event_weight(ev, t);
    if w == 0.0 {
        return 1.0;
    }
    let nominal = match ev.class {
        EventClass::CentralApnea => 0.05,
        EventClass::ObstructiveOrMixedApnea => 0.3,
        EventClass::Hypopnea => 0.6,
        EventClass::Rera => 0.8 + 0.8 * ((t - ev.start_s) / ev.duration_s).clamp(0.0, 1.0),
        EventClass::NoEvent => 1.0,
    };
    let target = nominal * depth_scale[idx];
    1.0 - w * (1.0 - target)
}

/// Generates one record and its ground-truth annotations. Deterministic in `cfg.seed`.
pub fn generate(
    cfg: &SynthConfig,
    record_id: &str,
) -> Result<(SignalRecord, Vec<AnnotationEvent>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let events = schedule_events(cfg, &mut rng)?;
    let depth_scale: Vec<f64> = events
        .iter()
        .map(|_| 1.0 + cfg.depth_jitter * rng.random_range(-1.0..=1.0))
        .collect();

    let fs = cfg.sample_rate_hz;
    let n = (cfg.duration_s * fs).round() as usize;
    let dt = 1.0 / fs;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let drift_phase: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 * PI);
    let offset: f64 = rng.random_range(-2.0..2.0);
    let gain: f64 = rng.random_range(0.5..3.0);

    let mut samples = Vec::with_capacity(n);
    let mut phase = rng.random::<f64>() * 2.0 * PI;
    let mut irregular = 0.0f64;
    // unit-variance Ornstein-Uhlenbeck process with a 2 s time constant
    let irregular_keep = (-dt / 2.0).exp();
    let irregular_kick = (1.0 - irregular_keep * irregular_keep).sqrt();
    for i in 0..n {
        let t = i as f64 * dt;
        let rate = cfg.breath_rate_hz * (1.0 + 0.06 * (2.0 * PI * t / 97.0 + drift_phase[0]).sin());
        phase += 2.0 * PI * rate * dt;
        let baseline = 1.0
            + cfg.amplitude_drift
                * (0.6 * (2.0 * PI * t / 600.0 + drift_phase[1]).sin()
                    + 0.4 * (2.0 * PI * t / 1700.0 + drift_phase[2]).sin());
        let envelope = event_envelope(&events, &depth_scale, t);
        let mut effort = baseline * envelope * phase.sin();

        let idx = events.partition_point(|e| e.end_s() + RAMP_S < t);
        if let Some(ev) = events.get(idx) {
            if ev.class == EventClass::ObstructiveOrMixedApnea {
                // struggling effort: a random walk at roughly breathing pace
                let z: f64 = StandardNormal.sample(&mut rng);
                irregular = irregular_keep * irregular + irregular_kick * z;
                effort += 0.25 * event_weight(ev, t) * irregular.tanh() * (3.1 * phase).sin();
            }
        }
        let hum = cfg.line_noise * (2.0 * PI * 60.0 * t).sin();
        let white = if cfg.noise_std > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        samples.push((offset + gain * (effort + white + hum)) as f32);
    }
    let record = SignalRecord::new(record_id, fs, samples, cfg.sleep_hours())?;
    Ok((record, events))
}

/// Disjoint train/validation/test record lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifests {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl CorpusManifests {
    pub fn train_path(dir: &Path) -> PathBuf {
        dir.join("train.txt")
    }
    pub fn val_path(dir: &Path) -> PathBuf {
        dir.join("val.txt")
    }
    pub fn test_path(dir: &Path) -> PathBuf {
        dir.join("test.txt")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_records: usize,
    /// Train, validation and test fractions; must sum to 1.
    pub split: [f64; 3],
    /// Per-record event-rate multipliers, cycled by record index, so one corpus
    /// spans several severity levels.
    pub rate_multipliers: Vec<f64>,
    /// Random +/- fraction applied on top of the multiplier.
    pub rate_jitter: f64,
    /// Breathing rate is drawn uniformly from this range per record.
    pub breath_rate_range: (f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_records: 20,
            split: [0.8, 0.1, 0.1],
            rate_multipliers: vec![0.15, 0.5, 1.2, 2.5],
            rate_jitter: 0.2,
            breath_rate_range: (0.18, 0.32),
        }
    }
}

/// Record counts per split; largest-remainder rounding so they sum to `n`.
pub fn split_counts(n: usize, fracs: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fracs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || fracs.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    let raw: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Independent child seed for stream `index` of `base`.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-record configuration derived from the template for record `index`.
pub fn record_config(template: &SynthConfig, corpus: &CorpusConfig, index: usize) -> SynthConfig {
    let seed = derive_seed(template.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mult = if corpus.rate_multipliers.is_empty() {
        1.0
    } else {
        corpus.rate_multipliers[index % corpus.rate_multipliers.len()]
    };
    let jitter = 1.0 + corpus.rate_jitter * (2.0 * rng.random::<f64>() - 1.0);
    let (lo, hi) = corpus.breath_rate_range;
    let mut cfg = template.clone();
    cfg.seed = seed;
    cfg.breath_rate_hz = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    for r in cfg.events_per_hour.iter_mut().skip(1) {
        *r *= mult * jitter;
    }
    cfg
}

pub fn record_id(index: usize) -> String {
    format!("synth{index:04}")
}

/// Generates a corpus, writes `<id>.sig` + `<id>.events.ndjson` under
/// `out_dir/records`, and the three manifests under `out_dir`.
pub fn make_corpus(
    out_dir: &Path,
    template: &SynthConfig,
    corpus: &CorpusConfig,
) -> Result<CorpusManifests> {
    let counts = split_counts(corpus.n_records, corpus.split)?;
    let rec_dir = out_dir.join("records");
    std::fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    let paths: Vec<PathBuf> = {
        use rayon::prelude::*;
        (0..corpus.n_records)
            .into_par_iter()
            .map(|i| {
                let cfg = record_config(template, corpus, i);
                let id = record_id(i);
                let (rec, events) = generate(&cfg, &id)?;
                let path = rec_dir.join(format!("{id}.sig"));
                save_record(&path, &rec)?;
                save_annotations(annotation_path_for(&path), &events)?;
                Ok(path)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let manifests = CorpusManifests {
        train: paths[..counts[0]].to_vec(),
        val: paths[counts[0]..counts[0] + counts[1]].to_vec(),
        test: paths[counts[0] + counts[1]..].to_vec(),
    };
    write_manifest(CorpusManifests::train_path(out_dir), &manifests.train)?;
    write_manifest(CorpusManifests::val_path(out_dir), &manifests.val)?;
    write_manifest(CorpusManifests::test_path(out_dir), &manifests.test)?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            duration_s: 1800.0,
            sample_rate_hz: 25.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn no_events_means_clean_breathing() {
        let cfg = SynthConfig {
            events_per_hour: [0.0; 5],
            ..short_cfg(1)
        };
        let (rec, events) = generate(&cfg, "clean").unwrap();
        assert!(events.is_empty());
        assert_eq!(rec.samples.len(), 45_000);
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate(&short_cfg(9), "x").unwrap();
        let b = generate(&short_cfg(9), "x").unwrap();
        assert_eq!(a, b);
        let c = generate(&short_cfg(10), "x").unwrap();
        assert_ne!(a.0.samples, c.0.samples);
    }

    #[test]
    fn central_apnea_load() {
        let mut all = Vec::new();
        for seed in 0..5 {
            let cfg = SynthConfig {
                seed,
                duration_s: 7200.0,
                sample_rate_hz: 10.0,
                events_per_hour: [0.0, 0.0, 20.0, 0.0, 0.0],
                ..SynthConfig::default()
            };
            let events = schedule_events(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(events.len(), 40);
            assert!(events.iter().all(|e| e.duration_s >= 10.0));
            all.extend(events.iter().map(|e| e.duration_s));
        }
        all.sort_by(f64::total_cmp);
        let median = all[all.len() / 2];
        assert!((median - 18.0).abs() < 1.5, "{median}");
    }

    #[test]
    fn events_sorted_disjoint_in_bounds() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                events_per_hour: [0.0, 15.0, 15.0, 10.0, 15.0],
                ..short_cfg(seed)
            };
            let events = schedule_events(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            crate::record_io::validate_reference(&events, cfg.duration_s).unwrap();
            for w in events.windows(2) {
                assert!(w[1].start_s >= w[0].end_s() + cfg.min_gap_s - 0.11);
            }
        }
    }

    #[test]
    fn overload_is_infeasible() {
        let cfg = SynthConfig {
            events_per_hour: [0.0, 200.0, 0.0, 0.0, 0.0],
            ..short_cfg(0)
        };
        assert!(matches!(
            generate(&cfg, "x"),
            Err(Error::ConfigInfeasible(_))
        ));
    }

    #[test]
    fn event_depth_scales_the_nominal_envelope() {
        let events = [
            AnnotationEvent::new(100.0, 30.0, EventClass::Hypopnea),
            AnnotationEvent::new(200.0, 30.0, EventClass::CentralApnea),
        ];
        assert!((event_envelope(&events, &[1.0, 1.0], 115.0) - 0.6).abs() < 1e-12);
        assert!((event_envelope(&events, &[0.65, 1.0], 115.0) - 0.39).abs() < 1e-12);
        assert!((event_envelope(&events, &[1.0, 1.35], 215.0) - 0.0675).abs() < 1e-12);
        assert_eq!(event_envelope(&events, &[0.65, 1.35], 160.0), 1.0);
        for bad in [-0.1, 1.0] {
            let cfg = SynthConfig {
                depth_jitter: bad,
                ..SynthConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn central_apnea_flattens_the_belt() {
        let cfg = SynthConfig {
            events_per_hour: [0.0, 0.0, 20.0, 0.0, 0.0],
            noise_std: 0.005,
            line_noise: 0.0,
            ..short_cfg(4)
        };
        let (rec, events) = generate(&cfg, "ca").unwrap();
        let fs = rec.sample_rate_hz;
        let mean = rec.samples.iter().map(|&v| v as f64).sum::<f64>() / rec.samples.len() as f64;
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (i, &v) in rec.samples.iter().enumerate() {
            let t = i as f64 / fs;
            let a = (v as f64 - mean).abs();
            if events.iter().any(|e| e.start_s <= t && t < e.end_s()) {
                inside += a;
                n_in += 1;
            } else {
                outside += a;
                n_out += 1;
            }
        }
        let ratio = (inside / n_in as f64) / (outside / n_out as f64);
        assert!(ratio < 0.1, "{ratio}");
    }

    #[test]
    fn split_counts_round() {
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(
            split_counts(55, [40.0 / 55.0, 5.0 / 55.0, 10.0 / 55.0]).unwrap(),
            [40, 5, 10]
        );
        assert!(split_counts(10, [0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn corpus_splits_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let template = SynthConfig {
            duration_s: 600.0,
            sample_rate_hz: 12.5,
            ..SynthConfig::default()
        };
        let corpus = CorpusConfig {
            n_records: 10,
            ..CorpusConfig::default()
        };
        let m = make_corpus(dir.path(), &template, &corpus).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 1, 1));
        let read =
            crate::record_io::read_manifest(CorpusManifests::train_path(dir.path())).unwrap();
        assert_eq!(read, m.train);
        for p in m.train.iter() {
            assert!(!m.val.contains(p) && !m.test.contains(p));
        }
        assert!(!m.val.contains(&m.test[0]));
    }

    #[test]
    fn corpus_spans_severity_bins() {
        let template = SynthConfig::default();
        let corpus = CorpusConfig::default();
        let mut bins = [false; 4];
        for i in 0..8 {
            let cfg = record_config(&template, &corpus, i);
            let events = schedule_events(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
            let ahi = events
                .iter()
                .filter(|e| e.class.is_apnea_hypopnea())
                .count() as f64
                / cfg.sleep_hours();
            let bin = match ahi {
                a if a < 5.0 => 0,
                a if a < 15.0 => 1,
                a if a < 30.0 => 2,
                _ => 3,
            };
            bins[bin] = true;
        }
        assert_eq!(bins, [true; 4]);
    }
}
