//! Smoothing of per-second predictions into events, and event matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record_io::{timeline_to_events, AnnotationEvent, EventClass, LabelTimeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub window_s: usize,
    /// A window with at least this many regular-breathing seconds becomes regular.
    pub noevent_quorum: usize,
    pub min_event_s: usize,
    /// Runs of at least this many event windows are merged and retyped.
    pub merge_min_total_windows: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            window_s: 10,
            noevent_quorum: 3,
            min_event_s: 10,
            merge_min_total_windows: 2,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_s == 0
            || self.noevent_quorum == 0
            || self.min_event_s == 0
            || self.merge_min_total_windows == 0
        {
            return Err(Error::Config(
                "smoothing parameters must be positive".into(),
            ));
        }
        if self.noevent_quorum > self.window_s {
            return Err(Error::Config(
                "noevent_quorum must not exceed window_s".into(),
            ));
        }
        Ok(())
    }
}

/// Event class with the most seconds in `seconds`; ties go to the lowest code.
fn dominant_event(seconds: &[EventClass]) -> EventClass {
    let mut counts = [0usize; 5];
    for c in seconds.iter().filter(|c| c.is_event()) {
        counts[c.code() as usize] += 1;
    }
    let mut best = 1;
    for code in 2..counts.len() {
        if counts[code] > counts[best] {
            best = code;
        }
    }
    EventClass::from_code(best as u8).expect("valid code")
}

/// Applies the windowed smoothing rules to a 1 Hz class timeline.
///
/// Consecutive non-overlapping windows from t = 0 are relabelled: a window
/// with at least `noevent_quorum` regular seconds becomes regular, otherwise
/// it takes its most frequent event class. Runs of adjacent event windows are
/// then merged into one event typed by the class holding the most input
/// seconds across the run. A trailing partial window is treated as regular
/// breathing, so every event is a whole number of windows.
pub fn smooth(timeline: &LabelTimeline, cfg: &SmoothingConfig) -> LabelTimeline {
    let w = cfg.window_s.max(1);
    let input = &timeline.classes;
    let n_windows = input.len() / w;
    let windows: Vec<EventClass> = (0..n_windows)
        .map(|k| {
            let seconds = &input[k * w..(k + 1) * w];
            let regular = seconds.iter().filter(|c| !c.is_event()).count();
            if regular >= cfg.noevent_quorum {
                EventClass::NoEvent
            } else {
                dominant_event(seconds)
            }
        })
        .collect();

    let mut out = vec![EventClass::NoEvent; input.len()];
    let mut k = 0;
    while k < n_windows {
        if !windows[k].is_event() {
            k += 1;
            continue;
        }
        let mut end = k + 1;
        while end < n_windows && windows[end].is_event() {
            end += 1;
        }
        let run = end - k;
        if run * w >= cfg.min_event_s {
            let span = k * w..end * w;
            if run >= cfg.merge_min_total_windows {
                let class = dominant_event(&input[span.clone()]);
                out[span].fill(class);
            } else {
                for j in k..end {
                    out[j * w..(j + 1) * w].fill(windows[j]);
                }
            }
        }
        k = end;
    }
    LabelTimeline::new(out)
}

/// Smooths a per-second argmax timeline and returns the resulting events.
pub fn smoothed_events(timeline: &LabelTimeline, cfg: &SmoothingConfig) -> Vec<AnnotationEvent> {
    timeline_to_events(&smooth(timeline, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// For each predicted event: the reference event it overlaps most, when it
    /// counts as a true positive.
    pub predicted: Vec<Option<usize>>,
    /// For each reference event: whether a true-positive prediction overlaps it.
    pub reference_detected: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Reference events detected (the reference-side true positives).
    pub tp_reference: usize,
}

impl MatchResult {
    /// Total duration of false-positive predictions.
    pub fn fp_duration_s(&self, predicted: &[AnnotationEvent]) -> f64 {
        predicted
            .iter()
            .zip(&self.predicted)
            .filter(|(_, m)| m.is_none())
            .map(|(e, _)| e.duration_s)
            .sum()
    }
}

/// A prediction is a true positive when strictly more than half its duration
/// overlaps reference events (of the same class when `same_class`). A
/// reference event with no overlapping true-positive prediction is a false
/// negative.
pub fn match_events(
    predicted: &[AnnotationEvent],
    reference: &[AnnotationEvent],
    same_class: bool,
) -> MatchResult {
    let compatible = |p: &AnnotationEvent, r: &AnnotationEvent| !same_class || p.class == r.class;
    let mut matches = Vec::with_capacity(predicted.len());
    let mut detected = vec![false; reference.len()];
    for p in predicted {
        let mut covered = 0.0;
        let mut best: Option<(usize, f64)> = None;
        for (j, r) in reference.iter().enumerate() {
            if !compatible(p, r) {
                continue;
            }
            let o = p.overlap_s(r);
            if o > 0.0 {
                covered += o;
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
        }
        if covered > 0.5 * p.duration_s {
            for (j, r) in reference.iter().enumerate() {
                if compatible(p, r) && p.overlap_s(r) > 0.0 {
                    detected[j] = true;
                }
            }
            matches.push(best.map(|(j, _)| j));
        } else {
            matches.push(None);
        }
    }
    let tp = matches.iter().filter(|m| m.is_some()).count();
    let tp_reference = detected.iter().filter(|d| **d).count();
    MatchResult {
        tp,
        fp: predicted.len() - tp,
        fn_: reference.len() - tp_reference,
        tp_reference,
        predicted: matches,
        reference_detected: detected,
    }
}

/// Median reference event length used to express regular breathing as a count.
pub const MEDIAN_EVENT_S: f64 = 18.0;

/// Regular-breathing time (record minus reference events minus false-positive
/// predictions) in units of the median event length, floored.
pub fn count_true_negatives(
    reference: &[AnnotationEvent],
    fp_duration_s: f64,
    record_duration_s: f64,
    median_event_s: f64,
) -> Result<u64> {
    if !(median_event_s > 0.0) {
        return Err(Error::Config("median event length must be positive".into()));
    }
    let events: f64 = reference.iter().map(|e| e.duration_s).sum();
    let regular = (record_duration_s - events - fp_duration_s).max(0.0);
    Ok((regular / median_event_s + 1e-9).floor() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use EventClass::*;

    fn tl(spec: &[(EventClass, usize)]) -> LabelTimeline {
        LabelTimeline::new(
            spec.iter()
                .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
                .collect(),
        )
    }

    #[test]
    fn quorum_clears_window() {
        let out = smooth(
            &tl(&[(NoEvent, 3), (ObstructiveOrMixedApnea, 7)]),
            &SmoothingConfig::default(),
        );
        assert_eq!(out, tl(&[(NoEvent, 10)]));
    }

    #[test]
    fn all_regular_unchanged() {
        let input = tl(&[(NoEvent, 47)]);
        assert_eq!(smooth(&input, &SmoothingConfig::default()), input);
    }

    #[test]
    fn merged_run_takes_majority_class() {
        let out = smooth(
            &tl(&[(ObstructiveOrMixedApnea, 2), (CentralApnea, 18)]),
            &SmoothingConfig::default(),
        );
        assert_eq!(out, tl(&[(CentralApnea, 20)]));
        assert_eq!(
            smoothed_events(&out, &SmoothingConfig::default()),
            vec![AnnotationEvent::new(0.0, 20.0, CentralApnea)]
        );
    }

    #[test]
    fn window_plurality_tie_goes_to_lowest_code() {
        let out = smooth(
            &tl(&[(Hypopnea, 5), (CentralApnea, 5), (NoEvent, 10)]),
            &SmoothingConfig::default(),
        );
        assert_eq!(out, tl(&[(CentralApnea, 10), (NoEvent, 10)]));
    }

    #[test]
    fn partial_tail_is_regular() {
        let out = smooth(&tl(&[(CentralApnea, 15)]), &SmoothingConfig::default());
        assert_eq!(out, tl(&[(CentralApnea, 10), (NoEvent, 5)]));
    }

    #[test]
    fn match_boundaries() {
        let reference = vec![AnnotationEvent::new(100.0, 30.0, ObstructiveOrMixedApnea)];
        let p11 = vec![AnnotationEvent::new(119.0, 20.0, Hypopnea)];
        let r = match_events(&p11, &reference, false);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
        let p10 = vec![AnnotationEvent::new(120.0, 20.0, Hypopnea)];
        let r = match_events(&p10, &reference, false);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        // class must agree in the multiclass setting
        let r = match_events(&p11, &reference, true);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
    }

    #[test]
    fn no_predictions_all_missed() {
        let reference: Vec<_> = (0..3)
            .map(|i| AnnotationEvent::new(100.0 * i as f64, 20.0, CentralApnea))
            .collect();
        let r = match_events(&[], &reference, false);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 3));
    }

    #[test]
    fn true_negative_counts() {
        let reference: Vec<_> = (0..18)
            .map(|i| AnnotationEvent::new(150.0 * i as f64, 20.0, CentralApnea))
            .collect();
        assert_eq!(
            count_true_negatives(&reference, 0.0, 3600.0, 18.0).unwrap(),
            180
        );
        assert_eq!(count_true_negatives(&[], 0.0, 18.0, 18.0).unwrap(), 1);
        assert_eq!(count_true_negatives(&[], 36.0, 3600.0, 18.0).unwrap(), 198);
        assert!(count_true_negatives(&[], 0.0, 18.0, 0.0).is_err());
    }
}
