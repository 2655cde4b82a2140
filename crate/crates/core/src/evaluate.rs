//! Event-level, per-second and per-patient evaluation and the report artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{count_true_negatives, match_events};
use crate::record_io::{save_json, AnnotationEvent, EventClass};
use crate::trainer::Task;

/// The five summary rates; `None` where a denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn metrics(tp: u64, tn: u64, fp: u64, fn_: u64) -> Metrics {
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    Metrics {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        precision: ratio(tp, tp + fp),
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
    }
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|row| row.len() != n) {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: counts.iter().map(Vec::len).find(|&l| l != n).unwrap_or(n),
            });
        }
        Ok(ConfusionMatrix {
            n_classes: n,
            counts,
        })
    }

    pub fn add(&mut self, truth: usize, predicted: usize, count: u64) {
        self.counts[truth][predicted] += count;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Each row divided by its sum; all-zero rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if sum == 0 { 0.0 } else { c as f64 / sum as f64 })
                    .collect()
            })
            .collect()
    }

    /// One-vs-rest (tp, tn, fp, fn) for `class`.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[class][class];
        let fn_: u64 = self.counts[class].iter().sum::<u64>() - tp;
        let fp: u64 = self.counts.iter().map(|row| row[class]).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, tn, fp, fn_)
    }

    /// Fraction of counts on the diagonal.
    pub fn accuracy(&self) -> Option<f64> {
        let diag: u64 = (0..self.n_classes).map(|i| self.counts[i][i]).sum();
        ratio(diag as f64, self.total() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// (false-positive rate, true-positive rate), from (0, 0) to (1, 1).
    pub roc: Vec<(f64, f64)>,
    /// (recall, precision), starting at recall 0 with precision 1.
    pub prc: Vec<(f64, f64)>,
    pub auc_roc: f64,
    pub auc_prc: f64,
}

/// Sweeps every distinct score as a threshold (`score >= t` is positive) and
/// integrates both curves with the trapezoidal rule.
pub fn roc_prc(scores: &[f64], labels: &[bool]) -> Result<Curves> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|l| **l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassInput);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut roc = vec![(0.0, 0.0)];
    let mut prc = vec![(0.0, 1.0)];
    // twice the ROC area in units of (n_pos * n_neg), kept exact in integers
    let mut area2: u128 = 0;
    let mut auc_prc = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        roc.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        let &(r0, p0) = prc.last().expect("seeded");
        auc_prc += (recall - r0) * (precision + p0) / 2.0;
        prc.push((recall, precision));
    }
    let auc_roc = area2 as f64 / (2 * n_pos as u128 * n_neg as u128) as f64;
    Ok(Curves {
        roc,
        prc,
        auc_roc,
        auc_prc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 4] = [
        Severity::Normal,
        Severity::Mild,
        Severity::Moderate,
        Severity::Severe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Half-open bins: [0, 5) normal, [5, 15) mild, [15, 30) moderate, [30, inf) severe.
pub fn severity(ahi: f64) -> Severity {
    if ahi < 5.0 {
        Severity::Normal
    } else if ahi < 15.0 {
        Severity::Mild
    } else if ahi < 30.0 {
        Severity::Moderate
    } else {
        Severity::Severe
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRates {
    pub ahi: f64,
    pub rdi: f64,
    /// Events per hour indexed by class code (entry 0 unused).
    pub per_class: [f64; 5],
}

/// AHI = (OA + CA + HY) / h, RDI = AHI + RERA / h.
pub fn ahi_rdi(events: &[AnnotationEvent], sleep_hours: f64) -> Result<EventRates> {
    if !(sleep_hours > 0.0) {
        return Err(Error::ZeroSleepHours);
    }
    let mut counts = [0usize; 5];
    for e in events {
        counts[e.class.code() as usize] += 1;
    }
    let per_class = counts.map(|c| c as f64 / sleep_hours);
    let ah = (counts[1] + counts[2] + counts[4]) as f64 / sleep_hours;
    Ok(EventRates {
        ahi: ah,
        rdi: ah + counts[3] as f64 / sleep_hours,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    /// `1 - SS_res / SS_tot` of the robust line on unweighted residuals, clamped to [0, 1].
    pub r_squared: f64,
    /// Squared Pearson correlation of x and y.
    pub pearson_r2: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const BISQUARE_C: f64 = 4.685;
const MAD_TO_SIGMA: f64 = 0.6745;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        return None;
    }
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..x.len() {
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Squared Pearson correlation; 0 when either variable is constant.
pub fn pearson_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy * sxy / (sxx * syy)
    }
}

/// Iteratively reweighted least squares with Tukey bisquare weights.
pub fn robust_fit(x: &[f64], y: &[f64]) -> Result<RegressionFit> {
    robust_fit_with(x, y, BISQUARE_C)
}

pub fn robust_fit_with(x: &[f64], y: &[f64], tuning: f64) -> Result<RegressionFit> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::DegenerateDesign(format!(
            "need at least 3 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression input".into()));
    }
    let n = x.len();
    let mut w = vec![1.0; n];
    let (mut slope, mut intercept) =
        weighted_line(x, y, &w).ok_or_else(|| Error::DegenerateDesign("x is constant".into()))?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < 100 {
        iterations += 1;
        let resid: Vec<f64> = (0..n).map(|i| y[i] - (slope * x[i] + intercept)).collect();
        let mut r = resid.clone();
        let center = median(&mut r);
        let mut dev: Vec<f64> = resid.iter().map(|v| (v - center).abs()).collect();
        let scale = median(&mut dev) / MAD_TO_SIGMA;
        if scale <= f64::EPSILON * (1.0 + intercept.abs() + slope.abs()) {
            converged = true;
            break;
        }
        for (wi, ri) in w.iter_mut().zip(&resid) {
            let u = ri / (tuning * scale);
            *wi = if u.abs() < 1.0 {
                (1.0 - u * u).powi(2)
            } else {
                0.0
            };
        }
        let Some((s, b)) = weighted_line(x, y, &w) else {
            return Err(Error::DegenerateDesign("all points down-weighted".into()));
        };
        let change = (s - slope).abs().max((b - intercept).abs());
        slope = s;
        intercept = b;
        if change < 1e-8 {
            converged = true;
            break;
        }
    }
    let my = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = (0..n)
        .map(|i| (y[i] - slope * x[i] - intercept).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(RegressionFit {
        slope,
        intercept,
        r_squared,
        pearson_r2: pearson_r2(x, y),
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub bin_width: f64,
    /// (bin centre, count); bins are centred on multiples of `bin_width`.
    pub bins: Vec<(f64, u64)>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub std: f64,
}

/// Histogram of `predicted - true` differences.
pub fn ahi_error_histogram(differences: &[f64], bin_width: f64) -> Result<ErrorHistogram> {
    if differences.is_empty() {
        return Err(Error::Config(
            "error histogram needs at least one value".into(),
        ));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Config("bin width must be positive".into()));
    }
    let n = differences.len() as f64;
    let mean = differences.iter().sum::<f64>() / n;
    let std = if differences.len() > 1 {
        (differences.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut idx: Vec<i64> = differences
        .iter()
        .map(|d| (d / bin_width).round() as i64)
        .collect();
    idx.sort_unstable();
    let mut bins: Vec<(f64, u64)> = Vec::new();
    let mut prev = None;
    for i in idx {
        if prev == Some(i) {
            bins.last_mut().expect("bin exists").1 += 1;
        } else {
            bins.push((i as f64 * bin_width, 1));
            prev = Some(i);
        }
    }
    Ok(ErrorHistogram {
        bin_width,
        bins,
        mean,
        std,
    })
}

/// Everything known about one evaluated record.
#[derive(Debug, Clone)]
pub struct RecordResult {
    pub record_id: String,
    pub duration_s: f64,
    pub sleep_hours: f64,
    pub reference: Vec<AnnotationEvent>,
    pub predicted: Vec<AnnotationEvent>,
    /// Per-second class probabilities (pre-smoothing), when available.
    pub probabilities: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub median_event_s: f64,
    pub histogram_bin_width: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            median_event_s: crate::postprocess::MEDIAN_EVENT_S,
            histogram_bin_width: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub record_id: String,
    pub ahi_true: f64,
    pub ahi_pred: f64,
    pub rdi_true: f64,
    pub rdi_pred: f64,
    pub rates_true: [f64; 5],
    pub rates_pred: [f64; 5],
    pub severity_true: Severity,
    pub severity_pred: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSecond {
    pub n_seconds: usize,
    pub auc_roc: Option<f64>,
    pub auc_prc: Option<f64>,
    /// Argmax accuracy of the unsmoothed predictions against task labels.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub task: Task,
    pub n_records: usize,
    pub median_event_s: f64,
    pub event_confusion: ConfusionMatrix,
    pub event_confusion_normalized: Vec<Vec<f64>>,
    /// One row per task class; for the binary task only the event class.
    pub event_metrics: Vec<ClassMetrics>,
    /// Reference events overlapped by a correct prediction, over all reference events.
    pub event_detection_rate: Option<f64>,
    pub per_second: Option<PerSecond>,
    pub patients: Vec<PatientSummary>,
    pub severity_confusion: ConfusionMatrix,
    pub severity_accuracy: Option<f64>,
    pub ahi_fit: Option<RegressionFit>,
    pub ahi_error: ErrorHistogram,
}

pub const REPORT_VERSION: u32 = 1;

/// Class name per task index.
pub fn class_names(task: Task) -> Vec<String> {
    match task {
        Task::Binary => vec!["no_event".into(), "apnea_hypopnea".into()],
        Task::Multiclass => EventClass::ALL
            .iter()
            .map(|c| c.name().to_string())
            .collect(),
    }
}

/// Reference events that count as positives for `task`.
pub fn task_reference(reference: &[AnnotationEvent], task: Task) -> Vec<AnnotationEvent> {
    reference
        .iter()
        .filter(|e| task.label(e.class) != 0)
        .cloned()
        .collect()
}

/// Event-level confusion matrix for one record. Correct predictions sit on
/// the diagonal; a wrong-class prediction covering a reference event by more
/// than half its duration is tabulated against that event's class, any other
/// unmatched prediction against regular breathing; reference events nobody
/// detected or claimed are predicted-regular; the regular/regular cell holds
/// the true-negative count.
pub fn event_confusion(
    task: Task,
    reference: &[AnnotationEvent],
    predicted: &[AnnotationEvent],
    duration_s: f64,
    median_event_s: f64,
) -> Result<ConfusionMatrix> {
    let reference = task_reference(reference, task);
    let same_class = task == Task::Multiclass;
    let m = match_events(predicted, &reference, same_class);
    let mut cm = ConfusionMatrix::new(task.n_classes());
    let mut claimed = m.reference_detected.clone();
    for (p, matched) in predicted.iter().zip(&m.predicted) {
        let cp = task.label(p.class);
        if matched.is_some() {
            cm.add(cp, cp, 1);
            continue;
        }
        let mut covered = 0.0;
        let mut best: Option<(usize, f64)> = None;
        for (j, r) in reference.iter().enumerate() {
            let o = p.overlap_s(r);
            if o > 0.0 {
                covered += o;
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
        }
        match best {
            Some((j, _)) if covered > 0.5 * p.duration_s => {
                cm.add(task.label(reference[j].class), cp, 1);
                claimed[j] = true;
            }
            _ => cm.add(0, cp, 1),
        }
    }
    for (r, c) in reference.iter().zip(&claimed) {
        if !c {
            cm.add(task.label(r.class), 0, 1);
        }
    }
    let tn = count_true_negatives(
        &reference,
        m.fp_duration_s(predicted),
        duration_s,
        median_event_s,
    )?;
    cm.add(0, 0, tn);
    Ok(cm)
}

/// Aggregates every record into the evaluation report.
pub fn build_report(task: Task, results: &[RecordResult], cfg: &EvalConfig) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Config("no records to evaluate".into()));
    }
    let names = class_names(task);
    let mut confusion = ConfusionMatrix::new(task.n_classes());
    let (mut detected, mut n_reference) = (0usize, 0usize);
    let mut patients = Vec::with_capacity(results.len());
    let mut severity_cm = ConfusionMatrix::new(Severity::ALL.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let (mut correct, mut n_seconds) = (0usize, 0usize);
    let mut have_probs = true;

    for r in results {
        confusion.merge(&event_confusion(
            task,
            &r.reference,
            &r.predicted,
            r.duration_s,
            cfg.median_event_s,
        )?);
        let reference = task_reference(&r.reference, task);
        let m = match_events(&r.predicted, &reference, task == Task::Multiclass);
        detected += m.tp_reference;
        n_reference += reference.len();

        let truth = ahi_rdi(&r.reference, r.sleep_hours)?;
        let pred = ahi_rdi(&r.predicted, r.sleep_hours)?;
        let summary = PatientSummary {
            record_id: r.record_id.clone(),
            ahi_true: truth.ahi,
            ahi_pred: pred.ahi,
            rdi_true: truth.rdi,
            rdi_pred: pred.rdi,
            rates_true: truth.per_class,
            rates_pred: pred.per_class,
            severity_true: severity(truth.ahi),
            severity_pred: severity(pred.ahi),
        };
        severity_cm.add(
            summary.severity_true.index(),
            summary.severity_pred.index(),
            1,
        );
        patients.push(summary);

        match &r.probabilities {
            Some(probs) => {
                let timeline = crate::record_io::events_to_timeline(&r.reference, r.duration_s)?;
                for (row, &c) in probs.iter().zip(&timeline.classes) {
                    let label = task.label(c);
                    scores.push(1.0 - row[0]);
                    labels.push(label != 0);
                    let arg = crate::neuralnet::argmax(row);
                    correct += (arg == label) as usize;
                    n_seconds += 1;
                }
            }
            None => have_probs = false,
        }
    }

    let event_metrics = (if task == Task::Binary {
        1..2
    } else {
        0..task.n_classes()
    })
    .map(|c| {
        let (tp, tn, fp, fn_) = confusion.one_vs_rest(c);
        ClassMetrics {
            class: names[c].clone(),
            tp,
            tn,
            fp,
            fn_,
            metrics: metrics(tp, tn, fp, fn_),
        }
    })
    .collect();

    let per_second = if have_probs && n_seconds > 0 {
        let curves = roc_prc(&scores, &labels).ok();
        Some(PerSecond {
            n_seconds,
            auc_roc: curves.as_ref().map(|c| c.auc_roc),
            auc_prc: curves.as_ref().map(|c| c.auc_prc),
            accuracy: correct as f64 / n_seconds as f64,
        })
    } else {
        None
    };

    let ahi_true: Vec<f64> = patients.iter().map(|p| p.ahi_true).collect();
    let ahi_pred: Vec<f64> = patients.iter().map(|p| p.ahi_pred).collect();
    let ahi_fit = match robust_fit(&ahi_true, &ahi_pred) {
        Ok(fit) => Some(fit),
        Err(Error::DegenerateDesign(reason)) => {
            log::warn!("AHI regression skipped: {reason}");
            None
        }
        Err(e) => return Err(e),
    };
    let diffs: Vec<f64> = patients.iter().map(|p| p.ahi_pred - p.ahi_true).collect();
    let ahi_error = ahi_error_histogram(&diffs, cfg.histogram_bin_width)?;

    Ok(EvalReport {
        report_version: REPORT_VERSION,
        task,
        n_records: results.len(),
        median_event_s: cfg.median_event_s,
        event_confusion_normalized: confusion.row_normalized(),
        event_confusion: confusion,
        event_metrics,
        event_detection_rate: ratio(detected as f64, n_reference as f64),
        per_second,
        patients,
        severity_accuracy: severity_cm.accuracy(),
        severity_confusion: severity_cm,
        ahi_fit,
        ahi_error,
    })
}

/// Pooled per-second curves for the plot artifacts.
pub fn per_second_curves(task: Task, results: &[RecordResult]) -> Result<Option<Curves>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in results {
        let Some(probs) = &r.probabilities else {
            return Ok(None);
        };
        let timeline = crate::record_io::events_to_timeline(&r.reference, r.duration_s)?;
        for (row, &c) in probs.iter().zip(&timeline.classes) {
            scores.push(1.0 - row[0]);
            labels.push(task.label(c) != 0);
        }
    }
    match roc_prc(&scores, &labels) {
        Ok(c) => Ok(Some(c)),
        Err(Error::SingleClassInput) => Ok(None),
        Err(e) => Err(e),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Keeps at most `max` points, always including the first and last.
fn thin(points: &[(f64, f64)], max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max || max < 2 {
        return points.to_vec();
    }
    let step = (points.len() - 1) as f64 / (max - 1) as f64;
    (0..max)
        .map(|i| points[(i as f64 * step).round() as usize])
        .collect()
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 48.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0).max(1e-12) * (SVG_W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        SVG_H - MARGIN - (y - self.y0) / (self.y1 - self.y0).max(1e-12) * (SVG_H - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        SVG_W / 2.0
    );
    let (l, r, t, b) = (MARGIN, SVG_W - MARGIN, MARGIN, SVG_H - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l:.1} {t:.1} L{l:.1} {b:.1} L{r:.1} {b:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text>"#,
        SVG_W / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{ylabel}</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    for (v, px) in [(f.x0, l), (f.x1, r)] {
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#,
            b + 16.0
        );
    }
    for (v, py) in [(f.y0, b), (f.y1, t)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{py:.1}" text-anchor="end">{v:.3}</text>"#,
            l - 4.0
        );
    }
    s
}

fn svg_polyline(points: &[(f64, f64)], f: &Frame) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
        pts.join(" ")
    )
}

fn curve_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let f = Frame {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    let mut s = svg_open(title, xlabel, ylabel, &f);
    s.push_str(&svg_polyline(&thin(points, 1000), &f));
    s.push_str("</svg>\n");
    s
}

fn scatter_svg(patients: &[PatientSummary], fit: Option<&RegressionFit>) -> String {
    let hi = patients
        .iter()
        .flat_map(|p| [p.ahi_true, p.ahi_pred])
        .fold(10.0f64, f64::max)
        * 1.05;
    let f = Frame {
        x0: 0.0,
        x1: hi,
        y0: 0.0,
        y1: hi,
    };
    let mut s = svg_open(
        "AHI: predicted vs reference",
        "reference AHI",
        "predicted AHI",
        &f,
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        f.px(0.0),
        f.py(0.0),
        f.px(hi),
        f.py(hi)
    );
    if let Some(fit) = fit {
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick"/>"#,
            f.px(0.0),
            f.py(fit.intercept.clamp(0.0, hi)),
            f.px(hi),
            f.py((fit.intercept + fit.slope * hi).clamp(0.0, hi))
        );
    }
    for p in patients {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            f.px(p.ahi_true),
            f.py(p.ahi_pred)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn histogram_svg(h: &ErrorHistogram) -> String {
    let lo = h.bins.first().map_or(0.0, |b| b.0) - h.bin_width;
    let hi = h.bins.last().map_or(0.0, |b| b.0) + h.bin_width;
    let top = h.bins.iter().map(|b| b.1).max().unwrap_or(1) as f64;
    let f = Frame {
        x0: lo,
        x1: hi,
        y0: 0.0,
        y1: top,
    };
    let mut s = svg_open(
        "AHI error (predicted - reference)",
        "AHI difference",
        "records",
        &f,
    );
    for &(centre, count) in &h.bins {
        let x = f.px(centre - h.bin_width / 2.0);
        let w = f.px(centre + h.bin_width / 2.0) - x;
        let y = f.py(count as f64);
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="steelblue" stroke="white"/>"#,
            f.py(0.0) - y
        );
    }
    s.push_str("</svg>\n");
    s
}

fn pairs_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in points {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

/// Writes `report.json`, the plot tables and their SVG renderings into `dir`.
pub fn write_report(
    dir: impl AsRef<Path>,
    report: &EvalReport,
    curves: Option<&Curves>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_json(dir.join("report.json"), report)?;

    let mut scatter = String::from("record_id,ahi_true,ahi_pred\n");
    for p in &report.patients {
        let _ = writeln!(scatter, "{},{},{}", p.record_id, p.ahi_true, p.ahi_pred);
    }
    write_text(&dir.join("scatter.csv"), &scatter)?;
    write_text(
        &dir.join("scatter.svg"),
        &scatter_svg(&report.patients, report.ahi_fit.as_ref()),
    )?;

    let mut hist = String::from("bin_center,count\n");
    for (c, n) in &report.ahi_error.bins {
        let _ = writeln!(hist, "{c},{n}");
    }
    write_text(&dir.join("histogram.csv"), &hist)?;
    write_text(
        &dir.join("histogram.svg"),
        &histogram_svg(&report.ahi_error),
    )?;

    let empty = Vec::new();
    let (roc, prc) = curves.map_or((&empty, &empty), |c| (&c.roc, &c.prc));
    write_text(&dir.join("roc.csv"), &pairs_csv("fpr,tpr", roc))?;
    write_text(&dir.join("prc.csv"), &pairs_csv("recall,precision", prc))?;
    write_text(
        &dir.join("roc.svg"),
        &curve_svg("ROC", "false positive rate", "true positive rate", roc),
    )?;
    write_text(
        &dir.join("prc.svg"),
        &curve_svg("Precision-recall", "recall", "precision", prc),
    )?;
    Ok(())
}
