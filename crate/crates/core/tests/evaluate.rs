mod common;

use apnea_core::evaluate::{
    ahi_error_histogram, ahi_rdi, build_report, metrics, robust_fit, robust_fit_with, roc_prc,
    severity, task_reference, ConfusionMatrix, EvalConfig, EvalReport, RecordResult, Severity,
};
use apnea_core::record_io::{AnnotationEvent, EventClass};
use apnea_core::trainer::Task;
use apnea_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn published_binary_counts_reproduce_published_percentages() {
    let (tp, tn, fp, fn_) = common::MGH_EXP1;
    let m = metrics(tp, tn, fp, fn_);
    // textbook formulas recomputed here as the oracle
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let sens = tp / (tp + fn_);
    let prec = tp / (tp + fp);
    let oracle = [
        (tp + tn) / (tp + tn + fp + fn_),
        sens,
        tn / (tn + fp),
        prec,
        2.0 * prec * sens / (prec + sens),
    ];
    let got = [m.accuracy, m.sensitivity, m.specificity, m.precision, m.f1].map(Option::unwrap);
    for ((g, o), published) in got.iter().zip(oracle).zip(common::MGH_EXP1_PERCENT) {
        assert!((g - o).abs() < 1e-12);
        assert!((g * 100.0 - published).abs() <= 1.0, "{g} vs {published}%");
    }
}

#[test]
fn metrics_guard_division_by_zero() {
    let m = metrics(1, 1, 0, 0);
    assert_eq!(m.accuracy, Some(1.0));
    assert_eq!(m.f1, Some(1.0));
    let m = metrics(0, 5, 0, 3);
    assert_eq!(m.precision, None);
    assert_eq!(m.sensitivity, Some(0.0));
    assert_eq!(metrics(0, 0, 0, 0).accuracy, None);
}

#[test]
fn published_multiclass_counts_normalize_to_published_matrix() {
    let cm =
        ConfusionMatrix::from_counts(common::MGH_EXP2_COUNTS.iter().map(|r| r.to_vec()).collect())
            .unwrap();
    let norm = cm.row_normalized();
    for (i, row) in norm.iter().enumerate() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (j, &v) in row.iter().enumerate() {
            assert!(
                (v - common::MGH_EXP2_NORMALIZED[i][j]).abs() <= 0.01,
                "[{i}][{j}] {v}"
            );
        }
    }
    assert!((norm[2][2] - 0.81).abs() < 0.005);
}

#[test]
fn auc_equals_pairwise_ranking_for_every_small_labeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..=12usize {
        // coarse score grid so ties are common
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..5) as f64 / 4.0)
            .collect();
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let curves = roc_prc(&scores, &labels).unwrap();
            let want = common::pairwise_auc(&scores, &labels);
            assert_eq!(curves.auc_roc, want, "n {n} mask {mask:b}");
        }
    }
}

#[test]
fn auc_hand_case_and_extremes() {
    let c = roc_prc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]).unwrap();
    assert_eq!(c.auc_roc, 0.75);
    let c = roc_prc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap();
    assert_eq!((c.auc_roc, c.auc_prc), (1.0, 1.0));
    assert!(matches!(
        roc_prc(&[0.1, 0.2], &[true, true]),
        Err(Error::SingleClassInput)
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.random()).collect();
    let auc = roc_prc(&scores, &labels).unwrap().auc_roc;
    assert!((auc - 0.5).abs() <= 0.02, "{auc}");
}

#[test]
fn event_rates_and_severity() {
    let mut events = Vec::new();
    let mut push = |class, n| {
        for _ in 0..n {
            events.push(AnnotationEvent::new(0.0, 10.0, class));
        }
    };
    push(EventClass::ObstructiveOrMixedApnea, 10);
    push(EventClass::CentralApnea, 5);
    push(EventClass::Hypopnea, 15);
    push(EventClass::Rera, 6);
    let r = ahi_rdi(&events, 6.0).unwrap();
    assert!((r.ahi - 5.0).abs() < 1e-12 && (r.rdi - 6.0).abs() < 1e-12);
    assert_eq!(ahi_rdi(&[], 1.0).unwrap().ahi, 0.0);
    assert!(matches!(ahi_rdi(&[], 0.0), Err(Error::ZeroSleepHours)));

    assert_eq!(severity(4.9), Severity::Normal);
    assert_eq!(severity(5.0), Severity::Mild);
    assert_eq!(severity(15.0), Severity::Moderate);
    assert_eq!(severity(31.0), Severity::Severe);
    let mut prev = severity(0.0);
    for i in 0..10_000 {
        let s = severity(i as f64 * 0.01);
        assert!(s >= prev);
        prev = s;
    }
}

#[test]
fn rdi_never_below_ahi() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let events: Vec<_> = (0..rng.random_range(0..50))
            .map(|_| {
                AnnotationEvent::new(
                    0.0,
                    10.0,
                    EventClass::from_code(rng.random_range(1..5)).unwrap(),
                )
            })
            .collect();
        let r = ahi_rdi(&events, rng.random_range(0.5..10.0)).unwrap();
        assert!(r.rdi >= r.ahi && r.ahi >= 0.0);
    }
}

/// Closed-form ordinary least squares.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope, (sy - slope * sx) / n)
}

#[test]
fn robust_fit_resists_outliers_and_recovers_lines() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let x: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..50.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| 2.0 * v + noise.sample(&mut rng) + if i % 10 == 0 { 50.0 } else { 0.0 })
        .collect();
    let fit = robust_fit(&x, &y).unwrap();
    assert!((fit.slope - 2.0).abs() < 0.02, "{fit:?}");
    assert!(
        (ols(&x, &y).1 - fit.intercept).abs() > 1.0,
        "outliers should move plain OLS"
    );

    let x: Vec<f64> = (0..20).map(f64::from).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let fit = robust_fit(&x, &y).unwrap();
    assert!((fit.slope - 2.0).abs() < 1e-9 && (fit.intercept - 1.0).abs() < 1e-9);
    assert!((fit.r_squared - 1.0).abs() < 1e-9 && (fit.pearson_r2 - 1.0).abs() < 1e-9);

    assert!(matches!(
        robust_fit(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]),
        Err(Error::DegenerateDesign(_))
    ));
}

#[test]
fn robust_fit_with_huge_tuning_is_ols() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.7 * v - 3.0 + rng.random_range(-1.0..1.0))
            .collect();
        let fit = robust_fit_with(&x, &y, 1e12).unwrap();
        let (slope, intercept) = ols(&x, &y);
        assert!((fit.slope - slope).abs() < 1e-9 && (fit.intercept - intercept).abs() < 1e-9);
    }
}

#[test]
fn error_histogram_statistics() {
    let h = ahi_error_histogram(&[0.0; 7], 2.5).unwrap();
    assert_eq!(h.bins, vec![(0.0, 7)]);
    assert_eq!((h.mean, h.std), (0.0, 0.0));
    assert_eq!(
        ahi_error_histogram(&[-3.0, 3.0, -1.5, 1.5], 2.5)
            .unwrap()
            .mean,
        0.0
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d: Vec<f64> = (0..500).map(|_| rng.random_range(-20.0..20.0)).collect();
    let h = ahi_error_histogram(&d, 2.5).unwrap();
    // Welford's update as an independent variance oracle
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in d.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    assert!((h.std - (m2 / (d.len() - 1) as f64).sqrt()).abs() < 1e-9);
    assert_eq!(h.bins.iter().map(|b| b.1).sum::<u64>(), 500);
}

fn result(
    id: &str,
    reference: Vec<AnnotationEvent>,
    predicted: Vec<AnnotationEvent>,
) -> RecordResult {
    RecordResult {
        record_id: id.into(),
        duration_s: 3600.0,
        sleep_hours: 1.0,
        reference,
        predicted,
        probabilities: None,
    }
}

#[test]
fn report_round_trips_and_self_evaluation_is_perfect() {
    let events: Vec<_> = (0..30)
        .map(|i| {
            AnnotationEvent::new(
                100.0 * i as f64,
                20.0,
                EventClass::from_code(1 + i % 4).unwrap(),
            )
        })
        .collect();
    for task in [Task::Binary, Task::Multiclass] {
        let results: Vec<_> = [("a", 30), ("b", 10), ("c", 20)]
            .into_iter()
            .map(|(id, n)| result(id, events[..n].to_vec(), task_reference(&events[..n], task)))
            .collect();
        let report = build_report(task, &results, &EvalConfig::default()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.report_version, 1);
        for m in &report.event_metrics {
            assert_eq!(m.fp, 0, "{task}");
            if m.tp + m.fn_ > 0 {
                assert_eq!(m.metrics.sensitivity, Some(1.0));
            }
        }
        for row in report.event_confusion_normalized.iter() {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
    }

    // nothing predicted: every reference event becomes a false negative
    let report = build_report(
        Task::Binary,
        &[result("a", events.clone(), vec![])],
        &EvalConfig::default(),
    )
    .unwrap();
    let expected_refs = events
        .iter()
        .filter(|e| e.class != EventClass::Rera)
        .count() as u64;
    assert_eq!(report.event_metrics[0].fn_, expected_refs);
}
