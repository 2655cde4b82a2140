mod common;

use apnea_core::postprocess::{match_events, smooth, SmoothingConfig};
use apnea_core::record_io::{timeline_to_events, AnnotationEvent, EventClass, LabelTimeline};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn smoothing_matches_naive_reference() {
    let cfg = SmoothingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..10_000 {
        let input = common::random_timeline(&mut rng);
        let got = smooth(&LabelTimeline::new(input.clone()), &cfg);
        assert_eq!(
            got.classes,
            common::naive_smooth(&input),
            "case {case}: {input:?}"
        );
    }
}

#[test]
fn smoothing_is_idempotent_and_events_are_long() {
    let cfg = SmoothingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2_000 {
        let once = smooth(&LabelTimeline::new(common::random_timeline(&mut rng)), &cfg);
        assert_eq!(smooth(&once, &cfg), once);
        for e in timeline_to_events(&once) {
            assert!(e.duration_s >= 10.0 && e.duration_s % 10.0 == 0.0, "{e:?}");
        }
    }
}

#[test]
fn spec_smoothing_examples() {
    let cfg = SmoothingConfig::default();
    let mut input = vec![EventClass::NoEvent; 3];
    input.extend([EventClass::ObstructiveOrMixedApnea; 7]);
    assert_eq!(
        smooth(&LabelTimeline::new(input), &cfg).classes,
        vec![EventClass::NoEvent; 10]
    );

    let mut input = vec![EventClass::ObstructiveOrMixedApnea; 2];
    input.extend([EventClass::CentralApnea; 18]);
    let out = smooth(&LabelTimeline::new(input), &cfg);
    assert_eq!(
        timeline_to_events(&out),
        vec![AnnotationEvent::new(0.0, 20.0, EventClass::CentralApnea)]
    );
}

fn random_events(rng: &mut ChaCha8Rng, n: usize) -> Vec<AnnotationEvent> {
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += rng.random_range(1.0..40.0);
            let d = rng.random_range(5.0..40.0);
            let e =
                AnnotationEvent::new(t, d, EventClass::from_code(rng.random_range(1..5)).unwrap());
            t += d;
            e
        })
        .collect()
}

#[test]
fn match_count_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..500 {
        let n_pred = rng.random_range(0..12);
        let n_ref = rng.random_range(0..12);
        let predicted = random_events(&mut rng, n_pred);
        let reference = random_events(&mut rng, n_ref);
        for same_class in [false, true] {
            let m = match_events(&predicted, &reference, same_class);
            assert_eq!(m.tp + m.fp, predicted.len());
            assert_eq!(m.tp_reference + m.fn_, reference.len());
            assert_eq!(m.predicted.len(), predicted.len());
        }
    }
}

#[test]
fn synthetic_event_durations_have_paper_median() {
    use apnea_core::synthgen::{schedule_events, SynthConfig};
    let cfg = SynthConfig {
        duration_s: 8.0 * 3600.0,
        ..SynthConfig::default()
    };
    let mut durations = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        durations.extend(
            schedule_events(&cfg, &mut rng)
                .unwrap()
                .iter()
                .map(|e| e.duration_s),
        );
    }
    durations.sort_by(f64::total_cmp);
    let median = durations[durations.len() / 2];
    assert!((median - 18.0).abs() <= 1.0, "median {median}");
}
