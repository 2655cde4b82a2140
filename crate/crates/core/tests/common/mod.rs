//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use apnea_core::neuralnet::{backward, forward_with_mask, ArchSpec, Params, Plan};
use apnea_core::record_io::EventClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over all
/// parameters of a random network, using central differences with step `h`.
pub fn max_gradient_error(seed: u64, h: f64) -> (ArchSpec, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec {
        n_layers: rng.random_range(1..=4),
        kernel_size: 2,
        n_filters: rng.random_range(1..=8),
        dropout_p: 0.2,
        n_classes: rng.random_range(2..=5),
        input_len: rng.random_range(2..=64),
    };
    let mut params = Params::<f64>::init(&arch, &mut rng);
    // non-zero biases so every code path carries gradient
    let layout = params.layout();
    for b in layout.blocks.iter().filter(|b| b.is_bias()) {
        for v in &mut params.values[b.offset..b.offset + b.len()] {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let x: Vec<f64> = (0..arch.input_len)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let class = rng.random_range(0..arch.n_classes);
    let mask: Vec<f64> = (0..arch.n_layers * arch.n_filters)
        .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { 1.25 })
        .collect();
    let plan = Plan::last(&arch, arch.input_len);

    let loss_at = |p: &Params<f64>| -> f64 {
        let acts = forward_with_mask(p, &x, &plan, mask.clone()).unwrap();
        -acts.probs[class].ln()
    };
    let acts = forward_with_mask(&params, &x, &plan, mask.clone()).unwrap();
    let mut grads = Params::zeros(&arch);
    backward(&params, &plan, &acts, class, &mut grads).unwrap();

    let mut worst = 0.0f64;
    for i in 0..params.values.len() {
        let orig = params.values[i];
        params.values[i] = orig + h;
        let up = loss_at(&params);
        params.values[i] = orig - h;
        let down = loss_at(&params);
        params.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.values[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    (arch, worst)
}

/// Random 1 Hz timeline built from runs, so windows see mixed and uniform content.
pub fn random_timeline(rng: &mut ChaCha8Rng) -> Vec<EventClass> {
    let len = rng.random_range(0..200);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let class = if rng.random::<f64>() < 0.4 {
            EventClass::NoEvent
        } else {
            EventClass::from_code(rng.random_range(1..5)).unwrap()
        };
        let run = rng.random_range(1..25);
        for _ in 0..run {
            if out.len() < len {
                out.push(class);
            }
        }
    }
    out
}

/// The smoothing rules applied literally, one step at a time.
pub fn naive_smooth(input: &[EventClass]) -> Vec<EventClass> {
    let code = |c: EventClass| c.code() as usize;
    // step 1: label every complete 10 s window
    let mut window_labels = Vec::new();
    let mut start = 0;
    while start + 10 <= input.len() {
        let window = &input[start..start + 10];
        let mut counts = [0; 5];
        for &c in window {
            counts[code(c)] += 1;
        }
        if counts[0] >= 3 {
            window_labels.push(0);
        } else {
            let mut best = 1;
            for k in [2, 3, 4] {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            window_labels.push(best);
        }
        start += 10;
    }
    // step 2: merge runs of adjacent event windows
    let mut out = vec![EventClass::NoEvent; input.len()];
    let mut w = 0;
    while w < window_labels.len() {
        if window_labels[w] == 0 {
            w += 1;
            continue;
        }
        let first = w;
        while w < window_labels.len() && window_labels[w] != 0 {
            w += 1;
        }
        let mut counts = [0; 5];
        for &c in &input[first * 10..w * 10] {
            counts[code(c)] += 1;
        }
        let mut best = 1;
        for k in [2, 3, 4] {
            if counts[k] > counts[best] {
                best = k;
            }
        }
        out[first * 10..w * 10].fill(EventClass::from_code(best as u8).unwrap());
    }
    out
}

/// Probability that a random positive outscores a random negative, ties half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice_wins += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

/// MGH experiment 1 binary event counts: (TP, TN, FP, FN).
pub const MGH_EXP1: (u64, u64, u64, u64) = (57121, 971480, 28133, 23166);

/// MGH published per-event metrics, percent: accuracy, sensitivity,
/// specificity, precision, F1.
pub const MGH_EXP1_PERCENT: [f64; 5] = [95.0, 71.0, 97.0, 68.0, 70.0];

/// MGH experiment 2 absolute event confusion (rows true, columns predicted;
/// NoEvent, obstructive, central, RERA, hypopnea).
pub const MGH_EXP2_COUNTS: [[u64; 5]; 5] = [
    [970484, 2234, 5427, 20032, 3975],
    [4394, 10998, 3339, 2781, 2619],
    [1791, 1150, 13924, 191, 124],
    [21907, 1990, 1854, 11367, 2665],
    [14883, 7982, 3333, 9520, 6893],
];

/// The same matrix as published after row normalisation.
pub const MGH_EXP2_NORMALIZED: [[f64; 5]; 5] = [
    [0.97, 0.0, 0.01, 0.02, 0.0],
    [0.18, 0.46, 0.14, 0.12, 0.11],
    [0.1, 0.07, 0.81, 0.01, 0.01],
    [0.55, 0.05, 0.05, 0.29, 0.07],
    [0.35, 0.19, 0.08, 0.22, 0.16],
];
