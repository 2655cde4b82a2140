//! Gated dilated causal convolution classifier.
//!
//! A 1x1 input embedding feeds a stack of residual blocks. Block `l` applies a
//! kernel-2 causal convolution with dilation `2^l` to produce filter and gate
//! pre-activations, combines them as `tanh(f) * sigmoid(g)`, and emits a 1x1
//! residual update and a 1x1 skip contribution. The skip contributions at the
//! last time index are summed, passed through `relu -> 1x1 -> relu -> 1x1` and
//! a softmax. Dropout acts on each block's skip contribution.
//!
//! Only the positions that can reach the requested outputs are evaluated (see
//! [`plan::Plan`]), so a single-output forward over a 4200-sample epoch costs
//! one receptive field of work rather than `n_layers * 4200`.

mod model;
mod optim;
mod params;
mod plan;
mod real;

pub use model::{
    backward, forward, forward_many, forward_train, forward_with_mask, loss_and_gradient,
    Activations,
};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ModelParams, ParamBlock,
    ParamLayout, Params,
};
pub use plan::Plan;
pub use real::Real;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_layers: usize,
    pub kernel_size: usize,
    pub n_filters: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
    pub input_len: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            n_layers: 12,
            kernel_size: 2,
            n_filters: 32,
            dropout_p: 0.2,
            n_classes: 2,
            input_len: crate::preprocess::EPOCH_LEN,
        }
    }
}

impl ArchSpec {
    pub fn with_classes(n_classes: usize) -> Self {
        ArchSpec {
            n_classes,
            ..ArchSpec::default()
        }
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << layer
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.n_layers > 24 {
            return bad("n_layers must be in 1..=24");
        }
        if self.kernel_size < 2 {
            return bad("kernel_size must be at least 2");
        }
        if self.n_filters == 0 {
            return bad("n_filters must be positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must be in [0, 1)");
        }
        if self.input_len == 0 {
            return bad("input_len must be positive");
        }
        Ok(())
    }
}

/// Number of input samples that can influence one output position.
pub fn receptive_field(arch: &ArchSpec) -> usize {
    1 + (arch.kernel_size - 1) * (0..arch.n_layers).map(|l| arch.dilation(l)).sum::<usize>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Class probabilities for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub probs: Vec<f64>,
}

impl PredictionDistribution {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy against a one-hot target; probabilities are floored at 1e-12.
pub fn loss(probs: &[f64], true_class: usize) -> Result<f64> {
    let p = probs.get(true_class).ok_or(Error::ShapeMismatch {
        expected: true_class + 1,
        actual: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

pub(crate) fn softmax_in_place<T: Real>(logits: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v = *v / sum;
    }
}
