//! Boosted rebalancing cascade, main-model training and per-second prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{
    backward, forward, forward_many, forward_train, load_checkpoint, loss, save_checkpoint, Adam,
    ArchSpec, ModelParams, Optimizer, Params, Plan,
};
use crate::preprocess::{Epoch, EPOCH_LEN, EPOCH_S, TARGET_HZ};
use crate::record_io::{load_json, save_json, EventClass, LabelTimeline};
use crate::synthgen::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Apnea/hypopnea (OA, CA, HY) against everything else, RERA included.
    Binary,
    /// All five classes.
    Multiclass,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass => EventClass::ALL.len(),
        }
    }

    /// Task-specific class index of a reference label.
    pub fn label(self, class: EventClass) -> usize {
        match self {
            Task::Binary => class.is_apnea_hypopnea() as usize,
            Task::Multiclass => class.code() as usize,
        }
    }

    /// Event class represented by a task class index.
    pub fn class_of(self, index: usize) -> EventClass {
        match (self, index) {
            (_, 0) => EventClass::NoEvent,
            // a binary positive has no subtype; it is reported as an apnea-hypopnea event
            (Task::Binary, _) => EventClass::Hypopnea,
            (Task::Multiclass, i) => EventClass::from_code(i as u8).unwrap_or(EventClass::NoEvent),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" => Ok(Task::Multiclass),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Per-second task labels.
pub fn map_labels(timeline: &LabelTimeline, task: Task) -> Vec<usize> {
    timeline.classes.iter().map(|&c| task.label(c)).collect()
}

/// Validation TPR a cascade stage must reach (stages count from 1).
pub fn target_tpr(stage_index: usize) -> f64 {
    0.995 - 0.010 * (stage_index.max(1) - 1) as f64
}

/// Largest threshold `t` such that at least `target_tpr` of the positive
/// scores satisfy `p >= t`. Epochs scoring below `t` are rejected.
pub fn select_threshold(scores: &[f64], positive: &[bool], target_tpr: f64) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::ShapeMismatch {
            expected: scores.len(),
            actual: positive.len(),
        });
    }
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || pos.len() == scores.len() {
        return Err(Error::DegenerateValidationSet);
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let keep = ((target_tpr.clamp(0.0, 1.0) * pos.len() as f64 - 1e-9).ceil() as usize)
        .clamp(1, pos.len());
    Ok(pos[keep - 1])
}

/// Fraction of positives scoring at or above `threshold`.
pub fn true_positive_rate(scores: &[f64], positive: &[bool], threshold: f64) -> f64 {
    let (hit, total) = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .fold((0usize, 0usize), |(h, t), (&s, _)| {
            (h + (s >= threshold) as usize, t + 1)
        });
    if total == 0 {
        f64::NAN
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer step budget; passes over the pool repeat until it is spent.
    pub max_steps: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    /// Optimizer steps between validation evaluations; 0 means once per pass.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_steps: 2000,
            patience: 5,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        Ok(())
    }
}

/// A training or validation example: one epoch and its class index.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub samples: &'a [f32],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub model: String,
    pub step: usize,
    pub pass: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
    pub steps: usize,
    pub log: Vec<LogEntry>,
}

/// Mean eval-mode cross-entropy over `examples`.
pub fn mean_loss(params: &ModelParams, examples: &[Example<'_>]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let plan = Plan::last(&params.arch, params.arch.input_len);
    let losses = examples
        .par_iter()
        .map(|ex| loss(&forward(params, ex.samples, &plan)?.probs, ex.label))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

/// Probability of class 1 for each example (eval mode).
pub fn positive_scores(params: &ModelParams, examples: &[Example<'_>]) -> Result<Vec<f64>> {
    let plan = Plan::last(&params.arch, params.arch.input_len);
    examples
        .par_iter()
        .map(|ex| Ok(forward(params, ex.samples, &plan)?.probs[1]))
        .collect()
}

/// Mini-batch Adam with dropout, keeping the parameters with the lowest
/// validation loss and stopping after `patience` evaluations without improvement.
///
/// Results are independent of the number of worker threads: every example's
/// dropout mask comes from its own seeded stream and batch gradients are
/// reduced in a fixed order.
pub fn train_model(
    name: &str,
    arch: &ArchSpec,
    train: &[Example<'_>],
    val: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    arch.validate()?;
    if train.is_empty() {
        return Err(Error::Config(format!("{name}: no training examples")));
    }
    if let Some(ex) = train
        .iter()
        .chain(val)
        .find(|ex| ex.label >= arch.n_classes)
    {
        return Err(Error::ShapeMismatch {
            expected: arch.n_classes,
            actual: ex.label + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::<f32>::init(arch, &mut rng);
    let plan = Plan::last(arch, arch.input_len);
    let mut opt = Adam::new(cfg.lr);

    let steps_per_pass = train.len().div_ceil(cfg.batch_size);
    let eval_every = if cfg.eval_every == 0 {
        steps_per_pass
    } else {
        cfg.eval_every
    };
    let mut best = params.clone();
    let mut best_loss = mean_loss(&params, val)?;
    let mut last_val = best_loss;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut step = 0;
    let mut running = (0.0, 0usize);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut last_pass = 0;
    'passes: for pass in 0.. {
        last_pass = pass;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let stream = step * cfg.batch_size;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream + i));
                    let ex = &train[idx];
                    let acts = forward_train(&params, ex.samples, &plan, &mut drop_rng)?;
                    let mut grads = Params::zeros(arch);
                    let l = backward(&params, &plan, &acts, ex.label, &mut grads)?;
                    Ok((l, grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = vec![0.0f32; params.len()];
            let scale = 1.0 / batch.len() as f32;
            for (l, g) in &results {
                running.0 += l;
                running.1 += 1;
                for (t, v) in total.iter_mut().zip(&g.values) {
                    *t += v * scale;
                }
            }
            opt.step(&mut params.values, &total);
            if !params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{name}: parameters diverged at step {step}"
                )));
            }
            step += 1;

            if step % eval_every == 0 {
                last_val = mean_loss(&params, val)?;
                let train_loss = running.0 / running.1.max(1) as f64;
                running = (0.0, 0);
                log::info!("{name} step {step} pass {pass} train_loss {train_loss:.4} val_loss {last_val:.4}");
                log.push(LogEntry {
                    model: name.to_string(),
                    step,
                    pass,
                    train_loss,
                    val_loss: last_val,
                });
                if last_val < best_loss || val.is_empty() {
                    best_loss = last_val;
                    best = params.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break 'passes;
                    }
                }
            }
            if step >= cfg.max_steps {
                break 'passes;
            }
        }
    }
    if step % eval_every != 0 {
        last_val = mean_loss(&params, val)?;
        log.push(LogEntry {
            model: name.to_string(),
            step,
            pass: last_pass,
            train_loss: running.0 / running.1.max(1) as f64,
            val_loss: last_val,
        });
        if last_val < best_loss || val.is_empty() {
            best_loss = last_val;
            best = params.clone();
        }
    }
    Ok(TrainedModel {
        params: best,
        best_val_loss: best_loss,
        final_val_loss: last_val,
        steps: step,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub task: Task,
    /// Stop once regular : events (binary) or regular : most common event
    /// class (multiclass) is at most this.
    pub balance_ratio: f64,
    pub max_stages: usize,
    /// A stage must remove at least this fraction of the pool.
    pub min_removed_frac: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            task: Task::Binary,
            balance_ratio: 3.0,
            max_stages: 8,
            min_removed_frac: 0.005,
        }
    }
}

/// Regular-breathing count over the relevant event count, per the task's stop rule.
pub fn class_ratio(labels: impl IntoIterator<Item = usize>, task: Task) -> f64 {
    let mut counts = vec![0usize; task.n_classes()];
    for l in labels {
        counts[l] += 1;
    }
    let events = match task {
        Task::Binary => counts[1..].iter().sum(),
        Task::Multiclass => counts[1..].iter().copied().max().unwrap_or(0),
    };
    if events == 0 {
        f64::INFINITY
    } else {
        counts[0] as f64 / events as f64
    }
}

/// One trained rejection stage.
#[derive(Debug, Clone)]
pub struct BoostStage {
    pub stage_index: usize,
    pub params: ModelParams,
    pub rejection_threshold: f64,
    pub target_tpr: f64,
    /// TPR achieved on the validation pool the threshold was chosen on.
    pub val_tpr: f64,
}

#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub stages: Vec<BoostStage>,
    /// Indices of training epochs that survived every stage.
    pub train_pool: Vec<usize>,
    /// Indices of validation epochs that survived every stage.
    pub val_pool: Vec<usize>,
    pub final_ratio: f64,
    /// False when `max_stages` ran out before the ratio was reached.
    pub ratio_reached: bool,
    pub log: Vec<LogEntry>,
}

fn examples<'a>(
    epochs: &'a [Epoch],
    pool: &[usize],
    label: impl Fn(EventClass) -> usize,
) -> Vec<Example<'a>> {
    pool.iter()
        .map(|&i| Example {
            samples: &epochs[i].samples,
            label: label(epochs[i].center_label),
        })
        .collect()
}

/// Trains binary rejection stages until the surviving training pool meets the
/// balance rule. Each stage is trained on the current pool (positive = any
/// event relevant to the task), thresholded on the current validation pool at
/// its target TPR, and then removes every pool epoch scoring below threshold.
pub fn run_cascade(
    train: &[Epoch],
    val: &[Epoch],
    arch: &ArchSpec,
    cascade: &CascadeConfig,
    cfg: &TrainConfig,
) -> Result<CascadeOutcome> {
    let task = cascade.task;
    let stage_label = |c: EventClass| (task.label(c) != 0) as usize;
    let mut train_pool: Vec<usize> = (0..train.len()).collect();
    let mut val_pool: Vec<usize> = (0..val.len()).collect();
    let mut stages = Vec::new();
    let mut log = Vec::new();
    let ratio_of = |pool: &[usize]| {
        class_ratio(
            pool.iter().map(|&i| task.label(train[i].center_label)),
            task,
        )
    };
    let mut ratio = ratio_of(&train_pool);
    let stage_arch = ArchSpec {
        n_classes: 2,
        ..arch.clone()
    };

    while ratio > cascade.balance_ratio {
        if stages.len() >= cascade.max_stages {
            log::warn!(
                "cascade stopped after {} stages at ratio {ratio:.2}",
                stages.len()
            );
            return Ok(CascadeOutcome {
                stages,
                train_pool,
                val_pool,
                final_ratio: ratio,
                ratio_reached: false,
                log,
            });
        }
        if ratio.is_infinite() {
            return Err(Error::Config("training pool contains no events".into()));
        }
        let k = stages.len() + 1;
        let target = target_tpr(k);
        let train_ex = examples(train, &train_pool, stage_label);
        let val_ex = examples(val, &val_pool, stage_label);
        let stage_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, k),
            ..cfg.clone()
        };
        let model = train_model(
            &format!("stage{k}"),
            &stage_arch,
            &train_ex,
            &val_ex,
            &stage_cfg,
        )?;
        log.extend(model.log.iter().cloned());

        let val_scores = positive_scores(&model.params, &val_ex)?;
        let val_pos: Vec<bool> = val_ex.iter().map(|ex| ex.label == 1).collect();
        let threshold = select_threshold(&val_scores, &val_pos, target)?;
        let val_tpr = true_positive_rate(&val_scores, &val_pos, threshold);

        let train_scores = positive_scores(&model.params, &train_ex)?;
        let before = train_pool.len();
        train_pool = train_pool
            .iter()
            .zip(&train_scores)
            .filter(|(_, &s)| s >= threshold)
            .map(|(&i, _)| i)
            .collect();
        val_pool = val_pool
            .iter()
            .zip(&val_scores)
            .filter(|(_, &s)| s >= threshold)
            .map(|(&i, _)| i)
            .collect();
        let removed = before - train_pool.len();
        ratio = ratio_of(&train_pool);
        log::info!(
            "stage {k}: threshold {threshold:.4}, val TPR {val_tpr:.4} (target {target:.3}), removed {removed}/{before}, ratio {ratio:.2}"
        );
        if (removed as f64) < cascade.min_removed_frac * before as f64 {
            return Err(Error::CascadeStalled {
                stage: k,
                removed,
                pool: before,
            });
        }
        stages.push(BoostStage {
            stage_index: k,
            params: model.params,
            rejection_threshold: threshold,
            target_tpr: target,
            val_tpr,
        });
    }
    Ok(CascadeOutcome {
        stages,
        train_pool,
        val_pool,
        final_ratio: ratio,
        ratio_reached: true,
        log,
    })
}

/// Trains the task model on the epochs that survived the cascade.
pub fn train_main(
    train: &[Epoch],
    val: &[Epoch],
    outcome: &CascadeOutcome,
    arch: &ArchSpec,
    task: Task,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let main_arch = ArchSpec {
        n_classes: task.n_classes(),
        ..arch.clone()
    };
    let train_ex = examples(train, &outcome.train_pool, |c| task.label(c));
    let val_ex = examples(val, &outcome.val_pool, |c| task.label(c));
    let main_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 0),
        ..cfg.clone()
    };
    train_model("main", &main_arch, &train_ex, &val_ex, &main_cfg)
}

/// Everything needed to turn a conditioned record into per-second probabilities.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub task: Task,
    pub stages: Vec<BoostStage>,
    pub main: ModelParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageEntry {
    stage: usize,
    file: String,
    threshold: f64,
    target_tpr: f64,
    val_tpr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CascadeIndex {
    task: Task,
    main: String,
    stages: Vec<StageEntry>,
}

pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const MAIN_MODEL_FILE: &str = "main.model";

impl CascadeModel {
    /// Writes `stage_<k>.model`, `main.model` and `thresholds.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for stage in &self.stages {
            let file = format!("stage_{}.model", stage.stage_index);
            save_checkpoint(dir.join(&file), &stage.params)?;
            entries.push(StageEntry {
                stage: stage.stage_index,
                file,
                threshold: stage.rejection_threshold,
                target_tpr: stage.target_tpr,
                val_tpr: stage.val_tpr,
            });
        }
        save_checkpoint(dir.join(MAIN_MODEL_FILE), &self.main)?;
        save_json(
            dir.join(THRESHOLDS_FILE),
            &CascadeIndex {
                task: self.task,
                main: MAIN_MODEL_FILE.into(),
                stages: entries,
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: CascadeIndex = load_json(dir.join(THRESHOLDS_FILE))?;
        let main = load_checkpoint(dir.join(&index.main))?;
        if main.arch.n_classes != index.task.n_classes() {
            return Err(Error::ShapeMismatch {
                expected: index.task.n_classes(),
                actual: main.arch.n_classes,
            });
        }
        let stages = index
            .stages
            .into_iter()
            .map(|e| {
                let params = load_checkpoint(dir.join(&e.file))?;
                if params.arch.n_classes != 2 {
                    return Err(Error::ShapeMismatch {
                        expected: 2,
                        actual: params.arch.n_classes,
                    });
                }
                Ok(BoostStage {
                    stage_index: e.stage,
                    params,
                    rejection_threshold: e.threshold,
                    target_tpr: e.target_tpr,
                    val_tpr: e.val_tpr,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CascadeModel {
            task: index.task,
            stages,
            main,
        })
    }
}

/// Per-second class probabilities for a conditioned 10 Hz record.
///
/// Every 1 s-stride epoch is first passed through the cascade; an epoch any
/// stage rejects is certain regular breathing, otherwise it takes the main
/// model's distribution. Second `s` reports the epoch centred on it, and the
/// first and last 210 s repeat the nearest computable epoch.
pub fn predict_record(model: &CascadeModel, samples_10hz: &[f32]) -> Result<Vec<Vec<f64>>> {
    let per_s = TARGET_HZ as usize;
    let n_sec = samples_10hz.len() / per_s;
    if n_sec < EPOCH_S {
        return Err(Error::RecordTooShort {
            duration_s: samples_10hz.len() as f64 / TARGET_HZ,
            required_s: EPOCH_S as f64,
        });
    }
    for p in std::iter::once(&model.main).chain(model.stages.iter().map(|s| &s.params)) {
        if p.arch.input_len != EPOCH_LEN {
            return Err(Error::ShapeMismatch {
                expected: EPOCH_LEN,
                actual: p.arch.input_len,
            });
        }
    }
    let last_start = n_sec - EPOCH_S;
    let outputs: Vec<usize> = (0..=last_start)
        .map(|t| t * per_s + EPOCH_LEN - 1)
        .collect();
    let plan = Plan::new(&model.main.arch, samples_10hz.len(), &outputs);

    let mut alive = vec![true; outputs.len()];
    for stage in &model.stages {
        let dists = forward_many(&stage.params, samples_10hz, &plan)?;
        for (a, d) in alive.iter_mut().zip(&dists) {
            if d.probs[1] < stage.rejection_threshold {
                *a = false;
            }
        }
    }
    let main = forward_many(&model.main, samples_10hz, &plan)?;
    let n_classes = model.main.arch.n_classes;
    let mut regular = vec![0.0; n_classes];
    regular[0] = 1.0;
    let half = EPOCH_S / 2;
    Ok((0..n_sec)
        .map(|s| {
            let e = s.saturating_sub(half).min(last_start);
            if alive[e] {
                main[e].probs.clone()
            } else {
                regular.clone()
            }
        })
        .collect())
}
