//! End-to-end commands: synth, preprocess, train, predict, evaluate.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{build_report, per_second_curves, write_report, EvalReport, RecordResult};
use crate::neuralnet::argmax;
use crate::postprocess::smoothed_events;
use crate::preprocess::{condition, segment, Epoch, PreprocessConfig, TARGET_HZ};
use crate::record_io::{
    annotation_path_for, events_to_timeline, load_annotations, load_record, read_manifest,
    read_probabilities, save_annotations, save_json, save_record, validate_reference,
    write_manifest, write_probabilities, AnnotationEvent, LabelTimeline, SignalRecord,
};
use crate::synthgen::{make_corpus, CorpusManifests};
use crate::trainer::{
    class_ratio, predict_record, run_cascade, train_main, CascadeModel, LogEntry, Task,
};

/// A record after conditioning, with its reference annotations.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub record_id: String,
    pub duration_s: f64,
    pub sleep_hours: f64,
    pub samples_10hz: Vec<f32>,
    pub reference: Vec<AnnotationEvent>,
}

/// Loads a record and its `<stem>.events.ndjson` annotations and conditions the signal.
pub fn prepare_record(path: &Path, cfg: &PreprocessConfig) -> Result<PreparedRecord> {
    let record = load_record(path)?;
    let reference = load_annotations(annotation_path_for(path))?;
    validate_reference(&reference, record.duration_s())?;
    let samples_10hz = condition(&record, cfg)?;
    Ok(PreparedRecord {
        duration_s: record.duration_s(),
        sleep_hours: record.sleep_hours,
        record_id: record.record_id,
        samples_10hz,
        reference,
    })
}

impl PreparedRecord {
    pub fn timeline(&self) -> Result<LabelTimeline> {
        events_to_timeline(&self.reference, self.duration_s)
    }

    pub fn epochs(&self, stride_s: usize) -> Result<Vec<Epoch>> {
        segment(
            &self.record_id,
            &self.samples_10hz,
            &self.timeline()?,
            stride_s,
        )
    }
}

/// Epochs of every record in `paths`, in manifest order.
pub fn load_epochs(
    paths: &[PathBuf],
    cfg: &PreprocessConfig,
    stride_s: usize,
) -> Result<Vec<Epoch>> {
    let per_record = paths
        .par_iter()
        .map(|p| prepare_record(p, cfg)?.epochs(stride_s))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn corpus_manifests(dir: &Path) -> Result<CorpusManifests> {
    Ok(CorpusManifests {
        train: read_manifest(CorpusManifests::train_path(dir))?,
        val: read_manifest(CorpusManifests::val_path(dir))?,
        test: read_manifest(CorpusManifests::test_path(dir))?,
    })
}

/// Generates the synthetic corpus described by the config.
pub fn cmd_synth(cfg: &RunConfig) -> Result<CorpusManifests> {
    cfg.validate()?;
    let manifests = make_corpus(&cfg.corpus_dir, &cfg.synth_config(), &cfg.corpus)?;
    cfg.write_resolved(&cfg.corpus_dir)?;
    log::info!(
        "corpus in {}: {} train, {} val, {} test records",
        cfg.corpus_dir.display(),
        manifests.train.len(),
        manifests.val.len(),
        manifests.test.len()
    );
    Ok(manifests)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub records: usize,
    pub epochs: usize,
    /// Epoch count per center-label class code.
    pub epoch_classes: [usize; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub train: SplitSummary,
    pub val: SplitSummary,
    pub test: SplitSummary,
}

/// Conditions every corpus record, writes the 10 Hz signals (plus annotations
/// and manifests) under `preprocessed_dir`, and summarises the epoch pools.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessSummary> {
    cfg.validate()?;
    let manifests = corpus_manifests(&cfg.corpus_dir)?;
    let out = &cfg.preprocessed_dir;
    let rec_dir = out.join("records");
    create_dir(&rec_dir)?;
    let split = |paths: &[PathBuf], stride: usize, manifest: PathBuf| -> Result<SplitSummary> {
        let done = paths
            .par_iter()
            .map(|p| {
                let prep = prepare_record(p, &cfg.preprocess)?;
                let epochs = prep.epochs(stride)?;
                let mut classes = [0usize; 5];
                for e in &epochs {
                    classes[e.center_label.code() as usize] += 1;
                }
                let dest = rec_dir.join(format!("{}.sig", prep.record_id));
                let rec = SignalRecord::new(
                    &prep.record_id,
                    TARGET_HZ,
                    prep.samples_10hz,
                    prep.sleep_hours,
                )?;
                save_record(&dest, &rec)?;
                save_annotations(annotation_path_for(&dest), &prep.reference)?;
                Ok((dest, epochs.len(), classes))
            })
            .collect::<Result<Vec<_>>>()?;
        write_manifest(
            manifest,
            &done.iter().map(|d| d.0.clone()).collect::<Vec<_>>(),
        )?;
        let mut summary = SplitSummary {
            records: done.len(),
            epochs: 0,
            epoch_classes: [0; 5],
        };
        for (_, n, classes) in &done {
            summary.epochs += n;
            for (a, b) in summary.epoch_classes.iter_mut().zip(classes) {
                *a += b;
            }
        }
        Ok(summary)
    };
    let p = &cfg.preprocess;
    let summary = PreprocessSummary {
        train: split(
            &manifests.train,
            p.train_stride_s,
            CorpusManifests::train_path(out),
        )?,
        val: split(
            &manifests.val,
            p.train_stride_s,
            CorpusManifests::val_path(out),
        )?,
        test: split(
            &manifests.test,
            p.test_stride_s,
            CorpusManifests::test_path(out),
        )?,
    };
    save_json(out.join("preprocess_summary.json"), &summary)?;
    cfg.write_resolved(out)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub threshold: f64,
    pub target_tpr: f64,
    pub val_tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: Task,
    pub train_epochs: usize,
    pub val_epochs: usize,
    pub initial_ratio: f64,
    pub stages: Vec<StageSummary>,
    pub final_ratio: f64,
    pub ratio_reached: bool,
    pub pool_train_epochs: usize,
    pub pool_val_epochs: usize,
    pub main_steps: usize,
    pub main_best_val_loss: f64,
    pub main_final_val_loss: f64,
}

pub const TRAIN_LOG_FILE: &str = "training_log.ndjson";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

/// Trains the cascade and the main model on the corpus train/val splits and
/// writes the checkpoint directory, the per-evaluation training log and a summary.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifests = corpus_manifests(&cfg.corpus_dir)?;
    let stride = cfg.preprocess.train_stride_s;
    let train = load_epochs(&manifests.train, &cfg.preprocess, stride)?;
    let val = load_epochs(&manifests.val, &cfg.preprocess, stride)?;
    let task = cfg.task;
    let initial_ratio = class_ratio(train.iter().map(|e| task.label(e.center_label)), task);
    log::info!(
        "training {task} on {} epochs ({} val), initial ratio {initial_ratio:.2}",
        train.len(),
        val.len()
    );
    let train_cfg = cfg.train_config();
    let outcome = run_cascade(&train, &val, &cfg.arch, &cfg.cascade_config(), &train_cfg)?;
    let main = train_main(&train, &val, &outcome, &cfg.arch, task, &train_cfg)?;

    let summary = TrainSummary {
        task,
        train_epochs: train.len(),
        val_epochs: val.len(),
        initial_ratio,
        stages: outcome
            .stages
            .iter()
            .map(|s| StageSummary {
                stage: s.stage_index,
                threshold: s.rejection_threshold,
                target_tpr: s.target_tpr,
                val_tpr: s.val_tpr,
            })
            .collect(),
        final_ratio: outcome.final_ratio,
        ratio_reached: outcome.ratio_reached,
        pool_train_epochs: outcome.train_pool.len(),
        pool_val_epochs: outcome.val_pool.len(),
        main_steps: main.steps,
        main_best_val_loss: main.best_val_loss,
        main_final_val_loss: main.final_val_loss,
    };
    log::info!(
        "cascade: {} stages, final ratio {:.2}; main model best val loss {:.4}",
        summary.stages.len(),
        summary.final_ratio,
        summary.main_best_val_loss
    );
    let model = CascadeModel {
        task,
        stages: outcome.stages,
        main: main.params,
    };
    let dir = &cfg.model_dir;
    model.save(dir)?;
    let log_entries: Vec<&LogEntry> = outcome.log.iter().chain(&main.log).collect();
    write_ndjson(&dir.join(TRAIN_LOG_FILE), &log_entries)?;
    save_json(dir.join(TRAIN_SUMMARY_FILE), &summary)?;
    cfg.write_resolved(dir)?;
    Ok(summary)
}

fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPrediction {
    pub record_id: String,
    pub seconds: usize,
    pub events: usize,
}

pub fn events_path(dir: &Path, record_id: &str) -> PathBuf {
    dir.join(format!("{record_id}.events.ndjson"))
}

pub fn probabilities_path(dir: &Path, record_id: &str) -> PathBuf {
    dir.join(format!("{record_id}.probs.csv"))
}

/// Per-second probabilities and smoothed events for one conditioned record.
pub fn predict_prepared(
    model: &CascadeModel,
    record: &PreparedRecord,
    cfg: &RunConfig,
) -> Result<(Vec<Vec<f64>>, Vec<AnnotationEvent>)> {
    let probs = predict_record(model, &record.samples_10hz)?;
    let n_sec = (record.duration_s.floor() as usize).min(probs.len());
    let probs = probs[..n_sec].to_vec();
    let timeline = LabelTimeline::new(
        probs
            .iter()
            .map(|row| model.task.class_of(argmax(row)))
            .collect(),
    );
    let events = smoothed_events(&timeline, &cfg.smoothing);
    Ok((probs, events))
}

fn predict_manifest(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match &cfg.predict_manifest {
        Some(p) => read_manifest(p),
        None => read_manifest(CorpusManifests::test_path(&cfg.corpus_dir)),
    }
}

/// Writes `<id>.probs.csv` and `<id>.events.ndjson` for every record to predict.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<RecordPrediction>> {
    cfg.validate()?;
    let model = CascadeModel::load(&cfg.model_dir)?;
    let paths = predict_manifest(cfg)?;
    let out = &cfg.predictions_dir;
    create_dir(out)?;
    let done = paths
        .par_iter()
        .map(|p| {
            let rec = prepare_record(p, &cfg.preprocess)?;
            let (probs, events) = predict_prepared(&model, &rec, cfg)?;
            let path = probabilities_path(out, &rec.record_id);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_probabilities(BufWriter::new(file), &probs)?;
            save_annotations(events_path(out, &rec.record_id), &events)?;
            Ok(RecordPrediction {
                record_id: rec.record_id,
                seconds: probs.len(),
                events: events.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.write_resolved(out)?;
    Ok(done)
}

/// Matches every prediction file in `predictions_dir` to its reference record
/// and writes the report and plot artifacts.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut references: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in predict_manifest(cfg)? {
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::InvalidRecord(format!("bad record path {}", p.display())))?;
        references.insert(id, p);
    }
    let dir = &cfg.predictions_dir;
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".events.ndjson").map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::InvalidRecord(format!(
            "no predictions in {}",
            dir.display()
        )));
    }
    let results = ids
        .par_iter()
        .map(|id| {
            let ref_path = references
                .get(id)
                .ok_or_else(|| Error::MissingReference(id.clone()))?;
            let record = load_record(ref_path)?;
            let reference = load_annotations(annotation_path_for(ref_path))?;
            let predicted = load_annotations(events_path(dir, id))?;
            let probs_path = probabilities_path(dir, id);
            let probabilities = if probs_path.exists() {
                let file = File::open(&probs_path).map_err(|e| Error::io(&probs_path, e))?;
                Some(read_probabilities(BufReader::new(file))?)
            } else {
                None
            };
            Ok(RecordResult {
                record_id: id.clone(),
                duration_s: record.duration_s(),
                sleep_hours: record.sleep_hours,
                reference,
                predicted,
                probabilities,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(cfg.task, &results, &cfg.eval)?;
    let curves = per_second_curves(cfg.task, &results)?;
    write_report(&cfg.report_dir, &report, curves.as_ref())?;
    cfg.write_resolved(&cfg.report_dir)?;
    Ok(report)
}

/// Result of a full synth -> train -> predict -> evaluate run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub train: TrainSummary,
    pub report: EvalReport,
}

pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cmd_synth(cfg)?;
    let train = cmd_train(cfg)?;
    cmd_predict(cfg)?;
    let report = cmd_evaluate(cfg)?;
    Ok(PipelineOutcome { train, report })
}
