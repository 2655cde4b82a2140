//! Flat `key = value` run configuration covering every stage of the pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::neuralnet::ArchSpec;
use crate::postprocess::SmoothingConfig;
use crate::preprocess::PreprocessConfig;
use crate::synthgen::{CorpusConfig, SynthConfig};
use crate::trainer::{CascadeConfig, Task, TrainConfig};

/// Name of the resolved configuration written next to every command's outputs.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub corpus_dir: PathBuf,
    pub preprocessed_dir: PathBuf,
    pub model_dir: PathBuf,
    pub predictions_dir: PathBuf,
    pub report_dir: PathBuf,
    /// Manifest of records to predict; defaults to the corpus test split.
    pub predict_manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub preprocess: PreprocessConfig,
    pub arch: ArchSpec,
    pub cascade: CascadeConfig,
    pub train: TrainConfig,
    pub smoothing: SmoothingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: Task::Binary,
            corpus_dir: "run/corpus".into(),
            preprocessed_dir: "run/preprocessed".into(),
            model_dir: "run/model".into(),
            predictions_dir: "run/predictions".into(),
            report_dir: "run/report".into(),
            predict_manifest: None,
            synth: SynthConfig::default(),
            corpus: CorpusConfig::default(),
            preprocess: PreprocessConfig::default(),
            arch: ArchSpec::default(),
            cascade: CascadeConfig::default(),
            train: TrainConfig::default(),
            smoothing: SmoothingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

trait Value: Sized {
    fn parse(text: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(text: &str) -> std::result::Result<Self, String> {
                text.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(f64, usize, u64);

impl Value for Task {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        text.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for PathBuf {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        if text.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(text))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: Value> Value for Option<T> {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        if text.is_empty() || text == "none" {
            Ok(None)
        } else {
            T::parse(text).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), Value::render)
    }
}

fn parse_list(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

fn render_list(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl Value for Vec<f64> {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        parse_list(text)
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl<const N: usize> Value for [f64; N] {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        let v = parse_list(text)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| format!("expected {N} comma-separated values, got {n}"))
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl Value for (f64, f64) {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        let [a, b] = <[f64; 2]>::parse(text)?;
        Ok((a, b))
    }
    fn render(&self) -> String {
        render_list(&[self.0, self.1])
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            /// Every recognised key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Overrides one key; unknown keys and unparsable values are errors.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        self.$($field).+ = Value::parse(value)
                            .map_err(|e| Error::Config(format!("{}: {e}", $key)))?;
                    })*
                    other => return Err(Error::Config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// Every key with its current value, one `key = value` per line.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", $key, Value::render(&self.$($field).+));)*
                out
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "task" => task;
    "paths.corpus_dir" => corpus_dir;
    "paths.preprocessed_dir" => preprocessed_dir;
    "paths.model_dir" => model_dir;
    "paths.predictions_dir" => predictions_dir;
    "paths.report_dir" => report_dir;
    "paths.predict_manifest" => predict_manifest;
    "synth.duration_s" => synth.duration_s;
    "synth.sample_rate_hz" => synth.sample_rate_hz;
    "synth.breath_rate_hz" => synth.breath_rate_hz;
    "synth.amplitude_drift" => synth.amplitude_drift;
    "synth.noise_std" => synth.noise_std;
    "synth.line_noise" => synth.line_noise;
    "synth.events_per_hour" => synth.events_per_hour;
    "synth.depth_jitter" => synth.depth_jitter;
    "synth.event_median_s" => synth.event_median_s;
    "synth.event_sigma" => synth.event_sigma;
    "synth.min_event_s" => synth.min_event_s;
    "synth.max_event_s" => synth.max_event_s;
    "synth.min_gap_s" => synth.min_gap_s;
    "synth.sleep_hours" => synth.sleep_hours;
    "corpus.n_records" => corpus.n_records;
    "corpus.split" => corpus.split;
    "corpus.rate_multipliers" => corpus.rate_multipliers;
    "corpus.rate_jitter" => corpus.rate_jitter;
    "corpus.breath_rate_range" => corpus.breath_rate_range;
    "preprocess.notch_hz" => preprocess.notch_hz;
    "preprocess.notch_q" => preprocess.notch_q;
    "preprocess.lowpass_hz" => preprocess.lowpass_hz;
    "preprocess.lowpass_order" => preprocess.lowpass_order;
    "preprocess.clip_lo_pct" => preprocess.clip_lo_pct;
    "preprocess.clip_hi_pct" => preprocess.clip_hi_pct;
    "preprocess.train_stride_s" => preprocess.train_stride_s;
    "preprocess.test_stride_s" => preprocess.test_stride_s;
    "arch.n_layers" => arch.n_layers;
    "arch.kernel_size" => arch.kernel_size;
    "arch.n_filters" => arch.n_filters;
    "arch.dropout_p" => arch.dropout_p;
    "cascade.balance_ratio" => cascade.balance_ratio;
    "cascade.max_stages" => cascade.max_stages;
    "cascade.min_removed_frac" => cascade.min_removed_frac;
    "train.lr" => train.lr;
    "train.batch_size" => train.batch_size;
    "train.max_steps" => train.max_steps;
    "train.patience" => train.patience;
    "train.eval_every" => train.eval_every;
    "smoothing.window_s" => smoothing.window_s;
    "smoothing.noevent_quorum" => smoothing.noevent_quorum;
    "smoothing.min_event_s" => smoothing.min_event_s;
    "smoothing.merge_min_total_windows" => smoothing.merge_min_total_windows;
    "eval.median_event_s" => eval.median_event_s;
    "eval.histogram_bin_width" => eval.histogram_bin_width;
}

impl RunConfig {
    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    /// Relative paths stay relative to the working directory.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text)
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// The seed is the single source of randomness: corpus generation and
    /// training streams are derived from it.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            task: self.task,
            ..self.cascade.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.preprocess.validate()?;
        self.arch.validate()?;
        if self.arch.input_len != crate::preprocess::EPOCH_LEN {
            return Err(Error::Config(
                "arch.input_len is fixed by the epoch length".into(),
            ));
        }
        self.train_config().validate()?;
        self.smoothing.validate()?;
        if !(self.cascade.balance_ratio > 0.0) {
            return Err(Error::Config(
                "cascade.balance_ratio must be positive".into(),
            ));
        }
        if !(self.eval.median_event_s > 0.0) || !(self.eval.histogram_bin_width > 0.0) {
            return Err(Error::Config("eval parameters must be positive".into()));
        }
        if self.corpus.n_records == 0 {
            return Err(Error::Config("corpus.n_records must be positive".into()));
        }
        crate::synthgen::split_counts(self.corpus.n_records, self.corpus.split)?;
        Ok(())
    }
}
