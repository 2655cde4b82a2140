use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::ArchSpec;
use crate::error::{Error, Result};
use crate::record_io::{read_f32_payload, read_header_line, write_f32_payload};

/// A named, row-major parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".b")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub conv_w: usize,
    pub conv_b: usize,
    pub res_w: usize,
    pub res_b: usize,
    pub skip_w: usize,
    pub skip_b: usize,
}

/// Flat parameter ordering. Matrices are stored `(in, out)` row-major so a
/// row-vector input times the block gives the output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub(crate) embed_w: usize,
    pub(crate) embed_b: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) head1_w: usize,
    pub(crate) head1_b: usize,
    pub(crate) head2_w: usize,
    pub(crate) head2_b: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(arch: &ArchSpec) -> Self {
        let c = arch.n_filters;
        let mut blocks = Vec::new();
        let mut total = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            let offset = total;
            total += rows * cols;
            blocks.push(ParamBlock {
                name,
                rows,
                cols,
                offset,
            });
            offset
        };
        let embed_w = push("embed.w".into(), 1, c);
        let embed_b = push("embed.b".into(), 1, c);
        let layers = (0..arch.n_layers)
            .map(|l| LayerOffsets {
                conv_w: push(format!("layer{l}.conv.w"), arch.kernel_size * c, 2 * c),
                conv_b: push(format!("layer{l}.conv.b"), 1, 2 * c),
                res_w: push(format!("layer{l}.res.w"), c, c),
                res_b: push(format!("layer{l}.res.b"), 1, c),
                skip_w: push(format!("layer{l}.skip.w"), c, c),
                skip_b: push(format!("layer{l}.skip.b"), 1, c),
            })
            .collect();
        let head1_w = push("head1.w".into(), c, c);
        let head1_b = push("head1.b".into(), 1, c);
        let head2_w = push("head2.w".into(), c, arch.n_classes);
        let head2_b = push("head2.b".into(), 1, arch.n_classes);
        ParamLayout {
            blocks,
            embed_w,
            embed_b,
            layers,
            head1_w,
            head1_b,
            head2_w,
            head2_b,
            total,
        }
    }
}

/// All trainable weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub arch: ArchSpec,
    pub values: Vec<T>,
}

/// Checkpointed parameters are single precision.
pub type ModelParams = Params<f32>;

impl<T: Real> Params<T> {
    pub fn zeros(arch: &ArchSpec) -> Self {
        let total = ParamLayout::new(arch).total;
        Params {
            arch: arch.clone(),
            values: vec![T::zero(); total],
        }
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> Self {
        let layout = ParamLayout::new(arch);
        let mut values = vec![T::zero(); layout.total];
        for block in &layout.blocks {
            if block.is_bias() {
                continue;
            }
            let bound = (6.0 / block.rows as f64).sqrt();
            for v in &mut values[block.offset..block.offset + block.len()] {
                *v = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        Params {
            arch: arch.clone(),
            values,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.arch)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            arch: self.arch.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

const CHECKPOINT_FORMAT: &str = "apnea-wavenet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    arch: ArchSpec,
    n_params: usize,
    dtype: String,
    byte_order: String,
    layout: Vec<ParamBlock>,
}

/// JSON header line, then `n_params` little-endian f32 values in layout order.
pub fn write_checkpoint<W: Write>(mut writer: W, params: &ModelParams) -> Result<()> {
    let layout = params.layout();
    if layout.total != params.values.len() {
        return Err(Error::ShapeMismatch {
            expected: layout.total,
            actual: params.values.len(),
        });
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        n_params: layout.total,
        dtype: "f32".into(),
        byte_order: "little".into(),
        layout: layout.blocks,
    };
    let mut line = serde_json::to_vec(&header)?;
    line.push(b'\n');
    let io = |e| Error::io("<checkpoint stream>", e);
    writer.write_all(&line).map_err(io)?;
    write_f32_payload(&mut writer, &params.values).map_err(io)?;
    writer.flush().map_err(io)
}

pub fn read_checkpoint<R: BufRead>(mut reader: R) -> Result<ModelParams> {
    let line = read_header_line(&mut reader)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    header.arch.validate()?;
    let layout = ParamLayout::new(&header.arch);
    let expected: Vec<(&str, usize, usize)> = layout
        .blocks
        .iter()
        .map(|b| (b.name.as_str(), b.rows, b.cols))
        .collect();
    let declared: Vec<(&str, usize, usize)> = header
        .layout
        .iter()
        .map(|b| (b.name.as_str(), b.rows, b.cols))
        .collect();
    if header.n_params != layout.total || expected != declared {
        return Err(Error::MalformedHeader(
            "parameter layout does not match architecture".into(),
        ));
    }
    let values = read_f32_payload(&mut reader, header.n_params)?;
    Ok(Params {
        arch: header.arch,
        values,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
