//! Loading weight matrices from checkpoint files.
//!
//! Two containers are understood: NumPy `.npy` (format 1.0) and safetensors.
//! Parameter names are mapped onto `(layer, matrix type)` coordinates through
//! a [`NamingScheme`], and fused attention projections can be split into
//! their Q/K/V blocks.

mod naming;
mod npy;
mod safetensors;
mod series;
mod split;

use std::path::PathBuf;

use thiserror::Error;

pub use naming::{
    canonical_name, map_parameter_name, FusedSlot, MatrixType, NamingScheme, ParamCoord,
};
pub use npy::{load_npy, parse_npy, write_npy, NpyDtype};
pub use safetensors::{load_safetensors, parse_safetensors, SafetensorsContents, SkippedTensor};
pub use series::{CheckpointSeries, Manifest, TensorLocator, TensorSource};
pub use split::split_fused_qkv;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("expected a 2-D array, found shape {0:?}")]
    UnsupportedRank(Vec<usize>),
    #[error("malformed npy header: {0}")]
    MalformedHeader(String),
    #[error("non-finite value at flat index {index} in {name}")]
    NonFiniteValue { name: String, index: usize },
    #[error("malformed safetensors container: {0}")]
    MalformedContainer(String),
    #[error("tensor {name} data range {start}..{end} exceeds payload length {len}")]
    OffsetOutOfBounds {
        name: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("tensors {first} and {second} have overlapping data ranges")]
    OverlappingRanges { first: String, second: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

pub type Result<T, E = TensorIoError> = std::result::Result<T, E>;

/// A named, row-major 2-D matrix widened to `f64`.
///
/// Construction goes through [`TensorView::new`], which enforces the shape
/// and finiteness invariants; a view is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorView {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    source_path: String,
}

impl TensorView {
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        if rows == 0 || cols == 0 {
            return Err(TensorIoError::DimensionMismatch(format!(
                "{name}: zero-sized dimension {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(TensorIoError::DimensionMismatch(format!(
                "{name}: {} values for shape {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorIoError::NonFiniteValue { name, index });
        }
        Ok(Self {
            name,
            rows,
            cols,
            values,
            source_path: source_path.into(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn transposed(&self) -> TensorView {
        let mut out = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        TensorView {
            name: self.name.clone(),
            rows: self.cols,
            cols: self.rows,
            values: out,
            source_path: self.source_path.clone(),
        }
    }

    pub(crate) fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}
