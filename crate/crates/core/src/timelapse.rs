//! The spatiotemporal spectral log and the analyses run over it: compression
//! onsets and wave velocity, the first-minus-last stable-rank gradient and its
//! sign reversal, and per-layer α profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fits::{self, FitError, LineFit};
use crate::format::sig9;
use crate::spectra::{self, SpectralRecord};
use crate::tensor_io::{CheckpointSeries, FusedSlot, MatrixType, ParamCoord};

#[derive(Debug, Error)]
pub enum TimelapseError {
    #[error("duplicate record for step {step} {coord}")]
    DuplicateRecord { step: u64, coord: ParamCoord },
    #[error("record layer {layer} is outside the log's {layer_count} layers")]
    LayerOutOfRange { layer: usize, layer_count: usize },
    #[error("step {0} is not in the log")]
    MissingStep(u64),
    #[error("profile for {matrix_type} at step {step} is missing layers {missing:?}")]
    SparseProfile {
        step: u64,
        matrix_type: MatrixType,
        missing: Vec<usize>,
    },
    #[error("only {0} layers have a compression onset; need at least 3")]
    TooFewOnsets(usize),
    #[error("profile is empty or holds non-finite values")]
    InvalidProfile,
    #[error("checkpoint series has no steps")]
    EmptySeries,
    #[error("malformed spectral log CSV: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fit(#[from] FitError),
}

pub type Result<T, E = TimelapseError> = std::result::Result<T, E>;

pub const CSV_HEADER: [&str; 12] = [
    "step",
    "layer",
    "matrix_type",
    "fused_slot",
    "rows",
    "cols",
    "stable_rank",
    "alpha",
    "alpha_r2",
    "entropy",
    "spectral_gap",
    "frob_norm",
];

type RecordKey = (u64, usize, MatrixType, Option<FusedSlot>);

fn key_of(r: &SpectralRecord) -> RecordKey {
    (
        r.step,
        r.coord.layer,
        r.coord.matrix_type,
        r.coord.fused_slot,
    )
}

/// Records for one run, at most one per `(step, layer, type, fused slot)`,
/// kept ordered by that key.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLog {
    run_id: String,
    layer_count: usize,
    records: BTreeMap<RecordKey, SpectralRecord>,
}

impl SpectralLog {
    pub fn new(run_id: impl Into<String>, layer_count: usize) -> Self {
        Self {
            run_id: run_id.into(),
            layer_count,
            records: BTreeMap::new(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, record: SpectralRecord) -> Result<()> {
        if record.coord.layer >= self.layer_count {
            return Err(TimelapseError::LayerOutOfRange {
                layer: record.coord.layer,
                layer_count: self.layer_count,
            });
        }
        let key = key_of(&record);
        if self.records.contains_key(&key) {
            return Err(TimelapseError::DuplicateRecord {
                step: record.step,
                coord: record.coord,
            });
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = &SpectralRecord> {
        self.records.values()
    }

    pub fn records_at(&self, step: u64) -> impl Iterator<Item = &SpectralRecord> {
        self.records
            .range((step, 0, MatrixType::Q, None)..)
            .take_while(move |(k, _)| k.0 == step)
            .map(|(_, r)| r)
    }

    /// Distinct steps, ascending.
    pub fn steps(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.records.keys().map(|k| k.0).collect();
        set.into_iter().collect()
    }

    /// Effective matrix types present anywhere in the log.
    pub fn matrix_types(&self) -> BTreeSet<MatrixType> {
        self.records
            .values()
            .map(|r| r.coord.effective_type())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        for r in self.records.values() {
            w.write_record([
                r.step.to_string(),
                r.coord.layer.to_string(),
                r.coord.matrix_type.as_str().to_string(),
                r.coord
                    .fused_slot
                    .map(|s| s.as_str().to_string())
                    .unwrap_or_default(),
                r.rows.to_string(),
                r.cols.to_string(),
                sig9(r.stable_rank),
                opt(r.alpha),
                opt(r.alpha_r2),
                opt(r.entropy),
                opt(r.spectral_gap),
                sig9(r.frob_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the canonical CSV. `layer_count` defaults to one past the
    /// largest layer index present.
    pub fn read_csv<R: Read>(
        input: R,
        run_id: impl Into<String>,
        layer_count: Option<usize>,
    ) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(TimelapseError::MalformedCsv(format!(
                "unexpected header {header:?}"
            )));
        }
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let bad = |what: &str| {
                TimelapseError::MalformedCsv(format!("data row {}: bad {what}", line + 1))
            };
            let num = |i: usize, what: &str| -> Result<f64> {
                row[i].parse::<f64>().map_err(|_| bad(what))
            };
            let opt = |i: usize, what: &str| -> Result<Option<f64>> {
                if row[i].is_empty() {
                    Ok(None)
                } else {
                    num(i, what).map(Some)
                }
            };
            let matrix_type: MatrixType = row[2].parse().map_err(|_| bad("matrix_type"))?;
            let fused_slot = if row[3].is_empty() {
                None
            } else {
                Some(row[3].parse::<FusedSlot>().map_err(|_| bad("fused_slot"))?)
            };
            records.push(SpectralRecord {
                step: row[0].parse().map_err(|_| bad("step"))?,
                coord: ParamCoord {
                    layer: row[1].parse().map_err(|_| bad("layer"))?,
                    matrix_type,
                    fused_slot,
                },
                rows: row[4].parse().map_err(|_| bad("rows"))?,
                cols: row[5].parse().map_err(|_| bad("cols"))?,
                stable_rank: num(6, "stable_rank")?,
                alpha: opt(7, "alpha")?,
                alpha_r2: opt(8, "alpha_r2")?,
                entropy: opt(9, "entropy")?,
                spectral_gap: opt(10, "spectral_gap")?,
                frob_norm: num(11, "frob_norm")?,
                issues: Vec::new(),
            });
        }
        let layer_count = layer_count
            .unwrap_or_else(|| records.iter().map(|r| r.coord.layer + 1).max().unwrap_or(0));
        let mut log = SpectralLog::new(run_id, layer_count);
        for r in records {
            log.insert(r)?;
        }
        Ok(log)
    }
}

/// Run metadata written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSidecar {
    pub run_id: String,
    pub layer_count: usize,
    pub steps: Vec<u64>,
    pub records: usize,
    pub tail_fraction: f64,
    /// `"split"`: fused QKV projections were analyzed as separate Q/K/V blocks.
    pub fused_mode: String,
    pub matrix_types: Vec<MatrixType>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// How a layer's stable rank is summarized across matrix types.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SrAggregate {
    /// Mean over every tracked type present for the layer.
    #[default]
    MeanOverTypes,
    Single(MatrixType),
}

/// Per-layer stable rank at each step; steps lacking any layer are dropped.
pub fn layer_sr_table(log: &SpectralLog, aggregate: &SrAggregate) -> BTreeMap<u64, Vec<f64>> {
    let mut table = BTreeMap::new();
    for step in log.steps() {
        let mut sums = vec![(0.0, 0usize); log.layer_count()];
        for r in log.records_at(step) {
            let t = r.coord.effective_type();
            let keep = match aggregate {
                SrAggregate::MeanOverTypes => MatrixType::TRACKED.contains(&t),
                SrAggregate::Single(only) => t == *only,
            };
            if keep {
                sums[r.coord.layer].0 += r.stable_rank;
                sums[r.coord.layer].1 += 1;
            }
        }
        if sums.iter().all(|&(_, n)| n > 0) {
            table.insert(step, sums.iter().map(|&(s, n)| s / n as f64).collect());
        }
    }
    table
}

/// First step whose value falls strictly below `threshold_ratio` times the
/// value at the earliest step.
pub fn onset_step(series: &[(u64, f64)], threshold_ratio: f64) -> Option<u64> {
    let &(_, baseline) = series.first()?;
    let cutoff = threshold_ratio * baseline;
    series.iter().find(|&&(_, v)| v < cutoff).map(|&(s, _)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetTable {
    pub onsets: BTreeMap<usize, Option<u64>>,
    pub threshold_ratio: f64,
}

pub fn compression_onsets(
    log: &SpectralLog,
    aggregate: &SrAggregate,
    threshold_ratio: f64,
) -> OnsetTable {
    let table = layer_sr_table(log, aggregate);
    let onsets = (0..log.layer_count())
        .map(|layer| {
            let series: Vec<(u64, f64)> = table.iter().map(|(&s, v)| (s, v[layer])).collect();
            (layer, onset_step(&series, threshold_ratio))
        })
        .collect();
    OnsetTable {
        onsets,
        threshold_ratio,
    }
}

/// OLS of onset step on layer index; the slope is steps per layer.
pub fn wave_velocity(onsets: &OnsetTable) -> Result<LineFit> {
    let (layers, steps): (Vec<f64>, Vec<f64>) = onsets
        .onsets
        .iter()
        .filter_map(|(&l, s)| s.map(|s| (l as f64, s as f64)))
        .unzip();
    if layers.len() < 3 {
        return Err(TimelapseError::TooFewOnsets(layers.len()));
    }
    Ok(fits::ols(&layers, &steps)?)
}

/// `SR(first layer) - SR(last layer)` at every step with full layer coverage.
pub fn sr_gradient_series(log: &SpectralLog, aggregate: &SrAggregate) -> Vec<(u64, f64)> {
    layer_sr_table(log, aggregate)
        .into_iter()
        .map(|(step, sr)| (step, sr[0] - sr[sr.len() - 1]))
        .collect()
}

/// First adjacent pair going from `<= 0` to `> 0`.
pub fn detect_reversal(series: &[(u64, f64)]) -> Option<(u64, u64)> {
    series
        .windows(2)
        .find(|w| w[0].1 <= 0.0 && w[1].1 > 0.0)
        .map(|w| (w[0].0, w[1].0))
}

/// Per-layer α for one matrix type at one step, indexed by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaProfile {
    pub step: u64,
    pub matrix_type: MatrixType,
    pub alphas: Vec<f64>,
}

impl AlphaProfile {
    pub fn new(step: u64, matrix_type: MatrixType, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
            return Err(TimelapseError::InvalidProfile);
        }
        Ok(Self {
            step,
            matrix_type,
            alphas,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.alphas.len()
    }
}

pub fn alpha_profile(
    log: &SpectralLog,
    step: u64,
    matrix_type: MatrixType,
) -> Result<AlphaProfile> {
    let mut alphas: Vec<Option<f64>> = vec![None; log.layer_count()];
    let mut seen = false;
    for r in log.records_at(step) {
        seen = true;
        if r.coord.effective_type() == matrix_type {
            alphas[r.coord.layer] = r.alpha;
        }
    }
    if !seen {
        return Err(TimelapseError::MissingStep(step));
    }
    let missing: Vec<usize> = alphas
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(l, _)| l)
        .collect();
    if !missing.is_empty() || alphas.is_empty() {
        return Err(TimelapseError::SparseProfile {
            step,
            matrix_type,
            missing,
        });
    }
    AlphaProfile::new(step, matrix_type, alphas.into_iter().flatten().collect())
}

/// `max α - min α` over layers.
pub fn alpha_spread(p: &AlphaProfile) -> f64 {
    let max = p.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.alphas.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Layer with the largest α (lowest index on ties) and its depth `l / L`.
pub fn peak_position(p: &AlphaProfile) -> (usize, f64) {
    let mut best = 0;
    for (l, &a) in p.alphas.iter().enumerate() {
        if a > p.alphas[best] {
            best = l;
        }
    }
    (best, best as f64 / p.alphas.len() as f64)
}

/// Sum of Frobenius norms over tracked matrices, per layer, at one step.
pub fn layer_frob_norms(log: &SpectralLog, step: u64) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; log.layer_count()];
    let mut seen = false;
    for r in log.records_at(step) {
        seen = true;
        if MatrixType::TRACKED.contains(&r.coord.effective_type()) {
            sums[r.coord.layer] += r.frob_norm;
        }
    }
    if !seen {
        return Err(TimelapseError::MissingStep(step));
    }
    Ok(sums)
}

/// Full singular-value spectra keyed like log records, written long-form as
/// `step,layer,matrix_type,fused_slot,index,sigma` with 1-based `index`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SigmaTable {
    rows: BTreeMap<RecordKey, Vec<f64>>,
}

pub const SIGMA_CSV_HEADER: [&str; 6] = [
    "step",
    "layer",
    "matrix_type",
    "fused_slot",
    "index",
    "sigma",
];

impl SigmaTable {
    pub fn insert(&mut self, step: u64, coord: ParamCoord, sigma: Vec<f64>) {
        self.rows.insert(
            (step, coord.layer, coord.matrix_type, coord.fused_slot),
            sigma,
        );
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, step: u64, coord: &ParamCoord) -> Option<&[f64]> {
        self.rows
            .get(&(step, coord.layer, coord.matrix_type, coord.fused_slot))
            .map(Vec::as_slice)
    }

    /// Spectrum at the latest step holding `coord`.
    pub fn latest(&self, coord: &ParamCoord) -> Option<(u64, &[f64])> {
        self.rows
            .iter()
            .rev()
            .find(|(k, _)| {
                k.1 == coord.layer && k.2 == coord.matrix_type && k.3 == coord.fused_slot
            })
            .map(|(k, v)| (k.0, v.as_slice()))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SIGMA_CSV_HEADER)?;
        for (&(step, layer, t, slot), sigma) in &self.rows {
            for (i, s) in sigma.iter().enumerate() {
                w.write_record([
                    step.to_string(),
                    layer.to_string(),
                    t.as_str().to_string(),
                    slot.map(|s| s.as_str().to_string()).unwrap_or_default(),
                    (i + 1).to_string(),
                    sig9(*s),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != SIGMA_CSV_HEADER {
            return Err(TimelapseError::MalformedCsv(format!(
                "unexpected spectra header {header:?}"
            )));
        }
        let mut table = SigmaTable::default();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let bad = |what: &str| {
                TimelapseError::MalformedCsv(format!("spectra row {}: bad {what}", line + 1))
            };
            let step: u64 = row[0].parse().map_err(|_| bad("step"))?;
            let layer: usize = row[1].parse().map_err(|_| bad("layer"))?;
            let t: MatrixType = row[2].parse().map_err(|_| bad("matrix_type"))?;
            let slot = if row[3].is_empty() {
                None
            } else {
                Some(row[3].parse::<FusedSlot>().map_err(|_| bad("fused_slot"))?)
            };
            let index: usize = row[4].parse().map_err(|_| bad("index"))?;
            let sigma: f64 = row[5].parse().map_err(|_| bad("sigma"))?;
            let entry = table.rows.entry((step, layer, t, slot)).or_default();
            if index != entry.len() + 1 {
                return Err(bad("index order"));
            }
            entry.push(sigma);
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFailure {
    pub step: u64,
    pub coord: ParamCoord,
    pub source: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    pub warnings: Vec<String>,
    pub excluded_steps: Vec<u64>,
    pub failures: Vec<MatrixFailure>,
    pub analyzed: usize,
    /// Filled when spectra retention was requested.
    pub spectra: Option<SigmaTable>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub tail_fraction: f64,
    pub keep_spectra: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            tail_fraction: spectra::DEFAULT_TAIL_FRACTION,
            keep_spectra: false,
        }
    }
}

/// Analyzes every matrix of the requested types across a checkpoint series.
///
/// A step that lacks some layer for a requested type (present elsewhere in
/// the run) is excluded with a warning. Matrices are analyzed in parallel;
/// records are merged in `(step, layer, type)` order.
pub fn build_log(
    series: &CheckpointSeries,
    types: &BTreeSet<MatrixType>,
    options: BuildOptions,
) -> Result<(SpectralLog, BuildReport)> {
    if series.is_empty() {
        return Err(TimelapseError::EmptySeries);
    }
    let layers = series.manifest.layers;
    let mut report = BuildReport {
        warnings: series.warnings.clone(),
        spectra: options.keep_spectra.then(SigmaTable::default),
        ..Default::default()
    };
    let wanted = |c: &ParamCoord| types.contains(&c.effective_type());
    let present_types: BTreeSet<MatrixType> = series
        .entries
        .values()
        .flatten()
        .map(|(c, _)| c.effective_type())
        .filter(|t| types.contains(t))
        .collect();

    let mut log = SpectralLog::new(series.manifest.run_id.clone(), layers);
    for &step in &series.steps {
        let entries: Vec<&(ParamCoord, _)> = series.entries[&step]
            .iter()
            .filter(|(c, _)| wanted(c))
            .collect();
        let mut gaps = Vec::new();
        for &t in &present_types {
            let have: BTreeSet<usize> = entries
                .iter()
                .filter(|(c, _)| c.effective_type() == t)
                .map(|(c, _)| c.layer)
                .collect();
            gaps.extend(
                (0..layers)
                    .filter(|l| !have.contains(l))
                    .map(|l| format!("L{l}.{t}")),
            );
        }
        if !gaps.is_empty() {
            report.warnings.push(format!(
                "step {step}: excluded, missing {}",
                gaps.join(", ")
            ));
            report.excluded_steps.push(step);
            continue;
        }

        let results: Vec<_> = entries
            .par_iter()
            .map(|(coord, locator)| {
                let outcome = locator
                    .load(&series.manifest)
                    .map_err(|e| e.to_string())
                    .and_then(|t| {
                        let s = spectra::singular_values(&t).map_err(|e| e.to_string())?;
                        let record = spectra::analyze_spectrum(
                            &s,
                            t.rows(),
                            t.cols(),
                            step,
                            *coord,
                            options.tail_fraction,
                        );
                        Ok((record, options.keep_spectra.then(|| s.sigma().to_vec())))
                    });
                (*coord, locator.param_name.clone(), outcome)
            })
            .collect();
        for (coord, source, outcome) in results {
            match outcome {
                Ok((record, sigma)) => {
                    log.insert(record)?;
                    if let (Some(table), Some(sigma)) = (report.spectra.as_mut(), sigma) {
                        table.insert(step, coord, sigma);
                    }
                    report.analyzed += 1;
                }
                Err(error) => report.failures.push(MatrixFailure {
                    step,
                    coord,
                    source,
                    error,
                }),
            }
        }
    }
    Ok((log, report))
}
