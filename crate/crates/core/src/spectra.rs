//! Singular values of a weight matrix and the spectral metrics built on them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fits::{self, FitError};
use crate::tensor_io::{ParamCoord, TensorView};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectraError {
    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    ConvergenceFailure { rows: usize, cols: usize },
    #[error("all singular values are zero")]
    ZeroMatrix,
    #[error("need at least 2 singular values, got {0}")]
    TooFewValues(usize),
    #[error("singular value {index} inside the fit window is zero")]
    ZeroInFitRange { index: usize },
    #[error("entropy is undefined for a single singular value")]
    SingleValue,
    #[error("second singular value is zero; the gap is unbounded")]
    DegenerateGap,
    #[error("tail fraction {0} outside (0, 1]")]
    InvalidTailFraction(f64),
    #[error("spectrum is not a descending nonnegative sequence")]
    InvalidSpectrum,
    #[error(transparent)]
    Fit(#[from] FitError),
}

pub type Result<T, E = SpectraError> = std::result::Result<T, E>;

pub const DEFAULT_TAIL_FRACTION: f64 = 0.2;

/// Singular values in descending order; `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumVec {
    sigma: Vec<f64>,
}

impl SpectrumVec {
    /// Builds a spectrum from caller-supplied values (sorted descending here).
    pub fn new(mut sigma: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() || sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(SpectraError::InvalidSpectrum);
        }
        sigma.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn leading(&self) -> f64 {
        self.sigma[0]
    }

    pub fn sum_squares(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }
}

/// Values-only SVD, accumulated in `f64`.
pub fn singular_values(t: &TensorView) -> Result<SpectrumVec> {
    let (rows, cols) = t.shape();
    let m = DMatrix::from_row_slice(rows, cols, t.values());
    let k = rows.min(cols);
    let max_iter = 1000 + 100 * k;
    let svd = m
        .try_svd(false, false, f64::EPSILON, max_iter)
        .ok_or(SpectraError::ConvergenceFailure { rows, cols })?;
    let mut sigma: Vec<f64> = svd.singular_values.iter().map(|s| s.abs()).collect();
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(SpectraError::ConvergenceFailure { rows, cols });
    }
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(SpectrumVec { sigma })
}

/// `Σσ² / σ₁²`, in `[1, k]`.
pub fn stable_rank(s: &SpectrumVec) -> Result<f64> {
    let top = s.leading();
    if top == 0.0 {
        return Err(SpectraError::ZeroMatrix);
    }
    Ok(s.sigma.iter().map(|v| (v / top) * (v / top)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha: f64,
    /// Intercept of the fit in natural-log units.
    pub intercept_c: f64,
    pub fit_r2: f64,
    pub n_points: usize,
    pub tail_fraction: f64,
    /// Set when `floor(tail_fraction * k) < 2` and the two-point fallback was used.
    pub low_confidence: bool,
}

/// Number of leading singular values used by the α fit.
pub fn alpha_window(k: usize, tail_fraction: f64) -> (usize, bool) {
    // guard against 0.2 * 15 = 2.9999999999999996 style floors
    let raw = (tail_fraction * k as f64 + 1e-9).floor() as usize;
    if raw < 2 {
        (2, true)
    } else {
        (raw.min(k), false)
    }
}

/// Power-law exponent of the top of the spectrum: OLS of `ln σᵢ` on `ln i`
/// over `i = 1..=n`, with `α` the negated slope.
pub fn fit_alpha(s: &SpectrumVec, tail_fraction: f64) -> Result<AlphaFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(SpectraError::InvalidTailFraction(tail_fraction));
    }
    let k = s.k();
    if k < 2 {
        return Err(SpectraError::TooFewValues(k));
    }
    let (n, low_confidence) = alpha_window(k, tail_fraction);
    if let Some(index) = s.sigma[..n].iter().position(|&v| v <= 0.0) {
        return Err(SpectraError::ZeroInFitRange { index: index + 1 });
    }
    let x: Vec<f64> = (1..=n).map(|i| (i as f64).ln()).collect();
    let y: Vec<f64> = s.sigma[..n].iter().map(|v| v.ln()).collect();
    let line = fits::ols(&x, &y)?;
    Ok(AlphaFit {
        alpha: -line.slope,
        intercept_c: line.intercept,
        fit_r2: line.r2,
        n_points: n,
        tail_fraction,
        low_confidence,
    })
}

/// Shannon entropy of `pᵢ = σᵢ² / Σσ²` in bits, normalized by `log₂ k`.
pub fn spectral_entropy(s: &SpectrumVec) -> Result<f64> {
    let k = s.k();
    if s.leading() == 0.0 {
        return Err(SpectraError::ZeroMatrix);
    }
    if k < 2 {
        return Err(SpectraError::SingleValue);
    }
    let top = s.leading();
    let scaled: Vec<f64> = s.sigma.iter().map(|v| (v / top) * (v / top)).collect();
    let total: f64 = scaled.iter().sum();
    let h: f64 = scaled
        .iter()
        .map(|&w| w / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum();
    Ok((h / (k as f64).log2()).clamp(0.0, 1.0))
}

/// `σ₁ / σ₂`.
pub fn spectral_gap(s: &SpectrumVec) -> Result<f64> {
    if s.k() < 2 {
        return Err(SpectraError::TooFewValues(s.k()));
    }
    if s.sigma[1] == 0.0 {
        return Err(SpectraError::DegenerateGap);
    }
    Ok(s.sigma[0] / s.sigma[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricField {
    StableRank,
    Alpha,
    Entropy,
    SpectralGap,
}

/// Why a record field is absent or weaker than usual.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricIssue {
    Absent {
        field: MetricField,
        reason: SpectraError,
    },
    LowConfidenceAlpha {
        n_points: usize,
    },
}

/// One `(step, layer, matrix type)` measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralRecord {
    pub step: u64,
    pub coord: ParamCoord,
    pub rows: usize,
    pub cols: usize,
    /// 0 for an all-zero matrix.
    pub stable_rank: f64,
    pub alpha: Option<f64>,
    pub alpha_r2: Option<f64>,
    pub entropy: Option<f64>,
    pub spectral_gap: Option<f64>,
    pub frob_norm: f64,
    pub issues: Vec<MetricIssue>,
}

/// Computes every metric for one spectrum. Metric failures leave the field
/// empty and are listed in `issues`.
pub fn analyze_spectrum(
    s: &SpectrumVec,
    rows: usize,
    cols: usize,
    step: u64,
    coord: ParamCoord,
    tail_fraction: f64,
) -> SpectralRecord {
    let mut issues = Vec::new();
    let mut absent = |field, reason| issues.push(MetricIssue::Absent { field, reason });

    let stable_rank = match stable_rank(s) {
        Ok(v) => v,
        Err(e) => {
            absent(MetricField::StableRank, e);
            0.0
        }
    };
    let (alpha, alpha_r2, low) = match fit_alpha(s, tail_fraction) {
        Ok(f) => (
            Some(f.alpha),
            Some(f.fit_r2),
            f.low_confidence.then_some(f.n_points),
        ),
        Err(e) => {
            absent(MetricField::Alpha, e);
            (None, None, None)
        }
    };
    let entropy = spectral_entropy(s)
        .map_err(|e| absent(MetricField::Entropy, e))
        .ok();
    let spectral_gap = spectral_gap(s)
        .map_err(|e| absent(MetricField::SpectralGap, e))
        .ok();
    if let Some(n_points) = low {
        issues.push(MetricIssue::LowConfidenceAlpha { n_points });
    }

    SpectralRecord {
        step,
        coord,
        rows,
        cols,
        stable_rank,
        alpha,
        alpha_r2,
        entropy,
        spectral_gap,
        frob_norm: s.sum_squares().sqrt(),
        issues,
    }
}

pub fn analyze_matrix(
    t: &TensorView,
    step: u64,
    coord: ParamCoord,
    tail_fraction: f64,
) -> Result<SpectralRecord> {
    let s = singular_values(t)?;
    Ok(analyze_spectrum(
        &s,
        t.rows(),
        t.cols(),
        step,
        coord,
        tail_fraction,
    ))
}
