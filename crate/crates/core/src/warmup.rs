//! Spectral warmup: matrices with prescribed singular values and random
//! orthogonal singular directions, `W = U[:, :k] · diag(s·σ*) · V[:, :k]ᵀ`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fits::splitmix64;
use crate::tensor_io::{MatrixType, ParamCoord, TensorIoError, TensorView};
use crate::timelapse::{SigmaTable, SpectralLog};

#[derive(Debug, Error)]
pub enum WarmupError {
    #[error("invalid warmup spec: {0}")]
    InvalidSpec(String),
    #[error("no reference spectrum for {0}")]
    MissingReference(ParamCoord),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
}

pub type Result<T, E = WarmupError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSpec {
    pub rows: usize,
    pub cols: usize,
    /// Descending, nonnegative, `min(rows, cols)` long.
    pub target_sigma: Vec<f64>,
    pub scale: f64,
    pub seed: u64,
}

impl WarmupSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WarmupError::InvalidSpec(m));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!(
                "shape {}x{} must be positive",
                self.rows, self.cols
            ));
        }
        let k = self.rows.min(self.cols);
        if self.target_sigma.len() != k {
            return bad(format!(
                "{} singular values for min(rows, cols) = {k}",
                self.target_sigma.len()
            ));
        }
        if self.target_sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("singular values must be finite and nonnegative".into());
        }
        if self.target_sigma.windows(2).any(|w| w[1] > w[0]) {
            return bad("singular values must be descending".into());
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        Ok(())
    }
}

/// Leading `k` columns of a Haar orthogonal `n x n` factor: QR of a
/// column-major standard-Gaussian draw, each column flipped by the sign of
/// its R diagonal. Column `j` depends only on the first `j+1` Gaussian
/// columns, so these are exactly the leading columns of the full factor.
fn haar_columns(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = gaussian(n, k, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn gaussian(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng))
}

fn to_view(name: &str, m: &DMatrix<f64>) -> Result<TensorView> {
    let (rows, cols) = m.shape();
    let values = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .collect();
    Ok(TensorView::new(name, rows, cols, values, "")?)
}

pub fn random_orthogonal(n: usize, seed: u64) -> Result<TensorView> {
    if n == 0 {
        return Err(WarmupError::InvalidSpec(
            "orthogonal size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    to_view("orthogonal", &haar_columns(n, n, &mut rng))
}

/// The `U` and `V` factors come from two independent streams derived from
/// the spec seed.
pub fn spectral_warmup_matrix(spec: &WarmupSpec) -> Result<TensorView> {
    spec.validate()?;
    let k = spec.rows.min(spec.cols);
    let mut rng_u = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed));
    let mut rng_v = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x5555_5555_5555_5555));
    let mut u = haar_columns(spec.rows, k, &mut rng_u);
    let v = haar_columns(spec.cols, k, &mut rng_v);
    for (j, s) in spec.target_sigma.iter().enumerate() {
        u.column_mut(j).scale_mut(spec.scale * s);
    }
    to_view("warmup", &(u * v.transpose()))
}

/// Per-matrix seed from a run seed and the matrix coordinate.
pub fn derive_seed(seed: u64, coord: &ParamCoord) -> u64 {
    let t = coord.effective_type() as u64;
    splitmix64(splitmix64(seed ^ splitmix64(coord.layer as u64)) ^ t)
}

/// `σ_i ∝ i^(-α)` for `i = 1..=k`, scaled to Frobenius norm `frob`.
pub fn power_law_sigma(k: usize, alpha: f64, frob: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=k).map(|i| (i as f64).powf(-alpha)).collect();
    let norm = raw.iter().map(|s| s * s).sum::<f64>().sqrt();
    raw.iter().map(|s| s * frob / norm).collect()
}

/// Where a target spectrum came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    /// Full spectrum recorded at the reference step.
    Recorded,
    /// Power law rebuilt from the record's α and Frobenius norm.
    PowerLaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupTarget {
    pub coord: ParamCoord,
    pub step: u64,
    pub rows: usize,
    pub cols: usize,
    pub sigma: Vec<f64>,
    pub source: SigmaSource,
}

/// Targets for every `(layer, type)` in the log, taken at the latest step
/// where that matrix appears. A recorded spectrum is preferred; otherwise
/// the spectrum is rebuilt from α and the Frobenius norm.
pub fn reference_targets(
    log: &SpectralLog,
    spectra: Option<&SigmaTable>,
    types: &[MatrixType],
) -> Result<Vec<WarmupTarget>> {
    let mut latest: std::collections::BTreeMap<ParamCoord, &crate::spectra::SpectralRecord> =
        Default::default();
    for r in log.records() {
        if types.contains(&r.coord.effective_type()) {
            latest.insert(r.coord, r);
        }
    }
    let mut out = Vec::new();
    for (coord, r) in latest {
        let k = r.rows.min(r.cols);
        let recorded = spectra
            .and_then(|t| t.get(r.step, &coord))
            .filter(|s| s.len() == k)
            .map(<[f64]>::to_vec);
        let (sigma, source) = match recorded {
            Some(s) => (s, SigmaSource::Recorded),
            None => {
                let alpha = r.alpha.ok_or(WarmupError::MissingReference(coord))?;
                (
                    power_law_sigma(k, alpha, r.frob_norm),
                    SigmaSource::PowerLaw,
                )
            }
        };
        out.push(WarmupTarget {
            coord,
            step: r.step,
            rows: r.rows,
            cols: r.cols,
            sigma,
            source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{self, singular_values};
    use proptest::prelude::*;

    fn spec(rows: usize, cols: usize, sigma: Vec<f64>, scale: f64, seed: u64) -> WarmupSpec {
        WarmupSpec {
            rows,
            cols,
            target_sigma: sigma,
            scale,
            seed,
        }
    }

    fn orth_residual(q: &TensorView) -> f64 {
        let n = q.cols();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..q.rows()).map(|r| q.get(r, i) * q.get(r, j)).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    #[test]
    fn one_by_one_is_a_sign() {
        for seed in 0..8 {
            let q = random_orthogonal(1, seed).unwrap();
            assert_eq!(q.get(0, 0).abs(), 1.0);
        }
    }

    #[test]
    fn orthogonality() {
        for seed in 0..20 {
            assert!(orth_residual(&random_orthogonal(5, seed).unwrap()) < 1e-10);
        }
    }

    /// Householder QR with the textbook reflector sign, `R_jj = -sign(x_1)·|x|`,
    /// which leaves Q biased unless columns are re-signed.
    fn textbook_qr(g: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = g.nrows();
        let mut r = g.clone();
        let mut q = DMatrix::<f64>::identity(n, n);
        for j in 0..n.min(g.ncols()) {
            let x: Vec<f64> = (j..n).map(|i| r[(i, j)]).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            let mut v = x.clone();
            v[0] -= alpha;
            let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if vn == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= vn);
            for c in 0..r.ncols() {
                let d: f64 = (j..n).map(|i| v[i - j] * r[(i, c)]).sum();
                (j..n).for_each(|i| r[(i, c)] -= 2.0 * v[i - j] * d);
            }
            for row in 0..n {
                let d: f64 = (j..n).map(|i| q[(row, i)] * v[i - j]).sum();
                (j..n).for_each(|i| q[(row, i)] -= 2.0 * d * v[i - j]);
            }
        }
        (q, r)
    }

    fn entry_means(draw: impl Fn(&mut ChaCha8Rng) -> DMatrix<f64>) -> Vec<f64> {
        let draws = 10_000;
        let mut sums = [0.0; 16];
        for seed in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (s, v) in sums.iter_mut().zip(draw(&mut rng).iter()) {
                *s += v;
            }
        }
        sums.iter().map(|s| s / draws as f64).collect()
    }

    #[test]
    fn haar_symmetry_needs_sign_correction() {
        assert!(entry_means(|rng| haar_columns(4, 4, rng))
            .iter()
            .all(|m| m.abs() < 0.02));
        let raw = entry_means(|rng| textbook_qr(&gaussian(4, 4, rng)).0);
        assert!(raw.iter().any(|m| m.abs() > 0.1), "{raw:?}");
    }

    #[test]
    fn sign_corrected_factor_matches_textbook_qr() {
        for seed in 0..50 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let ours = haar_columns(5, 5, &mut a);
            let (mut q, r) = textbook_qr(&gaussian(5, 5, &mut b));
            for j in 0..5 {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            assert!((ours - q).abs().max() < 1e-12);
        }
    }

    #[test]
    fn prescribed_spectrum_examples() {
        let w = spectral_warmup_matrix(&spec(3, 3, vec![3.0, 2.0, 1.0], 1.0, 4)).unwrap();
        let s = singular_values(&w).unwrap();
        for (a, b) in s.sigma().iter().zip([3.0, 2.0, 1.0]) {
            assert!((a - b).abs() <= 1e-8 * b);
        }
        let w = spectral_warmup_matrix(&spec(3, 3, vec![3.0, 2.0, 1.0], 0.5, 4)).unwrap();
        let s = singular_values(&w).unwrap();
        for (a, b) in s.sigma().iter().zip([1.5, 1.0, 0.5]) {
            assert!((a - b).abs() <= 1e-8 * b);
        }
    }

    #[test]
    fn leading_columns_match_full_factor() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let thin = haar_columns(6, 2, &mut a);
        let full = haar_columns(6, 6, &mut b);
        for r in 0..6 {
            for c in 0..2 {
                assert!((thin[(r, c)] - full[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(spectral_warmup_matrix(&spec(2, 3, vec![1.0, 2.0], 1.0, 0)).is_err());
        assert!(spectral_warmup_matrix(&spec(2, 3, vec![1.0], 1.0, 0)).is_err());
        assert!(spectral_warmup_matrix(&spec(2, 3, vec![2.0, 1.0], 0.0, 0)).is_err());
        assert!(spectral_warmup_matrix(&spec(0, 3, vec![], 1.0, 0)).is_err());
        assert!(random_orthogonal(0, 0).is_err());
    }

    #[test]
    fn power_law_helper() {
        let s = power_law_sigma(50, 0.5, 3.0);
        assert!((s.iter().map(|x| x * x).sum::<f64>().sqrt() - 3.0).abs() < 1e-12);
        let f = spectra::fit_alpha(&spectra::SpectrumVec::new(s).unwrap(), 0.2).unwrap();
        assert!((f.alpha - 0.5).abs() < 1e-12);
    }

    #[test]
    fn seeds_differ_by_coordinate() {
        let a = derive_seed(1, &ParamCoord::new(0, MatrixType::Q));
        let b = derive_seed(1, &ParamCoord::new(0, MatrixType::K));
        let c = derive_seed(1, &ParamCoord::new(1, MatrixType::Q));
        assert!(a != b && a != c && b != c);
    }

    fn shape_strategy() -> impl Strategy<Value = (usize, usize)> {
        prop_oneof![
            (1usize..24).prop_map(|n| (n, n)),
            (1usize..16, 1usize..16).prop_map(|(m, d)| (m, m + d)),
            (1usize..16, 1usize..16).prop_map(|(n, d)| (n + d, n)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_transfer_from_target(
            (rows, cols) in shape_strategy(),
            raw in prop::collection::vec(0.05f64..5.0, 24),
            scale in 0.1f64..3.0,
            seed in any::<u64>(),
        ) {
            let k = rows.min(cols);
            let mut sigma = raw[..k].to_vec();
            sigma.sort_by(|a, b| b.total_cmp(a));
            let sp = spec(rows, cols, sigma.clone(), scale, seed);
            let w = spectral_warmup_matrix(&sp).unwrap();
            prop_assert_eq!(w.shape(), (rows, cols));
            prop_assert_eq!(&w, &spectral_warmup_matrix(&sp).unwrap());
            let got = singular_values(&w).unwrap();
            let want = spectra::SpectrumVec::new(sigma.iter().map(|s| s * scale).collect()).unwrap();
            for (a, b) in got.sigma().iter().zip(want.sigma()) {
                prop_assert!((a - b).abs() <= 1e-8 * b);
            }
            let sr = |s| spectra::stable_rank(s).unwrap();
            prop_assert!((sr(&got) - sr(&want)).abs() <= 1e-8 * sr(&want));
            if k > 1 {
                let h = |s| spectra::spectral_entropy(s).unwrap();
                prop_assert!((h(&got) - h(&want)).abs() <= 1e-8);
            }
        }
    }
}
