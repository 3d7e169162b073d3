//! Least-squares lines, log-log power laws, and Spearman rank correlation
//! with a seeded permutation test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("x and y have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("all x values are equal; the slope is undefined")]
    DegenerateX,
    #[error("power-law fit needs strictly positive inputs (got {0})")]
    NonPositiveInput(f64),
    #[error("non-finite input value {0}")]
    NonFinite(f64),
    #[error("need at least 3 models for scaling fits, got {0}")]
    TooFewModels(usize),
}

pub type Result<T, E = FitError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

impl LineFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn check_pairs(x: &[f64], y: &[f64], needed: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(FitError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < needed {
        return Err(FitError::TooFewPoints {
            needed,
            got: x.len(),
        });
    }
    if let Some(&bad) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(FitError::NonFinite(bad));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ordinary least squares of `y` on `x`.
///
/// `r2 = 1 - SSres/SStot`; a constant `y` gives slope 0 and `r2 = 1`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LineFit> {
    check_pairs(x, y, 2)?;
    let n = x.len();
    let (xmin, xmax) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if xmin == xmax {
        return Err(FitError::DegenerateX);
    }
    let (ymin, ymax) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if ymin == ymax {
        return Ok(LineFit {
            slope: 0.0,
            intercept: y[0],
            r2: 1.0,
            n,
        });
    }

    let xm = mean(x);
    let ym = mean(y);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - xm;
        let dy = yi - ym;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - (intercept + slope * xi);
            r * r
        })
        .sum();
    let r2 = (1.0 - ss_res / syy).clamp(0.0, 1.0);
    Ok(LineFit {
        slope,
        intercept,
        r2,
        n,
    })
}

/// `y = prefactor * x^exponent`, fitted by OLS on natural logs. `r2` is in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub n: usize,
}

pub fn power_fit(x: &[f64], y: &[f64]) -> Result<PowerFit> {
    check_pairs(x, y, 2)?;
    if let Some(&bad) = x.iter().chain(y).find(|&&v| v <= 0.0) {
        return Err(FitError::NonPositiveInput(bad));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let line = ols(&lx, &ly)?;
    Ok(PowerFit {
        exponent: line.slope,
        prefactor: line.intercept.exp(),
        r2: line.r2,
        n: line.n,
    })
}

/// 1-based ranks with ties replaced by the mean of the ranks they span.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean((i+1)..=j)
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation; 0 when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let am = mean(a);
    let bm = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - am) * (y - bm);
        saa += (x - am) * (x - am);
        sbb += (y - bm) * (y - bm);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorr {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub permutations: usize,
    pub seed: u64,
}

pub const DEFAULT_PERMUTATIONS: usize = 100_000;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for one permutation; makes the test's result
/// independent of how permutations are spread over threads.
fn permutation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

// |rho_perm| >= |rho| comparisons tolerate rounding in the accumulated sums
const RHO_TIE_EPS: f64 = 1e-12;

/// Spearman's rho (Pearson on mid-ranks) with a two-sided permutation p-value
/// `(count + 1) / (permutations + 1)`.
pub fn spearman(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<RankCorr> {
    check_pairs(x, y, 3)?;
    let n = x.len();
    let rx = mid_ranks(x);
    let ry = mid_ranks(y);
    let rho = pearson(&rx, &ry);

    let rxm = mean(&rx);
    let rym = mean(&ry);
    let cx: Vec<f64> = rx.iter().map(|v| v - rxm).collect();
    let cy: Vec<f64> = ry.iter().map(|v| v - rym).collect();
    let denom =
        (cx.iter().map(|v| v * v).sum::<f64>() * cy.iter().map(|v| v * v).sum::<f64>()).sqrt();

    let p_value = if denom == 0.0 {
        // a constant input: every permutation ties with rho = 0
        1.0
    } else {
        let threshold = rho.abs() - RHO_TIE_EPS;
        let hits = (0..permutations as u64)
            .into_par_iter()
            .filter(|&i| {
                let mut rng = permutation_rng(seed, i);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let s: f64 = cx.iter().zip(&perm).map(|(a, &j)| a * cy[j]).sum();
                (s / denom).abs() >= threshold
            })
            .count();
        (hits + 1) as f64 / (permutations + 1) as f64
    };

    Ok(RankCorr {
        rho,
        p_value,
        n,
        permutations,
        seed,
    })
}

/// One trained model's summary for the scaling-law fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub layers: usize,
    pub delta_alpha: f64,
    pub alpha_max: f64,
    pub peak_ratio: f64,
    #[serde(default)]
    pub wave_velocity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveVelocitySummary {
    pub layers: Vec<usize>,
    pub velocities: Vec<f64>,
    /// Power-law fit of velocity on layer count, when at least two positive values exist.
    pub power_fit: Option<PowerFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub delta_alpha_fit: PowerFit,
    pub alpha_max_fit: PowerFit,
    pub peak_position_fit: LineFit,
    pub wave_velocity_summary: WaveVelocitySummary,
}

/// Fits `Δα ∝ L^a`, `α_max ∝ L^b` and `l*/L ≈ c·L + d` across models.
pub fn fit_scaling_laws(models: &[ModelSummary]) -> Result<ScalingReport> {
    if models.len() < 3 {
        return Err(FitError::TooFewModels(models.len()));
    }
    let depth: Vec<f64> = models.iter().map(|m| m.layers as f64).collect();
    let spread: Vec<f64> = models.iter().map(|m| m.delta_alpha).collect();
    let peak_alpha: Vec<f64> = models.iter().map(|m| m.alpha_max).collect();
    let peak_ratio: Vec<f64> = models.iter().map(|m| m.peak_ratio).collect();

    let delta_alpha_fit = power_fit(&depth, &spread)?;
    let alpha_max_fit = power_fit(&depth, &peak_alpha)?;
    let peak_position_fit = ols(&depth, &peak_ratio)?;

    let (layers, velocities): (Vec<usize>, Vec<f64>) = models
        .iter()
        .filter_map(|m| m.wave_velocity.map(|v| (m.layers, v)))
        .unzip();
    let positive: (Vec<f64>, Vec<f64>) = layers
        .iter()
        .zip(&velocities)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&l, &v)| (l as f64, v))
        .unzip();
    let power_fit = power_fit(&positive.0, &positive.1).ok();

    Ok(ScalingReport {
        delta_alpha_fit,
        alpha_max_fit,
        peak_position_fit,
        wave_velocity_summary: WaveVelocitySummary {
            layers,
            velocities,
            power_fit,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_line() {
        let f = ols(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!(f.intercept.abs() < 1e-12);
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn peak_position_line() {
        let f = ols(&[8.0, 12.0, 16.0], &[0.43, 0.36, 0.13]).unwrap();
        assert!((f.slope + 0.0375).abs() < 1e-12);
        assert!((f.intercept - 0.756_666_666_666_666_7).abs() < 1e-12);
        assert!((f.r2 - 0.913_396_481_732_070_3).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            ols(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(FitError::DegenerateX)
        );
        assert!(matches!(
            ols(&[1.0], &[1.0]),
            Err(FitError::TooFewPoints { .. })
        ));
        assert!(matches!(
            ols(&[1.0, 2.0], &[1.0]),
            Err(FitError::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            ols(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(FitError::NonFinite(_))
        ));
        let flat = ols(&[1.0, 2.0, 3.0], &[0.7, 0.7, 0.7]).unwrap();
        assert_eq!((flat.slope, flat.r2), (0.0, 1.0));
    }

    #[test]
    fn power_law_recovery() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 2.0 * v.powf(1.5)).collect();
        let f = power_fit(&x, &y).unwrap();
        assert!((f.exponent - 1.5).abs() < 1e-12);
        assert!((f.prefactor - 2.0).abs() < 1e-12);
        assert!(f.r2 > 1.0 - 1e-12);
        assert!(matches!(
            power_fit(&[1.0, 0.0], &[1.0, 1.0]),
            Err(FitError::NonPositiveInput(_))
        ));
    }

    #[test]
    fn spread_and_peak_alpha_exponents() {
        let l = [8.0, 12.0, 16.0];
        let spread = power_fit(&l, &[0.259, 0.284, 0.310]).unwrap();
        assert!((spread.exponent - 0.26).abs() < 0.01, "{spread:?}");
        assert!(spread.r2 >= 0.98);
        let peak = power_fit(&l, &[0.461, 0.516, 0.567]).unwrap();
        assert!((peak.exponent - 0.30).abs() < 0.01, "{peak:?}");
        assert!(peak.r2 >= 0.99);
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[10.0, 30.0, 20.0]), vec![1.0, 3.0, 2.0]);
        assert_eq!(
            mid_ranks(&[0.009, 0.006, 0.009, 0.010]),
            vec![2.5, 1.0, 2.5, 4.0]
        );
        assert_eq!(mid_ranks(&[5.0; 4]), vec![2.5; 4]);
    }

    #[test]
    fn perfect_monotone_correlations() {
        let up = spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0], 1000, 1).unwrap();
        assert!((up.rho - 1.0).abs() < 1e-12);
        let down = spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0], 1000, 1).unwrap();
        assert!((down.rho + 1.0).abs() < 1e-12);
        // n=3: 2 of 6 orderings reach |rho| = 1
        assert!((up.p_value - 1.0 / 3.0).abs() < 0.05);
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0, 2.0], 10, 0),
            Err(FitError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn constant_input_has_zero_rho() {
        let c = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.5; 4], 100, 3).unwrap();
        assert_eq!(c.rho, 0.0);
        assert_eq!(c.p_value, 1.0);
    }

    fn permutations_of(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations_of(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn permutation_p_matches_exact_enumeration() {
        let x = [0.3, 0.1, 0.7, 0.2, 0.9, 0.5, 0.4];
        let y = [1.0, 3.0, 6.0, 2.0, 5.0, 7.0, 4.0];
        let rx = mid_ranks(&x);
        let ry = mid_ranks(&y);
        let rho = pearson(&rx, &ry);
        let all = permutations_of(x.len());
        let hits = all
            .iter()
            .filter(|p| {
                let permuted: Vec<f64> = p.iter().map(|&j| ry[j]).collect();
                pearson(&rx, &permuted).abs() >= rho.abs() - 1e-12
            })
            .count();
        let exact = hits as f64 / all.len() as f64;
        let mc = spearman(&x, &y, 100_000, 42).unwrap();
        assert!((mc.rho - rho).abs() < 1e-15);
        assert!(
            (mc.p_value - exact).abs() < 0.005,
            "mc {} exact {}",
            mc.p_value,
            exact
        );
    }

    #[test]
    fn permutation_p_is_seed_reproducible_and_thread_independent() {
        let x: Vec<f64> = (0..10).map(|i| ((i * 37) % 11) as f64).collect();
        let y: Vec<f64> = (0..10)
            .map(|i| ((i * 5) % 13) as f64 + 0.5 * i as f64)
            .collect();
        let a = spearman(&x, &y, 20_000, 9).unwrap();
        let b = spearman(&x, &y, 20_000, 9).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let c = single.install(|| spearman(&x, &y, 20_000, 9).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn scaling_laws_plant_and_recover() {
        let models: Vec<ModelSummary> = [6usize, 10, 14, 20]
            .iter()
            .map(|&l| ModelSummary {
                layers: l,
                delta_alpha: 0.1 * (l as f64).powf(0.4),
                alpha_max: 0.2 * (l as f64).powf(0.3),
                peak_ratio: 0.8 - 0.02 * l as f64,
                wave_velocity: Some(10.0 * l as f64),
            })
            .collect();
        let report = fit_scaling_laws(&models).unwrap();
        assert!((report.delta_alpha_fit.exponent - 0.4).abs() < 1e-12);
        assert!((report.delta_alpha_fit.prefactor - 0.1).abs() < 1e-12);
        assert!((report.alpha_max_fit.exponent - 0.3).abs() < 1e-12);
        assert!((report.peak_position_fit.slope + 0.02).abs() < 1e-12);
        let v = report.wave_velocity_summary.power_fit.unwrap();
        assert!((v.exponent - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_laws_reject_degenerate_sets() {
        let m = ModelSummary {
            layers: 12,
            delta_alpha: 0.2,
            alpha_max: 0.5,
            peak_ratio: 0.3,
            wave_velocity: None,
        };
        assert_eq!(fit_scaling_laws(&[m, m]), Err(FitError::TooFewModels(2)));
        assert_eq!(fit_scaling_laws(&[m, m, m]), Err(FitError::DegenerateX));
    }

    proptest! {
        #[test]
        fn ols_residuals_are_orthogonal(points in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)) {
            let (x, y): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
            prop_assume!(x.iter().any(|&v| (v - x[0]).abs() > 1e-3));
            let f = ols(&x, &y).unwrap();
            let res: Vec<f64> = x.iter().zip(&y).map(|(&a, &b)| b - f.predict(a)).collect();
            let scale_r = y.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            let scale_rx = x.iter().zip(&y).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1.0);
            prop_assert!(res.iter().sum::<f64>().abs() <= 1e-9 * scale_r);
            prop_assert!(res.iter().zip(&x).map(|(r, a)| r * a).sum::<f64>().abs() <= 1e-9 * scale_rx);
        }

        #[test]
        fn power_fit_exponent_ignores_rescaling(c in 0.01f64..100.0, d in 0.01f64..100.0,
                                                ys in prop::collection::vec(0.01f64..10.0, 4)) {
            let x = [1.0, 2.0, 3.5, 7.0];
            let base = power_fit(&x, &ys).unwrap();
            let yscaled: Vec<f64> = ys.iter().map(|v| v * c).collect();
            let xscaled: Vec<f64> = x.iter().map(|v| v * d).collect();
            let a = power_fit(&x, &yscaled).unwrap();
            let b = power_fit(&xscaled, &ys).unwrap();
            prop_assert!((a.exponent - base.exponent).abs() < 1e-9);
            prop_assert!((a.prefactor / base.prefactor - c).abs() < 1e-9 * c);
            prop_assert!((b.exponent - base.exponent).abs() < 1e-9);
        }

        #[test]
        fn spearman_ignores_monotone_transforms(vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..15)) {
            let (x, y): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
            let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let cy: Vec<f64> = y.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            let a = spearman(&x, &y, 0, 0).unwrap();
            let b = spearman(&ex, &cy, 0, 0).unwrap();
            prop_assert_eq!(a.rho, b.rho);
        }
    }
}
