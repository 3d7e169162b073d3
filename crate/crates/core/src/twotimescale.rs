//! Two-timescale relaxation model: per-layer stable rank relaxes quickly
//! toward a shared target behind a layer-dependent wave front, while α
//! relaxes slowly toward layer-specific targets.
//!
//! ```text
//! dR_l/dt = -λ_R · φ(l, t) · (R_l - R*) + ξ_R
//! dα_l/dt =  λ_α · ψ(l)    · (α*_l - α_l) + ξ_α
//! ```

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::sig9;
use crate::timelapse::onset_step;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("dt * lambda = {0} is not below 2; explicit integration would diverge")]
    Unstable(f64),
    #[error("state became non-finite at step {step}")]
    Instability { step: usize },
    #[error("prediction checks need a zero-noise trajectory")]
    NoisyTrajectory,
    #[error("trajectory does not match its parameters: {0}")]
    Mismatch(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// One value for every layer, or a value per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLayer {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerLayer {
    pub fn resolve(&self, layers: usize, what: &str) -> Result<Vec<f64>> {
        let v = match self {
            PerLayer::Uniform(x) => vec![*x; layers],
            PerLayer::Each(v) if v.len() == layers => v.clone(),
            PerLayer::Each(v) => {
                return Err(SimError::InvalidParams(format!(
                    "{what} has {} entries for {layers} layers",
                    v.len()
                )))
            }
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SimError::InvalidParams(format!(
                "{what} has non-finite entries"
            )));
        }
        Ok(v)
    }
}

/// Wave-front gate φ(l, t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhiSpec {
    /// `1 / (1 + exp(-(t - tau_per_layer * l) / width))`
    Logistic {
        tau_per_layer: f64,
        width: f64,
    },
    Constant {
        value: f64,
    },
}

impl PhiSpec {
    pub fn eval(&self, layer: usize, t: f64) -> f64 {
        match *self {
            PhiSpec::Logistic {
                tau_per_layer,
                width,
            } => default_phi(layer, t, tau_per_layer, width),
            PhiSpec::Constant { value } => value,
        }
    }

    fn wave_configured(&self) -> bool {
        matches!(*self, PhiSpec::Logistic { tau_per_layer, .. } if tau_per_layer != 0.0)
    }
}

pub fn default_phi(layer: usize, t: f64, tau_per_layer: f64, width: f64) -> f64 {
    let z = (t - tau_per_layer * layer as f64) / width;
    // split by sign so exp never overflows into inf/inf
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Tent profile: `alpha_lo` at layer 0, `alpha_hi` at `round(peak_ratio*(L-1))`,
/// back to `alpha_lo` at layer `L-1`, linear in between.
pub fn default_alpha_star(
    layers: usize,
    peak_ratio: f64,
    alpha_lo: f64,
    alpha_hi: f64,
) -> Vec<f64> {
    if layers == 0 {
        return Vec::new();
    }
    let last = layers - 1;
    let peak = ((peak_ratio.clamp(0.0, 1.0) * last as f64).round() as usize).min(last);
    (0..layers)
        .map(|l| {
            if l <= peak {
                if peak == 0 {
                    alpha_hi
                } else {
                    alpha_lo + (alpha_hi - alpha_lo) * l as f64 / peak as f64
                }
            } else {
                alpha_lo + (alpha_hi - alpha_lo) * (last - l) as f64 / (last - peak) as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub layers: usize,
    pub steps: usize,
    pub dt: f64,
    pub lambda_r: f64,
    pub lambda_alpha: f64,
    /// Shared equilibrium; a per-layer list is accepted as an extension.
    pub r_star: PerLayer,
    /// `None` means `default_alpha_star(layers, 0.43, 0.2, 0.46)`.
    pub alpha_star: Option<PerLayer>,
    pub phi: PhiSpec,
    pub psi: PerLayer,
    pub noise_sigma_r: f64,
    pub noise_sigma_alpha: f64,
    pub seed: u64,
    pub r_init: PerLayer,
    pub alpha_init: PerLayer,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            layers: 8,
            steps: 5000,
            dt: 1.0,
            lambda_r: 0.05,
            lambda_alpha: 0.002,
            r_star: PerLayer::Uniform(20.0),
            alpha_star: None,
            phi: PhiSpec::Logistic {
                tau_per_layer: 100.0,
                width: 25.0,
            },
            psi: PerLayer::Uniform(1.0),
            noise_sigma_r: 0.0,
            noise_sigma_alpha: 0.0,
            seed: 0,
            r_init: PerLayer::Uniform(100.0),
            alpha_init: PerLayer::Uniform(0.1),
        }
    }
}

/// Parameters with every per-layer field expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedParams {
    pub r_star: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub psi: Vec<f64>,
    pub r_init: Vec<f64>,
    pub alpha_init: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SimParams {
    pub fn resolve(&self) -> Result<ResolvedParams> {
        let bad = |m: String| Err(SimError::InvalidParams(m));
        let l = self.layers;
        if l == 0 {
            return bad("layers must be positive".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_alpha", self.lambda_alpha),
            ("noise_sigma_r", self.noise_sigma_r),
            ("noise_sigma_alpha", self.noise_sigma_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        match self.phi {
            PhiSpec::Logistic {
                tau_per_layer,
                width,
            } => {
                if !(width.is_finite() && width > 0.0) || !tau_per_layer.is_finite() {
                    return bad(format!(
                        "logistic front needs finite tau and positive width, got {width}"
                    ));
                }
            }
            PhiSpec::Constant { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return bad(format!("constant phi must lie in [0, 1], got {value}"));
                }
            }
        }
        let psi = self.psi.resolve(l, "psi")?;
        if psi.iter().any(|&p| p < 0.0) {
            return bad("psi gains must be nonnegative".into());
        }
        let fast = self.dt * self.lambda_r;
        if fast >= 2.0 {
            return Err(SimError::Unstable(fast));
        }
        let slow = self.dt * self.lambda_alpha * psi.iter().copied().fold(0.0, f64::max);
        if slow >= 2.0 {
            return Err(SimError::Unstable(slow));
        }
        let alpha_star = match &self.alpha_star {
            Some(a) => a.resolve(l, "alpha_star")?,
            None => default_alpha_star(l, 0.43, 0.2, 0.46),
        };
        let mut warnings = Vec::new();
        if self.lambda_r <= self.lambda_alpha {
            warnings.push(format!(
                "lambda_r {} does not exceed lambda_alpha {}; no timescale separation",
                self.lambda_r, self.lambda_alpha
            ));
        }
        Ok(ResolvedParams {
            r_star: self.r_star.resolve(l, "r_star")?,
            alpha_star,
            psi,
            r_init: self.r_init.resolve(l, "r_init")?,
            alpha_init: self.alpha_init.resolve(l, "alpha_init")?,
            warnings,
        })
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_sigma_r == 0.0 && self.noise_sigma_alpha == 0.0
    }
}

/// States at `t = n*dt` for `n = 0..=steps`; `r[n][l]`, `alpha[n][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrajectory {
    pub times: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

impl SimTrajectory {
    pub fn layers(&self) -> usize {
        self.r.first().map_or(0, Vec::len)
    }

    /// Long-form `time,layer,R,alpha`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "layer", "R", "alpha"])?;
        for (n, &t) in self.times.iter().enumerate() {
            for l in 0..self.layers() {
                w.write_record([
                    sig9(t),
                    l.to_string(),
                    sig9(self.r[n][l]),
                    sig9(self.alpha[n][l]),
                ])?;
            }
        }
        w.flush()
    }
}

/// Forward Euler. Noise, when enabled, adds `sigma * sqrt(dt) * N(0,1)` per
/// layer and step, drawn from one ChaCha8 stream seeded by `seed` in the order
/// (step, layer, R then α); a variable with zero sigma draws nothing.
pub fn simulate(p: &SimParams) -> Result<SimTrajectory> {
    let rp = p.resolve()?;
    for w in &rp.warnings {
        log::warn!("{w}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let sqrt_dt = p.dt.sqrt();
    let mut r = rp.r_init.clone();
    let mut a = rp.alpha_init.clone();
    let mut times = Vec::with_capacity(p.steps + 1);
    let mut rs = Vec::with_capacity(p.steps + 1);
    let mut alphas = Vec::with_capacity(p.steps + 1);
    times.push(0.0);
    rs.push(r.clone());
    alphas.push(a.clone());
    for n in 0..p.steps {
        let t = n as f64 * p.dt;
        for l in 0..p.layers {
            let mut dr = -p.lambda_r * p.phi.eval(l, t) * (r[l] - rp.r_star[l]) * p.dt;
            let mut da = p.lambda_alpha * rp.psi[l] * (rp.alpha_star[l] - a[l]) * p.dt;
            if p.noise_sigma_r > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                dr += p.noise_sigma_r * sqrt_dt * z;
            }
            if p.noise_sigma_alpha > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                da += p.noise_sigma_alpha * sqrt_dt * z;
            }
            r[l] += dr;
            a[l] += da;
            if !(r[l].is_finite() && a[l].is_finite()) {
                return Err(SimError::Instability { step: n + 1 });
            }
        }
        times.push((n + 1) as f64 * p.dt);
        rs.push(r.clone());
        alphas.push(a.clone());
    }
    Ok(SimTrajectory {
        times,
        r: rs,
        alpha: alphas,
    })
}

/// Runs independent parameter sets concurrently; results keep input order.
pub fn simulate_many(params: &[SimParams]) -> Vec<Result<SimTrajectory>> {
    params.par_iter().map(simulate).collect()
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// SR gradient `R_0 - R_{L-1}` at every recorded time.
pub fn sr_gradient(traj: &SimTrajectory) -> Vec<f64> {
    traj.r
        .iter()
        .map(|row| row[0] - row[row.len() - 1])
        .collect()
}

pub fn alpha_spread_series(traj: &SimTrajectory) -> Vec<f64> {
    traj.alpha.iter().map(|row| spread(row)).collect()
}

pub fn sr_spread_series(traj: &SimTrajectory) -> Vec<f64> {
    traj.r.iter().map(|row| spread(row)).collect()
}

/// Sign changes, ignoring entries with `|g| <= tol`.
pub fn count_sign_changes(series: &[f64], tol: f64) -> usize {
    let mut last = 0.0f64;
    let mut changes = 0;
    for &g in series {
        if g.abs() <= tol {
            continue;
        }
        if last != 0.0 && g.signum() != last {
            changes += 1;
        }
        last = g.signum();
    }
    changes
}

/// True when the series never drops by more than `tol` from one entry to the
/// next, starting at `skip`.
pub fn nondecreasing_from(series: &[f64], skip: usize, tol: f64) -> bool {
    series
        .get(skip..)
        .unwrap_or(&[])
        .windows(2)
        .all(|w| w[1] >= w[0] - tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimescaleReport {
    /// Once the SR spread declines from its peak: time from first dropping
    /// below 90% of the peak to first dropping below 45%.
    pub sr_spread_halving_time: Option<f64>,
    /// Time until the α spread first reaches half its final value.
    pub alpha_half_time: Option<f64>,
    pub fast_first: bool,
}

pub fn timescale_ordering(traj: &SimTrajectory) -> TimescaleReport {
    let sr = sr_spread_series(traj);
    let (peak_idx, peak) =
        sr.iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
    let below = |frac: f64, from: usize| (from..sr.len()).find(|&i| sr[i] < frac * peak);
    let sr_half = (peak > 0.0)
        .then(|| {
            let start = below(0.9, peak_idx)?;
            let end = below(0.45, start)?;
            Some(traj.times[end] - traj.times[start])
        })
        .flatten();
    let al = alpha_spread_series(traj);
    let target = 0.5 * al.last().copied().unwrap_or(0.0);
    let alpha_half = (target > 0.0)
        .then(|| al.iter().position(|&s| s >= target))
        .flatten()
        .map(|i| traj.times[i]);
    let fast_first = matches!((sr_half, alpha_half), (Some(s), Some(a)) if s < a);
    TimescaleReport {
        sr_spread_halving_time: sr_half,
        alpha_half_time: alpha_half,
        fast_first,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvidence {
    pub sr_gradient_sign_changes: usize,
    pub initial_sr_gradient: f64,
    pub final_sr_gradient: f64,
    pub initial_span: f64,
    pub alpha_spread_nondecreasing: bool,
    pub final_alpha_spread: f64,
    pub alpha_star_spread: f64,
    /// Onset step index per layer (first step with R below 0.9 of its start).
    pub onset_steps: Vec<Option<u64>>,
    pub timescales: TimescaleReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    /// (i) the first-minus-last SR gradient is transient.
    pub sr_gradient_transient: bool,
    /// (ii) the α spread persists and settles at the target spread.
    pub alpha_gradient_persistent: bool,
    /// (iii) compression onsets move forward through depth.
    pub wave_forward: bool,
    pub all_hold: bool,
    pub flags: Vec<String>,
    pub notes: Vec<String>,
    pub evidence: PredictionEvidence,
}

pub fn check_predictions(traj: &SimTrajectory, p: &SimParams) -> Result<PredictionReport> {
    if !p.is_noiseless() {
        return Err(SimError::NoisyTrajectory);
    }
    let rp = p.resolve()?;
    if traj.layers() != p.layers || traj.times.len() != p.steps + 1 {
        return Err(SimError::Mismatch(format!(
            "{} layers x {} samples, expected {} x {}",
            traj.layers(),
            traj.times.len(),
            p.layers,
            p.steps + 1
        )));
    }
    let mut flags = Vec::new();
    let mut notes = Vec::new();

    // (i)
    let grad = sr_gradient(traj);
    let initial_span = rp
        .r_init
        .iter()
        .zip(&rp.r_star)
        .map(|(i, s)| (i - s).abs())
        .fold(0.0, f64::max);
    let changes = count_sign_changes(&grad, 1e-9 * initial_span.max(f64::MIN_POSITIVE));
    let final_grad = *grad.last().unwrap_or(&0.0);
    let transient = changes <= 1 && final_grad.abs() < 0.05 * initial_span;
    notes.push(
        "a shared R* drives the SR gradient to zero; a persistent positive gradient \
         (late layers over-compressing) is outside this model"
            .into(),
    );

    // (ii)
    let al = alpha_spread_series(traj);
    let skip = p.steps / 100;
    let tol = 1e-12 * al.iter().copied().fold(1.0, f64::max);
    let monotone = nondecreasing_from(&al, skip, tol);
    let final_spread = *al.last().unwrap_or(&0.0);
    let star_spread = spread(&rp.alpha_star);
    let persistent = if star_spread <= 1e-12 {
        flags.push("persistent gradient absent by construction".into());
        true
    } else {
        monotone && (final_spread - star_spread).abs() <= 0.01 * star_spread
    };

    // (iii)
    let onsets: Vec<Option<u64>> = (0..p.layers)
        .map(|l| {
            let series: Vec<(u64, f64)> = traj
                .r
                .iter()
                .enumerate()
                .map(|(n, row)| (n as u64, row[l]))
                .collect();
            onset_step(&series, 0.9)
        })
        .collect();
    let key = |o: &Option<u64>| o.unwrap_or(u64::MAX);
    let mut forward = onsets.windows(2).all(|w| key(&w[0]) <= key(&w[1]));
    if !p.phi.wave_configured() {
        flags.push("no wave configured".into());
        forward = true;
    }
    if onsets.iter().any(Option::is_none) {
        flags.push("some layers never reach a compression onset".into());
    }

    let timescales = timescale_ordering(traj);
    Ok(PredictionReport {
        sr_gradient_transient: transient,
        alpha_gradient_persistent: persistent,
        wave_forward: forward,
        all_hold: transient && persistent && forward,
        flags,
        notes,
        evidence: PredictionEvidence {
            sr_gradient_sign_changes: changes,
            initial_sr_gradient: grad[0],
            final_sr_gradient: final_grad,
            initial_span,
            alpha_spread_nondecreasing: monotone,
            final_alpha_spread: final_spread,
            alpha_star_spread: star_spread,
            onset_steps: onsets,
            timescales,
        },
    })
}
