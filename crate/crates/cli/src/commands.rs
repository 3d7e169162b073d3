use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spectra_core::fits::{self, LineFit, ModelSummary, RankCorr, ScalingReport};
use spectra_core::format::sig9;
use spectra_core::prune::{self, BaselineInputs, PrunePlan, Strategy, ZoneMap};
use spectra_core::tensor_io::{
    canonical_name, write_npy, CheckpointSeries, FusedSlot, Manifest, MatrixType, NpyDtype,
    TensorIoError,
};
use spectra_core::timelapse::{
    self, AlphaProfile, BuildOptions, LogSidecar, SigmaTable, SpectralLog, SrAggregate,
    TimelapseError,
};
use spectra_core::twotimescale::{self, PredictionReport, SimError, SimParams};
use spectra_core::warmup::{self, SigmaSource, WarmupSpec};

use crate::failure::{Classify, CmdResult, Failure};
use crate::io::{create_dir, create_file, emit, open_file, read_log, to_json, write_json};
use crate::{
    Dtype, Format, ProfileArgs, PruneArgs, ScalingArgs, ScanArgs, SimulateArgs, SpearmanArgs,
    WarmupArgs, WaveArgs,
};

fn type_set(types: &[MatrixType]) -> BTreeSet<MatrixType> {
    if types.is_empty() {
        MatrixType::TRACKED.into_iter().collect()
    } else {
        types.iter().copied().collect()
    }
}

fn single_type(types: &[MatrixType], default: MatrixType) -> CmdResult<MatrixType> {
    match types {
        [] => Ok(default),
        [t] => Ok(*t),
        _ => Err(Failure::usage("exactly one matrix type is expected here")),
    }
}

fn check_fraction(name: &str, v: f64) -> CmdResult {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Failure::usage(format!(
            "--{name} must lie in (0, 1], got {v}"
        )))
    }
}

fn series_error(e: TensorIoError) -> Failure {
    Failure::Input(anyhow::Error::new(e).context("cannot read checkpoint run"))
}

pub fn scan(a: ScanArgs) -> CmdResult {
    check_fraction("tail-fraction", a.tail_fraction)?;
    let started = Instant::now();
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| a.root.join("run.json"));
    let manifest = Manifest::load(&manifest_path).map_err(series_error)?;
    let series = CheckpointSeries::discover(&a.root, manifest).map_err(series_error)?;
    if series.is_empty() {
        return Err(Failure::input(format!(
            "no step_<N> checkpoints under {}",
            a.root.display()
        )));
    }
    let types = type_set(&a.types);
    let options = BuildOptions {
        tail_fraction: a.tail_fraction,
        keep_spectra: a.emit_spectra,
    };
    let (log, report) =
        timelapse::build_log(&series, &types, options).compute_err("scan failed")?;

    create_dir(&a.out)?;
    let csv_path = a.out.join("spectral_log.csv");
    log.write_csv(create_file(&csv_path)?)
        .input_err(format!("cannot write {}", csv_path.display()))?;
    let sidecar = LogSidecar {
        run_id: log.run_id().to_string(),
        layer_count: log.layer_count(),
        steps: log.steps(),
        records: log.len(),
        tail_fraction: a.tail_fraction,
        fused_mode: "split".into(),
        matrix_types: log.matrix_types().into_iter().collect(),
        warnings: report.warnings.clone(),
    };
    write_json(&a.out.join("spectral_log.json"), &sidecar)?;
    if let Some(table) = &report.spectra {
        let path = a.out.join("spectra.csv");
        table
            .write_csv(create_file(&path)?)
            .input_err(format!("cannot write {}", path.display()))?;
    }

    for w in &report.warnings {
        log::warn!("{w}");
    }
    eprintln!(
        "scan: {} records written, {} matrices failed, {} steps excluded, {:.2}s",
        log.len(),
        report.failures.len(),
        report.excluded_steps.len(),
        started.elapsed().as_secs_f64()
    );
    if report.failures.is_empty() {
        Ok(())
    } else {
        for f in &report.failures {
            eprintln!("  step {} {} ({}): {}", f.step, f.coord, f.source, f.error);
        }
        Err(Failure::compute(format!(
            "{} matrices could not be analyzed",
            report.failures.len()
        )))
    }
}

#[derive(Serialize)]
struct OnsetRow {
    layer: usize,
    step: Option<u64>,
}

#[derive(Serialize)]
struct GradientRow {
    step: u64,
    gradient: f64,
}

#[derive(Serialize)]
struct Interval {
    from: u64,
    to: u64,
}

#[derive(Serialize)]
struct WaveReport {
    run_id: String,
    threshold_ratio: f64,
    aggregate: String,
    onsets: Vec<OnsetRow>,
    wave_velocity: Option<LineFit>,
    wave_velocity_error: Option<String>,
    sr_gradient: Vec<GradientRow>,
    reversal: Option<Interval>,
}

pub fn wave(a: WaveArgs) -> CmdResult {
    check_fraction("threshold", a.threshold)?;
    let aggregate = match a.types.as_slice() {
        [] => SrAggregate::MeanOverTypes,
        [t] => SrAggregate::Single(*t),
        _ => {
            return Err(Failure::usage(
                "--types takes a single type, or none to average tracked types",
            ))
        }
    };
    let log = read_log(&a.log)?;
    let onsets = timelapse::compression_onsets(&log, &aggregate, a.threshold);
    let (velocity, velocity_error) = match timelapse::wave_velocity(&onsets) {
        Ok(f) => (Some(f), None),
        Err(e @ TimelapseError::TooFewOnsets(_)) | Err(e @ TimelapseError::Fit(_)) => {
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(Failure::Compute(e.into())),
    };
    let gradient = timelapse::sr_gradient_series(&log, &aggregate);
    let reversal = timelapse::detect_reversal(&gradient).map(|(from, to)| Interval { from, to });
    let report = WaveReport {
        run_id: log.run_id().to_string(),
        threshold_ratio: a.threshold,
        aggregate: match aggregate {
            SrAggregate::MeanOverTypes => "MEAN_TRACKED".into(),
            SrAggregate::Single(t) => t.as_str().into(),
        },
        onsets: onsets
            .onsets
            .iter()
            .map(|(&layer, &step)| OnsetRow { layer, step })
            .collect(),
        wave_velocity: velocity,
        wave_velocity_error: velocity_error,
        sr_gradient: gradient
            .iter()
            .map(|&(step, gradient)| GradientRow { step, gradient })
            .collect(),
        reversal,
    };
    let text = match a.format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut s = String::from("layer,onset_step\n");
            for o in &report.onsets {
                let _ = writeln!(
                    s,
                    "{},{}",
                    o.layer,
                    o.step.map(|v| v.to_string()).unwrap_or_default()
                );
            }
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct ProfileReport {
    run_id: String,
    step: u64,
    matrix_type: MatrixType,
    layers: usize,
    boundary: Option<usize>,
    alphas: Vec<f64>,
    spread: f64,
    peak_layer: usize,
    peak_ratio: f64,
}

fn profile_from_log(
    log: &SpectralLog,
    step: Option<u64>,
    t: MatrixType,
) -> CmdResult<AlphaProfile> {
    let step = match step {
        Some(s) => s,
        None => *log
            .steps()
            .last()
            .ok_or_else(|| Failure::input("the spectral log is empty"))?,
    };
    timelapse::alpha_profile(log, step, t).input_err("cannot build the alpha profile")
}

fn zone_map(layers: usize, boundary: Option<usize>) -> CmdResult<Option<ZoneMap>> {
    let b = boundary.unwrap_or_else(|| prune::default_boundary(layers));
    match prune::classify_zones(layers, b) {
        Ok(z) => Ok(Some(z)),
        Err(e) if boundary.is_some() => Err(Failure::Usage(e.into())),
        Err(_) => Ok(None),
    }
}

pub fn profile(a: ProfileArgs) -> CmdResult {
    let t = single_type(&a.types, MatrixType::Q)?;
    let log = read_log(&a.log)?;
    let p = profile_from_log(&log, a.step, t)?;
    let zones = zone_map(p.layer_count(), a.boundary)?;
    let (peak_layer, peak_ratio) = timelapse::peak_position(&p);

    create_dir(&a.out)?;
    let mut csv = String::from("layer,alpha,zone\n");
    for (l, alpha) in p.alphas.iter().enumerate() {
        let zone = zones.as_ref().map(|z| z.zones[l].as_str()).unwrap_or("");
        let _ = writeln!(csv, "{l},{},{zone}", sig9(*alpha));
    }
    emit(Some(&a.out.join("profile.csv")), &csv)?;
    let report = ProfileReport {
        run_id: log.run_id().to_string(),
        step: p.step,
        matrix_type: t,
        layers: p.layer_count(),
        boundary: zones.as_ref().map(|z| z.boundary),
        alphas: p.alphas.clone(),
        spread: timelapse::alpha_spread(&p),
        peak_layer,
        peak_ratio,
    };
    write_json(&a.out.join("profile.json"), &report)
}

#[derive(Serialize)]
struct ScalingOutput<'a> {
    models: &'a [ModelSummary],
    #[serde(flatten)]
    report: ScalingReport,
}

pub fn scaling(a: ScalingArgs) -> CmdResult {
    let mut reader = csv::Reader::from_reader(open_file(&a.input)?);
    let models: Vec<ModelSummary> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .input_err(format!("malformed model summary CSV {}", a.input.display()))?;
    let report = fits::fit_scaling_laws(&models).compute_err("scaling fits failed")?;
    let text = match a.format {
        Format::Json => to_json(&ScalingOutput {
            models: &models,
            report,
        }),
        Format::Csv => {
            let mut s = String::from("fit,exponent_or_slope,prefactor_or_intercept,r2\n");
            for (name, f) in [
                ("delta_alpha", &report.delta_alpha_fit),
                ("alpha_max", &report.alpha_max_fit),
            ] {
                let _ = writeln!(
                    s,
                    "{name},{},{},{}",
                    sig9(f.exponent),
                    sig9(f.prefactor),
                    sig9(f.r2)
                );
            }
            let f = &report.peak_position_fit;
            let _ = writeln!(
                s,
                "peak_ratio,{},{},{}",
                sig9(f.slope),
                sig9(f.intercept),
                sig9(f.r2)
            );
            if let Some(f) = &report.wave_velocity_summary.power_fit {
                let _ = writeln!(
                    s,
                    "wave_velocity,{},{},{}",
                    sig9(f.exponent),
                    sig9(f.prefactor),
                    sig9(f.r2)
                );
            }
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct SimulationOutput {
    params: SimParams,
    warnings: Vec<String>,
    predictions: Option<PredictionReport>,
    skipped_reason: Option<String>,
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let mut params: SimParams = match &a.params {
        Some(path) => serde_json::from_reader(open_file(path)?).input_err(format!(
            "malformed simulation parameters {}",
            path.display()
        ))?,
        None => SimParams::default(),
    };
    if let Some(seed) = a.seed {
        params.seed = seed;
    }
    let resolved = params
        .resolve()
        .input_err("invalid simulation parameters")?;
    let traj = twotimescale::simulate(&params).map_err(|e| match e {
        SimError::Instability { .. } => Failure::Compute(e.into()),
        other => Failure::Input(other.into()),
    })?;
    let (predictions, skipped_reason) = if params.is_noiseless() {
        let report = twotimescale::check_predictions(&traj, &params)
            .compute_err("prediction checks failed")?;
        (Some(report), None)
    } else {
        (
            None,
            Some("prediction checks need a zero-noise run".to_string()),
        )
    };

    create_dir(&a.out)?;
    let path = a.out.join("trajectory.csv");
    traj.write_csv(create_file(&path)?)
        .input_err(format!("cannot write {}", path.display()))?;
    write_json(
        &a.out.join("predictions.json"),
        &SimulationOutput {
            params,
            warnings: resolved.warnings,
            predictions,
            skipped_reason,
        },
    )
}

#[derive(Deserialize)]
struct ProfileRow {
    layer: usize,
    alpha: f64,
}

#[derive(Deserialize)]
struct NormRow {
    layer: usize,
    frob_norm: f64,
}

/// Rows must cover layers `0..n` exactly once each.
fn dense_by_layer(pairs: Vec<(usize, f64)>, what: &str) -> CmdResult<Vec<f64>> {
    let n = pairs.len();
    let mut out = vec![None; n];
    for (layer, v) in pairs {
        match out.get_mut(layer) {
            Some(slot @ None) => *slot = Some(v),
            _ => {
                return Err(Failure::input(format!(
                    "{what} must list layers 0..{n} once each"
                )))
            }
        }
    }
    Ok(out.into_iter().flatten().collect())
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<Vec<T>> {
    csv::Reader::from_reader(open_file(path)?)
        .deserialize()
        .collect::<Result<_, _>>()
        .input_err(format!("malformed CSV {}", path.display()))
}

pub fn prune_plan(a: PruneArgs) -> CmdResult {
    let mut norms: Option<Vec<f64>> = None;
    let profile = if let Some(path) = &a.profile {
        let rows: Vec<ProfileRow> = read_csv_rows(path)?;
        let alphas = dense_by_layer(
            rows.into_iter().map(|r| (r.layer, r.alpha)).collect(),
            "profile",
        )?;
        Some(
            AlphaProfile::new(
                a.step.unwrap_or(0),
                single_type(&a.types, MatrixType::Q)?,
                alphas,
            )
            .input_err("invalid profile")?,
        )
    } else if let Some(path) = &a.log {
        let log = read_log(path)?;
        let p = profile_from_log(&log, a.step, single_type(&a.types, MatrixType::Q)?)?;
        norms =
            Some(timelapse::layer_frob_norms(&log, p.step).input_err("cannot sum layer norms")?);
        Some(p)
    } else {
        None
    };
    if let Some(path) = &a.norms {
        let rows: Vec<NormRow> = read_csv_rows(path)?;
        norms = Some(dense_by_layer(
            rows.into_iter().map(|r| (r.layer, r.frob_norm)).collect(),
            "norms",
        )?);
    }
    let layers = match (&profile, a.layers) {
        (Some(p), Some(l)) if l != p.layer_count() => {
            return Err(Failure::usage(format!(
                "--layers {l} disagrees with the {}-layer profile",
                p.layer_count()
            )))
        }
        (Some(p), _) => p.layer_count(),
        (None, Some(l)) => l,
        (None, None) => match &norms {
            Some(n) => n.len(),
            None => return Err(Failure::usage("give --profile, --log or --layers")),
        },
    };

    let plan: PrunePlan = match a.strategy {
        Strategy::ZoneAware => {
            let p = profile
                .as_ref()
                .ok_or_else(|| Failure::usage("zone_aware needs --profile or --log"))?;
            let b = a
                .boundary
                .unwrap_or_else(|| prune::default_boundary(layers));
            prune::zone_aware_select(p, a.k, b, a.min_gap).map_err(|e| match e {
                prune::PruneError::InfeasibleSelection { .. } => Failure::Compute(e.into()),
                other => Failure::Usage(other.into()),
            })?
        }
        s => {
            if s == Strategy::Random && a.seed.is_none() {
                return Err(Failure::usage("random needs --seed"));
            }
            let inputs = BaselineInputs {
                profile: profile.as_ref(),
                frob_norms: norms.as_deref(),
                seed: a.seed,
            };
            prune::baseline_select(s, layers, a.k, &inputs).usage_err("cannot build the plan")?
        }
    };

    let zones = zone_map(layers, plan.b.or(a.boundary))?;
    let mut table = format!(
        "{} plan, k={}\nlayer  alpha      zone             removed\n",
        plan.strategy, plan.k
    );
    let mut csv = String::from("layer,alpha,zone,removed\n");
    for l in 0..layers {
        let alpha = profile
            .as_ref()
            .map(|p| sig9(p.alphas[l]))
            .unwrap_or_default();
        let zone = zones.as_ref().map(|z| z.zones[l].as_str()).unwrap_or("");
        let removed = plan.removed_layers.contains(&l);
        let _ = writeln!(
            table,
            "{l:<6} {alpha:<10} {zone:<16} {}",
            if removed { "x" } else { "" }
        );
        let _ = writeln!(csv, "{l},{alpha},{zone},{removed}");
    }
    eprint!("{table}");
    let text = match a.format {
        Format::Json => to_json(&plan),
        Format::Csv => csv,
    };
    emit(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct WarmupEntry {
    file: String,
    layer: usize,
    matrix_type: MatrixType,
    fused_slot: Option<FusedSlot>,
    rows: usize,
    cols: usize,
    reference_step: u64,
    sigma_source: SigmaSource,
    seed: u64,
}

#[derive(Serialize)]
struct WarmupManifest {
    run_id: String,
    seed: u64,
    scale: f64,
    dtype: &'static str,
    matrices: Vec<WarmupEntry>,
}

pub fn warmup(a: WarmupArgs) -> CmdResult {
    if !(a.scale.is_finite() && a.scale > 0.0) {
        return Err(Failure::usage(format!(
            "--scale must be positive, got {}",
            a.scale
        )));
    }
    let manifest = Manifest::load(&a.manifest).map_err(series_error)?;
    let log = read_log(&a.log)?;
    if log.layer_count() > manifest.layers {
        return Err(Failure::input(format!(
            "reference log has {} layers, manifest declares {}",
            log.layer_count(),
            manifest.layers
        )));
    }
    let spectra = match &a.spectra {
        Some(path) => Some(
            SigmaTable::read_csv(open_file(path)?)
                .input_err(format!("cannot read {}", path.display()))?,
        ),
        None => None,
    };
    let types: Vec<MatrixType> = type_set(&a.types).into_iter().collect();
    let targets = warmup::reference_targets(&log, spectra.as_ref(), &types)
        .input_err("cannot derive target spectra")?;
    if targets.is_empty() {
        return Err(Failure::input(
            "the reference log holds no matrices of the requested types",
        ));
    }

    let mut names = BTreeSet::new();
    for t in &targets {
        if !names.insert(canonical_name(&t.coord)) {
            return Err(Failure::input(format!(
                "two reference matrices map to {}",
                canonical_name(&t.coord)
            )));
        }
    }
    let built: Vec<_> = targets
        .par_iter()
        .map(|t| {
            let seed = warmup::derive_seed(a.seed, &t.coord);
            let spec = WarmupSpec {
                rows: t.rows,
                cols: t.cols,
                target_sigma: t.sigma.clone(),
                scale: a.scale,
                seed,
            };
            warmup::spectral_warmup_matrix(&spec).map(|m| (seed, m))
        })
        .collect();

    create_dir(&a.out)?;
    let dtype = match a.dtype {
        Dtype::F32 => NpyDtype::F32,
        Dtype::F64 => NpyDtype::F64,
    };
    let mut entries = Vec::new();
    for (t, result) in targets.iter().zip(built) {
        let (seed, matrix) =
            result.compute_err(format!("warmup synthesis failed for {}", t.coord))?;
        let file = format!("{}.npy", canonical_name(&t.coord));
        write_npy(a.out.join(&file), &matrix, dtype).input_err(format!("cannot write {file}"))?;
        entries.push(WarmupEntry {
            file,
            layer: t.coord.layer,
            matrix_type: t.coord.effective_type(),
            fused_slot: t.coord.fused_slot,
            rows: t.rows,
            cols: t.cols,
            reference_step: t.step,
            sigma_source: t.source,
            seed,
        });
    }
    write_json(
        &a.out.join("warmup.json"),
        &WarmupManifest {
            run_id: manifest.run_id,
            seed: a.seed,
            scale: a.scale,
            dtype: match a.dtype {
                Dtype::F32 => "f32",
                Dtype::F64 => "f64",
            },
            matrices: entries,
        },
    )
}

pub fn spearman(a: SpearmanArgs) -> CmdResult {
    let mut reader = csv::Reader::from_reader(open_file(&a.input)?);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.input_err(format!("malformed CSV {}", a.input.display()))?;
        let cell = |c: usize| -> CmdResult<f64> {
            row.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Failure::input(format!(
                        "data row {}: column {} is not a finite number",
                        i + 1,
                        c + 1
                    ))
                })
        };
        x.push(cell(0)?);
        y.push(cell(1)?);
    }
    let rc: RankCorr =
        fits::spearman(&x, &y, a.permutations, a.seed).compute_err("spearman failed")?;
    let text = match a.format {
        Format::Json => to_json(&rc),
        Format::Csv => format!(
            "rho,p_value,n,permutations,seed\n{},{},{},{},{}\n",
            sig9(rc.rho),
            sig9(rc.p_value),
            rc.n,
            rc.permutations,
            rc.seed
        ),
    };
    emit(a.out.as_deref(), &text)
}
