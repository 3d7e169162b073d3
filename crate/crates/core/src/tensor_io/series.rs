//! On-disk checkpoint runs.
//!
//! A run directory holds a `run.json` manifest and one checkpoint per step,
//! either as a directory `step_<N>/` of `.npy` files (named after the
//! parameter) and/or safetensors files, or as a single `step_<N>.safetensors`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::safetensors::SafetensorsIndex;
use super::{
    load_npy, map_parameter_name, split_fused_qkv, FusedSlot, MatrixType, NamingScheme, ParamCoord,
    Result, TensorIoError, TensorView,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub scheme: NamingScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svd_interval: Option<u64>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TensorIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| TensorIoError::InvalidManifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(TensorIoError::InvalidManifest(
                "layers, d_model and n_heads must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TensorIoError::InvalidManifest(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorSource {
    Npy(PathBuf),
    Safetensors { path: PathBuf, name: String },
}

/// Where a matrix lives, plus which fused block to cut out of it, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLocator {
    pub source: TensorSource,
    pub param_name: String,
    pub fused_slot: Option<FusedSlot>,
}

impl TensorLocator {
    pub fn load(&self, manifest: &Manifest) -> Result<TensorView> {
        let raw = match &self.source {
            TensorSource::Npy(path) => load_npy(path)?.with_name(self.param_name.clone()),
            TensorSource::Safetensors { path, name } => SafetensorsIndex::open(path)?.read(name)?,
        };
        match self.fused_slot {
            None => Ok(raw),
            Some(slot) => {
                let parts =
                    split_fused_qkv(&raw, manifest.scheme, manifest.d_model, manifest.n_heads)?;
                let [q, k, v] = parts;
                Ok(match slot {
                    FusedSlot::Q => q,
                    FusedSlot::K => k,
                    FusedSlot::V => v,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    pub manifest: Manifest,
    pub steps: Vec<u64>,
    pub entries: BTreeMap<u64, Vec<(ParamCoord, TensorLocator)>>,
    /// Files or tensors that were seen but not usable.
    pub warnings: Vec<String>,
}

fn parse_step(name: &str) -> Option<u64> {
    let rest = name.strip_prefix("step_")?;
    let rest = rest.strip_suffix(".safetensors").unwrap_or(rest);
    rest.parse().ok()
}

impl CheckpointSeries {
    /// Scans `root` for checkpoints; the manifest is `root/run.json` unless given.
    pub fn discover(root: impl AsRef<Path>, manifest: Manifest) -> Result<Self> {
        let root = root.as_ref();
        manifest.validate()?;
        let io = |source| TensorIoError::Io {
            path: root.to_path_buf(),
            source,
        };
        let mut files_by_step: BTreeMap<u64, Vec<PathBuf>> = BTreeMap::new();
        for dirent in fs::read_dir(root).map_err(io)? {
            let dirent = dirent.map_err(io)?;
            let path = dirent.path();
            let name = dirent.file_name().to_string_lossy().into_owned();
            let Some(step) = parse_step(&name) else {
                continue;
            };
            if path.is_dir() {
                let mut inner: Vec<PathBuf> = fs::read_dir(&path)
                    .map_err(|source| TensorIoError::Io {
                        path: path.clone(),
                        source,
                    })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files_by_step.entry(step).or_default().append(&mut inner);
            } else if name.ends_with(".safetensors") {
                files_by_step.entry(step).or_default().push(path);
            }
        }

        let mut warnings = Vec::new();
        let mut entries = BTreeMap::new();
        for (step, mut files) in files_by_step {
            files.sort();
            let mut found: Vec<(ParamCoord, TensorLocator)> = Vec::new();
            for file in files {
                let fname = file
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let mut add = |param: String, source: TensorSource, warnings: &mut Vec<String>| {
                    let Some(coord) = map_parameter_name(&param, manifest.scheme) else {
                        return;
                    };
                    if coord.layer >= manifest.layers {
                        warnings.push(format!(
                            "step {step}: {param} has layer {} outside the declared {} layers",
                            coord.layer, manifest.layers
                        ));
                        return;
                    }
                    if coord.matrix_type == MatrixType::FusedQkv {
                        for slot in FusedSlot::ALL {
                            found.push((
                                ParamCoord::fused(coord.layer, slot),
                                TensorLocator {
                                    source: source.clone(),
                                    param_name: param.clone(),
                                    fused_slot: Some(slot),
                                },
                            ));
                        }
                    } else {
                        found.push((
                            coord,
                            TensorLocator {
                                source,
                                param_name: param,
                                fused_slot: None,
                            },
                        ));
                    }
                };
                if let Some(param) = fname.strip_suffix(".npy") {
                    add(
                        param.to_string(),
                        TensorSource::Npy(file.clone()),
                        &mut warnings,
                    );
                } else if fname.ends_with(".safetensors") {
                    let index = SafetensorsIndex::open(&file)?;
                    let extractable = index.extractable_names();
                    for e in &index.entries {
                        if !extractable.contains(&e.name) {
                            if map_parameter_name(&e.name, manifest.scheme).is_some() {
                                warnings.push(format!(
                                    "step {step}: skipped {} ({} {:?})",
                                    e.name, e.dtype, e.shape
                                ));
                            }
                            continue;
                        }
                        add(
                            e.name.clone(),
                            TensorSource::Safetensors {
                                path: file.clone(),
                                name: e.name.clone(),
                            },
                            &mut warnings,
                        );
                    }
                }
            }
            found.sort_by_key(|a| a.0);
            let before = found.len();
            found.dedup_by(|a, b| a.0 == b.0);
            if found.len() != before {
                warnings.push(format!(
                    "step {step}: duplicate tensors for the same coordinate ignored"
                ));
            }
            entries.insert(step, found);
        }
        let steps = entries.keys().copied().collect();
        Ok(Self {
            manifest,
            steps,
            entries,
            warnings,
        })
    }

    /// Loads the manifest from `root/run.json` and discovers the run.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let manifest = Manifest::load(root.join("run.json"))?;
        Self::discover(root, manifest)
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
