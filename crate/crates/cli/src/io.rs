use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use spectra_core::timelapse::{LogSidecar, SpectralLog};

use crate::failure::{Classify, CmdResult};

pub fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).input_err(format!("cannot create output directory {}", dir.display()))
}

pub fn create_file(path: &Path) -> CmdResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .input_err(format!("cannot create {}", path.display()))
}

pub fn open_file(path: &Path) -> CmdResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .input_err(format!("cannot open {}", path.display()))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut f = create_file(path)?;
    f.write_all(to_json(value).as_bytes())
        .and_then(|_| f.flush())
        .input_err(format!("cannot write {}", path.display()))
}

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => {
            let mut f = create_file(p)?;
            f.write_all(text.as_bytes())
                .and_then(|_| f.flush())
                .input_err(format!("cannot write {}", p.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .input_err("cannot write to stdout")
        }
    }
}

/// Reads a spectral log CSV; run id and layer count come from the JSON
/// sidecar next to it when one exists.
pub fn read_log(path: &Path) -> CmdResult<SpectralLog> {
    let sidecar_path = path.with_extension("json");
    let sidecar: Option<LogSidecar> = if sidecar_path.is_file() {
        let text = fs::read_to_string(&sidecar_path)
            .input_err(format!("cannot read {}", sidecar_path.display()))?;
        Some(
            serde_json::from_str(&text)
                .input_err(format!("malformed sidecar {}", sidecar_path.display()))?,
        )
    } else {
        None
    };
    let run_id = match &sidecar {
        Some(s) => s.run_id.clone(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    SpectralLog::read_csv(open_file(path)?, run_id, sidecar.map(|s| s.layer_count))
        .input_err(format!("cannot read spectral log {}", path.display()))
}
