//! NumPy `.npy` format 1.0: magic `\x93NUMPY`, version `01 00`, a 2-byte
//! little-endian header length, an ASCII dict literal, then the raw payload.

use std::fs;
use std::path::Path;

use super::{Result, TensorIoError, TensorView};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
}

impl NpyDtype {
    fn descr(self) -> &'static str {
        match self {
            NpyDtype::F32 => "<f4",
            NpyDtype::F64 => "<f8",
        }
    }

    fn width(self) -> usize {
        match self {
            NpyDtype::F32 => 4,
            NpyDtype::F64 => 8,
        }
    }
}

struct Header {
    dtype: NpyDtype,
    shape: Vec<usize>,
}

pub fn load_npy(path: impl AsRef<Path>) -> Result<TensorView> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_npy(&bytes, &name, &path.to_string_lossy())
}

/// Parses an in-memory `.npy` image.
pub fn parse_npy(bytes: &[u8], name: &str, source_path: &str) -> Result<TensorView> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(TensorIoError::MalformedHeader(
            "missing \\x93NUMPY magic".into(),
        ));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(TensorIoError::MalformedHeader(format!(
            "unsupported format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(TensorIoError::MalformedHeader("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| TensorIoError::MalformedHeader("header is not ASCII".into()))?;
    let header = parse_header(text)?;

    let (rows, cols) = match header.shape.as_slice() {
        &[r, c] if r > 0 && c > 0 => (r, c),
        _ => return Err(TensorIoError::UnsupportedRank(header.shape)),
    };
    let count = rows * cols;
    let payload = &bytes[data_start..];
    let width = header.dtype.width();
    if payload.len() != count * width {
        return Err(TensorIoError::MalformedHeader(format!(
            "payload holds {} bytes, shape {rows}x{cols} needs {}",
            payload.len(),
            count * width
        )));
    }
    let values: Vec<f64> = match header.dtype {
        NpyDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        NpyDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    TensorView::new(name, rows, cols, values, source_path)
}

fn parse_header(text: &str) -> Result<Header> {
    let malformed = |msg: &str| TensorIoError::MalformedHeader(msg.to_string());
    let body = text.trim_end_matches(['\n', ' ', '\0']).trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| malformed("header is not a dict literal"))?;

    let descr = dict_value(body, "descr").ok_or_else(|| malformed("missing 'descr'"))?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f4" => NpyDtype::F32,
        "<f8" => NpyDtype::F64,
        other => return Err(TensorIoError::UnsupportedDtype(other.to_string())),
    };

    let fortran =
        dict_value(body, "fortran_order").ok_or_else(|| malformed("missing 'fortran_order'"))?;
    match fortran {
        "False" => {}
        "True" => return Err(malformed("fortran_order arrays are not supported")),
        _ => return Err(malformed("fortran_order is not a boolean")),
    }

    let shape_text = dict_value(body, "shape").ok_or_else(|| malformed("missing 'shape'"))?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| malformed("shape is not a tuple"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| malformed("shape entries must be integers"))?;

    Ok(Header { dtype, shape })
}

/// Returns the raw literal following `'key':` up to the next top-level comma.
fn dict_value<'a>(body: &'a str, key: &str) -> Option<&'a str> {
    let single = format!("'{key}'");
    let double = format!("\"{key}\"");
    let at = body.find(&single).or_else(|| body.find(&double))?;
    let rest = &body[at + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    let mut depth = 0i32;
    for (i, ch) in rest.char_indices() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' if depth == 0 => return Some(rest[..i].trim()),
            _ => {}
        }
    }
    Some(rest.trim())
}

/// Writes a 2-D `.npy` 1.0 file. `F32` output narrows each value.
pub fn write_npy(path: impl AsRef<Path>, view: &TensorView, dtype: NpyDtype) -> Result<()> {
    let path = path.as_ref();
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}), }}",
        dtype.descr(),
        view.rows(),
        view.cols()
    );
    // pad so the payload starts on a 64-byte boundary, newline-terminated
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + view.values().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in view.values() {
        match dtype {
            NpyDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            NpyDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(path, out).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(descr: &str, shape: &str, payload: &[u8]) -> Vec<u8> {
        let header =
            format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}\n");
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn f32_bytes(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn identity_2x2() {
        let bytes = image("<f4", "(2, 2)", &f32_bytes(&[1.0, 0.0, 0.0, 1.0]));
        let t = parse_npy(&bytes, "eye", "mem").unwrap();
        assert_eq!(t.shape(), (2, 2));
        assert_eq!(t.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_half_precision() {
        let bytes = image("<f2", "(2, 2)", &[0u8; 8]);
        assert!(
            matches!(parse_npy(&bytes, "h", "mem"), Err(TensorIoError::UnsupportedDtype(d)) if d == "<f2")
        );
    }

    #[test]
    fn rejects_big_endian_and_ints() {
        for descr in [">f4", "<i4", "|u1"] {
            let bytes = image(descr, "(1, 1)", &[0u8; 4]);
            assert!(matches!(
                parse_npy(&bytes, "x", "mem"),
                Err(TensorIoError::UnsupportedDtype(_))
            ));
        }
    }

    #[test]
    fn rejects_non_matrix_shapes() {
        let one_d = image("<f4", "(4,)", &f32_bytes(&[1.0; 4]));
        assert!(
            matches!(parse_npy(&one_d, "v", "mem"), Err(TensorIoError::UnsupportedRank(s)) if s == vec![4])
        );
        let three_d = image("<f4", "(1, 2, 2)", &f32_bytes(&[1.0; 4]));
        assert!(matches!(
            parse_npy(&three_d, "t", "mem"),
            Err(TensorIoError::UnsupportedRank(_))
        ));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = image("<f4", "(1, 1)", &f32_bytes(&[1.0]));
        bytes[0] = b'X';
        assert!(matches!(
            parse_npy(&bytes, "x", "mem"),
            Err(TensorIoError::MalformedHeader(_))
        ));

        let mut v2 = image("<f4", "(1, 1)", &f32_bytes(&[1.0]));
        v2[6] = 2;
        assert!(matches!(
            parse_npy(&v2, "x", "mem"),
            Err(TensorIoError::MalformedHeader(_))
        ));

        let short = image("<f4", "(2, 2)", &f32_bytes(&[1.0; 3]));
        assert!(matches!(
            parse_npy(&short, "x", "mem"),
            Err(TensorIoError::MalformedHeader(_))
        ));
    }

    #[test]
    fn rejects_fortran_order() {
        let header = "{'descr': '<f4', 'fortran_order': True, 'shape': (1, 1), }\n";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&1f32.to_le_bytes());
        assert!(matches!(
            parse_npy(&bytes, "x", "mem"),
            Err(TensorIoError::MalformedHeader(_))
        ));
    }

    #[test]
    fn rejects_nan() {
        let bytes = image("<f4", "(1, 2)", &f32_bytes(&[1.0, f32::NAN]));
        assert!(matches!(
            parse_npy(&bytes, "x", "mem"),
            Err(TensorIoError::NonFiniteValue { index: 1, .. })
        ));
    }

    #[test]
    fn writer_output_is_64_byte_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.npy");
        let view = TensorView::new("w", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5], "mem").unwrap();
        write_npy(&path, &view, NpyDtype::F64).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let back = load_npy(&path).unwrap();
        assert_eq!(back.values(), view.values());
        assert_eq!(back.name(), "w");
    }
}
