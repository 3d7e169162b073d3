//! Safetensors container: an 8-byte little-endian header length `N`, `N`
//! bytes of JSON describing each tensor's dtype, shape and payload range,
//! then the payload.
//!
//! Only 2-D `F32` tensors are extracted. Everything else is reported in
//! [`SafetensorsContents::skipped`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Result, TensorIoError, TensorView};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedTensor {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SafetensorsContents {
    pub tensors: BTreeMap<String, TensorView>,
    pub skipped: Vec<SkippedTensor>,
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

impl Entry {
    fn extractable(&self) -> std::result::Result<(usize, usize), String> {
        if self.dtype != "F32" {
            return Err(format!("dtype {} is not F32", self.dtype));
        }
        match self.shape.as_slice() {
            &[r, c] if r > 0 && c > 0 => {
                if self.end - self.start != r * c * 4 {
                    Err(format!(
                        "byte range {} does not match shape {r}x{c}",
                        self.end - self.start
                    ))
                } else {
                    Ok((r, c))
                }
            }
            other => Err(format!(
                "rank {} (shape {:?}) is not 2-D",
                other.len(),
                other
            )),
        }
    }
}

/// Header of a safetensors file; tensor payloads are read on demand.
#[derive(Debug, Clone)]
pub(crate) struct SafetensorsIndex {
    path: PathBuf,
    data_start: u64,
    pub entries: Vec<Entry>,
}

fn parse_header(header: &[u8], payload_len: usize) -> Result<Vec<Entry>> {
    let malformed = |m: String| TensorIoError::MalformedContainer(m);
    let map: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header).map_err(|e| malformed(format!("header JSON: {e}")))?;
    let mut entries = Vec::with_capacity(map.len());
    for (name, value) in map {
        if name == "__metadata__" {
            continue;
        }
        let raw: RawEntry =
            serde_json::from_value(value).map_err(|e| malformed(format!("entry {name}: {e}")))?;
        let [start, end] = raw.data_offsets;
        if start > end {
            return Err(malformed(format!(
                "entry {name}: start {start} after end {end}"
            )));
        }
        if end > payload_len {
            return Err(TensorIoError::OffsetOutOfBounds {
                name,
                start,
                end,
                len: payload_len,
            });
        }
        entries.push(Entry {
            name,
            dtype: raw.dtype,
            shape: raw.shape,
            start,
            end,
        });
    }

    let mut by_start: Vec<&Entry> = entries.iter().filter(|e| e.end > e.start).collect();
    by_start.sort_by_key(|e| (e.start, e.end));
    for pair in by_start.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(TensorIoError::OverlappingRanges {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(entries)
}

fn split_container(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < 8 {
        return Err(TensorIoError::MalformedContainer(
            "shorter than the 8-byte length prefix".into(),
        ));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            TensorIoError::MalformedContainer(format!("header length {n} exceeds file"))
        })?;
    Ok((&bytes[8..header_end], &bytes[header_end..]))
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Parses an in-memory safetensors image.
pub fn parse_safetensors(bytes: &[u8], source_path: &str) -> Result<SafetensorsContents> {
    let (header, payload) = split_container(bytes)?;
    let entries = parse_header(header, payload.len())?;
    let mut out = SafetensorsContents::default();
    for e in entries {
        match e.extractable() {
            Ok((rows, cols)) => {
                let values = decode_f32(&payload[e.start..e.end]);
                let view = TensorView::new(e.name.clone(), rows, cols, values, source_path)?;
                out.tensors.insert(e.name, view);
            }
            Err(reason) => out.skipped.push(SkippedTensor {
                name: e.name,
                reason,
            }),
        }
    }
    Ok(out)
}

pub fn load_safetensors(path: impl AsRef<Path>) -> Result<SafetensorsContents> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_safetensors(&bytes, &path.to_string_lossy())
}

impl SafetensorsIndex {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |source| TensorIoError::Io {
            path: path.clone(),
            source,
        };
        let mut file = File::open(&path).map_err(io)?;
        let file_len = file.metadata().map_err(io)?.len();
        let mut len_buf = [0u8; 8];
        file.read_exact(&mut len_buf).map_err(|_| {
            TensorIoError::MalformedContainer("shorter than the 8-byte length prefix".into())
        })?;
        let n = u64::from_le_bytes(len_buf);
        if n.saturating_add(8) > file_len {
            return Err(TensorIoError::MalformedContainer(format!(
                "header length {n} exceeds file"
            )));
        }
        let mut header = vec![0u8; n as usize];
        file.read_exact(&mut header).map_err(io)?;
        let payload_len = (file_len - 8 - n) as usize;
        let entries = parse_header(&header, payload_len)?;
        Ok(Self {
            path,
            data_start: 8 + n,
            entries,
        })
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Reads one tensor without loading the rest of the payload.
    pub fn read(&self, name: &str) -> Result<TensorView> {
        let entry = self
            .entry(name)
            .ok_or_else(|| TensorIoError::MalformedContainer(format!("no tensor named {name}")))?;
        let (rows, cols) = entry
            .extractable()
            .map_err(TensorIoError::MalformedContainer)?;
        let io = |source| TensorIoError::Io {
            path: self.path.clone(),
            source,
        };
        let mut file = File::open(&self.path).map_err(io)?;
        file.seek(SeekFrom::Start(self.data_start + entry.start as u64))
            .map_err(io)?;
        let mut buf = vec![0u8; entry.end - entry.start];
        file.read_exact(&mut buf).map_err(io)?;
        TensorView::new(
            name,
            rows,
            cols,
            decode_f32(&buf),
            self.path.to_string_lossy(),
        )
    }

    /// Names of the tensors [`read`](Self::read) can extract.
    pub fn extractable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.extractable().is_ok())
            .map(|e| e.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn f32_bytes(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn single_matrix() {
        let header = r#"{"w":{"dtype":"F32","shape":[2,3],"data_offsets":[0,24]}}"#;
        let bytes = container(header, &f32_bytes(&[1., 2., 3., 4., 5., 6.]));
        let c = parse_safetensors(&bytes, "mem").unwrap();
        assert_eq!(c.tensors.len(), 1);
        let w = &c.tensors["w"];
        assert_eq!(w.shape(), (2, 3));
        assert_eq!(w.get(1, 0), 4.0);
        assert!(c.skipped.is_empty());
    }

    #[test]
    fn offsets_past_payload() {
        let header = r#"{"w":{"dtype":"F32","shape":[2,3],"data_offsets":[0,48]}}"#;
        let bytes = container(header, &f32_bytes(&[0.; 6]));
        assert!(matches!(
            parse_safetensors(&bytes, "mem"),
            Err(TensorIoError::OffsetOutOfBounds {
                end: 48,
                len: 24,
                ..
            })
        ));
    }

    #[test]
    fn bias_vector_is_skipped() {
        let header = r#"{"__metadata__":{"format":"pt"},"bias":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"w":{"dtype":"F32","shape":[1,2],"data_offsets":[8,16]}}"#;
        let bytes = container(header, &f32_bytes(&[0.5, 0.5, 1., 2.]));
        let c = parse_safetensors(&bytes, "mem").unwrap();
        assert_eq!(c.tensors.keys().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(c.skipped.len(), 1);
        assert_eq!(c.skipped[0].name, "bias");
    }

    #[test]
    fn non_f32_is_skipped() {
        let header = r#"{"h":{"dtype":"F16","shape":[1,2],"data_offsets":[0,4]}}"#;
        let bytes = container(header, &[0u8; 4]);
        let c = parse_safetensors(&bytes, "mem").unwrap();
        assert!(c.tensors.is_empty());
        assert!(c.skipped[0].reason.contains("F16"));
    }

    #[test]
    fn overlapping_ranges() {
        let header = r#"{"a":{"dtype":"F32","shape":[1,2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1,2],"data_offsets":[4,12]}}"#;
        let bytes = container(header, &[0u8; 12]);
        assert!(matches!(
            parse_safetensors(&bytes, "mem"),
            Err(TensorIoError::OverlappingRanges { .. })
        ));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            parse_safetensors(&[1, 2, 3], "mem"),
            Err(TensorIoError::MalformedContainer(_))
        ));
        let bytes = container("{not json", &[]);
        assert!(matches!(
            parse_safetensors(&bytes, "mem"),
            Err(TensorIoError::MalformedContainer(_))
        ));
        let mut huge = 1_000_000u64.to_le_bytes().to_vec();
        huge.extend_from_slice(b"{}");
        assert!(matches!(
            parse_safetensors(&huge, "mem"),
            Err(TensorIoError::MalformedContainer(_))
        ));
    }

    #[test]
    fn index_reads_single_tensor() {
        let header = r#"{"a":{"dtype":"F32","shape":[1,2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2,1],"data_offsets":[8,16]}}"#;
        let bytes = container(header, &f32_bytes(&[1., 2., 3., 4.]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        std::fs::write(&path, bytes).unwrap();
        let index = SafetensorsIndex::open(&path).unwrap();
        assert_eq!(index.extractable_names(), vec!["a", "b"]);
        let b = index.read("b").unwrap();
        assert_eq!(b.shape(), (2, 1));
        assert_eq!(b.values(), &[3.0, 4.0]);
    }
}
