//! Raw volume files with a JSON header.
//!
//! A volume named `case` is stored as `case.json`:
//!
//! ```json
//! {"dims": [32, 32, 32], "spacing": [1.0, 1.0, 1.0], "dtype": "f32", "order": "row-major"}
//! ```
//!
//! next to `case.raw`, the voxels in little-endian byte order with x varying
//! fastest. Masks use `"dtype": "u8"` and carry `"num_classes"`.

use std::fs;
use std::path::{Path, PathBuf};

use kmaxseg_core::data::{LabelMask, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u8>,
}

const ORDER: &str = "row-major";

/// Header and payload paths for a volume path with or without an extension.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let (header_path, _) = file_pair(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| {
        let message = if e.is_data() && e.to_string().contains("unknown variant") {
            format!("unsupported dtype ({e}); expected \"f32\" or \"u8\"")
        } else {
            format!("invalid header at line {} column {}: {e}", e.line(), e.column())
        };
        Error::format(&header_path, message)
    })?;
    if header.order != ORDER {
        return Err(Error::format(&header_path, format!("unsupported order {:?}; expected {ORDER:?}", header.order)));
    }
    Ok(header)
}

fn read_payload(path: &Path, header: &Header, dtype: Dtype) -> Result<Vec<u8>> {
    let (header_path, raw_path) = file_pair(path);
    if header.dtype != dtype {
        return Err(Error::format(&header_path, format!("expected dtype {dtype:?}, found {:?}", header.dtype)));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.dims.iter().product::<usize>() * dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            &raw_path,
            format!("payload has {} bytes, header {:?} {:?} needs {expected}", bytes.len(), header.dims, dtype),
        ));
    }
    Ok(bytes)
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let (header_path, raw_path) = file_pair(path);
    if let Some(dir) = header_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&header_path, text + "\n").map_err(|e| Error::io(&header_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let bytes = read_payload(path, &header, Dtype::F32)?;
    let voxels = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Volume::new(header.dims, header.spacing, voxels).map_err(|e| Error::format(file_pair(path).0, e.to_string()))
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let header = Header {
        dims: volume.dims(),
        spacing: volume.spacing(),
        dtype: Dtype::F32,
        order: ORDER.into(),
        num_classes: None,
    };
    let payload: Vec<u8> = volume.voxels().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &header, &payload)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let header = read_header(path)?;
    let labels = read_payload(path, &header, Dtype::U8)?;
    let header_path = file_pair(path).0;
    let num_classes = match header.num_classes {
        Some(k) => k,
        None => labels.iter().copied().max().unwrap_or(0).saturating_add(1).max(2),
    };
    LabelMask::new(header.dims, header.spacing, num_classes, labels).map_err(|e| Error::format(header_path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let header = Header {
        dims: mask.dims(),
        spacing: mask.spacing(),
        dtype: Dtype::U8,
        order: ORDER.into(),
        num_classes: Some(mask.num_classes()),
    };
    write_pair(path, &header, mask.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use kmaxseg_core::data::generate_phantom;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (v, m) = generate_phantom(1, [16, 17, 18], 3).unwrap();
        write_volume(&dir.path().join("a"), &v).unwrap();
        write_mask(&dir.path().join("a_mask"), &m).unwrap();
        assert_eq!(read_volume(&dir.path().join("a")).unwrap(), v);
        assert_eq!(read_mask(&dir.path().join("a_mask.json")).unwrap(), m);
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let (v, _) = generate_phantom(1, [16; 3], 2).unwrap();
        let p = dir.path().join("a");
        write_volume(&p, &v).unwrap();
        fs::write(p.with_extension("raw"), [0u8; 10]).unwrap();
        let msg = read_volume(&p).unwrap_err().to_string();
        assert!(msg.contains("10 bytes") && msg.contains("16384"), "{msg}");
    }

    #[test]
    fn unknown_dtype_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        fs::write(
            p.with_extension("json"),
            r#"{"dims":[1,1,1],"spacing":[1,1,1],"dtype":"f64","order":"row-major"}"#,
        )
        .unwrap();
        let err = read_volume(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn mask_read_as_volume_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (_, m) = generate_phantom(1, [16; 3], 2).unwrap();
        let p = dir.path().join("m");
        write_mask(&p, &m).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
    }
}
