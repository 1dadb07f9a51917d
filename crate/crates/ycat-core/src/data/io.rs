//! On-disk volume format: a `<name>.json` header next to a `<name>.raw`
//! little-endian contiguous payload in C order. Images are float32, labels
//! int32; the round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::volume::{Volume, VolumeKind};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: [usize; 4],
    spacing: [f64; 3],
    dtype: String,
    kind: VolumeKind,
    order: String,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `<base>.json` and `<base>.raw`.
pub fn write_volume(v: &Volume, base: &Path) -> Result<()> {
    let dtype = match v.kind {
        VolumeKind::Image => "float32",
        VolumeKind::Label => "int32",
    };
    let header = Header {
        shape: v.shape,
        spacing: v.spacing,
        dtype: dtype.to_string(),
        kind: v.kind,
        order: "C".to_string(),
    };
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let json_path = base.with_extension("json");
    let raw_path = base.with_extension("raw");
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    match v.kind {
        VolumeKind::Image => {
            for &x in &v.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeKind::Label => {
            for &x in &v.data {
                bytes.extend_from_slice(&(x as i32).to_le_bytes());
            }
        }
    }
    fs::write(&raw_path, bytes).map_err(|e| io_err(&raw_path, e))?;
    Ok(())
}

/// Read the sidecar pair at `<base>.json` / `<base>.raw`.
pub fn read_volume(base: &Path) -> Result<Volume> {
    let json_path = base.with_extension("json");
    let raw_path = base.with_extension("raw");
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if header.order != "C" {
        return Err(Error::MalformedHeader {
            path: json_path.display().to_string(),
            detail: format!("unsupported element order `{}`", header.order),
        });
    }
    let n: usize = header.shape.iter().product();
    let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    let elem_size = match header.dtype.as_str() {
        "float32" | "int32" => 4,
        other => {
            return Err(Error::UnsupportedDtype {
                dtype: other.to_string(),
                path: json_path.display().to_string(),
            })
        }
    };
    if bytes.len() != n * elem_size {
        return Err(Error::ByteLengthMismatch {
            path: raw_path.display().to_string(),
            expected: n * elem_size,
            got: bytes.len(),
        });
    }
    let data: Vec<f32> = match header.dtype.as_str() {
        "float32" => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32)
            .collect(),
    };
    Ok(Volume {
        data,
        shape: header.shape,
        spacing: header.spacing,
        kind: header.kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform_vec;

    #[test]
    fn round_trip_image_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = uniform_vec(3, "io", 2 * 8 * 8 * 8, -5.0, 5.0)
            .into_iter()
            .map(|x| x as f32)
            .collect();
        let v = Volume::new_image(data, [2, 8, 8, 8], [1.0, 1.5, 2.0]).unwrap();
        let base = dir.path().join("vol");
        write_volume(&v, &base).unwrap();
        let r = read_volume(&base).unwrap();
        assert_eq!(v, r);
        assert_eq!(r.spacing, [1.0, 1.5, 2.0]);
    }

    #[test]
    fn round_trip_label() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..27).map(|i| (i % 4) as f32).collect();
        let v = Volume::new_label(data, [1, 3, 3, 3], [1.0, 1.0, 1.0]).unwrap();
        let base = dir.path().join("lbl");
        write_volume(&v, &base).unwrap();
        assert_eq!(read_volume(&base).unwrap(), v);
    }

    #[test]
    fn byte_length_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new_image(vec![0.0; 8 * 8 * 8], [1, 8, 8, 8], [1.0; 3]).unwrap();
        let base = dir.path().join("vol");
        write_volume(&v, &base).unwrap();
        // truncate payload to a 4^3 volume's worth
        std::fs::write(base.with_extension("raw"), vec![0u8; 4 * 64]).unwrap();
        match read_volume(&base) {
            Err(Error::ByteLengthMismatch { expected, got, .. }) => {
                assert_eq!(expected, 512 * 4);
                assert_eq!(got, 256);
            }
            other => panic!("expected byte length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_bad_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new_image(vec![0.0; 8], [1, 2, 2, 2], [1.0; 3]).unwrap();
        let base = dir.path().join("vol");
        write_volume(&v, &base).unwrap();
        std::fs::write(base.with_extension("json"), "{not json").unwrap();
        assert!(matches!(
            read_volume(&base),
            Err(Error::MalformedHeader { .. })
        ));
        let hdr = r#"{"shape":[1,2,2,2],"spacing":[1,1,1],"dtype":"float16","kind":"image","order":"C"}"#;
        std::fs::write(base.with_extension("json"), hdr).unwrap();
        assert!(matches!(
            read_volume(&base),
            Err(Error::UnsupportedDtype { .. })
        ));
    }
}
