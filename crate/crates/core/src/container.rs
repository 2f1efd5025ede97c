//! The "STCH1" binary container.
//!
//! Layout: 5-byte magic `STCH1`, 8-byte little-endian header length, UTF-8
//! JSON header, then the packed little-endian payload. The header carries a
//! format version, a `kind` tag, kind-specific metadata under `spec`, the
//! tensor manifest, and a CRC32 of the payload. Backbone checkpoints, stitch
//! layers, feature caches, and datasets all reuse this one container.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"STCH1";
pub const FORMAT_VERSION: u32 = 1;

/// One manifest row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub spec: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
    pub payload_crc32: u32,
}

/// A named payload section before packing / after unpacking.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Section {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Section {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            bytes: t.to_le_bytes(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Container(format!(
                "section '{}' has dtype {}, expected {}",
                self.name, self.dtype, T::DTYPE
            )));
        }
        Tensor::from_le_bytes(self.shape.clone(), &self.bytes)
    }

    pub fn from_u32s(name: &str, values: &[u32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Section {
            name: name.to_string(),
            dtype: "u32".to_string(),
            shape: vec![values.len().max(1)],
            bytes,
        }
    }

    pub fn to_u32s(&self) -> Result<Vec<u32>> {
        if self.dtype != "u32" || self.bytes.len() % 4 != 0 {
            return Err(Error::Container(format!("section '{}' is not u32", self.name)));
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn from_u8s(name: &str, values: &[u8], shape: Vec<usize>) -> Self {
        Section {
            name: name.to_string(),
            dtype: "u8".to_string(),
            shape,
            bytes: values.to_vec(),
        }
    }
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "u8" => Ok(1),
        "f32" | "u32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Container(format!("unknown dtype '{other}'"))),
    }
}

/// CRC32 (IEEE, reflected 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    const POLY: u32 = 0xEDB8_8320;
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut crc = !0u32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Serialize a container to bytes.
pub fn to_bytes(kind: &str, spec: serde_json::Value, sections: &[Section]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut manifest = Vec::with_capacity(sections.len());
    for s in sections {
        let expect = s.shape.iter().product::<usize>() * dtype_size(&s.dtype)?;
        if expect != s.bytes.len() {
            return Err(Error::Container(format!(
                "section '{}': {} bytes does not match shape {:?} ({expect})",
                s.name,
                s.bytes.len(),
                s.shape
            )));
        }
        manifest.push(ManifestEntry {
            name: s.name.clone(),
            dtype: s.dtype.clone(),
            shape: s.shape.clone(),
            byte_offset: payload.len() as u64,
            byte_len: s.bytes.len() as u64,
        });
        payload.extend_from_slice(&s.bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        spec,
        manifest,
        payload_crc32: crc32(&payload),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(5 + 8 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a container from bytes, verifying magic, version, manifest bounds,
/// and the payload checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<(Header, Vec<Section>)> {
    if bytes.len() < 13 {
        return Err(Error::Container("truncated file (no header)".into()));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::Container("bad magic, not an STCH1 container".into()));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    if bytes.len() < 13 + header_len {
        return Err(Error::Container("truncated file (header cut short)".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[13..13 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Container(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[13 + header_len..];
    let declared: u64 = header
        .manifest
        .iter()
        .map(|e| e.byte_len)
        .sum();
    if declared != payload.len() as u64 {
        return Err(Error::Container(format!(
            "manifest declares {declared} payload bytes, file has {}",
            payload.len()
        )));
    }
    if crc32(payload) != header.payload_crc32 {
        return Err(Error::Container("payload checksum mismatch".into()));
    }
    let mut sections = Vec::with_capacity(header.manifest.len());
    for e in &header.manifest {
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        if end > payload.len() {
            return Err(Error::Container(format!("section '{}' out of bounds", e.name)));
        }
        let expect = e.shape.iter().product::<usize>() * dtype_size(&e.dtype)?;
        if expect != e.byte_len as usize {
            return Err(Error::Container(format!(
                "section '{}': manifest length {} disagrees with shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        sections.push(Section {
            name: e.name.clone(),
            dtype: e.dtype.clone(),
            shape: e.shape.clone(),
            bytes: payload[start..end].to_vec(),
        });
    }
    Ok((header, sections))
}

pub fn save(path: &Path, kind: &str, spec: serde_json::Value, sections: &[Section]) -> Result<()> {
    let bytes = to_bytes(kind, spec, sections)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // Write-then-rename so interrupted writes leave a quarantined partial
    // instead of a plausible-looking container.
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Header, Vec<Section>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Find a section by name.
pub fn section<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section> {
    sections
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Container(format!("missing section '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_sections() -> Vec<Section> {
        vec![
            Section::from_tensor("a", &Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32)),
            Section::from_u32s("idx", &[5, 7, 9]),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let spec = serde_json::json!({"hello": 1, "zz": [1, 2]});
        let b1 = to_bytes("test", spec.clone(), &sample_sections()).unwrap();
        let (h, secs) = from_bytes(&b1).unwrap();
        let b2 = to_bytes(&h.kind, h.spec.clone(), &secs).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn truncated_file_is_an_explicit_error() {
        let b = to_bytes("test", serde_json::json!({}), &sample_sections()).unwrap();
        let err = from_bytes(&b[..b.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("manifest declares"), "{err}");
        let err2 = from_bytes(&b[..7]).unwrap_err().to_string();
        assert!(err2.contains("truncated"), "{err2}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut b = to_bytes("test", serde_json::json!({}), &sample_sections()).unwrap();
        let n = b.len();
        b[n - 1] ^= 0xFF;
        let err = from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let mut b = to_bytes("test", serde_json::json!({}), &[]).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        // Bump version inside the JSON header.
        let hl = u64::from_le_bytes(b[5..13].try_into().unwrap()) as usize;
        let json = String::from_utf8(b[13..13 + hl].to_vec()).unwrap();
        let bumped = json.replace("\"format_version\":1", "\"format_version\":9");
        assert_eq!(json.len(), bumped.len());
        b[13..13 + hl].copy_from_slice(bumped.as_bytes());
        let err = from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn crc32_known_vector() {
        // "123456789" -> 0xCBF43926 (standard check value)
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}
