//! Checksummed binary container shared by datasets and checkpoints.
//!
//! Layout (all integers little-endian):
//! `magic[4] | version u32 | manifest_len u64 | manifest JSON | payload_len u64 | payload | sha256[32]`
//! where the digest covers every preceding byte.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const DIGEST_LEN: usize = 32;

pub fn encode(magic: &[u8; 4], version: u32, manifest: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
    let manifest = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(4 + 4 + 8 + manifest.len() + 8 + payload.len() + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn truncated(offset: usize, what: &str) -> Error {
    Error::Integrity {
        offset: offset as u64,
        message: format!("file truncated while reading {what}"),
    }
}

fn read_u64(bytes: &[u8], at: usize, what: &str) -> Result<u64> {
    let slice = bytes.get(at..at + 8).ok_or_else(|| truncated(bytes.len(), what))?;
    Ok(u64::from_le_bytes(slice.try_into().expect("8 bytes")))
}

/// Validate framing and checksum; returns the manifest and payload.
pub fn decode<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
) -> Result<(serde_json::Value, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(truncated(bytes.len(), "header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::Integrity {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Schema(format!(
            "container version {found} is not supported (expected {version})"
        )));
    }
    let manifest_len = read_u64(bytes, 8, "manifest length")? as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated(bytes.len(), "manifest"))?;
    let payload_len = read_u64(bytes, manifest_end, "payload length")? as usize;
    let payload_start = manifest_end + 8;
    let payload_end = payload_start
        .checked_add(payload_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated(bytes.len(), "payload"))?;
    let stored = bytes
        .get(payload_end..payload_end + DIGEST_LEN)
        .ok_or_else(|| truncated(bytes.len(), "checksum"))?;
    if bytes.len() != payload_end + DIGEST_LEN {
        return Err(Error::Integrity {
            offset: (payload_end + DIGEST_LEN) as u64,
            message: "trailing bytes after checksum".to_string(),
        });
    }
    if Sha256::digest(&bytes[..payload_end]).as_slice() != stored {
        return Err(Error::Integrity {
            offset: payload_end as u64,
            message: "checksum mismatch".to_string(),
        });
    }
    let manifest = serde_json::from_slice(&bytes[16..manifest_end]).map_err(|e| Error::Integrity {
        offset: 16,
        message: format!("manifest is not valid JSON: {e}"),
    })?;
    Ok((manifest, &bytes[payload_start..payload_end]))
}

/// Write via a temporary sibling file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
