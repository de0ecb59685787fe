//! Versioned binary artifacts shared by the pipeline stages.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"VSCARTF\0"
//! 8       4     format version (u32)
//! 12      4     header length H (u32)
//! 16      H     UTF-8 JSON header {kind, metadata, payload_len, payload_sha256}
//! 16+H    P     payload
//! 16+H+P  32    SHA-256 over bytes [0, 16+H+P)
//! ```
//!
//! Readers check magic, then version, then the trailing digest, then the kind.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"VSCARTF\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: String, reason: String },
    #[error("unsupported artifact version in {path}: file has v{found}, reader expects v{expected}")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("artifact kind mismatch in {path}: expected {expected}, found {found}")]
    KindMismatch {
        path: String,
        expected: ArtifactKind,
        found: ArtifactKind,
    },
    #[error("payload contains non-finite values")]
    NonFinitePayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    FeatureMatrix,
    ModelCheckpoint,
    VectorIndex,
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArtifactKind::FeatureMatrix => "feature_matrix",
            ArtifactKind::ModelCheckpoint => "model_checkpoint",
            ArtifactKind::VectorIndex => "vector_index",
        };
        f.write_str(s)
    }
}

/// The JSON header stored ahead of the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub kind: ArtifactKind,
    pub version: u32,
    pub metadata: serde_json::Value,
    pub payload_len: u64,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub header: ArtifactHeader,
    pub payload: Vec<u8>,
}

fn io_err(path: &Path, source: std::io::Error) -> ArtifactError {
    ArtifactError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize an artifact into its on-disk byte representation.
pub fn encode_artifact(kind: ArtifactKind, metadata: serde_json::Value, payload: &[u8]) -> Vec<u8> {
    let header = ArtifactHeader {
        kind,
        version: FORMAT_VERSION,
        metadata,
        payload_len: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(payload)),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Write an artifact atomically (temp file in the target directory, then rename).
pub fn write_artifact(
    path: &Path,
    kind: ArtifactKind,
    metadata: serde_json::Value,
    payload: &[u8],
) -> Result<(), ArtifactError> {
    let bytes = encode_artifact(kind, metadata, payload);
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

/// Atomically replace `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn integrity(path: &str, reason: impl Into<String>) -> ArtifactError {
    ArtifactError::Integrity {
        path: path.to_string(),
        reason: reason.into(),
    }
}

/// Parse and verify artifact bytes. `label` names the source in error messages.
pub fn decode_artifact(
    label: &str,
    bytes: &[u8],
    expected: Option<ArtifactKind>,
) -> Result<Artifact, ArtifactError> {
    if bytes.len() < 16 {
        return Err(integrity(label, "file shorter than fixed preamble"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(integrity(label, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ArtifactError::Version {
            path: label.to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len + DIGEST_LEN {
        return Err(integrity(label, "truncated header"));
    }
    let body_end = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(integrity(label, "sha-256 digest mismatch"));
    }
    let header: ArtifactHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| integrity(label, format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[16 + header_len..body_end];
    if payload.len() as u64 != header.payload_len {
        return Err(integrity(label, "payload length does not match header"));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(integrity(label, "payload digest mismatch"));
    }
    if let Some(kind) = expected {
        if header.kind != kind {
            return Err(ArtifactError::KindMismatch {
                path: label.to_string(),
                expected: kind,
                found: header.kind,
            });
        }
    }
    Ok(Artifact {
        header,
        payload: payload.to_vec(),
    })
}

pub fn read_artifact(path: &Path, expected: ArtifactKind) -> Result<Artifact, ArtifactError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_artifact(&path.display().to_string(), &bytes, Some(expected))
}

/// Read only the header, for `inspect`. The digest is still verified.
pub fn inspect_artifact(path: &Path) -> Result<ArtifactHeader, ArtifactError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(decode_artifact(&path.display().to_string(), &bytes, None)?.header)
}

/// Little-endian payload builder.
#[derive(Debug, Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64s(&mut self, values: &[f64]) -> Result<(), ArtifactError> {
        self.buf.reserve(values.len() * 8);
        for v in values {
            if !v.is_finite() {
                return Err(ArtifactError::NonFinitePayload);
            }
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn put_u32s(&mut self, values: &[u32]) {
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn put_u8s(&mut self, values: &[u8]) {
        self.buf.extend_from_slice(values);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a little-endian payload.
#[derive(Debug)]
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ArtifactError> {
        if self.pos + n > self.buf.len() {
            return Err(integrity("payload", "payload shorter than declared layout"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64, ArtifactError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ArtifactError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| integrity("payload", "overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>, ArtifactError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| integrity("payload", "overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u8s(&mut self, n: usize) -> Result<Vec<u8>, ArtifactError> {
        Ok(self.take(n)?.to_vec())
    }

    pub fn finish(self) -> Result<(), ArtifactError> {
        if self.pos != self.buf.len() {
            return Err(integrity("payload", "trailing bytes after declared layout"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_payload() -> Vec<u8> {
        let mut w = PayloadWriter::new();
        w.put_u64(3);
        w.put_f64s(&[1.0, -2.5, 3.25]).unwrap();
        w.finish()
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let payload = sample_payload();
        write_artifact(&path, ArtifactKind::FeatureMatrix, json!({"rows": 3}), &payload).unwrap();
        let art = read_artifact(&path, ArtifactKind::FeatureMatrix).unwrap();
        assert_eq!(art.payload, payload);
        assert_eq!(art.header.metadata, json!({"rows": 3}));
        let mut r = PayloadReader::new(&art.payload);
        assert_eq!(r.u64().unwrap(), 3);
        assert_eq!(r.f64s(3).unwrap(), vec![1.0, -2.5, 3.25]);
        r.finish().unwrap();
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let bytes = encode_artifact(ArtifactKind::ModelCheckpoint, json!({}), &sample_payload());
        for cut in [1, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_artifact("t", &bytes[..cut], None).unwrap_err();
            assert!(matches!(err, ArtifactError::Integrity { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bumped_version_names_both_versions() {
        let mut bytes = encode_artifact(ArtifactKind::ModelCheckpoint, json!({}), &sample_payload());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_artifact("t", &bytes, None).unwrap_err();
        match &err {
            ArtifactError::Version { found, expected, .. } => {
                assert_eq!((*found, *expected), (7, FORMAT_VERSION));
            }
            other => panic!("unexpected {other}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("v7") && msg.contains("v1"));
    }

    #[test]
    fn kind_mismatch() {
        let bytes = encode_artifact(ArtifactKind::FeatureMatrix, json!({}), &sample_payload());
        let err = decode_artifact("t", &bytes, Some(ArtifactKind::ModelCheckpoint)).unwrap_err();
        assert!(matches!(err, ArtifactError::KindMismatch { .. }));
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let bytes = encode_artifact(ArtifactKind::VectorIndex, json!({"d": 2}), &sample_payload());
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(decode_artifact("t", &b, Some(ArtifactKind::VectorIndex)).is_err(), "byte {i}");
        }
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut w = PayloadWriter::new();
        assert!(matches!(w.put_f64s(&[f64::NAN]), Err(ArtifactError::NonFinitePayload)));
    }
}
