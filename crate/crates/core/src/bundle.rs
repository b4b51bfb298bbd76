//! Versioned detector bundles: zip archives of rule tables plus a manifest.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zip::write::SimpleFileOptions;

use crate::dal::DetectorSet;
use crate::detectors::{DetectorError, ExternalApis, Registry, RuleTables};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("bundle hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("file `{0}` does not match its manifest hash")]
    FileHashMismatch(String),
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub bundle_version: String,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorBundle {
    pub version: String,
    pub tables: RuleTables,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DetectorBundle {
    pub fn new(version: &str, tables: RuleTables) -> Self {
        Self {
            version: version.to_string(),
            tables,
        }
    }

    /// The tables compiled into the crate, as version `v1`.
    pub fn builtin() -> Self {
        Self::new("v1", RuleTables::default())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            bundle_version: self.version.clone(),
            hashes: self
                .tables
                .files()
                .iter()
                .map(|(n, c)| (n.clone(), sha256_hex(c.as_bytes())))
                .collect(),
        }
    }

    /// Deterministic archive: stored entries, fixed timestamps, sorted names.
    pub fn to_zip(&self) -> Vec<u8> {
        let mut zw = zip::ZipWriter::new(Cursor::new(Vec::new()));
        let opts = SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .last_modified_time(zip::DateTime::default());
        let manifest = serde_json::to_vec_pretty(&self.manifest()).expect("manifest serializes");
        zw.start_file(MANIFEST, opts).expect("zip entry");
        zw.write_all(&manifest).expect("zip write");
        for (name, content) in self.tables.files() {
            zw.start_file(name.as_str(), opts).expect("zip entry");
            zw.write_all(content.as_bytes()).expect("zip write");
        }
        zw.finish().expect("zip finish").into_inner()
    }

    /// Verifies the archive hash before reading anything, then each file
    /// against the manifest.
    pub fn from_zip(bytes: &[u8], expected_sha256: &str) -> Result<Self, BundleError> {
        let actual = sha256_hex(bytes);
        if !actual.eq_ignore_ascii_case(expected_sha256) {
            return Err(BundleError::HashMismatch {
                expected: expected_sha256.to_string(),
                actual,
            });
        }
        let mut archive =
            zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| BundleError::Malformed(e.to_string()))?;
        let mut read = |name: &str| -> Result<String, BundleError> {
            let mut f = archive
                .by_name(name)
                .map_err(|e| BundleError::Malformed(format!("{name}: {e}")))?;
            let mut s = String::new();
            f.read_to_string(&mut s)
                .map_err(|e| BundleError::Malformed(format!("{name}: {e}")))?;
            Ok(s)
        };
        let manifest: Manifest = serde_json::from_str(&read(MANIFEST)?)
            .map_err(|e| BundleError::Malformed(format!("manifest: {e}")))?;
        let mut files = BTreeMap::new();
        for (name, hash) in &manifest.hashes {
            let content = read(name)?;
            if sha256_hex(content.as_bytes()) != *hash {
                return Err(BundleError::FileHashMismatch(name.clone()));
            }
            files.insert(name.clone(), content);
        }
        Ok(Self::new(&manifest.bundle_version, RuleTables::from_files(files)))
    }

    pub fn detector_set(&self, apis: &ExternalApis) -> Result<DetectorSet, BundleError> {
        let registry = Registry::from_tables(&self.tables, &self.version, apis)?;
        Ok(DetectorSet::new(registry, self.tables.thresholds()?))
    }
}

/// `v7` -> `v8`; anything else gets `.1` appended.
pub fn bump_version(version: &str) -> String {
    match version.strip_prefix('v').and_then(|n| n.parse::<u64>().ok()) {
        Some(n) => format!("v{}", n + 1),
        None => format!("{version}.1"),
    }
}
