//! Key-document storage behind the data access layer.
//!
//! Documents are opaque byte bodies addressed by `(collection, key)` and
//! carry a per-key version used for compare-and-swap.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("document `{collection}/{key}` not found")]
    NotFound { collection: String, key: String },
    #[error("document `{collection}/{key}` already exists")]
    Exists { collection: String, key: String },
    #[error("version conflict: expected {expected:?}, found {found:?}")]
    VersionConflict {
        expected: Option<u64>,
        found: Option<u64>,
    },
    #[error("store capacity exceeded, retry after {retry_after_ms} ms")]
    CapacityExceeded { retry_after_ms: u64 },
    #[error("store unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredDoc {
    pub body: Vec<u8>,
    pub version: u64,
}

pub trait DocumentStore: Send + Sync {
    fn get(&self, collection: &str, key: &str) -> Result<Option<StoredDoc>, StoreError>;

    /// Inserts or replaces; returns the new version.
    fn put(&self, collection: &str, key: &str, body: Vec<u8>) -> Result<u64, StoreError>;

    /// Writes only if the current version equals `expected` (`None` = absent).
    fn compare_and_swap(
        &self,
        collection: &str,
        key: &str,
        expected: Option<u64>,
        body: Vec<u8>,
    ) -> Result<u64, StoreError>;

    fn delete(&self, collection: &str, key: &str) -> Result<bool, StoreError>;

    fn keys(&self, collection: &str) -> Result<Vec<String>, StoreError>;

    /// Every document in every collection, as `(collection, key, body)`.
    fn scan(&self) -> Result<Vec<(String, String, Vec<u8>)>, StoreError>;

    fn insert(&self, collection: &str, key: &str, body: Vec<u8>) -> Result<u64, StoreError> {
        self.compare_and_swap(collection, key, None, body)
            .map_err(|err| match err {
                StoreError::VersionConflict { .. } => StoreError::Exists {
                    collection: collection.to_string(),
                    key: key.to_string(),
                },
                other => other,
            })
    }
}

type Key = (String, String);

/// In-process store with an optional document-count bound.
#[derive(Default)]
pub struct MemoryStore {
    docs: RwLock<BTreeMap<Key, StoredDoc>>,
    capacity: Option<usize>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(limit: usize) -> Self {
        Self {
            docs: RwLock::new(BTreeMap::new()),
            capacity: Some(limit),
        }
    }

    pub fn len(&self) -> usize {
        self.docs.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_capacity(&self, docs: &BTreeMap<Key, StoredDoc>, key: &Key) -> Result<(), StoreError> {
        match self.capacity {
            Some(limit) if docs.len() >= limit && !docs.contains_key(key) => {
                Err(StoreError::CapacityExceeded {
                    retry_after_ms: 1_000,
                })
            }
            _ => Ok(()),
        }
    }
}

impl DocumentStore for MemoryStore {
    fn get(&self, collection: &str, key: &str) -> Result<Option<StoredDoc>, StoreError> {
        Ok(self
            .docs
            .read()
            .get(&(collection.to_string(), key.to_string()))
            .cloned())
    }

    fn put(&self, collection: &str, key: &str, body: Vec<u8>) -> Result<u64, StoreError> {
        let mut docs = self.docs.write();
        let k = (collection.to_string(), key.to_string());
        self.check_capacity(&docs, &k)?;
        let version = docs.get(&k).map_or(1, |d| d.version + 1);
        docs.insert(k, StoredDoc { body, version });
        Ok(version)
    }

    fn compare_and_swap(
        &self,
        collection: &str,
        key: &str,
        expected: Option<u64>,
        body: Vec<u8>,
    ) -> Result<u64, StoreError> {
        let mut docs = self.docs.write();
        let k = (collection.to_string(), key.to_string());
        let found = docs.get(&k).map(|d| d.version);
        if found != expected {
            return Err(StoreError::VersionConflict { expected, found });
        }
        self.check_capacity(&docs, &k)?;
        let version = found.map_or(1, |v| v + 1);
        docs.insert(k, StoredDoc { body, version });
        Ok(version)
    }

    fn delete(&self, collection: &str, key: &str) -> Result<bool, StoreError> {
        Ok(self
            .docs
            .write()
            .remove(&(collection.to_string(), key.to_string()))
            .is_some())
    }

    fn keys(&self, collection: &str) -> Result<Vec<String>, StoreError> {
        Ok(self
            .docs
            .read()
            .keys()
            .filter(|(c, _)| c == collection)
            .map(|(_, k)| k.clone())
            .collect())
    }

    fn scan(&self) -> Result<Vec<(String, String, Vec<u8>)>, StoreError> {
        Ok(self
            .docs
            .read()
            .iter()
            .map(|((c, k), d)| (c.clone(), k.clone(), d.body.clone()))
            .collect())
    }
}

/// Write-through directory store: one file per document, written via
/// rename so a crash never leaves a torn document behind. An in-memory
/// index serves reads.
pub struct FileStore {
    root: PathBuf,
    index: MemoryStore,
}

impl FileStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err)?;
        let index = MemoryStore::new();
        for entry in fs::read_dir(&root).map_err(io_err)? {
            let entry = entry.map_err(io_err)?;
            if !entry.file_type().map_err(io_err)?.is_dir() {
                continue;
            }
            let collection = decode_name(&entry.file_name().to_string_lossy())?;
            for doc in fs::read_dir(entry.path()).map_err(io_err)? {
                let doc = doc.map_err(io_err)?;
                let name = doc.file_name().to_string_lossy().to_string();
                let Some((stem, version)) = name.rsplit_once('.') else {
                    continue;
                };
                let Ok(version) = version.parse::<u64>() else {
                    continue;
                };
                let key = decode_name(stem)?;
                let body = fs::read(doc.path()).map_err(io_err)?;
                index
                    .docs
                    .write()
                    .insert((collection.clone(), key), StoredDoc { body, version });
            }
        }
        Ok(Self { root, index })
    }

    fn dir(&self, collection: &str) -> PathBuf {
        self.root.join(hex::encode(collection))
    }

    fn persist(&self, collection: &str, key: &str, old: Option<u64>, new: u64) -> Result<(), StoreError> {
        let dir = self.dir(collection);
        fs::create_dir_all(&dir).map_err(io_err)?;
        let doc = self.index.get(collection, key)?.expect("just written");
        let stem = hex::encode(key);
        let tmp = dir.join(format!("{stem}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&doc.body).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        fs::rename(&tmp, dir.join(format!("{stem}.{new}"))).map_err(io_err)?;
        if let Some(old) = old {
            let _ = fs::remove_file(dir.join(format!("{stem}.{old}")));
        }
        Ok(())
    }
}

fn io_err(err: std::io::Error) -> StoreError {
    StoreError::Unavailable(err.to_string())
}

fn decode_name(name: &str) -> Result<String, StoreError> {
    let raw = hex::decode(name).map_err(|e| StoreError::Unavailable(e.to_string()))?;
    String::from_utf8(raw).map_err(|e| StoreError::Unavailable(e.to_string()))
}

impl DocumentStore for FileStore {
    fn get(&self, collection: &str, key: &str) -> Result<Option<StoredDoc>, StoreError> {
        self.index.get(collection, key)
    }

    fn put(&self, collection: &str, key: &str, body: Vec<u8>) -> Result<u64, StoreError> {
        let old = self.index.get(collection, key)?.map(|d| d.version);
        let v = self.index.put(collection, key, body)?;
        self.persist(collection, key, old, v)?;
        Ok(v)
    }

    fn compare_and_swap(
        &self,
        collection: &str,
        key: &str,
        expected: Option<u64>,
        body: Vec<u8>,
    ) -> Result<u64, StoreError> {
        let v = self.index.compare_and_swap(collection, key, expected, body)?;
        self.persist(collection, key, expected, v)?;
        Ok(v)
    }

    fn delete(&self, collection: &str, key: &str) -> Result<bool, StoreError> {
        let old = self.index.get(collection, key)?;
        let removed = self.index.delete(collection, key)?;
        if let Some(old) = old {
            let path = self
                .dir(collection)
                .join(format!("{}.{}", hex::encode(key), old.version));
            fs::remove_file(path).map_err(io_err)?;
        }
        Ok(removed)
    }

    fn keys(&self, collection: &str) -> Result<Vec<String>, StoreError> {
        self.index.keys(collection)
    }

    fn scan(&self) -> Result<Vec<(String, String, Vec<u8>)>, StoreError> {
        self.index.scan()
    }
}
