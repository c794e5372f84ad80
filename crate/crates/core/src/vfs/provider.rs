//! Read-only underlay sources.
//!
//! A provider publishes a manifest up front and serves file bodies on demand.
//! The overlay calls [`UnderlayProvider::fetch`] at most once per path.
//!
//! The HTTP provider expects `BASE/.manifest.json` to hold a JSON array of
//! `{"p": "/path", "s": size, "k": "f" | "d"}` and serves each file at `BASE/path`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManifestKind {
    #[serde(rename = "f")]
    File,
    #[serde(rename = "d")]
    Dir,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "p")]
    pub path: String,
    #[serde(rename = "s")]
    pub size: u64,
    #[serde(rename = "k")]
    pub kind: ManifestKind,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("underlay I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("underlay request failed: {0}")]
    Http(String),
    #[error("bad underlay manifest: {0}")]
    Manifest(String),
    #[error("unsupported underlay spec {0:?} (expected dir:PATH or http://...)")]
    BadSpec(String),
}

pub trait UnderlayProvider: Send {
    fn manifest(&self) -> Result<Vec<ManifestEntry>, ProviderError>;
    fn fetch(&self, path: &str) -> Result<Vec<u8>, ProviderError>;
}

/// Parses `dir:PATH` or an `http(s)://` base URL.
pub fn provider_from_spec(spec: &str) -> Result<Box<dyn UnderlayProvider>, ProviderError> {
    if let Some(dir) = spec.strip_prefix("dir:") {
        Ok(Box::new(DirProvider::new(dir)))
    } else if spec.starts_with("http://") || spec.starts_with("https://") {
        Ok(Box::new(HttpProvider::new(spec)))
    } else {
        Err(ProviderError::BadSpec(spec.to_owned()))
    }
}

/// Serves a host directory; the manifest comes from walking it.
pub struct DirProvider {
    root: PathBuf,
}

impl DirProvider {
    pub fn new(root: impl AsRef<Path>) -> Self {
        DirProvider { root: root.as_ref().to_path_buf() }
    }
}

impl UnderlayProvider for DirProvider {
    fn manifest(&self) -> Result<Vec<ManifestEntry>, ProviderError> {
        if !self.root.is_dir() {
            return Err(ProviderError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} is not a directory", self.root.display()),
            )));
        }
        let mut out = Vec::new();
        for entry in walkdir::WalkDir::new(&self.root).follow_links(true).min_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| ProviderError::Io(e.into()))?;
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let mut path = String::new();
            for c in rel.components() {
                path.push('/');
                path.push_str(&c.as_os_str().to_string_lossy());
            }
            let meta = entry.metadata().map_err(|e| ProviderError::Io(e.into()))?;
            let kind = if meta.is_dir() { ManifestKind::Dir } else { ManifestKind::File };
            let size = if meta.is_dir() { 0 } else { meta.len() };
            out.push(ManifestEntry { path, size, kind });
        }
        Ok(out)
    }

    fn fetch(&self, path: &str) -> Result<Vec<u8>, ProviderError> {
        Ok(std::fs::read(self.root.join(path.trim_start_matches('/')))?)
    }
}

/// Fetches the manifest and file bodies over HTTP.
pub struct HttpProvider {
    base: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(std::time::Duration::from_secs(30)).build();
        HttpProvider { base: base.trim_end_matches('/').to_owned(), agent }
    }

    fn get(&self, path: &str) -> Result<Vec<u8>, ProviderError> {
        let url = format!("{}{}", self.base, path);
        let resp = self.agent.get(&url).call().map_err(|e| ProviderError::Http(e.to_string()))?;
        let mut body = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader(), &mut body)?;
        Ok(body)
    }
}

impl UnderlayProvider for HttpProvider {
    fn manifest(&self) -> Result<Vec<ManifestEntry>, ProviderError> {
        let body = self.get("/.manifest.json")?;
        serde_json::from_slice(&body).map_err(|e| ProviderError::Manifest(e.to_string()))
    }

    fn fetch(&self, path: &str) -> Result<Vec<u8>, ProviderError> {
        self.get(path)
    }
}

/// In-memory provider that counts fetches per path.
#[derive(Clone, Default)]
pub struct MemProvider {
    files: BTreeMap<String, Vec<u8>>,
    dirs: Vec<String>,
    fetches: Arc<Mutex<HashMap<String, usize>>>,
}

impl MemProvider {
    pub fn new() -> Self {
        MemProvider::default()
    }

    pub fn with_file(mut self, path: &str, data: impl Into<Vec<u8>>) -> Self {
        self.files.insert(path.to_owned(), data.into());
        self
    }

    pub fn with_dir(mut self, path: &str) -> Self {
        self.dirs.push(path.to_owned());
        self
    }

    /// Shared view of the per-path fetch counters.
    pub fn fetch_counts(&self) -> Arc<Mutex<HashMap<String, usize>>> {
        self.fetches.clone()
    }

    pub fn total_fetches(&self) -> usize {
        self.fetches.lock().unwrap().values().sum()
    }
}

impl UnderlayProvider for MemProvider {
    fn manifest(&self) -> Result<Vec<ManifestEntry>, ProviderError> {
        let dirs = self.dirs.iter().map(|d| ManifestEntry { path: d.clone(), size: 0, kind: ManifestKind::Dir });
        let files = self
            .files
            .iter()
            .map(|(p, d)| ManifestEntry { path: p.clone(), size: d.len() as u64, kind: ManifestKind::File });
        Ok(dirs.chain(files).collect())
    }

    fn fetch(&self, path: &str) -> Result<Vec<u8>, ProviderError> {
        *self.fetches.lock().unwrap().entry(path.to_owned()).or_default() += 1;
        self.files
            .get(path)
            .cloned()
            .ok_or_else(|| ProviderError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, path.to_owned())))
    }
}
