//! OpenML dataset retrieval with a local content-addressed cache.
//!
//! `fetch_openml` downloads a dataset's CSV export into `cache_dir` as
//! `<id>.csv` alongside `<id>.meta.json` recording the source URL and a
//! SHA-256 digest. Subsequent calls verify the digest and return the cached
//! file without touching the network. Concurrent fetchers serialize on an
//! advisory `<id>.lock` file.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_BASE_URL: &str = "https://www.openml.org";
/// Environment override for the API base URL (useful for mirrors and tests).
pub const BASE_URL_ENV: &str = "IGNNET_OPENML_URL";

const LOCK_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("fetch failed for dataset {id}: {message}")]
    Fetch { id: u64, message: String },
    #[error("integrity failure for dataset {id}: {message}")]
    Integrity { id: u64, message: String },
    #[error("lock timeout waiting for {0}")]
    LockTimeout(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CacheMeta {
    pub id: u64,
    pub name: String,
    pub sha256: String,
    pub source_url: String,
    pub fetched_at: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn acquire_lock(path: PathBuf) -> Result<LockGuard, FetchError> {
    let started = Instant::now();
    loop {
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => return Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                if started.elapsed() > LOCK_TIMEOUT {
                    return Err(FetchError::LockTimeout(path));
                }
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn cached_path(cache_dir: &Path, id: u64) -> (PathBuf, PathBuf) {
    (
        cache_dir.join(format!("{id}.csv")),
        cache_dir.join(format!("{id}.meta.json")),
    )
}

fn verify_cache(id: u64, csv: &Path, meta: &Path) -> Result<Option<PathBuf>, FetchError> {
    if !csv.is_file() || !meta.is_file() {
        return Ok(None);
    }
    let meta: CacheMeta = serde_json::from_slice(&std::fs::read(meta)?).map_err(|e| {
        FetchError::Integrity {
            id,
            message: format!("unreadable cache metadata: {e}"),
        }
    })?;
    let digest = sha256_hex(&std::fs::read(csv)?);
    if digest != meta.sha256 {
        return Err(FetchError::Integrity {
            id,
            message: format!("digest {digest} does not match recorded {}", meta.sha256),
        });
    }
    Ok(Some(csv.to_path_buf()))
}

fn http_get(url: &str, id: u64) -> Result<Vec<u8>, FetchError> {
    let response = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(120))
        .build()
        .get(url)
        .call()
        .map_err(|e| FetchError::Fetch {
            id,
            message: format!("GET {url}: {e}"),
        })?;
    let mut body = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut body)
        .map_err(|e| FetchError::Fetch {
            id,
            message: format!("reading {url}: {e}"),
        })?;
    Ok(body)
}

/// Fetches dataset `id` from OpenML (or a mirror given by `base_url` /
/// `$IGNNET_OPENML_URL`) into `cache_dir`, returning the path to the cached
/// CSV. A warm, digest-valid cache is returned without any network request.
pub fn fetch_openml(
    id: u64,
    cache_dir: &Path,
    base_url: Option<&str>,
) -> Result<PathBuf, FetchError> {
    std::fs::create_dir_all(cache_dir)?;
    let (csv_path, meta_path) = cached_path(cache_dir, id);
    if let Some(hit) = verify_cache(id, &csv_path, &meta_path)? {
        return Ok(hit);
    }
    let _lock = acquire_lock(cache_dir.join(format!("{id}.lock")))?;
    // another process may have populated the cache while we waited
    if let Some(hit) = verify_cache(id, &csv_path, &meta_path)? {
        return Ok(hit);
    }

    let env_base = std::env::var(BASE_URL_ENV).ok();
    let base = base_url
        .or(env_base.as_deref())
        .unwrap_or(DEFAULT_BASE_URL)
        .trim_end_matches('/')
        .to_string();

    let desc_url = format!("{base}/api/v1/json/data/{id}");
    let desc_body = http_get(&desc_url, id)?;
    let desc: serde_json::Value =
        serde_json::from_slice(&desc_body).map_err(|e| FetchError::Fetch {
            id,
            message: format!("invalid dataset description: {e}"),
        })?;
    let description = &desc["data_set_description"];
    let name = description["name"].as_str().unwrap_or("dataset").to_string();
    let file_id = description["file_id"]
        .as_str()
        .map(|s| s.to_string())
        .or_else(|| description["file_id"].as_u64().map(|v| v.to_string()))
        .ok_or_else(|| FetchError::Fetch {
            id,
            message: "dataset description lacks a file_id".into(),
        })?;

    let csv_url = format!("{base}/data/v1/get_csv/{file_id}/{name}.csv");
    let body = http_get(&csv_url, id)?;
    if body.is_empty() {
        return Err(FetchError::Fetch {
            id,
            message: format!("empty response from {csv_url}"),
        });
    }

    let digest = sha256_hex(&body);
    let tmp = cache_dir.join(format!("{id}.csv.tmp"));
    std::fs::write(&tmp, &body)?;
    std::fs::rename(&tmp, &csv_path)?;
    let meta = CacheMeta {
        id,
        name,
        sha256: digest,
        source_url: csv_url,
        fetched_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta).unwrap())?;
    Ok(csv_path)
}

/// Seeds the cache with a local CSV as if it had been downloaded, writing the
/// digest metadata `fetch_openml` expects. Used by offline tooling and tests.
pub fn seed_cache(
    id: u64,
    name: &str,
    csv_bytes: &[u8],
    cache_dir: &Path,
) -> Result<PathBuf, FetchError> {
    std::fs::create_dir_all(cache_dir)?;
    let (csv_path, meta_path) = cached_path(cache_dir, id);
    std::fs::write(&csv_path, csv_bytes)?;
    let meta = CacheMeta {
        id,
        name: name.to_string(),
        sha256: sha256_hex(csv_bytes),
        source_url: format!("seeded://{id}"),
        fetched_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta).unwrap())?;
    Ok(csv_path)
}
