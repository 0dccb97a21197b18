//! Tile retrieval through an injectable transport with a content-addressed disk cache.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{static_map_url, static_map_url_without_key, TileSpec};
use crate::image::ImageTile;

/// Environment variable holding the Static Maps API key.
pub const MAPS_KEY_ENV: &str = "GEOMORT_MAPS_KEY";

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Minimal blocking HTTP GET.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String>;
}

/// `reqwest`-backed transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Network { attempts: 0, message: e.to_string() })?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String> {
        let resp = self.client.get(url).send().map_err(|e| e.without_url().to_string())?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| e.without_url().to_string())?.to_vec();
        Ok(HttpResponse { status, body })
    }
}

/// Metadata for one cached payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: String,
    pub path: PathBuf,
    pub fetched_at: u64,
    pub bytes: u64,
}

/// SHA-256 of the request URL with the API key stripped.
pub fn cache_key(spec: &TileSpec) -> String {
    hex::encode(Sha256::digest(static_map_url_without_key(spec).as_bytes()))
}

pub struct TileFetcher {
    transport: Arc<dyn Transport>,
    cache_dir: PathBuf,
    max_attempts: u32,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl TileFetcher {
    pub fn new(transport: Arc<dyn Transport>, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            transport,
            cache_dir: cache_dir.into(),
            max_attempts: 3,
            in_flight: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    pub fn cache_path(&self, spec: &TileSpec) -> PathBuf {
        self.cache_dir.join(spec.key.rel_path())
    }

    fn meta_path(png: &Path) -> PathBuf {
        png.with_extension("meta")
    }

    /// Cached entry for `spec`, if present and written for the same request.
    pub fn cached(&self, spec: &TileSpec) -> Option<CacheEntry> {
        let path = self.cache_path(spec);
        let meta = fs::read_to_string(Self::meta_path(&path)).ok()?;
        let mut parts = meta.trim().split(',');
        let key = parts.next()?.to_string();
        let fetched_at = parts.next()?.parse().ok()?;
        let bytes = parts.next()?.parse().ok()?;
        if key != cache_key(spec) || !path.exists() {
            return None;
        }
        Some(CacheEntry { key, path, fetched_at, bytes })
    }

    /// Return the decoded tile, fetching it only if the cache has no entry.
    /// Concurrent calls for the same tile share a single request.
    pub fn fetch_tile(&self, spec: &TileSpec, api_key: &str) -> Result<ImageTile> {
        let key = cache_key(spec);
        let gate = {
            let mut map = self.in_flight.lock().expect("in-flight map poisoned");
            map.entry(key.clone()).or_default().clone()
        };
        let _guard = gate.lock().expect("fetch gate poisoned");

        if let Some(entry) = self.cached(spec) {
            let bytes = fs::read(&entry.path).map_err(|e| Error::io(&entry.path, e))?;
            return decode_checked(&bytes, spec);
        }

        let url = static_map_url(spec, api_key)?;
        let mut attempts = 0;
        let resp = loop {
            attempts += 1;
            match self.transport.get(&url) {
                Ok(r) if r.status == 200 => break r,
                Ok(r) if matches!(r.status, 401 | 403 | 429) => {
                    return Err(Error::Auth { status: r.status })
                }
                Ok(r) if attempts >= self.max_attempts => {
                    return Err(Error::Network {
                        attempts,
                        message: format!("HTTP status {}", r.status),
                    })
                }
                Err(message) if attempts >= self.max_attempts => {
                    return Err(Error::Network { attempts, message })
                }
                _ => continue,
            }
        };

        let tile = decode_checked(&resp.body, spec)?;
        let path = self.cache_path(spec);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&path, &resp.body)?;
        let fetched_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = format!("{key},{fetched_at},{}\n", resp.body.len());
        write_atomic(&Self::meta_path(&path), meta.as_bytes())?;
        Ok(tile)
    }
}

fn decode_checked(bytes: &[u8], spec: &TileSpec) -> Result<ImageTile> {
    let tile = ImageTile::decode_png(bytes, spec.key.clone())?;
    if tile.width != spec.width_px as usize || tile.height != spec.height_px as usize {
        return Err(Error::CorruptResponse(format!(
            "expected {}×{} image, got {}×{}",
            spec.width_px, spec.height_px, tile.width, tile.height
        )));
    }
    Ok(tile)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp{}",
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
