//! Disk cache for chat exchanges, keyed by request content.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::hash::sha256_hex;
use crate::{Error, Result};

use super::ChatRequest;

/// One recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedExchange {
    pub cache_key: String,
    pub response: String,
    /// Seconds since the Unix epoch at write time; informational only.
    pub created_at: u64,
}

/// Digest of everything that determines a response: template, rendered
/// messages, model, sampling, and seed.
pub fn cache_key(request: &ChatRequest) -> String {
    let payload = serde_json::json!({
        "template_id": request.template_id,
        "system": request.system_message,
        "user": request.user_message,
        "model": request.provider_model_id,
        "sampling": request.sampling,
        "seed": request.seed,
    });
    sha256_hex(payload.to_string().as_bytes())
}

/// A directory of one JSON file per exchange. Writes go through a
/// temporary file and rename, so concurrent readers never observe a
/// partial entry.
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(DiskCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CachedExchange>> {
        let path = self.path_for(key);
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let exchange: CachedExchange = serde_json::from_str(&text).map_err(|e| {
                    Error::Integrity(format!(
                        "corrupt cache entry {}: {e}",
                        path.display()
                    ))
                })?;
                Ok(Some(exchange))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, key: &str, response: &str) -> Result<()> {
        let exchange = CachedExchange {
            cache_key: key.to_string(),
            response: response.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let body = serde_json::to_string_pretty(&exchange)?;
        let tmp = self.dir.join(format!(
            ".{key}.tmp.{}.{}",
            std::process::id(),
            exchange.created_at
        ));
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, self.path_for(key))?;
        Ok(())
    }
}
