use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::LlmResponse;

/// On-disk response cache: one file per request digest, named by the hex
/// digest, holding the response as JSON.
///
/// Writes go through a temporary file and a rename, so readers never see a
/// partial entry. Concurrent writers of the same key race harmlessly since
/// their values are identical.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    seq: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            seq: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &[u8; 32]) -> PathBuf {
        self.dir.join(hex::encode(key))
    }

    /// A missing or unreadable entry is a miss.
    pub fn get(&self, key: &[u8; 32]) -> Option<LlmResponse> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(r) => Some(r),
            Err(e) => {
                tracing::warn!("ignoring corrupt cache entry {}: {e}", hex::encode(key));
                None
            }
        }
    }

    pub fn put(&self, key: &[u8; 32], response: &LlmResponse) -> std::io::Result<()> {
        let body = serde_json::to_vec(response).expect("response serializes");
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            hex::encode(key),
            std::process::id(),
            self.seq.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, self.path(key))
    }
}
