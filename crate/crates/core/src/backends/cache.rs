//! Content-addressed response cache.
//!
//! Keys are SHA-256 digests of `(backend name, version, operation,
//! canonical request)`. Entries live in memory and, when a directory is
//! configured, as `dir/<k0k1>/<key>.json` files written via rename, so
//! concurrent writers of the same key leave one complete file behind.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::hashing::json_hash;

#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, serde_json::Value>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Serialize)]
struct KeyMaterial<'a, R: Serialize> {
    backend: &'a str,
    version: &'a str,
    operation: &'a str,
    request: &'a R,
}

impl ResponseCache {
    /// Cache kept only in memory.
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir: Some(dir),
            ..ResponseCache::default()
        })
    }

    pub fn key<R: Serialize>(backend: &str, version: &str, operation: &str, request: &R) -> String {
        json_hash(&KeyMaterial {
            backend,
            version,
            operation,
            request,
        })
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let in_memory = self.memory.read().expect("cache lock poisoned").get(key).cloned();
        let found = in_memory.or_else(|| self.read_disk(key));
        let value = found.and_then(|v| serde_json::from_value(v).ok());
        if value.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        value
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) {
        let value = serde_json::to_value(value).expect("cache values are serializable");
        if let Some(path) = self.path_for(key) {
            if let Err(e) = write_atomic(&path, &value) {
                log::warn!("cache write {} failed: {e}", path.display());
            }
        }
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), value);
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.memory.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        let shard = key.get(..2).unwrap_or("00");
        Some(dir.join(shard).join(format!("{key}.json")))
    }

    fn read_disk(&self, key: &str) -> Option<serde_json::Value> {
        let path = self.path_for(key)?;
        let text = fs::read_to_string(path).ok()?;
        let value: serde_json::Value = serde_json::from_str(&text).ok()?;
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), value.clone());
        Some(value)
    }
}

fn write_atomic(path: &Path, value: &serde_json::Value) -> std::io::Result<()> {
    let parent = path.parent().expect("cache paths have a parent");
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.{}.tmp",
        path.file_name().unwrap().to_string_lossy(),
        uuid::Uuid::new_v4()
    ));
    fs::write(&tmp, serde_json::to_vec(value)?)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_component() {
        let base = ResponseCache::key("llm", "v1", "chat", &"hello");
        assert_eq!(base, ResponseCache::key("llm", "v1", "chat", &"hello"));
        assert_ne!(base, ResponseCache::key("llm", "v2", "chat", &"hello"));
        assert_ne!(base, ResponseCache::key("llm2", "v1", "chat", &"hello"));
        assert_ne!(base, ResponseCache::key("llm", "v1", "chat", &"hello!"));
    }

    #[test]
    fn disk_entries_survive_a_new_instance() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::on_disk(dir.path()).unwrap();
        assert_eq!(cache.get::<String>("ab12"), None);
        cache.put("ab12", &"value".to_string());
        assert_eq!(cache.get::<String>("ab12").as_deref(), Some("value"));
        assert_eq!((cache.hits(), cache.misses()), (1, 1));

        let reopened = ResponseCache::on_disk(dir.path()).unwrap();
        assert_eq!(reopened.get::<String>("ab12").as_deref(), Some("value"));
        assert!(dir.path().join("ab").join("ab12.json").exists());
    }
}
