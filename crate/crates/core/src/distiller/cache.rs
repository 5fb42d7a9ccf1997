use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

/// One file per prompt, named by the SHA-256 of the prompt text. Writes go
/// to a unique temporary file first and are renamed into place, so readers
/// never observe partial entries and concurrent writers of distinct keys do
/// not interfere.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            counter: AtomicU64::new(0),
        })
    }

    pub fn key(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }

    fn path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", Self::key(prompt)))
    }

    pub fn get(&self, prompt: &str) -> Option<String> {
        fs::read_to_string(self.path(prompt)).ok()
    }

    pub fn put(&self, prompt: &str, response: &str) -> std::io::Result<()> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .dir
            .join(format!(".{}.{}.{n}.tmp", Self::key(prompt), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(response.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(prompt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(cache.get("p"), None);
        cache.put("p", "answer").unwrap();
        assert_eq!(cache.get("p").as_deref(), Some("answer"));
        let leftovers = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .count();
        assert_eq!(leftovers, 0);
    }

    #[test]
    fn concurrent_distinct_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for t in 0..4 {
                let cache = &cache;
                s.spawn(move || {
                    for i in 0..25 {
                        cache.put(&format!("{t}-{i}"), &format!("r{t}{i}")).unwrap();
                    }
                });
            }
        });
        for t in 0..4 {
            for i in 0..25 {
                assert_eq!(cache.get(&format!("{t}-{i}")).unwrap(), format!("r{t}{i}"));
            }
        }
    }
}
