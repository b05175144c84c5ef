//! Content-addressed response cache: `<root>/<first-2-hex>/<hash>.resp`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::ChatResponse;

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Self {
            root: root.as_ref().to_path_buf(),
        }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let prefix = key.get(..2).unwrap_or(key);
        self.root.join(prefix).join(format!("{key}.resp"))
    }

    pub fn get(&self, key: &str) -> io::Result<Option<ChatResponse>> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Writes through a temp file and renames, so readers never observe a
    /// partial entry.
    pub fn put(&self, key: &str, response: &ChatResponse) -> io::Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir)?;
        let mut stored = response.clone();
        stored.cached = false;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&serde_json::to_vec_pretty(&stored).expect("response serializes"))?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}
