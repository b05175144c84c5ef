//! Persistent prompt lineage: one immutable JSON file per version plus an
//! index recording creation order and validation scores.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::edits::apply_to_text;
use super::version::{CreatedAt, PromptVersion};

pub const LINEAGE_FILE: &str = "lineage.json";
const LINEAGE_SCHEMA: &str = "neucomp.prompt-lineage/v1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt store is corrupt: {0}")]
    Corrupt(String),
    #[error("unknown prompt version {0}")]
    UnknownVersion(String),
    #[error("store at {dir} is rooted at {existing}, not {requested}")]
    RootMismatch {
        dir: String,
        existing: String,
        requested: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LineageEntry {
    version_id: String,
    parent_id: Option<String>,
    created_at: CreatedAt,
    validation_score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LineageIndex {
    schema: String,
    root: String,
    versions: Vec<LineageEntry>,
}

/// Writes through a temporary file in the same directory and renames it.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PromptStore {
    dir: Option<PathBuf>,
    /// Creation order; index 0 is the root.
    versions: Vec<PromptVersion>,
}

impl PromptStore {
    pub fn in_memory(root: PromptVersion) -> Self {
        Self {
            dir: None,
            versions: vec![root],
        }
    }

    /// Opens the store at `dir` if it exists with the same root, otherwise
    /// creates it.
    pub fn create(dir: &Path, root: PromptVersion) -> Result<Self, StoreError> {
        if dir.join(LINEAGE_FILE).exists() {
            let store = Self::open(dir)?;
            if store.root().version_id != root.version_id {
                return Err(StoreError::RootMismatch {
                    dir: dir.display().to_string(),
                    existing: store.root().version_id.clone(),
                    requested: root.version_id,
                });
            }
            return Ok(store);
        }
        let store = Self {
            dir: Some(dir.to_path_buf()),
            versions: vec![root],
        };
        store.write_version(&store.versions[0])?;
        store.save_index()?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let index_path = dir.join(LINEAGE_FILE);
        let raw = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
        let index: LineageIndex =
            serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt(format!("{LINEAGE_FILE}: {e}")))?;
        if index.schema != LINEAGE_SCHEMA {
            return Err(StoreError::Corrupt(format!("unsupported schema {:?}", index.schema)));
        }
        let mut versions = Vec::with_capacity(index.versions.len());
        for entry in index.versions {
            let path = Self::version_path(dir, &entry.version_id);
            let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
            let mut v: PromptVersion = serde_json::from_str(&raw)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))?;
            if v.version_id != entry.version_id
                || v.parent_id != entry.parent_id
                || v.created_at != entry.created_at
                || PromptVersion::compute_id(v.parent_id.as_deref(), v.created_at, &v.text) != v.version_id
            {
                return Err(StoreError::Corrupt(format!("version {} does not match its content", entry.version_id)));
            }
            v.validation_score = entry.validation_score;
            versions.push(v);
        }
        let store = Self {
            dir: Some(dir.to_path_buf()),
            versions,
        };
        if store.versions.first().map(|v| v.version_id.as_str()) != Some(index.root.as_str()) {
            return Err(StoreError::Corrupt("first version is not the root".into()));
        }
        store.verify_tree()?;
        Ok(store)
    }

    fn version_path(dir: &Path, id: &str) -> PathBuf {
        dir.join("versions").join(format!("{id}.json"))
    }

    fn write_version(&self, v: &PromptVersion) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = Self::version_path(dir, &v.version_id);
        if path.exists() {
            return Ok(());
        }
        let mut stored = v.clone();
        stored.validation_score = None;
        write_atomic(&path, &serde_json::to_vec_pretty(&stored).expect("version serializes"))
    }

    fn save_index(&self) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let index = LineageIndex {
            schema: LINEAGE_SCHEMA.into(),
            root: self.root().version_id.clone(),
            versions: self
                .versions
                .iter()
                .map(|v| LineageEntry {
                    version_id: v.version_id.clone(),
                    parent_id: v.parent_id.clone(),
                    created_at: v.created_at,
                    validation_score: v.validation_score,
                })
                .collect(),
        };
        write_atomic(
            &dir.join(LINEAGE_FILE),
            &serde_json::to_vec_pretty(&index).expect("lineage serializes"),
        )
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn root(&self) -> &PromptVersion {
        &self.versions[0]
    }

    pub fn versions(&self) -> &[PromptVersion] {
        &self.versions
    }

    pub fn get(&self, id: &str) -> Option<&PromptVersion> {
        self.versions.iter().find(|v| v.version_id == id)
    }

    /// Looks a version up by full id or by a unique id prefix.
    pub fn resolve(&self, id_or_prefix: &str) -> Result<&PromptVersion, StoreError> {
        if let Some(v) = self.get(id_or_prefix) {
            return Ok(v);
        }
        let mut hits = self.versions.iter().filter(|v| v.version_id.starts_with(id_or_prefix));
        match (hits.next(), hits.next()) {
            (Some(v), None) if !id_or_prefix.is_empty() => Ok(v),
            _ => Err(StoreError::UnknownVersion(id_or_prefix.to_string())),
        }
    }

    pub fn creation_index(&self, id: &str) -> Option<usize> {
        self.versions.iter().position(|v| v.version_id == id)
    }

    pub fn children(&self, id: &str) -> Vec<&PromptVersion> {
        self.versions
            .iter()
            .filter(|v| v.parent_id.as_deref() == Some(id))
            .collect()
    }

    /// Adds a version whose parent is already stored. Re-inserting an
    /// existing id is a no-op.
    pub fn insert(&mut self, version: PromptVersion) -> Result<&PromptVersion, StoreError> {
        if let Some(i) = self.creation_index(&version.version_id) {
            return Ok(&self.versions[i]);
        }
        let parent = version
            .parent_id
            .as_deref()
            .ok_or_else(|| StoreError::Corrupt("a store has exactly one root".into()))?;
        if self.get(parent).is_none() {
            return Err(StoreError::UnknownVersion(parent.to_string()));
        }
        self.write_version(&version)?;
        self.versions.push(version);
        self.save_index()?;
        Ok(self.versions.last().expect("just pushed"))
    }

    pub fn set_score(&mut self, id: &str, score: f64) -> Result<(), StoreError> {
        let i = self
            .creation_index(id)
            .ok_or_else(|| StoreError::UnknownVersion(id.to_string()))?;
        self.versions[i].validation_score = Some(score);
        self.save_index()
    }

    /// Path from the root to `id`, inclusive.
    pub fn ancestry(&self, id: &str) -> Result<Vec<&PromptVersion>, StoreError> {
        let mut chain = Vec::new();
        let mut cur = self.get(id).ok_or_else(|| StoreError::UnknownVersion(id.to_string()))?;
        loop {
            chain.push(cur);
            match cur.parent_id.as_deref() {
                None => break,
                Some(p) => cur = self.get(p).ok_or_else(|| StoreError::UnknownVersion(p.to_string()))?,
            }
            if chain.len() > self.versions.len() {
                return Err(StoreError::Corrupt("cycle in lineage".into()));
            }
        }
        chain.reverse();
        Ok(chain)
    }

    /// Checks that the versions form a tree rooted at index 0 with parents
    /// created before children, and that replaying each changelog on the
    /// parent text reproduces the child text.
    pub fn verify_tree(&self) -> Result<(), StoreError> {
        for (i, v) in self.versions.iter().enumerate() {
            match (&v.parent_id, i) {
                (None, 0) => {}
                (None, _) => return Err(StoreError::Corrupt(format!("second root {}", v.version_id))),
                (Some(_), 0) => return Err(StoreError::Corrupt("first version has a parent".into())),
                (Some(p), _) => {
                    let pi = self.creation_index(p).ok_or_else(|| StoreError::UnknownVersion(p.clone()))?;
                    if pi >= i {
                        return Err(StoreError::Corrupt(format!("{} precedes its parent", v.version_id)));
                    }
                    let mut text = self.versions[pi].text.clone();
                    for edit in v.confirmed_edits() {
                        text = apply_to_text(&text, edit).map_err(|e| {
                            StoreError::Corrupt(format!("changelog of {} does not replay: {e}", v.version_id))
                        })?;
                    }
                    if text != v.text {
                        return Err(StoreError::Corrupt(format!(
                            "changelog of {} does not reproduce its text",
                            v.version_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the prompt text of `id` as a plain file usable as a prompt source.
    pub fn export(&self, id: &str, path: &Path) -> Result<(), StoreError> {
        let v = self.get(id).ok_or_else(|| StoreError::UnknownVersion(id.to_string()))?;
        write_atomic(path, v.text.as_bytes())
    }
}
