//! Benchmark tasks, dataset manifests and train/validation/test splits.
//!
//! A dataset is a manifest file indexing one directory per task:
//!
//! ```text
//! manifest.toml          dataset_name, [arch], [[tasks]] dir = "..."
//! <task dir>/task.meta   id, level, checker, seed, timeout_ms
//! <task dir>/func.ll     LLVM IR of the function under test
//! <task dir>/driver.c    C harness printing observable output
//! ```
//!
//! Task order is the manifest order; split assignment depends on it.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const META_FILE: &str = "task.meta";
pub const IR_FILE: &str = "func.ll";
pub const DRIVER_FILE: &str = "driver.c";

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{}", validation_message(.task_id, .message))]
    Validation {
        task_id: Option<String>,
        message: String,
    },
    #[error("split counts {requested} exceed the {available} available tasks")]
    Count { requested: usize, available: usize },
}

fn validation_message(task_id: &Option<String>, message: &str) -> String {
    match task_id {
        Some(id) => format!("task `{id}`: {message}"),
        None => message.to_string(),
    }
}

impl TaskError {
    fn invalid(task_id: impl Into<String>, message: impl Into<String>) -> Self {
        TaskError::Validation {
            task_id: Some(task_id.into()),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchName {
    #[serde(rename = "x86_64")]
    X86_64,
    #[serde(rename = "aarch64")]
    Aarch64,
}

impl ArchName {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "x86_64" => Some(ArchName::X86_64),
            "aarch64" => Some(ArchName::Aarch64),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::X86_64 => "x86_64",
            ArchName::Aarch64 => "aarch64",
        }
    }

    /// Target triple handed to clang when cross-compiling.
    pub fn triple(self) -> &'static str {
        match self {
            ArchName::X86_64 => "x86_64-linux-gnu",
            ArchName::Aarch64 => "aarch64-linux-gnu",
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Native,
    Emulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchTarget {
    pub name: ArchName,
    pub execution_mode: ExecutionMode,
}

impl ArchTarget {
    pub const X86_64_NATIVE: ArchTarget = ArchTarget {
        name: ArchName::X86_64,
        execution_mode: ExecutionMode::Native,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckerMode {
    StdoutExact,
    ChecksumLines,
}

/// One benchmark unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub level: Level,
    pub ir_text: String,
    pub driver_source: String,
    pub checker: CheckerMode,
    /// Pseudorandom input seed, injected into the driver as `TASK_SEED`.
    pub seed: Option<u64>,
    pub timeout: Duration,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.id.trim().is_empty() {
            return Err(TaskError::Validation {
                task_id: None,
                message: "task id must be non-empty".into(),
            });
        }
        if self.ir_text.trim().is_empty() {
            return Err(TaskError::invalid(&self.id, "IR text is empty"));
        }
        if !has_function_definition(&self.ir_text) {
            return Err(TaskError::invalid(
                &self.id,
                "IR text contains no function definition",
            ));
        }
        if self.timeout.is_zero() {
            return Err(TaskError::invalid(&self.id, "timeout must be positive"));
        }
        // Task metadata is TOML, whose integers are signed 64-bit.
        if self.seed.is_some_and(|s| s > i64::MAX as u64) {
            return Err(TaskError::invalid(&self.id, "seed must not exceed 2^63 - 1"));
        }
        match self.level {
            Level::L2 => {
                if self.seed.is_none() {
                    return Err(TaskError::invalid(&self.id, "seed required for L2"));
                }
                if self.checker != CheckerMode::ChecksumLines {
                    return Err(TaskError::invalid(
                        &self.id,
                        "L2 tasks must use the checksum_lines checker",
                    ));
                }
            }
            Level::L1 => {
                if self.checker != CheckerMode::StdoutExact {
                    return Err(TaskError::invalid(
                        &self.id,
                        "L1 tasks must use the stdout_exact checker",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn ir_line_count(&self) -> usize {
        self.ir_text.lines().count()
    }
}

fn has_function_definition(ir: &str) -> bool {
    ir.lines().any(|line| line.trim_start().starts_with("define "))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub tasks: Vec<TaskSpec>,
    pub arch: ArchTarget,
}

impl DatasetManifest {
    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.id.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    dataset_name: String,
    arch: ArchFile,
    #[serde(default)]
    tasks: Vec<TaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchFile {
    name: String,
    #[serde(default = "default_execution_mode")]
    execution_mode: ExecutionMode,
}

fn default_execution_mode() -> ExecutionMode {
    ExecutionMode::Native
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskEntry {
    dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskMeta {
    id: String,
    level: Level,
    checker: CheckerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    timeout_ms: u64,
}

fn read(path: &Path) -> Result<String, TaskError> {
    fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), TaskError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| TaskError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a single task directory.
pub fn load_task_dir(dir: &Path) -> Result<TaskSpec, TaskError> {
    let meta_path = dir.join(META_FILE);
    let meta: TaskMeta = toml::from_str(&read(&meta_path)?).map_err(|e| TaskError::Parse {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let task = TaskSpec {
        ir_text: read(&dir.join(IR_FILE))?,
        driver_source: read(&dir.join(DRIVER_FILE))?,
        id: meta.id,
        level: meta.level,
        checker: meta.checker,
        seed: meta.seed,
        timeout: Duration::from_millis(meta.timeout_ms),
    };
    task.validate()?;
    Ok(task)
}

/// Loads and validates a manifest. Relative task directories resolve against
/// the manifest's own directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, TaskError> {
    let raw: ManifestFile = toml::from_str(&read(path)?).map_err(|e| TaskError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let name = ArchName::parse(&raw.arch.name).ok_or_else(|| TaskError::Validation {
        task_id: None,
        message: format!("unknown arch `{}`", raw.arch.name),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut tasks = Vec::with_capacity(raw.tasks.len());
    for entry in &raw.tasks {
        let task = load_task_dir(&base.join(&entry.dir))?;
        if !seen.insert(task.id.clone()) {
            return Err(TaskError::invalid(&task.id, "duplicate task id"));
        }
        tasks.push(task);
    }
    Ok(DatasetManifest {
        dataset_name: raw.dataset_name,
        tasks,
        arch: ArchTarget {
            name,
            execution_mode: raw.arch.execution_mode,
        },
    })
}

/// Writes `manifest` under `root` as `manifest.toml` plus `tasks/<id>/`.
pub fn save_manifest(manifest: &DatasetManifest, root: &Path) -> Result<PathBuf, TaskError> {
    let mut entries = Vec::with_capacity(manifest.tasks.len());
    for task in &manifest.tasks {
        let rel = PathBuf::from("tasks").join(&task.id);
        let dir = root.join(&rel);
        let meta = TaskMeta {
            id: task.id.clone(),
            level: task.level,
            checker: task.checker,
            seed: task.seed,
            timeout_ms: task.timeout.as_millis() as u64,
        };
        let meta_text = toml::to_string(&meta).expect("task meta serializes");
        write(&dir.join(META_FILE), &meta_text)?;
        write(&dir.join(IR_FILE), &task.ir_text)?;
        write(&dir.join(DRIVER_FILE), &task.driver_source)?;
        entries.push(TaskEntry { dir: rel });
    }
    let file = ManifestFile {
        dataset_name: manifest.dataset_name.clone(),
        arch: ArchFile {
            name: manifest.arch.name.as_str().to_string(),
            execution_mode: manifest.arch.execution_mode,
        },
        tasks: entries,
    };
    let path = root.join(MANIFEST_FILE);
    write(&path, &toml::to_string(&file).expect("manifest serializes"))?;
    Ok(path)
}

/// Tasks ordered by descending IR line count (ties keep manifest order).
pub fn sort_by_ir_lines(manifest: &DatasetManifest) -> Vec<&TaskSpec> {
    let mut tasks: Vec<&TaskSpec> = manifest.tasks.iter().collect();
    tasks.sort_by_key(|t| std::cmp::Reverse(t.ir_line_count()));
    tasks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        Self {
            train,
            validation,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "validation" | "val" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Checks that the lists are pairwise disjoint and name known tasks.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<(), TaskError> {
        let known: HashSet<&str> = manifest.ids().collect();
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !known.contains(id.as_str()) {
                return Err(TaskError::invalid(id, "split names a task missing from the manifest"));
            }
            if !seen.insert(id.as_str()) {
                return Err(TaskError::invalid(id, "task assigned to more than one split"));
            }
        }
        Ok(())
    }
}

/// Reads an explicit split file (`train`, `validation`, `test` id lists).
pub fn load_split_file(path: &Path, manifest: &DatasetManifest) -> Result<SplitAssignment, TaskError> {
    let split: SplitAssignment = toml::from_str(&read(path)?).map_err(|e| TaskError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    split.validate(manifest)?;
    Ok(split)
}

/// xorshift64* generator used for dataset splitting.
///
/// State update: `x ^= x >> 12; x ^= x << 25; x ^= x >> 27`, output
/// `x * 0x2545F4914F6CDD1D` (wrapping). The initial state is one SplitMix64
/// step of the user seed, replaced by `0x9E3779B97F4A7C15` if that is zero.
/// Bounded draws use the high half of a 64x64 multiply:
/// `(next() as u128 * bound as u128) >> 64`.
#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self {
            state: if z == 0 { 0x9E37_79B9_7F4A_7C15 } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform-ish value in `0..bound`; `bound` must be non-zero.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }
}

/// Seeded split: Fisher-Yates shuffle of manifest positions (from the last
/// position down), then consecutive slices for train, validation and test.
/// Each list is reported in manifest order.
pub fn split_dataset(
    manifest: &DatasetManifest,
    counts: SplitCounts,
    seed: u64,
) -> Result<SplitAssignment, TaskError> {
    let n = manifest.tasks.len();
    if counts.total() > n {
        return Err(TaskError::Count {
            requested: counts.total(),
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = XorShift64Star::new(seed);
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    let take = |range: std::ops::Range<usize>| {
        let mut picked: Vec<usize> = order[range].to_vec();
        picked.sort_unstable();
        picked
            .into_iter()
            .map(|i| manifest.tasks[i].id.clone())
            .collect::<Vec<_>>()
    };
    let a = counts.train;
    let b = a + counts.validation;
    let c = b + counts.test;
    Ok(SplitAssignment {
        train: take(0..a),
        validation: take(a..b),
        test: take(b..c),
    })
}

/// Looks up the tasks named by `ids`, preserving the order of `ids`.
pub fn select_tasks<'a>(manifest: &'a DatasetManifest, ids: &[String]) -> Result<Vec<&'a TaskSpec>, TaskError> {
    let by_id: HashMap<&str, &TaskSpec> = manifest.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| TaskError::invalid(id, "unknown task id"))
        })
        .collect()
}
