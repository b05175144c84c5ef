//! The offline learning loop: epochs of mini-batches over the training
//! split, one prompt update per batch, validation at each epoch end.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::edits::apply_edits;
use super::meta::{confirm_edits, propose_edits, MetaError, MetaTemplates};
use super::signal::collect_signal;
use super::store::{write_atomic, PromptStore, StoreError};
use super::version::{CreatedAt, PromptVersion};
use crate::pipeline::{compile_all, PipelineConfig, PipelineContext, PipelineError, TaskOutcome};
use crate::task::TaskSpec;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("prompt optimizer call failed: {0}")]
    Meta(MetaError),
    #[error("no candidate versions to select from")]
    EmptyCandidates,
    #[error("version {0} has no validation score")]
    Unscored(String),
    #[error("invalid learning setup: {0}")]
    Setup(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    /// Fraction of validation tasks solved.
    #[default]
    Acc,
    /// Fraction solved and strictly faster than the optimized baseline.
    AccPerf,
}

#[derive(Debug, Clone)]
pub struct LearnConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub token_budget: usize,
    pub metric: ValidationMetric,
    /// Training batches use only its generation settings; validation under
    /// `AccPerf` uses it as given.
    pub pipeline: PipelineConfig,
    pub templates: MetaTemplates,
    /// Prompt store and checkpoint location; `None` keeps everything in
    /// memory.
    pub store_dir: Option<PathBuf>,
    pub resume: bool,
    pub jobs: usize,
}

impl LearnConfig {
    pub fn new(pipeline: PipelineConfig) -> Self {
        Self {
            epochs: 3,
            batch_size: 5,
            token_budget: 12_000,
            metric: ValidationMetric::Acc,
            pipeline,
            templates: MetaTemplates::default(),
            store_dir: None,
            resume: false,
            jobs: 1,
        }
    }
}

/// Next unit of work: batch `batch` (1-based) of epoch `epoch` (1-based).
/// `batch` one past the last batch means the epoch's validation is pending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub batch: usize,
    pub current_version: String,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Option<Self>, LearnError> {
        let err = |message: String| LearnError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        match fs::read_to_string(path) {
            Ok(raw) => serde_json::from_str(&raw).map(Some).map_err(|e| err(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(err(e.to_string())),
        }
    }

    fn save(&self, dir: Option<&Path>) -> Result<(), LearnError> {
        let Some(dir) = dir else { return Ok(()) };
        write_atomic(
            &dir.join(CHECKPOINT_FILE),
            &serde_json::to_vec_pretty(self).expect("checkpoint serializes"),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchResult {
    Updated,
    EmptySignal,
    ProposeFailed,
    ReviewFailed,
    NothingConfirmed,
    ApplyFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReport {
    pub epoch: usize,
    pub batch: usize,
    pub tasks: Vec<String>,
    pub trajectories: usize,
    pub proposed: usize,
    pub confirmed: usize,
    pub result: BatchResult,
    pub version_after: String,
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub store: PromptStore,
    pub selected: PromptVersion,
    /// Batches run by this invocation (earlier ones are not repeated on
    /// resume).
    pub batches: Vec<BatchReport>,
}

/// Highest validation score wins; ties go to the later version in `versions`
/// (creation order), i.e. the most evolved one.
pub fn select_best(versions: &[PromptVersion]) -> Result<&PromptVersion, LearnError> {
    let mut best: Option<(&PromptVersion, f64)> = None;
    for v in versions {
        let score = v
            .validation_score
            .filter(|s| !s.is_nan())
            .ok_or_else(|| LearnError::Unscored(v.version_id.clone()))?;
        if best.is_none_or(|(_, b)| score >= b) {
            best = Some((v, score));
        }
    }
    best.map(|(v, _)| v).ok_or(LearnError::EmptyCandidates)
}

fn score(outcomes: &[TaskOutcome], metric: ValidationMetric) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    let hits = outcomes
        .iter()
        .filter(|o| match metric {
            ValidationMetric::Acc => o.correct,
            ValidationMetric::AccPerf => o.correct && o.perf.as_ref().is_some_and(|p| p.is_superior()),
        })
        .count();
    hits as f64 / outcomes.len() as f64
}

/// Keeps outcomes of tasks with a valid oracle; anything else aborts.
fn usable(results: Vec<Result<TaskOutcome, PipelineError>>) -> Result<Vec<TaskOutcome>, LearnError> {
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) if e.is_task_local() => tracing::warn!("task excluded: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(outcomes)
}

struct Learner<'a, 'c> {
    ctx: &'a PipelineContext<'c>,
    config: &'a LearnConfig,
    train_config: PipelineConfig,
    validation_config: PipelineConfig,
}

impl Learner<'_, '_> {
    fn scoped(&self, scope: String) -> PipelineContext<'_> {
        PipelineContext {
            client: self.ctx.client,
            backend: self.ctx.backend,
            arch: self.ctx.arch,
            log: self.ctx.log,
            scope,
        }
    }

    fn run_batch(
        &self,
        store: &mut PromptStore,
        current: &PromptVersion,
        tasks: &[&TaskSpec],
        epoch: usize,
        batch: usize,
    ) -> Result<BatchReport, LearnError> {
        let ctx = self.scoped(format!("learn/e{epoch}/b{batch}/"));
        let outcomes = usable(compile_all(&ctx, tasks, current, &self.train_config, self.config.jobs))?;
        let ids: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
        let signal = collect_signal(&outcomes, &ids, self.config.token_budget);
        let mut report = BatchReport {
            epoch,
            batch,
            tasks: ids,
            trajectories: signal.trajectories.len(),
            proposed: 0,
            confirmed: 0,
            result: BatchResult::EmptySignal,
            version_after: current.version_id.clone(),
        };
        if signal.is_empty() {
            tracing::info!(epoch, batch, "no repaired trajectories; prompt unchanged");
            return Ok(report);
        }
        let conversation = format!("learn/e{epoch}/b{batch}/");
        let params = &self.config.pipeline.generation;
        let meta_failure = |e: MetaError, result: BatchResult, report: &mut BatchReport| match e {
            MetaError::Gateway(g) => Err(LearnError::Pipeline(PipelineError::Gateway(g))),
            other => {
                tracing::warn!(epoch, batch, "batch update skipped: {other}");
                report.result = result;
                Ok(())
            }
        };
        let proposals = match propose_edits(
            ctx.client,
            params,
            &self.config.templates,
            current,
            &signal,
            &format!("{conversation}propose"),
        ) {
            Ok(p) => p,
            Err(e) => {
                meta_failure(e, BatchResult::ProposeFailed, &mut report)?;
                return Ok(report);
            }
        };
        report.proposed = proposals.len();
        let reviewed = match confirm_edits(
            ctx.client,
            params,
            &self.config.templates,
            current,
            &proposals,
            &format!("{conversation}confirm"),
        ) {
            Ok(r) => r,
            Err(e) => {
                meta_failure(e, BatchResult::ReviewFailed, &mut report)?;
                return Ok(report);
            }
        };
        report.confirmed = reviewed.iter().filter(|e| e.confirmed).count();
        if report.confirmed == 0 {
            report.result = BatchResult::NothingConfirmed;
            return Ok(report);
        }
        match apply_edits(current, &reviewed, CreatedAt::new(epoch, batch)) {
            Ok(child) => {
                report.version_after = child.version_id.clone();
                report.result = BatchResult::Updated;
                store.insert(child)?;
            }
            Err(e) => {
                tracing::warn!(epoch, batch, "confirmed edits do not apply; prompt unchanged: {e}");
                report.result = BatchResult::ApplyFailed;
            }
        }
        Ok(report)
    }

    /// Scores every version that has no score yet.
    fn validate(&self, store: &mut PromptStore, validation: &[&TaskSpec], epoch: usize) -> Result<(), LearnError> {
        let pending: Vec<(usize, PromptVersion)> = store
            .versions()
            .iter()
            .enumerate()
            .filter(|(_, v)| v.validation_score.is_none())
            .map(|(k, v)| (k, v.clone()))
            .collect();
        for (k, version) in pending {
            let ctx = self.scoped(format!("validate/e{epoch}/v{k}/"));
            let outcomes = usable(compile_all(
                &ctx,
                validation,
                &version,
                &self.validation_config,
                self.config.jobs,
            ))?;
            let s = score(&outcomes, self.config.metric);
            tracing::info!(epoch, version = %version.short_id(), score = s, "validated prompt version");
            store.set_score(&version.version_id, s)?;
        }
        Ok(())
    }
}

/// Evolves `root` over `train`, scoring versions on `validation`, and
/// returns the version tree with the selected prompt.
pub fn learn(
    ctx: &PipelineContext<'_>,
    train: &[&TaskSpec],
    validation: &[&TaskSpec],
    root: PromptVersion,
    config: &LearnConfig,
) -> Result<LearnOutcome, LearnError> {
    if train.is_empty() || validation.is_empty() {
        return Err(LearnError::Setup("training and validation splits must be non-empty".into()));
    }
    if config.batch_size == 0 {
        return Err(LearnError::Setup("batch size must be positive".into()));
    }
    config.templates.validate().map_err(|e| LearnError::Meta(e.into()))?;

    let dir = config.store_dir.as_deref();
    let checkpoint_path = dir.map(|d| d.join(CHECKPOINT_FILE));
    let existing = match &checkpoint_path {
        Some(p) => Checkpoint::load(p)?,
        None => None,
    };
    if existing.is_some() && !config.resume {
        return Err(LearnError::Setup(format!(
            "{} already holds a learning run; resume it or start from a clean directory",
            dir.expect("checkpoint implies a directory").display()
        )));
    }
    let mut store = match dir {
        Some(d) => PromptStore::create(d, root)?,
        None => PromptStore::in_memory(root),
    };
    let mut checkpoint = existing.unwrap_or_else(|| Checkpoint {
        epoch: 1,
        batch: 1,
        current_version: store.root().version_id.clone(),
    });
    let mut current = store.resolve(&checkpoint.current_version)?.clone();

    let mut train_config = config.pipeline.clone();
    train_config.optimization_rounds = 0;
    train_config.measure_each_round = false;
    let mut validation_config = config.pipeline.clone();
    if config.metric == ValidationMetric::Acc {
        validation_config.optimization_rounds = 0;
        validation_config.measure_each_round = false;
    } else {
        validation_config.measure_each_round = true;
    }
    let learner = Learner {
        ctx,
        config,
        train_config,
        validation_config,
    };

    let batches: Vec<&[&TaskSpec]> = train.chunks(config.batch_size).collect();
    let mut reports = Vec::new();
    while checkpoint.epoch <= config.epochs {
        let epoch = checkpoint.epoch;
        while checkpoint.batch <= batches.len() {
            checkpoint.save(dir)?;
            let report = learner.run_batch(&mut store, &current, batches[checkpoint.batch - 1], epoch, checkpoint.batch)?;
            current = store.resolve(&report.version_after)?.clone();
            reports.push(report);
            checkpoint.batch += 1;
            checkpoint.current_version = current.version_id.clone();
        }
        checkpoint.save(dir)?;
        learner.validate(&mut store, validation, epoch)?;
        checkpoint.epoch += 1;
        checkpoint.batch = 1;
    }
    checkpoint.save(dir)?;
    learner.validate(&mut store, validation, config.epochs)?;
    let selected = select_best(store.versions())?.clone();
    Ok(LearnOutcome {
        store,
        selected,
        batches: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::BASELINE_PROMPT;

    fn scored(text: &str, score: Option<f64>) -> PromptVersion {
        let mut v = PromptVersion::standalone(text);
        v.validation_score = score;
        v
    }

    #[test]
    fn argmax_with_later_tie_break() {
        let versions = vec![scored("root", Some(0.40)), scored("v1", Some(0.60))];
        assert_eq!(select_best(&versions).unwrap().text, "v1");
        let tied = vec![scored("v1", Some(0.60)), scored("v2", Some(0.60)), scored("v0", Some(0.1))];
        assert_eq!(select_best(&tied).unwrap().text, "v2");
        assert!(matches!(select_best(&[]), Err(LearnError::EmptyCandidates)));
        assert!(matches!(
            select_best(&[scored(BASELINE_PROMPT, None)]),
            Err(LearnError::Unscored(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn selection_invariant_under_monotone_rescaling(
            scores in proptest::collection::vec(0u32..20, 1..8),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let make = |f: &dyn Fn(f64) -> f64| -> Vec<PromptVersion> {
                scores.iter().enumerate()
                    .map(|(i, s)| scored(&format!("v{i}"), Some(f(*s as f64 / 20.0))))
                    .collect()
            };
            let plain = make(&|x| x);
            let affine = make(&|x| a * x + b);
            let cubic = make(&|x| x * x * x + x);
            let pick = |v: &[PromptVersion]| select_best(v).unwrap().text.clone();
            proptest::prop_assert_eq!(pick(&plain), pick(&affine));
            proptest::prop_assert_eq!(pick(&plain), pick(&cubic));
        }
    }
}
