//! Condition-based evaluation harness: baseline prompts, optimized
//! profiles, naive probes, and cross-model transfer matrices.
//!
//! A [`Condition`] names where a system prompt comes from (nothing, a
//! description template, a portrait template, a completed run's best
//! prompt, a checkpoint, or a naive one-liner). [`evaluate`] administers a
//! test bank under the condition and persists a report plus the full
//! administration log; [`transfer_matrix`] crosses models × conditions ×
//! traits and renders the grid.

use crate::backend::Backend;
use crate::dataset::SplitManifest;
use crate::domain::{
    LikertItem, PersonaPrompt, PromptOrigin, QuestionItem, RunConfig, TraitDimension,
};
use crate::optimizer::{self, LoggedAdministration, OptimizationResult, OptimizerError, RunBackends};
use crate::scoring::{self, ScoringError, ScoringOptions};
use crate::{jsonl, trajectory};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, thiserror::Error)]
pub enum EvaluationError {
    #[error("{count} test item(s) lack paraphrase twins; the paraphrase-sensitive score is undefined without them")]
    MissingTwins { count: usize },
    #[error("bank has no items for trait {0}")]
    TraitAbsent(TraitDimension),
    #[error("condition error: {0}")]
    Condition(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("io error: {0}")]
    Io(String),
}

/// BFI-style one-sentence description of strong trait expression, used by
/// the description-prompt and portrait templates. Editable via custom
/// templates; these defaults are plain-language stand-ins.
pub fn trait_description(trait_dim: TraitDimension) -> &'static str {
    match trait_dim {
        TraitDimension::Openness => {
            "You are imaginative and curious, drawn to new ideas, art, and unfamiliar \
             experiences, and you enjoy questioning conventions and exploring unusual \
             perspectives."
        }
        TraitDimension::Conscientiousness => {
            "You are organized and dependable, planning ahead, meeting deadlines, and holding \
             yourself to high standards in everything you take on."
        }
        TraitDimension::Extraversion => {
            "You are outgoing and energetic, seeking out company, speaking up in groups, and \
             feeling recharged by time spent with other people."
        }
        TraitDimension::Agreeableness => {
            "You are warm and cooperative, quick to trust, eager to help, and careful to \
             consider other people's feelings before your own interests."
        }
        TraitDimension::Neuroticism => {
            "You are emotionally sensitive and easily worried, prone to stress, self-doubt, and \
             strong reactions when things feel uncertain or go wrong."
        }
    }
}

/// Trait-descriptive adjectives for the portrait template.
pub fn trait_adjectives(trait_dim: TraitDimension) -> &'static str {
    match trait_dim {
        TraitDimension::Openness => "imaginative, curious, artistic, and unconventional",
        TraitDimension::Conscientiousness => "organized, disciplined, reliable, and thorough",
        TraitDimension::Extraversion => "outgoing, talkative, energetic, and enthusiastic",
        TraitDimension::Agreeableness => "warm, trusting, generous, and considerate",
        TraitDimension::Neuroticism => "anxious, sensitive, easily stressed, and self-critical",
    }
}

/// Default description-prompt template (`{personality}`, `{description}`).
pub const DESCRIPTION_PROMPT_TEMPLATE: &str = include_str!("templates/description_prompt.txt");
/// Default portrait template (`{personality}`, `{adjectives}`, `{description}`).
pub const P2_TEMPLATE: &str = include_str!("templates/p2.txt");
/// Minimal naive probe.
pub const NAIVE_MINIMAL_TEMPLATE: &str = "Choose the option that shows {personality}.";
/// Prefixed naive probe; `{prefix}` strength modulates the wording.
pub const NAIVE_PREFIXED_TEMPLATE: &str = "You are an assistant with {prefix} {personality}";

/// Where a profile condition's text comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ProfileSource {
    /// A completed run directory; uses the run's best prompt.
    RunDir { path: PathBuf },
    /// An exported checkpoint file.
    Checkpoint { path: PathBuf },
    /// Literal text, with optional provenance for self-transfer marking.
    Inline {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_model: Option<String>,
    },
}

impl ProfileSource {
    fn resolve(&self) -> Result<(String, Option<String>), EvaluationError> {
        match self {
            ProfileSource::RunDir { path } => {
                let result = optimizer::load_result(path)?;
                let config = optimizer::load_run_config(path)?;
                Ok((result.q_star.prompt.text, Some(config.target_backend)))
            }
            ProfileSource::Checkpoint { path } => {
                let checkpoint = trajectory::load_checkpoint(path)
                    .map_err(|e| EvaluationError::Condition(e.to_string()))?;
                Ok((checkpoint.prompt.text, Some(checkpoint.source.target_backend)))
            }
            ProfileSource::Inline { text, source_model } => {
                Ok((text.clone(), source_model.clone()))
            }
        }
    }
}

/// A prompt condition under which a model is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Condition {
    /// The unprompted model: no system prompt at all.
    Origin,
    /// "An assistant with {personality} personality" plus a description.
    DescriptionPrompt { template: String },
    /// Portrait-style prompt built from trait-descriptive vocabulary.
    P2 { template: String },
    /// A profile produced by an optimization run.
    Profile { source: ProfileSource },
    /// A profile re-optimized directly on the evaluated model.
    ProfileStar { source: ProfileSource },
    /// A one-line probe; `prefix` modulates strength in the prefixed form.
    Naive { template: String, prefix: String },
}

impl Condition {
    pub fn description_prompt() -> Self {
        Condition::DescriptionPrompt { template: DESCRIPTION_PROMPT_TEMPLATE.trim_end().to_string() }
    }

    pub fn p2() -> Self {
        Condition::P2 { template: P2_TEMPLATE.trim_end().to_string() }
    }

    pub fn naive_minimal() -> Self {
        Condition::Naive { template: NAIVE_MINIMAL_TEMPLATE.to_string(), prefix: String::new() }
    }

    pub fn naive_prefixed(prefix: impl Into<String>) -> Self {
        Condition::Naive { template: NAIVE_PREFIXED_TEMPLATE.to_string(), prefix: prefix.into() }
    }

    pub fn profile_from_run(path: impl Into<PathBuf>) -> Self {
        Condition::Profile { source: ProfileSource::RunDir { path: path.into() } }
    }

    pub fn profile_from_checkpoint(path: impl Into<PathBuf>) -> Self {
        Condition::Profile { source: ProfileSource::Checkpoint { path: path.into() } }
    }

    pub fn profile_star_from_run(path: impl Into<PathBuf>) -> Self {
        Condition::ProfileStar { source: ProfileSource::RunDir { path: path.into() } }
    }

    /// Stable label used in reports and grid columns.
    pub fn label(&self) -> String {
        match self {
            Condition::Origin => "origin".to_string(),
            Condition::DescriptionPrompt { .. } => "description_prompt".to_string(),
            Condition::P2 { .. } => "p2".to_string(),
            Condition::Profile { .. } => "profile".to_string(),
            Condition::ProfileStar { .. } => "profile_star".to_string(),
            Condition::Naive { template, prefix } => {
                if template.contains("{prefix}") {
                    format!("naive[{prefix}]")
                } else {
                    "naive".to_string()
                }
            }
        }
    }
}

/// A condition resolved against a trait: the concrete system prompt plus
/// provenance for self-transfer detection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedCondition {
    pub label: String,
    pub prompt: PersonaPrompt,
    /// Backend reference of the model the profile was optimized on.
    pub source_target_backend: Option<String>,
}

fn fill_template(template: &str, trait_dim: TraitDimension, prefix: Option<&str>) -> String {
    let mut text = template
        .replace("{personality}", trait_dim.lowercase_name())
        .replace("{description}", trait_description(trait_dim))
        .replace("{adjectives}", trait_adjectives(trait_dim));
    if let Some(prefix) = prefix {
        text = text.replace("{prefix}", prefix);
    }
    // An empty prefix leaves a double space behind.
    while text.contains("  ") {
        text = text.replace("  ", " ");
    }
    text.trim().to_string()
}

/// Resolve a condition into the system prompt used for administration.
pub fn resolve_condition(
    condition: &Condition,
    trait_dim: TraitDimension,
) -> Result<ResolvedCondition, EvaluationError> {
    let label = condition.label();
    let baseline = |text: String| -> Result<PersonaPrompt, EvaluationError> {
        PersonaPrompt::new(text, PromptOrigin::Baseline { kind: label.clone() })
            .map_err(|e| EvaluationError::Condition(e.to_string()))
    };
    match condition {
        Condition::Origin => Ok(ResolvedCondition {
            label,
            prompt: PersonaPrompt::origin_empty(),
            source_target_backend: None,
        }),
        Condition::DescriptionPrompt { template } | Condition::P2 { template } => {
            Ok(ResolvedCondition {
                prompt: baseline(fill_template(template, trait_dim, None))?,
                label,
                source_target_backend: None,
            })
        }
        Condition::Naive { template, prefix } => Ok(ResolvedCondition {
            prompt: baseline(fill_template(template, trait_dim, Some(prefix)))?,
            label,
            source_target_backend: None,
        }),
        Condition::Profile { source } | Condition::ProfileStar { source } => {
            let (text, source_target_backend) = source.resolve()?;
            // A run whose best prompt is the empty anchor resolves to the
            // unprompted condition.
            let prompt = if text.trim().is_empty() {
                PersonaPrompt::origin_empty()
            } else {
                baseline(text)?
            };
            Ok(ResolvedCondition { prompt, label, source_target_backend })
        }
    }
}

/// Exactly one score family per report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ReportScores {
    Trait { s_ps: f64, s_origin: f64, s_consist: f64 },
    Likert { mean: f64, std_dev: f64 },
}

impl ReportScores {
    /// The single number shown in grid cells.
    pub fn headline(&self) -> f64 {
        match self {
            ReportScores::Trait { s_ps, .. } => *s_ps,
            ReportScores::Likert { mean, .. } => *mean,
        }
    }
}

/// Result of evaluating one (model, condition, trait) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub condition: String,
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub scores: ReportScores,
    pub n_items: usize,
    /// Path of the persisted administration log, when one was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub administration_log: Option<String>,
}

/// The bank a condition is evaluated on.
pub enum EvalItems<'a> {
    /// Situational multiple-choice items (sources with twins).
    Trait(&'a [QuestionItem]),
    /// Likert statements administered over randomized-order trials.
    Likert { items: &'a [LikertItem], trials: u32 },
}

fn ensure_dir(path: &Path) -> Result<(), EvaluationError> {
    std::fs::create_dir_all(path)
        .map_err(|e| EvaluationError::Io(format!("cannot create {}: {e}", path.display())))
}

/// Evaluate one condition for one trait on one model. When `out_dir` is
/// given, the report and the full administration log are persisted there
/// (`report.json`, `administrations.jsonl`).
pub fn evaluate(
    condition: &Condition,
    trait_dim: TraitDimension,
    backend: &Backend,
    items: &EvalItems,
    options: &ScoringOptions,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvaluationReport, EvaluationError> {
    let resolved = resolve_condition(condition, trait_dim)?;
    let report = match items {
        EvalItems::Trait(bank) => {
            let for_trait: Vec<QuestionItem> = bank
                .iter()
                .filter(|i| i.trait_dim == trait_dim)
                .cloned()
                .collect();
            let sources: Vec<&QuestionItem> =
                for_trait.iter().filter(|i| !i.is_twin()).collect();
            if sources.is_empty() {
                return Err(EvaluationError::TraitAbsent(trait_dim));
            }
            let twinned: std::collections::BTreeSet<&str> = for_trait
                .iter()
                .filter_map(|i| i.paraphrase_of.as_deref())
                .collect();
            let untwinned = sources
                .iter()
                .filter(|s| !twinned.contains(s.id.as_str()))
                .count();
            if untwinned > 0 {
                return Err(EvaluationError::MissingTwins { count: untwinned });
            }
            let outcome = scoring::trait_scores(
                &resolved.prompt,
                trait_dim,
                &for_trait,
                backend,
                options,
                seed,
                0,
            )?;
            let log = outcome
                .administrations
                .into_iter()
                .map(|administration| LoggedAdministration {
                    step: 0,
                    prompt_id: resolved.prompt.id.clone(),
                    administration,
                })
                .collect::<Vec<_>>();
            let mut report = EvaluationReport {
                model_id: backend.model_id().to_string(),
                condition: resolved.label.clone(),
                trait_dim,
                scores: ReportScores::Trait {
                    s_ps: outcome.scored.s_ps,
                    s_origin: outcome.scored.s_origin,
                    s_consist: outcome.scored.s_consist,
                },
                n_items: outcome.score_set.n_items,
                administration_log: None,
            };
            if let Some(dir) = out_dir {
                ensure_dir(dir)?;
                let log_path = dir.join("administrations.jsonl");
                jsonl::write_lines(&log_path, &log)
                    .map_err(|e| EvaluationError::Io(e.to_string()))?;
                report.administration_log = Some(log_path.display().to_string());
            }
            report
        }
        EvalItems::Likert { items, trials } => {
            let (likert, log) = scoring::likert_assess(
                &resolved.prompt,
                items,
                backend,
                *trials,
                options,
                seed,
            )?;
            let stats = likert
                .per_trait
                .get(&trait_dim)
                .ok_or(EvaluationError::TraitAbsent(trait_dim))?;
            let mut report = EvaluationReport {
                model_id: backend.model_id().to_string(),
                condition: resolved.label.clone(),
                trait_dim,
                scores: ReportScores::Likert { mean: stats.mean, std_dev: stats.std_dev },
                n_items: items.iter().filter(|i| i.trait_dim == trait_dim).count(),
                administration_log: None,
            };
            if let Some(dir) = out_dir {
                ensure_dir(dir)?;
                let log_path = dir.join("administrations.jsonl");
                jsonl::write_lines(&log_path, &log)
                    .map_err(|e| EvaluationError::Io(e.to_string()))?;
                report.administration_log = Some(log_path.display().to_string());
            }
            report
        }
    };
    if let Some(dir) = out_dir {
        let report_path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&report_path, json)
            .map_err(|e| EvaluationError::Io(format!("cannot write {}: {e}", report_path.display())))?;
    }
    Ok(report)
}

/// Recompute a TRAIT-path report's scores from its persisted
/// administration log. Reports are pure functions of their logs; this must
/// reproduce the stored numbers exactly.
pub fn recompute_trait_report(
    log_path: &Path,
    bank: &[QuestionItem],
    trait_dim: TraitDimension,
) -> Result<ReportScores, EvaluationError> {
    let log: Vec<LoggedAdministration> =
        jsonl::read_lines(log_path).map_err(|e| EvaluationError::Io(e.to_string()))?;
    let administrations: Vec<scoring::Administration> =
        log.into_iter().map(|l| l.administration).collect();
    let set = scoring::scores_from_administrations(trait_dim, bank, &administrations);
    Ok(ReportScores::Trait {
        s_ps: set.s_ps(),
        s_origin: set.s_origin(),
        s_consist: set.s_consist(),
    })
}

/// One cell of a transfer matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub model: String,
    pub condition: String,
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub outcome: CellOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Scored { report: EvaluationReport },
    /// The profile was optimized on this very model; rendered as "—".
    SelfTransfer,
    Failed { error: String },
}

/// Full cross-product evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn cell(
        &self,
        model: &str,
        condition: &str,
        trait_dim: TraitDimension,
    ) -> Option<&TransferCell> {
        self.cells.iter().find(|c| {
            c.model == model && c.condition == condition && c.trait_dim == trait_dim
        })
    }

    /// Aligned-text rendering: one block per model, traits as rows,
    /// conditions as columns. Self-transfer cells render as "—"; failed
    /// cells as "failed".
    pub fn render_text(&self) -> String {
        let mut models: Vec<&str> = self.cells.iter().map(|c| c.model.as_str()).collect();
        models.dedup();
        let mut conditions: Vec<&str> = Vec::new();
        for cell in &self.cells {
            if !conditions.contains(&cell.condition.as_str()) {
                conditions.push(&cell.condition);
            }
        }
        let mut traits: Vec<TraitDimension> = Vec::new();
        for cell in &self.cells {
            if !traits.contains(&cell.trait_dim) {
                traits.push(cell.trait_dim);
            }
        }

        let cell_text = |model: &str, condition: &str, trait_dim: TraitDimension| -> String {
            match self.cell(model, condition, trait_dim).map(|c| &c.outcome) {
                Some(CellOutcome::Scored { report }) => format!("{:.3}", report.scores.headline()),
                Some(CellOutcome::SelfTransfer) => "—".to_string(),
                Some(CellOutcome::Failed { .. }) => "failed".to_string(),
                None => String::new(),
            }
        };

        let mut widths: Vec<usize> = conditions.iter().map(|c| c.chars().count()).collect();
        for (ci, condition) in conditions.iter().enumerate() {
            for model in &models {
                for &trait_dim in &traits {
                    widths[ci] =
                        widths[ci].max(cell_text(model, condition, trait_dim).chars().count());
                }
            }
        }

        let mut out = String::new();
        for model in &models {
            out.push_str(&format!("Model: {model}\n"));
            out.push_str(&format!("{:<6}", "Trait"));
            for (ci, condition) in conditions.iter().enumerate() {
                out.push_str(&format!("  {:>width$}", condition, width = widths[ci]));
            }
            out.push('\n');
            for &trait_dim in &traits {
                out.push_str(&format!("{:<6}", trait_dim.code()));
                for (ci, condition) in conditions.iter().enumerate() {
                    out.push_str(&format!(
                        "  {:>width$}",
                        cell_text(model, condition, trait_dim),
                        width = widths[ci]
                    ));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// Persist `report.json` and `report.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EvaluationError> {
        ensure_dir(dir)?;
        let json = serde_json::to_string_pretty(self).expect("matrix serializes");
        std::fs::write(dir.join("report.json"), json)
            .map_err(|e| EvaluationError::Io(format!("cannot write report.json: {e}")))?;
        std::fs::write(dir.join("report.txt"), self.render_text())
            .map_err(|e| EvaluationError::Io(format!("cannot write report.txt: {e}")))
    }
}

fn sanitize_path_component(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '-' })
        .collect()
}

/// Evaluate the full (model × condition × trait) cross-product. Cells run
/// concurrently up to `max_parallel_cells`; per-cell failures are recorded
/// in place and never abort the matrix. Profile conditions evaluated on
/// the model they were optimized on are marked self-transfer and skipped.
#[allow(clippy::too_many_arguments)]
pub fn transfer_matrix(
    models: &[(String, Arc<Backend>)],
    conditions: &[Condition],
    traits: &[TraitDimension],
    items: &EvalItems,
    options: &ScoringOptions,
    seed: u64,
    out_dir: Option<&Path>,
    max_parallel_cells: usize,
) -> TransferMatrix {
    assert!(max_parallel_cells >= 1, "max_parallel_cells must be ≥ 1");
    struct CellJob<'a> {
        model: &'a str,
        backend: &'a Arc<Backend>,
        condition: &'a Condition,
        trait_dim: TraitDimension,
    }
    let mut jobs = Vec::new();
    for (model, backend) in models {
        for condition in conditions {
            for &trait_dim in traits {
                jobs.push(CellJob { model, backend, condition, trait_dim });
            }
        }
    }

    let run_cell = |job: &CellJob| -> TransferCell {
        let label = job.condition.label();
        let outcome = match resolve_condition(job.condition, job.trait_dim) {
            Err(e) => CellOutcome::Failed { error: e.to_string() },
            Ok(resolved) => {
                let self_transfer = label == "profile"
                    && resolved.source_target_backend.as_deref() == Some(job.model);
                if self_transfer {
                    CellOutcome::SelfTransfer
                } else {
                    let cell_dir = out_dir.map(|dir| {
                        dir.join("cells")
                            .join(sanitize_path_component(job.model))
                            .join(sanitize_path_component(&label))
                            .join(job.trait_dim.code())
                    });
                    match evaluate(
                        job.condition,
                        job.trait_dim,
                        job.backend,
                        items,
                        options,
                        seed,
                        cell_dir.as_deref(),
                    ) {
                        Ok(report) => CellOutcome::Scored { report },
                        Err(e) => CellOutcome::Failed { error: e.to_string() },
                    }
                }
            }
        };
        TransferCell {
            model: job.model.to_string(),
            condition: label,
            trait_dim: job.trait_dim,
            outcome,
        }
    };

    let slots: Vec<Mutex<Option<TransferCell>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = max_parallel_cells.min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= jobs.len() {
                    break;
                }
                let cell = run_cell(&jobs[index]);
                *slots[index].lock().expect("cell slot") = Some(cell);
            });
        }
    });
    let cells = slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("cell slot").expect("cell filled"))
        .collect();
    TransferMatrix { cells }
}

/// Re-optimize a profile directly on the evaluated model: the given model
/// serves as both optimizer and target. The completed run registers as a
/// `profile_star` condition.
pub fn profile_star(
    config: &RunConfig,
    model_ref: &str,
    backend: Arc<Backend>,
    train: &[QuestionItem],
    manifest: Option<&SplitManifest>,
    run_dir: &Path,
) -> Result<(OptimizationResult, Condition), EvaluationError> {
    let mut config = config.clone();
    config.optimizer_backend = model_ref.to_string();
    config.target_backend = model_ref.to_string();
    let backends = RunBackends { optimizer: Arc::clone(&backend), target: backend };
    let result = optimizer::run(&config, &backends, train, manifest, run_dir)?;
    Ok((result, Condition::profile_star_from_run(run_dir)))
}
