//! The trajectory-search loop: keep every scored prompt in an append-only
//! buffer, show the optimizer model the best ones (lowest score first),
//! sample fresh candidates at high temperature, score them on a small
//! question sample, and repeat. The best entry in the buffer at the end is
//! the optimized profile.
//!
//! Runs persist their state after every step and can resume after a crash;
//! with a fixed seed and mock backends the whole run transcript is
//! bit-reproducible.

use crate::backend::{Backend, BackendError};
use crate::dataset::SplitManifest;
use crate::domain::{PersonaPrompt, PromptOrigin, QuestionItem, RunConfig, ScoredPrompt};
use crate::scoring::{self, Administration, ScoringError, ScoringOptions};
use crate::{jsonl, seeds};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("state error: {0}")]
    State(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(String),
}

/// Append-only store of every scored prompt across steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryBuffer {
    entries: Vec<ScoredPrompt>,
}

impl TrajectoryBuffer {
    pub fn new() -> Self {
        TrajectoryBuffer::default()
    }

    pub fn from_entries(entries: Vec<ScoredPrompt>) -> Self {
        TrajectoryBuffer { entries }
    }

    pub fn entries(&self) -> &[ScoredPrompt] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One past the highest step present; 0 for an empty buffer.
    pub fn step_counter(&self) -> u32 {
        self.entries.iter().map(|e| e.step + 1).max().unwrap_or(0)
    }

    pub fn append(&mut self, entry: ScoredPrompt) {
        self.entries.push(entry);
    }

    pub fn entries_at_step(&self, step: u32) -> Vec<&ScoredPrompt> {
        self.entries.iter().filter(|e| e.step == step).collect()
    }

    /// The best entry: highest paraphrase-sensitive score, ties broken by
    /// earliest step, then lexicographic prompt id.
    pub fn best(&self) -> Option<&ScoredPrompt> {
        self.entries.iter().fold(None, |best: Option<&ScoredPrompt>, entry| match best {
            None => Some(entry),
            Some(current) => {
                if better_than(entry, current) {
                    Some(entry)
                } else {
                    Some(current)
                }
            }
        })
    }

    /// The n best entries, returned in ascending score order for the
    /// meta-prompt trajectory. Ties at the selection boundary are broken
    /// the same way as [`TrajectoryBuffer::best`]; within the returned
    /// block, tied scores order earliest-step first so the most recent
    /// work sits closest to the "best" end.
    pub fn top_n_ascending(&self, n: usize) -> Vec<&ScoredPrompt> {
        let mut ranked: Vec<&ScoredPrompt> = self.entries.iter().collect();
        ranked.sort_by(|a, b| {
            b.s_ps
                .partial_cmp(&a.s_ps)
                .expect("scores are finite")
                .then_with(|| a.step.cmp(&b.step))
                .then_with(|| a.prompt.id.cmp(&b.prompt.id))
        });
        ranked.truncate(n);
        ranked.sort_by(|a, b| {
            a.s_ps
                .partial_cmp(&b.s_ps)
                .expect("scores are finite")
                .then_with(|| a.step.cmp(&b.step))
                .then_with(|| a.prompt.id.cmp(&b.prompt.id))
        });
        ranked
    }
}

fn better_than(candidate: &ScoredPrompt, incumbent: &ScoredPrompt) -> bool {
    if candidate.s_ps != incumbent.s_ps {
        return candidate.s_ps > incumbent.s_ps;
    }
    if candidate.step != incumbent.step {
        return candidate.step < incumbent.step;
    }
    candidate.prompt.id < incumbent.prompt.id
}

/// The rendered instruction for the optimizer model: fixed task prose, the
/// score-ascending trajectory, open-ended problem examples, and the output
/// format directive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaPrompt {
    pub task_instruct: String,
    /// (prompt text, s_ps) pairs in ascending score order.
    pub trajectory_block: Vec<(String, f64)>,
    pub problem_examples: Vec<String>,
    pub format_directive: String,
    template: String,
}

impl MetaPrompt {
    pub fn render(&self) -> String {
        let trajectory = self
            .trajectory_block
            .iter()
            .map(|(text, score)| format!("Profile:\n{text}\nScore: {score:.3}"))
            .collect::<Vec<_>>()
            .join("\n\n");
        let examples = self
            .problem_examples
            .iter()
            .map(|e| format!("- {e}"))
            .collect::<Vec<_>>()
            .join("\n");
        self.template
            .replace("{task_instruct}", &self.task_instruct)
            .replace("{trajectory}", &trajectory)
            .replace("{examples}", &examples)
            .replace("{format_directive}", &self.format_directive)
    }
}

/// Crude token estimate used for the meta-prompt budget.
fn estimate_tokens(text: &str) -> usize {
    text.chars().count() / 4 + 1
}

/// Build the meta-prompt from the buffer's top-n trajectory and a fresh
/// question sample. Each problem example embeds the scenario completed
/// with exactly one uniformly drawn option text, phrased as an open-ended
/// statement. Trajectory entries are dropped lowest-score-first if the
/// rendered prompt would exceed the configured token budget.
pub fn build_meta_prompt(
    buffer: &TrajectoryBuffer,
    config: &RunConfig,
    sampled_items: &[QuestionItem],
    rng: &mut ChaCha8Rng,
) -> Result<MetaPrompt, OptimizerError> {
    if buffer.is_empty() {
        return Err(OptimizerError::State(
            "cannot build a meta-prompt from an empty buffer".into(),
        ));
    }
    let task_instruct = config
        .instructions
        .meta_task_instruct
        .replace("{trait}", config.trait_dim.lowercase_name())
        .trim()
        .to_string();
    let format_directive = format!(
        "Write one new persona profile that you expect to score higher than every profile \
         above. Describe the character's career, values, hobbies, and typical behavior in \
         concrete detail. Output the profile between {} on its own line and {} on its own \
         line, with no other text between the markers.",
        config.instructions.sentinel_start, config.instructions.sentinel_end
    );

    let mut trajectory_block: Vec<(String, f64)> = buffer
        .top_n_ascending(config.trajectory_top_n as usize)
        .into_iter()
        .map(|entry| (entry.prompt.text.clone(), entry.s_ps))
        .collect();

    let problem_examples: Vec<String> = sampled_items
        .iter()
        .map(|item| {
            let pick = rng.random_range(0..item.options.len());
            format!("{} {}", item.scenario, item.options[pick].text)
        })
        .collect();

    let mut meta = MetaPrompt {
        task_instruct,
        trajectory_block,
        problem_examples,
        format_directive,
        template: config.instructions.meta_template.clone(),
    };
    while meta.trajectory_block.len() > 1 && estimate_tokens(&meta.render()) > config.meta_token_budget
    {
        meta.trajectory_block.remove(0);
    }
    trajectory_block = meta.trajectory_block.clone();
    debug_assert!(trajectory_block.windows(2).all(|w| w[0].1 <= w[1].1));
    Ok(meta)
}

/// Extract the candidate text between the sentinel markers; `None` when
/// either marker is missing or the block is empty.
pub fn extract_candidate(response: &str, start: &str, end: &str) -> Option<String> {
    let open = response.find(start)?;
    let rest = &response[open + start.len()..];
    let close = rest.find(end)?;
    let text = rest[..close].trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// The two model roles an optimization run talks to.
pub struct RunBackends {
    pub optimizer: Arc<Backend>,
    pub target: Arc<Backend>,
}

/// One administration tagged with its run context, as persisted in the
/// run's administration log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedAdministration {
    pub step: u32,
    pub prompt_id: String,
    #[serde(flatten)]
    pub administration: Administration,
}

/// Outcome of one optimization step.
#[derive(Debug)]
pub struct StepOutcome {
    pub step: u32,
    pub appended: Vec<ScoredPrompt>,
    /// Completions with no parseable sentinel block.
    pub dropped: usize,
    pub administrations: Vec<LoggedAdministration>,
}

fn scoring_options(config: &RunConfig) -> ScoringOptions {
    ScoringOptions {
        instructions: config.instructions.clone(),
        max_tokens: config.target_max_tokens,
        target_keying: config.target_keying,
        max_in_flight: config.max_in_flight,
    }
}

/// Sample the step's question ids from the twinned train sources.
fn sample_step_items<'a>(
    train: &'a [QuestionItem],
    config: &RunConfig,
    step: u32,
) -> Result<Vec<&'a QuestionItem>, OptimizerError> {
    let twinned: std::collections::BTreeSet<&str> = train
        .iter()
        .filter_map(|i| i.paraphrase_of.as_deref())
        .collect();
    let mut sources: Vec<&QuestionItem> = train
        .iter()
        .filter(|i| {
            !i.is_twin() && i.trait_dim == config.trait_dim && twinned.contains(i.id.as_str())
        })
        .collect();
    sources.sort_by(|a, b| a.id.cmp(&b.id));
    let q = config.questions_per_step as usize;
    if sources.len() < q {
        return Err(OptimizerError::State(format!(
            "train set has {} twinned sources, need {q} per step",
            sources.len()
        )));
    }
    let mut rng = seeds::rng(config.seed, &["qsample", &step.to_string()]);
    sources.shuffle(&mut rng);
    sources.truncate(q);
    Ok(sources)
}

/// Materialize a sampled source list into a self-contained sub-bank
/// (sources plus twins) for scoring.
fn with_twins(train: &[QuestionItem], sources: &[&QuestionItem]) -> Vec<QuestionItem> {
    let mut out = Vec::with_capacity(sources.len() * 2);
    for source in sources {
        out.push((*source).clone());
        if let Some(twin) = train
            .iter()
            .find(|i| i.paraphrase_of.as_deref() == Some(source.id.as_str()))
        {
            out.push(twin.clone());
        }
    }
    out
}

/// Run one optimization step against the next step index: sample q
/// questions, build the meta-prompt, draw k candidates at the optimizer
/// temperature, score each on the sample, and append them to the buffer.
pub fn step(
    buffer: &mut TrajectoryBuffer,
    config: &RunConfig,
    backends: &RunBackends,
    train: &[QuestionItem],
) -> Result<StepOutcome, OptimizerError> {
    if buffer.is_empty() {
        return Err(OptimizerError::State(
            "buffer must be seeded with a scored anchor before stepping".into(),
        ));
    }
    let step_index = buffer.step_counter();
    let sampled = sample_step_items(train, config, step_index)?;
    let sub_bank = with_twins(train, &sampled);

    let mut example_rng = seeds::rng(config.seed, &["meta-example", &step_index.to_string()]);
    let meta = build_meta_prompt(buffer, config, &with_twins(train, &sampled), &mut example_rng)?;
    let rendered = meta.render();

    let requests: Vec<_> = (0..config.candidates_per_step)
        .map(|j| {
            backends
                .optimizer
                .new_request(rendered.clone())
                .with_temperature(config.optimizer_temperature)
                .with_max_tokens(config.optimizer_max_tokens)
                .with_seed_hint(Some(seeds::derive(
                    config.seed,
                    &["cand", &step_index.to_string(), &j.to_string()],
                )))
        })
        .collect();
    let responses = backends.optimizer.complete_batch(&requests, config.max_in_flight);

    let opts = scoring_options(config);
    let mut appended = Vec::new();
    let mut administrations = Vec::new();
    let mut dropped = 0usize;
    for response in responses {
        let response = response.map_err(OptimizerError::Backend)?;
        let Some(text) = extract_candidate(
            &response.text,
            &config.instructions.sentinel_start,
            &config.instructions.sentinel_end,
        ) else {
            dropped += 1;
            continue;
        };
        let Ok(prompt) = PersonaPrompt::new(text, PromptOrigin::Generated { step: step_index })
        else {
            dropped += 1;
            continue;
        };
        let outcome = scoring::trait_scores(
            &prompt,
            config.trait_dim,
            &sub_bank,
            &backends.target,
            &opts,
            config.seed,
            step_index,
        )?;
        administrations.extend(outcome.administrations.into_iter().map(|administration| {
            LoggedAdministration { step: step_index, prompt_id: prompt.id.clone(), administration }
        }));
        appended.push(outcome.scored);
    }
    for entry in &appended {
        buffer.append(entry.clone());
    }
    Ok(StepOutcome { step: step_index, appended, dropped, administrations })
}

/// Score the empty anchor persona on step 0's question sample, seeding the
/// buffer so the trajectory always has an anchor entry.
pub fn seed_buffer(
    buffer: &mut TrajectoryBuffer,
    config: &RunConfig,
    backends: &RunBackends,
    train: &[QuestionItem],
) -> Result<Vec<LoggedAdministration>, OptimizerError> {
    let sampled = sample_step_items(train, config, 0)?;
    let sub_bank = with_twins(train, &sampled);
    let prompt = PersonaPrompt::origin_empty();
    let outcome = scoring::trait_scores(
        &prompt,
        config.trait_dim,
        &sub_bank,
        &backends.target,
        &scoring_options(config),
        config.seed,
        0,
    )?;
    buffer.append(outcome.scored);
    Ok(outcome
        .administrations
        .into_iter()
        .map(|administration| LoggedAdministration {
            step: 0,
            prompt_id: prompt.id.clone(),
            administration,
        })
        .collect())
}

/// Final result of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub q_star: ScoredPrompt,
    pub steps_completed: u32,
    pub generated: usize,
    pub dropped: usize,
    /// Present when the optional full-train re-scoring pass ran; the
    /// re-scored top entries, best first. `q_star` is their argmax.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescored: Option<Vec<ScoredPrompt>>,
}

/// Well-known file layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.root.join("split-manifest.json")
    }

    pub fn buffer(&self) -> PathBuf {
        self.root.join("buffer.jsonl")
    }

    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }

    pub fn transcript_dir(&self) -> PathBuf {
        self.root.join("transcript")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn result(&self) -> PathBuf {
        self.root.join("result.json")
    }

    pub fn administration_log(&self) -> PathBuf {
        self.root.join("administrations.jsonl")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunState {
    /// Highest fully persisted step index; 0 means the seed entry is in.
    completed_step: u32,
    config_hash: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), OptimizerError> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json)
        .map_err(|e| OptimizerError::Io(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| OptimizerError::Io(format!("cannot publish {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, OptimizerError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| OptimizerError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| OptimizerError::Integrity(format!("{}: {e}", path.display())))
}

/// Load a run's config back from its directory.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig, OptimizerError> {
    read_json(&RunPaths::new(run_dir).config())
}

/// Load a run's buffer back from its directory.
pub fn load_buffer(run_dir: &Path) -> Result<TrajectoryBuffer, OptimizerError> {
    let paths = RunPaths::new(run_dir);
    let entries: Vec<ScoredPrompt> = jsonl::read_lines(&paths.buffer())
        .map_err(|e| OptimizerError::Integrity(e.to_string()))?;
    Ok(TrajectoryBuffer::from_entries(entries))
}

/// Load a run's result back from its directory.
pub fn load_result(run_dir: &Path) -> Result<OptimizationResult, OptimizerError> {
    read_json(&RunPaths::new(run_dir).result())
}

/// Execute (or resume) a full optimization run in `run_dir`, persisting
/// the buffer and state after every step so the run survives a crash at
/// any point. `stop_after` ends the run early after that many generated
/// steps without touching the config; resuming later continues exactly
/// where the run stopped.
pub fn run_resumable(
    config: &RunConfig,
    backends: &RunBackends,
    train: &[QuestionItem],
    manifest: Option<&SplitManifest>,
    run_dir: &Path,
    stop_after: Option<u32>,
) -> Result<Option<OptimizationResult>, OptimizerError> {
    config.validate().map_err(|e| OptimizerError::State(e.to_string()))?;
    let paths = RunPaths::new(run_dir);
    std::fs::create_dir_all(&paths.root)
        .map_err(|e| OptimizerError::Io(format!("cannot create run dir: {e}")))?;

    let config_hash = config.config_hash();
    let mut buffer;
    let mut completed;
    if paths.state().exists() {
        let state: RunState = read_json(&paths.state())?;
        if state.config_hash != config_hash {
            return Err(OptimizerError::Integrity(format!(
                "run directory was created with config hash {} but resume was requested with {}",
                state.config_hash, config_hash
            )));
        }
        buffer = load_buffer(&paths.root)?;
        // Entries past the recorded step belong to a partially persisted
        // step; drop them (and their log lines) so the step reruns cleanly.
        let entries: Vec<ScoredPrompt> = buffer
            .entries()
            .iter()
            .filter(|e| e.step <= state.completed_step)
            .cloned()
            .collect();
        jsonl::write_lines(&paths.buffer(), &entries)
            .map_err(|e| OptimizerError::Io(e.to_string()))?;
        buffer = TrajectoryBuffer::from_entries(entries);
        if paths.administration_log().exists() {
            let log: Vec<LoggedAdministration> = jsonl::read_lines(&paths.administration_log())
                .map_err(|e| OptimizerError::Integrity(e.to_string()))?;
            let kept: Vec<LoggedAdministration> = log
                .into_iter()
                .filter(|l| l.step <= state.completed_step)
                .collect();
            jsonl::write_lines(&paths.administration_log(), &kept)
                .map_err(|e| OptimizerError::Io(e.to_string()))?;
        }
        completed = state.completed_step;
    } else {
        write_json(&paths.config(), config)?;
        if let Some(manifest) = manifest {
            manifest
                .save(&paths.split_manifest())
                .map_err(|e| OptimizerError::Io(e.to_string()))?;
        }
        buffer = TrajectoryBuffer::new();
        let seed_log = seed_buffer(&mut buffer, config, backends, train)?;
        jsonl::write_lines(&paths.buffer(), buffer.entries())
            .map_err(|e| OptimizerError::Io(e.to_string()))?;
        jsonl::append_lines(&paths.administration_log(), &seed_log)
            .map_err(|e| OptimizerError::Io(e.to_string()))?;
        completed = 0;
        write_json(&paths.state(), &RunState { completed_step: 0, config_hash: config_hash.clone() })?;
    }

    while completed < config.max_steps {
        if let Some(limit) = stop_after {
            if completed >= limit {
                return Ok(None);
            }
        }
        let outcome = step(&mut buffer, config, backends, train)?;
        jsonl::append_lines(&paths.buffer(), &outcome.appended)
            .map_err(|e| OptimizerError::Io(e.to_string()))?;
        jsonl::append_lines(&paths.administration_log(), &outcome.administrations)
            .map_err(|e| OptimizerError::Io(e.to_string()))?;
        completed = outcome.step;
        write_json(
            &paths.state(),
            &RunState { completed_step: completed, config_hash: config_hash.clone() },
        )?;
    }

    let result = finalize(&buffer, config, backends, train)?;
    write_json(&paths.result(), &result)?;
    Ok(Some(result))
}

/// Run to completion (see [`run_resumable`]).
pub fn run(
    config: &RunConfig,
    backends: &RunBackends,
    train: &[QuestionItem],
    manifest: Option<&SplitManifest>,
    run_dir: &Path,
) -> Result<OptimizationResult, OptimizerError> {
    Ok(run_resumable(config, backends, train, manifest, run_dir, None)?
        .expect("run without stop_after always finishes"))
}

fn finalize(
    buffer: &TrajectoryBuffer,
    config: &RunConfig,
    backends: &RunBackends,
    train: &[QuestionItem],
) -> Result<OptimizationResult, OptimizerError> {
    let generated = buffer.entries().iter().filter(|e| e.step > 0).count();
    let expected: usize = (config.max_steps * config.candidates_per_step) as usize;
    let dropped = expected.saturating_sub(generated);
    let steps_completed = buffer.step_counter().saturating_sub(1);

    let mut rescored = None;
    let q_star = match config.rescore_top {
        None => buffer
            .best()
            .cloned()
            .ok_or_else(|| OptimizerError::State("empty buffer at finalize".into()))?,
        Some(m) => {
            let top: Vec<&ScoredPrompt> = {
                let mut t = buffer.top_n_ascending(m as usize);
                t.reverse();
                t
            };
            let opts = scoring_options(config);
            let mut rescored_entries = Vec::new();
            for entry in top {
                let outcome = scoring::trait_scores(
                    &entry.prompt,
                    config.trait_dim,
                    train,
                    &backends.target,
                    &opts,
                    config.seed,
                    entry.step,
                )?;
                rescored_entries.push(outcome.scored);
            }
            rescored_entries.sort_by(|a, b| {
                if better_than(a, b) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            });
            let best = rescored_entries
                .first()
                .cloned()
                .ok_or_else(|| OptimizerError::State("rescore produced no entries".into()))?;
            rescored = Some(rescored_entries);
            best
        }
    };
    Ok(OptimizationResult {
        q_star,
        steps_completed,
        generated,
        dropped,
        rescored,
    })
}
