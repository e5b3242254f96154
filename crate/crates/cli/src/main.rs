//! Single binary exposing the pipeline: validate and augment item banks,
//! run optimizations, evaluate conditions, build transfer matrices, and
//! emit curves and checkpoints.
//!
//! Exit codes: 0 ok, 2 data error, 3 configuration error, 4 transport
//! error, 5 integrity error, so CI pipelines can branch on failure class.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::ResolvedConfig;
use personaforge::backend::BackendError;
use personaforge::dataset::{self, DatasetError, SplitManifest, SplitSpec};
use personaforge::domain::{RunConfig, TraitDimension};
use personaforge::evaluation::{
    self, CellOutcome, Condition, EvalItems, EvaluationError,
};
use personaforge::optimizer::{self, OptimizerError, RunBackends, RunPaths};
use personaforge::scoring::{ScoringError, ScoringOptions};
use personaforge::trajectory::{self, CheckpointSource, CurveStat, TrajectoryError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "personaforge",
    version,
    about = "Optimize and evaluate persona-profile prompts for trait expression in chat LLMs"
)]
struct Cli {
    /// JSON config file (also via PERSONAFORGE_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for all randomness (also via PERSONAFORGE_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Item-bank operations: validate, augment, split.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Run prompt optimization for one trait.
    Optimize(OptimizeArgs),
    /// Evaluate one condition on one model.
    Evaluate(EvaluateArgs),
    /// Evaluate a models × conditions × traits grid.
    Transfer(TransferArgs),
    /// Emit the training curve of a completed run.
    Curve(CurveArgs),
    /// Export checkpoint prompts from a completed run.
    Checkpoint(CheckpointArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Validate a question bank and report violations.
    Validate { bank: PathBuf },
    /// Create paraphrase twins for every untwinned item.
    Augment {
        bank: PathBuf,
        /// Augmenter backend reference or mock-script path.
        #[arg(long)]
        backend: String,
        /// Output bank path.
        #[arg(long)]
        out: PathBuf,
        /// Response-cache directory (defaults next to the output).
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        max_tokens: u32,
    },
    /// Produce a deterministic train/test split manifest.
    Split {
        bank: PathBuf,
        #[arg(long, value_parser = parse_trait)]
        trait_dim: TraitDimension,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 800)]
        test: usize,
        /// Manifest output path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long = "trait", value_parser = parse_trait)]
    trait_dim: TraitDimension,
    /// Twinned question bank.
    #[arg(long)]
    bank: PathBuf,
    /// Run directory (created; reused with --resume).
    #[arg(long)]
    run: PathBuf,
    /// Existing split manifest; otherwise a fresh split is drawn.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Resume an interrupted run in --run.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    candidates: Option<u32>,
    #[arg(long)]
    top_n: Option<u32>,
    #[arg(long)]
    questions: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Re-score the top-m entries on the full train set before picking
    /// the best prompt.
    #[arg(long)]
    rescore_top: Option<u32>,
    #[arg(long)]
    target_max_tokens: Option<u32>,
    #[arg(long)]
    optimizer_max_tokens: Option<u32>,
    #[arg(long, default_value = "optimizer")]
    optimizer_backend: String,
    #[arg(long, default_value = "target")]
    target_backend: String,
    /// Train/test sizes used when drawing a fresh split.
    #[arg(long, default_value_t = 200)]
    train_size: usize,
    #[arg(long, default_value_t = 800)]
    test_size: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long = "trait", value_parser = parse_trait)]
    trait_dim: TraitDimension,
    /// Model backend reference or mock-script path.
    #[arg(long)]
    model: String,
    /// Condition spec: origin | dp | p2 | naive | naive:<prefix> |
    /// profile=<run-dir-or-checkpoint> | profile_star=<run-dir>.
    #[arg(long)]
    condition: String,
    #[arg(long)]
    bank: PathBuf,
    /// Restrict the bank to one side of a split manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Which manifest side to evaluate.
    #[arg(long, default_value = "test")]
    side: String,
    /// Treat the bank as Likert statements instead of questions.
    #[arg(long)]
    likert: bool,
    #[arg(long, default_value_t = 15)]
    trials: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Comma-separated model references.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Comma-separated condition specs (see `evaluate --condition`).
    #[arg(long, value_delimiter = ',')]
    conditions: Vec<String>,
    /// Comma-separated traits (default: all five).
    #[arg(long, value_delimiter = ',', value_parser = parse_trait)]
    traits: Vec<TraitDimension>,
    #[arg(long)]
    bank: PathBuf,
    /// Restrict the bank to one side of a split manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    side: String,
    #[arg(long)]
    likert: bool,
    #[arg(long, default_value_t = 15)]
    trials: u32,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent matrix cells.
    #[arg(long, default_value_t = 2)]
    cell_parallelism: usize,
}

#[derive(Args)]
struct CurveArgs {
    run: PathBuf,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value = "mean")]
    stat: String,
}

#[derive(Args)]
struct CheckpointArgs {
    run: PathBuf,
    /// Steps to export, e.g. 6,16,24.
    #[arg(long, value_delimiter = ',', required = true)]
    steps: Vec<u32>,
    /// Also write one-sentence summaries with this backend.
    #[arg(long)]
    summarize: Option<String>,
    #[arg(long, default_value_t = 128)]
    summary_max_tokens: u32,
}

fn parse_trait(raw: &str) -> Result<TraitDimension, String> {
    TraitDimension::from_str(raw).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version print normally; usage mistakes are config
            // errors in the exit-code taxonomy.
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::from(3);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Deepest classifiable cause wins, so a transport failure buried inside
/// an optimizer error still exits 4.
fn classify(err: &anyhow::Error) -> u8 {
    let mut code = 3u8;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            code = match e {
                BackendError::Transport(_) => 4,
                BackendError::Integrity(_) => 5,
                BackendError::Configuration(_) | BackendError::InvalidRequest(_) => 3,
            };
        } else if let Some(e) = cause.downcast_ref::<DatasetError>() {
            code = match e {
                DatasetError::Backend(inner) => match inner {
                    BackendError::Transport(_) => 4,
                    BackendError::Integrity(_) => 5,
                    _ => 3,
                },
                _ => 2,
            };
        } else if let Some(e) = cause.downcast_ref::<ScoringError>() {
            code = match e {
                ScoringError::Backend { source, .. } => match source {
                    BackendError::Transport(_) => 4,
                    BackendError::Integrity(_) => 5,
                    _ => 3,
                },
                _ => 2,
            };
        } else if let Some(e) = cause.downcast_ref::<OptimizerError>() {
            code = match e {
                OptimizerError::Integrity(_) => 5,
                OptimizerError::State(_) => 3,
                OptimizerError::Io(_) => 2,
                OptimizerError::Scoring(_) | OptimizerError::Backend(_) => continue,
            };
        } else if let Some(e) = cause.downcast_ref::<EvaluationError>() {
            code = match e {
                EvaluationError::MissingTwins { .. } | EvaluationError::TraitAbsent(_) => 2,
                EvaluationError::Condition(_) => 3,
                EvaluationError::Io(_) => 2,
                EvaluationError::Scoring(_) | EvaluationError::Optimizer(_) => continue,
            };
        } else if let Some(e) = cause.downcast_ref::<TrajectoryError>() {
            code = match e {
                TrajectoryError::MissingStep(_) | TrajectoryError::WindowTooSmall => 3,
                _ => 2,
            };
        }
    }
    code
}

fn run(cli: Cli) -> Result<ExitCode> {
    let resolved = ResolvedConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Dataset(command) => dataset_command(command, &resolved),
        Command::Optimize(args) => optimize_command(args, &resolved),
        Command::Evaluate(args) => evaluate_command(args, &resolved),
        Command::Transfer(args) => transfer_command(args, &resolved),
        Command::Curve(args) => curve_command(args),
        Command::Checkpoint(args) => checkpoint_command(args, &resolved),
    }
}

fn scoring_options(resolved: &ResolvedConfig) -> ScoringOptions {
    ScoringOptions {
        instructions: resolved.instructions.clone(),
        max_tokens: 16,
        target_keying: resolved.target_keying,
        max_in_flight: resolved.max_in_flight,
    }
}

fn dataset_command(command: DatasetCommand, resolved: &ResolvedConfig) -> Result<ExitCode> {
    match command {
        DatasetCommand::Validate { bank } => match dataset::load_bank(&bank) {
            Ok(loaded) => {
                println!(
                    "valid: {} items ({} sources, {} twins), paraphrase coverage {:.1}%, {} dark-triad records filtered",
                    loaded.items.len(),
                    loaded.report.source_count,
                    loaded.report.twin_count,
                    loaded.report.paraphrase_coverage * 100.0,
                    loaded.dark_triad_filtered
                );
                for (dim, count) in &loaded.report.per_trait_counts {
                    println!("  {}: {count}", dim.code());
                }
                Ok(ExitCode::SUCCESS)
            }
            Err(DatasetError::Data(violations)) => {
                eprintln!("invalid bank: {} violation(s)", violations.len());
                for violation in &violations {
                    eprintln!("  {violation}");
                }
                Ok(ExitCode::from(2))
            }
            Err(other) => Err(other.into()),
        },
        DatasetCommand::Augment { bank, backend, out, cache_dir, max_tokens } => {
            let loaded = dataset::load_bank(&bank)?;
            let cache = cache_dir.unwrap_or_else(|| out.with_extension("cache"));
            let augmenter = resolved.resolve_backend(&backend, Some(&cache))?;
            let outcome = dataset::augment(
                &loaded.items,
                &augmenter,
                &resolved.instructions,
                max_tokens,
                resolved.max_in_flight,
            )?;
            personaforge::jsonl::write_lines(&out, &outcome.bank)
                .map_err(|e| anyhow!(e.to_string()))?;
            println!(
                "augmented: {} twins created, {} failures, bank written to {}",
                outcome.created,
                outcome.failures.len(),
                out.display()
            );
            for failure in &outcome.failures {
                eprintln!("  twin-less `{}`: {}", failure.item_id, failure.reason);
            }
            Ok(ExitCode::SUCCESS)
        }
        DatasetCommand::Split { bank, trait_dim, train, test, out } => {
            let loaded = dataset::load_bank(&bank)?;
            let spec = SplitSpec { trait_dim, train_size: train, test_size: test, seed: resolved.seed };
            let manifest = dataset::split_manifest(&loaded.items, &spec)?;
            manifest.save(&out)?;
            println!(
                "split: {} train / {} test source ids written to {}",
                manifest.train_ids.len(),
                manifest.test_ids.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn optimize_command(args: OptimizeArgs, resolved: &ResolvedConfig) -> Result<ExitCode> {
    let loaded = dataset::load_bank(&args.bank)?;
    let mut config = RunConfig::for_trait(args.trait_dim);
    config.seed = resolved.seed;
    config.target_keying = resolved.target_keying;
    config.max_in_flight = resolved.max_in_flight;
    config.cache_stochastic = resolved.cache_stochastic;
    config.instructions = resolved.instructions.clone();
    config.optimizer_backend = args.optimizer_backend.clone();
    config.target_backend = args.target_backend.clone();
    if let Some(steps) = args.steps {
        config.max_steps = steps;
    }
    if let Some(k) = args.candidates {
        config.candidates_per_step = k;
    }
    if let Some(n) = args.top_n {
        config.trajectory_top_n = n;
    }
    if let Some(q) = args.questions {
        config.questions_per_step = q;
    }
    if let Some(t) = args.temperature {
        config.optimizer_temperature = t;
    }
    if let Some(tokens) = args.target_max_tokens {
        config.target_max_tokens = tokens;
    }
    if let Some(tokens) = args.optimizer_max_tokens {
        config.optimizer_max_tokens = tokens;
    }
    config.rescore_top = args.rescore_top;

    let paths = RunPaths::new(&args.run);
    if paths.state().exists() && !args.resume {
        bail!(
            "run directory {} already holds a run; pass --resume to continue it",
            args.run.display()
        );
    }

    let manifest = match &args.manifest {
        Some(path) => {
            let manifest = SplitManifest::load(path)?;
            if manifest.spec.trait_dim != args.trait_dim {
                bail!(
                    "manifest {} is for trait {}, not {}",
                    path.display(),
                    manifest.spec.trait_dim.code(),
                    args.trait_dim.code()
                );
            }
            manifest
        }
        None => {
            let spec = SplitSpec {
                trait_dim: args.trait_dim,
                train_size: args.train_size,
                test_size: args.test_size,
                seed: resolved.seed,
            };
            dataset::split_manifest(&loaded.items, &spec)?
        }
    };
    let train = manifest.select(&loaded.items, &manifest.train_ids);

    let transcript = paths.transcript_dir();
    let backends = RunBackends {
        optimizer: resolved.resolve_backend(&config.optimizer_backend, Some(&transcript))?,
        target: resolved.resolve_backend(&config.target_backend, Some(&transcript))?,
    };
    resolved.echo(
        &args.run,
        "optimize",
        &[config.optimizer_backend.as_str(), config.target_backend.as_str()],
    )?;
    let result = optimizer::run(&config, &backends, &train, Some(&manifest), &args.run)?;
    println!(
        "optimized {} over {} steps: best s_ps {:.3} (prompt {} from step {})",
        config.trait_dim.code(),
        result.steps_completed,
        result.q_star.s_ps,
        result.q_star.prompt.id,
        result.q_star.step
    );
    if result.dropped > 0 {
        eprintln!(
            "warning: {} optimizer completion(s) had no parseable profile block and were dropped",
            result.dropped
        );
    }
    println!("run directory: {}", args.run.display());
    Ok(ExitCode::SUCCESS)
}

/// Parse a condition spec: origin | dp | description_prompt | p2 | naive |
/// naive:<prefix> | profile=<path> | profile_star=<path>. The dp and p2
/// templates come from the config file when overridden there.
fn parse_condition(raw: &str, resolved: &ResolvedConfig) -> Result<Condition> {
    if let Some(path) = raw.strip_prefix("profile=") {
        let path = Path::new(path);
        return Ok(if path.is_dir() {
            Condition::profile_from_run(path)
        } else {
            Condition::profile_from_checkpoint(path)
        });
    }
    if let Some(path) = raw.strip_prefix("profile_star=") {
        return Ok(Condition::profile_star_from_run(Path::new(path)));
    }
    if let Some(prefix) = raw.strip_prefix("naive:") {
        return Ok(Condition::naive_prefixed(prefix));
    }
    match raw {
        "origin" => Ok(Condition::Origin),
        "dp" | "description_prompt" => Ok(match &resolved.description_prompt_template {
            Some(template) => Condition::DescriptionPrompt { template: template.clone() },
            None => Condition::description_prompt(),
        }),
        "p2" => Ok(match &resolved.p2_template {
            Some(template) => Condition::P2 { template: template.clone() },
            None => Condition::p2(),
        }),
        "naive" => Ok(Condition::naive_minimal()),
        other => bail!("unknown condition `{other}`"),
    }
}

enum LoadedEvalBank {
    Trait(Vec<personaforge::domain::QuestionItem>),
    Likert(Vec<personaforge::domain::LikertItem>),
}

fn load_eval_bank(
    path: &Path,
    likert: bool,
    manifest: Option<&Path>,
    side: &str,
) -> Result<LoadedEvalBank> {
    if likert {
        if manifest.is_some() {
            bail!("--manifest applies to question banks, not Likert banks");
        }
        return Ok(LoadedEvalBank::Likert(dataset::load_likert_bank(path)?));
    }
    let items = dataset::load_bank(path)?.items;
    let items = match manifest {
        None => items,
        Some(path) => {
            let manifest = SplitManifest::load(path)?;
            let ids = match side {
                "test" => &manifest.test_ids,
                "train" => &manifest.train_ids,
                other => bail!("--side must be `test` or `train`, got `{other}`"),
            };
            manifest.select(&items, ids)
        }
    };
    Ok(LoadedEvalBank::Trait(items))
}

fn evaluate_command(args: EvaluateArgs, resolved: &ResolvedConfig) -> Result<ExitCode> {
    let condition = parse_condition(&args.condition, resolved)?;
    let bank = load_eval_bank(&args.bank, args.likert, args.manifest.as_deref(), &args.side)?;
    let backend = resolved.resolve_backend(&args.model, Some(&args.out.join("transcript")))?;
    resolved.echo(&args.out, "evaluate", &[args.model.as_str()])?;
    let options = scoring_options(resolved);
    let report = match &bank {
        LoadedEvalBank::Trait(items) => evaluation::evaluate(
            &condition,
            args.trait_dim,
            &backend,
            &EvalItems::Trait(items),
            &options,
            resolved.seed,
            Some(&args.out),
        )?,
        LoadedEvalBank::Likert(items) => evaluation::evaluate(
            &condition,
            args.trait_dim,
            &backend,
            &EvalItems::Likert { items, trials: args.trials },
            &options,
            resolved.seed,
            Some(&args.out),
        )?,
    };
    println!(
        "evaluated {} / {} / {}: {:.3} over {} items (report in {})",
        report.model_id,
        report.condition,
        report.trait_dim.code(),
        report.scores.headline(),
        report.n_items,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn transfer_command(args: TransferArgs, resolved: &ResolvedConfig) -> Result<ExitCode> {
    if args.models.is_empty() || args.conditions.is_empty() {
        bail!("transfer needs at least one model and one condition");
    }
    let traits: Vec<TraitDimension> = if args.traits.is_empty() {
        TraitDimension::ALL.to_vec()
    } else {
        args.traits.clone()
    };
    let conditions: Vec<Condition> = args
        .conditions
        .iter()
        .map(|raw| parse_condition(raw, resolved))
        .collect::<Result<_>>()?;
    let bank = load_eval_bank(&args.bank, args.likert, args.manifest.as_deref(), &args.side)?;
    let mut models = Vec::new();
    for reference in &args.models {
        let cache = args.out.join("transcript").join(reference.replace('/', "-"));
        models.push((reference.clone(), resolved.resolve_backend(reference, Some(&cache))?));
    }
    let refs: Vec<&str> = args.models.iter().map(|s| s.as_str()).collect();
    resolved.echo(&args.out, "transfer", &refs)?;

    let options = scoring_options(resolved);
    let matrix = match &bank {
        LoadedEvalBank::Trait(items) => evaluation::transfer_matrix(
            &models,
            &conditions,
            &traits,
            &EvalItems::Trait(items),
            &options,
            resolved.seed,
            Some(&args.out),
            args.cell_parallelism,
        ),
        LoadedEvalBank::Likert(items) => evaluation::transfer_matrix(
            &models,
            &conditions,
            &traits,
            &EvalItems::Likert { items, trials: args.trials },
            &options,
            resolved.seed,
            Some(&args.out),
            args.cell_parallelism,
        ),
    };
    matrix.save(&args.out)?;
    let failed = matrix
        .cells
        .iter()
        .filter(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
        .count();
    print!("{}", matrix.render_text());
    println!(
        "transfer grid: {} cells ({failed} failed) written to {}",
        matrix.cells.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn curve_command(args: CurveArgs) -> Result<ExitCode> {
    let stat = match args.stat.as_str() {
        "mean" => CurveStat::Mean,
        "max" => CurveStat::Max,
        other => bail!("unknown curve stat `{other}` (use mean or max)"),
    };
    let buffer = optimizer::load_buffer(&args.run)?;
    let curve = trajectory::curve_with_stat(&buffer, args.window, stat)?;
    let json_path = args.run.join("curve.json");
    let svg_path = args.run.join("curve.svg");
    trajectory::write_curve_json(&curve, &json_path)?;
    trajectory::write_curve_svg(&curve, &svg_path)?;
    println!(
        "curve over {} steps written to {} and {}",
        curve.points.len(),
        json_path.display(),
        svg_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_command(args: CheckpointArgs, resolved: &ResolvedConfig) -> Result<ExitCode> {
    let run_config = optimizer::load_run_config(&args.run)?;
    let buffer = optimizer::load_buffer(&args.run)?;
    let source = CheckpointSource {
        run_config_hash: run_config.config_hash(),
        target_backend: run_config.target_backend.clone(),
        trait_dim: run_config.trait_dim,
    };
    let selected = trajectory::checkpoints(&buffer, &args.steps, resolved.seed, &source)?;
    let dir = RunPaths::new(&args.run).checkpoints_dir();
    let paths = trajectory::export_checkpoints(&dir, &selected)?;
    for (checkpoint, path) in selected.iter().zip(&paths) {
        println!(
            "step {:>3}: s_ps {:.3} -> {}",
            checkpoint.step,
            checkpoint.s_ps,
            path.display()
        );
    }
    if let Some(reference) = &args.summarize {
        let backend =
            resolved.resolve_backend(reference, Some(&dir.join("summary-transcript")))?;
        let summaries = trajectory::summarize_checkpoints(
            &selected,
            &backend,
            &resolved.instructions,
            args.summary_max_tokens,
        );
        let rendered: Vec<serde_json::Value> = summaries
            .iter()
            .map(|(step, outcome)| match outcome {
                Ok(text) => serde_json::json!({"step": step, "summary": text}),
                Err(error) => serde_json::json!({"step": step, "error": error}),
            })
            .collect();
        let path = dir.join("summaries.json");
        std::fs::write(&path, serde_json::to_string_pretty(&rendered)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!("summaries written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
