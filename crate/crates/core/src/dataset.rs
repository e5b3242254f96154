//! Item-bank ingestion, paraphrase-twin augmentation, and deterministic
//! train/test splits.
//!
//! Banks are line-delimited JSON (`schemas/` in the repo documents the
//! record shapes). Dark-Triad-labelled records are filtered out at load
//! time with a count, since the engine only scores Big-Five traits.

use crate::backend::{Backend, BackendError, ChatRequest};
use crate::domain::{
    validate_item_bank, InstructionSet, QuestionItem, TraitDimension, ValidationReport, Violation,
};
use crate::seeds;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Trait labels recognized as Dark Triad and filtered from banks.
const DARK_TRIAD_LABELS: [&str; 3] = ["machiavellianism", "narcissism", "psychopathy"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("format error: {0}")]
    Format(String),
    #[error("bank failed validation with {} violation(s): {}", .0.len(), summarize_violations(.0))]
    Data(Vec<Violation>),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(String),
}

fn summarize_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .take(5)
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// How a question bank is partitioned for one trait.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Default partition: 200 training questions, 800 test questions.
    pub fn new(trait_dim: TraitDimension, seed: u64) -> Self {
        SplitSpec { trait_dim, train_size: 200, test_size: 800, seed }
    }
}

/// A loaded question bank plus load-time bookkeeping.
#[derive(Debug)]
pub struct LoadedBank {
    pub items: Vec<QuestionItem>,
    /// Records skipped because they carried a Dark Triad trait label.
    pub dark_triad_filtered: usize,
    pub report: ValidationReport,
}

fn parse_lines(path: &Path) -> Result<Vec<(usize, serde_json::Value)>, DatasetError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| DatasetError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            DatasetError::Format(format!("{} line {}: {e}", path.display(), idx + 1))
        })?;
        values.push((idx + 1, value));
    }
    if values.is_empty() {
        return Err(DatasetError::Format(format!(
            "{}: empty bank (no records)",
            path.display()
        )));
    }
    Ok(values)
}

fn is_dark_triad(value: &serde_json::Value) -> bool {
    value
        .get("trait")
        .and_then(|t| t.as_str())
        .is_some_and(|t| DARK_TRIAD_LABELS.contains(&t.to_ascii_lowercase().as_str()))
}

/// Load a question bank. The bank must pass [`validate_item_bank`];
/// violations are a data error, not a partial load.
pub fn load_bank(path: &Path) -> Result<LoadedBank, DatasetError> {
    let mut items = Vec::new();
    let mut dark_triad_filtered = 0usize;
    for (line, value) in parse_lines(path)? {
        if is_dark_triad(&value) {
            dark_triad_filtered += 1;
            continue;
        }
        let item: QuestionItem = serde_json::from_value(value).map_err(|e| {
            DatasetError::Format(format!("{} line {line}: {e}", path.display()))
        })?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(DatasetError::Format(format!(
            "{}: no Big-Five records after filtering",
            path.display()
        )));
    }
    let report = validate_item_bank(&items);
    if !report.is_valid() {
        return Err(DatasetError::Data(report.violations));
    }
    Ok(LoadedBank { items, dark_triad_filtered, report })
}

/// Load a Likert statement bank, filtering Dark Triad labels the same way.
pub fn load_likert_bank(path: &Path) -> Result<Vec<crate::domain::LikertItem>, DatasetError> {
    let mut items: Vec<crate::domain::LikertItem> = Vec::new();
    for (line, value) in parse_lines(path)? {
        if is_dark_triad(&value) {
            continue;
        }
        let item: crate::domain::LikertItem = serde_json::from_value(value).map_err(|e| {
            DatasetError::Format(format!("{} line {line}: {e}", path.display()))
        })?;
        items.push(item);
    }
    let mut violations = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for item in &items {
        if item.statement.trim().is_empty() {
            violations.push(Violation { item_id: item.id.clone(), message: "empty statement".into() });
        }
        if !seen.insert(item.id.clone()) {
            violations.push(Violation { item_id: item.id.clone(), message: "duplicate item id".into() });
        }
    }
    if !violations.is_empty() {
        return Err(DatasetError::Data(violations));
    }
    Ok(items)
}

/// Persisted record of a split, keyed by source-item ids, so a run is
/// auditable and reproducible from its run directory alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)
            .map_err(|e| DatasetError::Io(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| DatasetError::Io(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))
    }

    /// Materialize one side of the split from the full bank, carrying each
    /// source's twin along.
    pub fn select(&self, items: &[QuestionItem], ids: &[String]) -> Vec<QuestionItem> {
        collect_with_twins(items, ids)
    }
}

fn collect_with_twins(items: &[QuestionItem], ids: &[String]) -> Vec<QuestionItem> {
    let by_id: BTreeMap<&str, &QuestionItem> =
        items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut twin_of: BTreeMap<&str, &QuestionItem> = BTreeMap::new();
    for item in items {
        if let Some(source) = item.paraphrase_of.as_deref() {
            twin_of.insert(source, item);
        }
    }
    let mut out = Vec::new();
    for id in ids {
        if let Some(source) = by_id.get(id.as_str()) {
            out.push((*source).clone());
            if let Some(twin) = twin_of.get(id.as_str()) {
                out.push((*twin).clone());
            }
        }
    }
    out
}

/// Partition the bank's source items for one trait into disjoint train and
/// test sets. The split is a pure function of (item ids, spec): ids are
/// sorted, shuffled with a seed derived from (spec.seed, trait), and taken
/// in order. Twins follow their sources into each side.
pub fn split(
    items: &[QuestionItem],
    spec: &SplitSpec,
) -> Result<(Vec<QuestionItem>, Vec<QuestionItem>), DatasetError> {
    let manifest = split_manifest(items, spec)?;
    let train = collect_with_twins(items, &manifest.train_ids);
    let test = collect_with_twins(items, &manifest.test_ids);
    Ok((train, test))
}

/// Compute the split manifest without materializing the item lists.
pub fn split_manifest(
    items: &[QuestionItem],
    spec: &SplitSpec,
) -> Result<SplitManifest, DatasetError> {
    let mut source_ids: Vec<&str> = items
        .iter()
        .filter(|i| !i.is_twin() && i.trait_dim == spec.trait_dim)
        .map(|i| i.id.as_str())
        .collect();
    let need = spec.train_size + spec.test_size;
    if source_ids.len() < need {
        return Err(DatasetError::Capacity(format!(
            "trait {} has {} source items, need {} (train {} + test {})",
            spec.trait_dim.code(),
            source_ids.len(),
            need,
            spec.train_size,
            spec.test_size
        )));
    }
    source_ids.sort_unstable();
    let mut rng = seeds::rng(spec.seed, &["split", spec.trait_dim.code()]);
    source_ids.shuffle(&mut rng);
    let train_ids = source_ids[..spec.train_size].iter().map(|s| s.to_string()).collect();
    let test_ids = source_ids[spec.train_size..need].iter().map(|s| s.to_string()).collect();
    Ok(SplitManifest { spec: spec.clone(), train_ids, test_ids })
}

/// Why one item could not be twinned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentFailure {
    pub item_id: String,
    pub reason: String,
}

/// Result of an augmentation pass: the bank (sources plus twins) and the
/// items left twin-less.
#[derive(Debug)]
pub struct AugmentOutcome {
    pub bank: Vec<QuestionItem>,
    pub created: usize,
    pub failures: Vec<AugmentFailure>,
}

/// Markers the paraphrase prompt wraps around the source text; narrow
/// enough for scripted mocks to extract, explicit enough for real models.
pub const AUGMENT_SOURCE_START: &str = "<<<SOURCE>>>\n";
pub const AUGMENT_SOURCE_END: &str = "\n<<<END>>>";

fn augment_request(
    backend: &Backend,
    instructions: &InstructionSet,
    text: &str,
    max_tokens: u32,
) -> ChatRequest {
    backend
        .new_request(format!(
            "{}\n\n{AUGMENT_SOURCE_START}{text}{AUGMENT_SOURCE_END}",
            instructions.augment_instruction
        ))
        .with_max_tokens(max_tokens)
}

fn degenerate_reason(source: &str, reply: &str) -> Option<String> {
    let reply = reply.trim();
    if reply.len() < 10 {
        return Some(format!("degenerate paraphrase ({} chars)", reply.len()));
    }
    if reply == source.trim() {
        return Some("paraphrase identical to source".to_string());
    }
    None
}

/// Create one paraphrase twin per source item that lacks one. The twin
/// keeps the options byte-identical and paraphrases the scenario and the
/// question through the augmenter backend (one call per field). Items with
/// degenerate or failed paraphrases stay twin-less and are reported.
///
/// Augmenter calls run at temperature 0, so a cached backend makes reruns
/// free.
pub fn augment(
    items: &[QuestionItem],
    backend: &Backend,
    instructions: &InstructionSet,
    max_tokens: u32,
    max_in_flight: usize,
) -> Result<AugmentOutcome, DatasetError> {
    let already_twinned: std::collections::BTreeSet<&str> = items
        .iter()
        .filter_map(|i| i.paraphrase_of.as_deref())
        .collect();
    let existing_ids: std::collections::BTreeSet<&str> =
        items.iter().map(|i| i.id.as_str()).collect();
    let pending: Vec<&QuestionItem> = items
        .iter()
        .filter(|i| !i.is_twin() && !already_twinned.contains(i.id.as_str()))
        .collect();

    let mut requests = Vec::with_capacity(pending.len() * 2);
    for item in &pending {
        requests.push(augment_request(backend, instructions, &item.scenario, max_tokens));
        requests.push(augment_request(backend, instructions, &item.question, max_tokens));
    }
    let responses = backend.complete_batch(&requests, max_in_flight);

    let mut bank = items.to_vec();
    let mut failures = Vec::new();
    let mut created = 0usize;
    for (n, item) in pending.iter().enumerate() {
        let scenario_reply = &responses[2 * n];
        let question_reply = &responses[2 * n + 1];
        let mut fail = |reason: String| {
            failures.push(AugmentFailure { item_id: item.id.clone(), reason });
        };
        let (scenario, question) = match (scenario_reply, question_reply) {
            (Err(e), _) | (_, Err(e)) => {
                fail(format!("augmenter call failed: {e}"));
                continue;
            }
            (Ok(s), Ok(q)) => (s.text.trim().to_string(), q.text.trim().to_string()),
        };
        if let Some(reason) = degenerate_reason(&item.scenario, &scenario) {
            fail(format!("scenario: {reason}"));
            continue;
        }
        if let Some(reason) = degenerate_reason(&item.question, &question) {
            fail(format!("question: {reason}"));
            continue;
        }
        let twin_id = format!("{}-aug", item.id);
        if existing_ids.contains(twin_id.as_str()) {
            fail(format!("twin id `{twin_id}` already taken"));
            continue;
        }
        bank.push(QuestionItem {
            id: twin_id,
            trait_dim: item.trait_dim,
            scenario,
            question,
            options: item.options.clone(),
            paraphrase_of: Some(item.id.clone()),
        });
        created += 1;
    }

    let report = validate_item_bank(&bank);
    if !report.is_valid() {
        return Err(DatasetError::Data(report.violations));
    }
    Ok(AugmentOutcome { bank, created, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBehavior, MockScript};
    use crate::domain::{AnswerOption, OptionLabel, TraitKeying};
    use crate::jsonl;
    use std::collections::BTreeSet;

    fn make_item(id: &str, trait_dim: TraitDimension) -> QuestionItem {
        QuestionItem {
            id: id.to_string(),
            trait_dim,
            scenario: format!("A long enough scenario text for {id}."),
            question: format!("What would you do about {id}?"),
            options: vec![
                AnswerOption { label: OptionLabel::A, text: format!("opt-a-{id}"), keyed: TraitKeying::High },
                AnswerOption { label: OptionLabel::B, text: format!("opt-b-{id}"), keyed: TraitKeying::Low },
                AnswerOption { label: OptionLabel::C, text: format!("opt-c-{id}"), keyed: TraitKeying::High },
                AnswerOption { label: OptionLabel::D, text: format!("opt-d-{id}"), keyed: TraitKeying::Low },
            ],
            paraphrase_of: None,
        }
    }

    fn make_bank(n: usize, trait_dim: TraitDimension) -> Vec<QuestionItem> {
        (0..n)
            .map(|i| make_item(&format!("{}-{i:04}", trait_dim.code().to_lowercase()), trait_dim))
            .collect()
    }

    fn echo_backend() -> Backend {
        let script = MockScript {
            seed: 0,
            rules: Vec::new(),
            default: MockBehavior::EchoBetween {
                start: AUGMENT_SOURCE_START.to_string(),
                end: AUGMENT_SOURCE_END.to_string(),
                prefix: "REPHRASED: ".to_string(),
                max_words: None,
            },
        };
        Backend::new("augmenter", Box::new(crate::backend::MockBackend::new(script)))
    }

    fn write_bank(items: &[QuestionItem]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        jsonl::write_lines(&path, items).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_valid_bank() {
        let bank = make_bank(1000, TraitDimension::Openness);
        let (_dir, path) = write_bank(&bank);
        let loaded = load_bank(&path).unwrap();
        assert_eq!(loaded.items.len(), 1000);
        assert_eq!(loaded.dark_triad_filtered, 0);
        assert!(loaded.report.is_valid());
    }

    #[test]
    fn empty_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_bank(&path), Err(DatasetError::Format(_))));
    }

    #[test]
    fn parse_failure_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"x\"}\n").unwrap();
        let err = load_bank(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn dark_triad_items_are_filtered_and_counted() {
        let bank = make_bank(4, TraitDimension::Openness);
        let (_dir, path) = write_bank(&bank);
        let mut raw = std::fs::read_to_string(&path).unwrap();
        for i in 0..3 {
            raw.push_str(&format!(
                "{{\"id\":\"dt-{i}\",\"trait\":\"machiavellianism\",\"scenario\":\"s\",\"question\":\"q\",\"options\":[]}}\n"
            ));
        }
        std::fs::write(&path, raw).unwrap();
        let loaded = load_bank(&path).unwrap();
        assert_eq!(loaded.items.len(), 4);
        assert_eq!(loaded.dark_triad_filtered, 3);
    }

    #[test]
    fn invalid_bank_is_data_error() {
        let mut bank = make_bank(2, TraitDimension::Openness);
        bank[1].options.pop();
        let (_dir, path) = write_bank(&bank);
        match load_bank(&path) {
            Err(DatasetError::Data(violations)) => {
                assert!(violations.iter().any(|v| v.message == "option count 3 ≠ 4"));
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let bank = make_bank(50, TraitDimension::Extraversion);
        let spec = SplitSpec {
            trait_dim: TraitDimension::Extraversion,
            train_size: 10,
            test_size: 30,
            seed: 7,
        };
        let (train_a, test_a) = split(&bank, &spec).unwrap();
        let (train_b, test_b) = split(&bank, &spec).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        assert_eq!(train_a.len(), 10);
        assert_eq!(test_a.len(), 30);
        let train_ids: BTreeSet<&str> = train_a.iter().map(|i| i.id.as_str()).collect();
        let test_ids: BTreeSet<&str> = test_a.iter().map(|i| i.id.as_str()).collect();
        assert!(train_ids.is_disjoint(&test_ids));
    }

    #[test]
    fn split_is_input_order_independent() {
        let bank = make_bank(50, TraitDimension::Extraversion);
        let mut reversed = bank.clone();
        reversed.reverse();
        let spec = SplitSpec {
            trait_dim: TraitDimension::Extraversion,
            train_size: 10,
            test_size: 30,
            seed: 7,
        };
        assert_eq!(
            split_manifest(&bank, &spec).unwrap(),
            split_manifest(&reversed, &spec).unwrap()
        );
    }

    #[test]
    fn different_seeds_partition_differently() {
        let bank = make_bank(60, TraitDimension::Openness);
        let mut spec = SplitSpec {
            trait_dim: TraitDimension::Openness,
            train_size: 20,
            test_size: 30,
            seed: 7,
        };
        let a = split_manifest(&bank, &spec).unwrap();
        spec.seed = 8;
        let b = split_manifest(&bank, &spec).unwrap();
        assert_ne!(a.train_ids, b.train_ids);
    }

    #[test]
    fn insufficient_items_is_capacity_error() {
        let bank = make_bank(100, TraitDimension::Openness);
        let spec = SplitSpec::new(TraitDimension::Openness, 7);
        assert!(matches!(split(&bank, &spec), Err(DatasetError::Capacity(_))));
    }

    #[test]
    fn split_carries_twins_with_sources() {
        let mut bank = make_bank(20, TraitDimension::Openness);
        let twins: Vec<QuestionItem> = bank
            .iter()
            .map(|src| QuestionItem {
                id: format!("{}-aug", src.id),
                paraphrase_of: Some(src.id.clone()),
                ..src.clone()
            })
            .collect();
        bank.extend(twins);
        let spec = SplitSpec {
            trait_dim: TraitDimension::Openness,
            train_size: 5,
            test_size: 10,
            seed: 1,
        };
        let (train, test) = split(&bank, &spec).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 20);
        for side in [&train, &test] {
            let sources: BTreeSet<&str> = side
                .iter()
                .filter(|i| !i.is_twin())
                .map(|i| i.id.as_str())
                .collect();
            for item in side.iter().filter(|i| i.is_twin()) {
                assert!(sources.contains(item.paraphrase_of.as_deref().unwrap()));
            }
        }
    }

    #[test]
    fn augment_creates_one_twin_per_item() {
        let bank = make_bank(8, TraitDimension::Neuroticism);
        let backend = echo_backend();
        let outcome = augment(&bank, &backend, &InstructionSet::default(), 256, 4).unwrap();
        assert_eq!(outcome.created, 8);
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.bank.len(), 16);
        let twin = outcome.bank.iter().find(|i| i.id == "neu-0000-aug").unwrap();
        assert!(twin.scenario.starts_with("REPHRASED: "));
        assert_eq!(twin.options, bank[0].options);
        assert_eq!(twin.paraphrase_of.as_deref(), Some("neu-0000"));
        let report = validate_item_bank(&outcome.bank);
        assert!(report.is_valid());
        assert!((report.paraphrase_coverage - 1.0).abs() < 1e-12);
    }

    #[test]
    fn augment_skips_already_twinned_sources() {
        let bank = make_bank(3, TraitDimension::Neuroticism);
        let backend = echo_backend();
        let once = augment(&bank, &backend, &InstructionSet::default(), 256, 2).unwrap();
        let twice = augment(&once.bank, &backend, &InstructionSet::default(), 256, 2).unwrap();
        assert_eq!(twice.created, 0);
        assert_eq!(twice.bank.len(), once.bank.len());
    }

    #[test]
    fn degenerate_paraphrase_leaves_item_twinless() {
        let bank = make_bank(2, TraitDimension::Openness);
        let script = MockScript::constant("");
        let backend =
            Backend::new("augmenter", Box::new(crate::backend::MockBackend::new(script)));
        let outcome = augment(&bank, &backend, &InstructionSet::default(), 256, 2).unwrap();
        assert_eq!(outcome.created, 0);
        assert_eq!(outcome.failures.len(), 2);
        assert!(outcome.failures[0].reason.contains("degenerate"));
        assert_eq!(outcome.bank.len(), 2);
    }
}
