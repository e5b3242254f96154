//! Core vocabulary shared by every other module: traits, prompts, question
//! and Likert items, scores, and run configuration.
//!
//! All types here are immutable value objects; they are cheap to clone and
//! safe to share between concurrent tasks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

/// Errors raised by domain-level validation.
#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("persona prompt text must be non-empty")]
    EmptyPromptText,
    #[error("likert rating {0} outside 1..=5")]
    RatingOutOfRange(u8),
    #[error("unknown trait dimension `{0}`")]
    UnknownTrait(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
}

/// One of the five Big-Five targets an optimization run pursues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraitDimension {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl TraitDimension {
    pub const ALL: [TraitDimension; 5] = [
        TraitDimension::Openness,
        TraitDimension::Conscientiousness,
        TraitDimension::Extraversion,
        TraitDimension::Agreeableness,
        TraitDimension::Neuroticism,
    ];

    /// Three-letter short code (`OPE`, `CON`, `EXT`, `AGR`, `NEU`).
    pub fn code(&self) -> &'static str {
        match self {
            TraitDimension::Openness => "OPE",
            TraitDimension::Conscientiousness => "CON",
            TraitDimension::Extraversion => "EXT",
            TraitDimension::Agreeableness => "AGR",
            TraitDimension::Neuroticism => "NEU",
        }
    }

    /// Full capitalized name.
    pub fn name(&self) -> &'static str {
        match self {
            TraitDimension::Openness => "Openness",
            TraitDimension::Conscientiousness => "Conscientiousness",
            TraitDimension::Extraversion => "Extraversion",
            TraitDimension::Agreeableness => "Agreeableness",
            TraitDimension::Neuroticism => "Neuroticism",
        }
    }

    /// Lowercase name as used inside prompt templates.
    pub fn lowercase_name(&self) -> &'static str {
        match self {
            TraitDimension::Openness => "openness",
            TraitDimension::Conscientiousness => "conscientiousness",
            TraitDimension::Extraversion => "extraversion",
            TraitDimension::Agreeableness => "agreeableness",
            TraitDimension::Neuroticism => "neuroticism",
        }
    }
}

impl fmt::Display for TraitDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TraitDimension {
    type Err = DomainError;

    /// Accepts short codes and full names, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let needle = s.trim().to_ascii_lowercase();
        for dim in TraitDimension::ALL {
            if needle == dim.code().to_ascii_lowercase() || needle == dim.lowercase_name() {
                return Ok(dim);
            }
        }
        Err(DomainError::UnknownTrait(s.to_string()))
    }
}

/// Provenance of a persona prompt.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptOrigin {
    /// The empty anchor persona scored at step 0 of a run.
    Seed,
    /// Emitted by the optimizer model at the given step.
    Generated { step: u32 },
    /// A fixed comparison prompt (e.g. `description_prompt`, `naive`).
    Baseline { kind: String },
}

/// Compute the deterministic content id for a prompt text.
pub fn content_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// A candidate persona-profile prompt, identified by a hash of its text.
///
/// The empty persona (see [`PersonaPrompt::origin_empty`]) is the one
/// designated prompt with empty text: it anchors optimization trajectories
/// and represents the unprompted condition. Every other constructor
/// rejects empty text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaPrompt {
    pub text: String,
    pub origin: PromptOrigin,
    pub id: String,
}

impl PersonaPrompt {
    pub fn new(text: impl Into<String>, origin: PromptOrigin) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyPromptText);
        }
        let id = content_id(&text);
        Ok(PersonaPrompt { text, origin, id })
    }

    /// The empty anchor persona: no profile text at all.
    pub fn origin_empty() -> Self {
        PersonaPrompt {
            text: String::new(),
            origin: PromptOrigin::Seed,
            id: content_id(""),
        }
    }

    /// True for the empty anchor persona.
    pub fn is_empty_persona(&self) -> bool {
        self.text.is_empty()
    }
}

/// Stable identity of an answer option, assigned at load time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptionLabel {
    A,
    B,
    C,
    D,
}

impl OptionLabel {
    pub const ALL: [OptionLabel; 4] = [OptionLabel::A, OptionLabel::B, OptionLabel::C, OptionLabel::D];

    pub fn as_char(&self) -> char {
        match self {
            OptionLabel::A => 'A',
            OptionLabel::B => 'B',
            OptionLabel::C => 'C',
            OptionLabel::D => 'D',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(OptionLabel::A),
            'B' => Some(OptionLabel::B),
            'C' => Some(OptionLabel::C),
            'D' => Some(OptionLabel::D),
            _ => None,
        }
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Whether choosing an option signals strong or weak trait expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraitKeying {
    High,
    Low,
}

/// One answer option of a situational question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: OptionLabel,
    pub text: String,
    pub keyed: TraitKeying,
}

/// A situational multiple-choice item: scenario, question, four options
/// (two keyed high, two keyed low), and an optional paraphrase twin link.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub id: String,
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub scenario: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    /// Set on twin items: the id of the source item this paraphrases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase_of: Option<String>,
}

impl QuestionItem {
    pub fn option(&self, label: OptionLabel) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.label == label)
    }

    /// Twin items paraphrase a source item; sources have no link.
    pub fn is_twin(&self) -> bool {
        self.paraphrase_of.is_some()
    }

    /// Item-local invariant violations (option count, keying balance,
    /// label uniqueness, empty text). Cross-item checks live in
    /// [`validate_item_bank`].
    pub fn local_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.options.len() != 4 {
            out.push(format!("option count {} ≠ 4", self.options.len()));
        }
        let high = self.options.iter().filter(|o| o.keyed == TraitKeying::High).count();
        let low = self.options.iter().filter(|o| o.keyed == TraitKeying::Low).count();
        if self.options.len() == 4 && (high != 2 || low != 2) {
            out.push(format!("keyed high {high}, low {low} (want 2/2)"));
        }
        let mut seen = BTreeSet::new();
        for opt in &self.options {
            if !seen.insert(opt.label) {
                out.push(format!("duplicate option label {}", opt.label));
            }
            if opt.text.trim().is_empty() {
                out.push(format!("empty text for option {}", opt.label));
            }
        }
        if self.scenario.trim().is_empty() {
            out.push("empty scenario".to_string());
        }
        if self.question.trim().is_empty() {
            out.push("empty question".to_string());
        }
        if self.id.trim().is_empty() {
            out.push("empty item id".to_string());
        }
        out
    }
}

/// Keying of a Likert statement: negative items are reverse-scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikertKeying {
    Positive,
    Negative,
}

/// A second-person Likert statement rated on a 1–5 scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertItem {
    pub id: String,
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub statement: String,
    pub keying: LikertKeying,
}

/// Apply keying to a raw 1–5 rating: positive items pass through,
/// negative items map to `6 - raw`.
pub fn reverse_score(raw: u8, keying: LikertKeying) -> Result<u8, DomainError> {
    if !(1..=5).contains(&raw) {
        return Err(DomainError::RatingOutOfRange(raw));
    }
    Ok(match keying {
        LikertKeying::Positive => raw,
        LikertKeying::Negative => 6 - raw,
    })
}

/// A candidate prompt together with its evaluation on one question sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrompt {
    pub prompt: PersonaPrompt,
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    /// Fraction answered target-keyed on both the original and its twin.
    pub s_ps: f64,
    /// Among items answered target-keyed on originals, the fraction also
    /// target-keyed on twins (0 when no original was target-keyed).
    pub s_consist: f64,
    /// Fraction answered target-keyed on the original items.
    pub s_origin: f64,
    pub step: u32,
    /// Source-item ids this prompt was scored on, in administration order.
    pub question_sample: Vec<String>,
}

impl ScoredPrompt {
    /// Check the score invariants; returns the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (name, v) in [
            ("s_ps", self.s_ps),
            ("s_consist", self.s_consist),
            ("s_origin", self.s_origin),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.s_ps > self.s_origin + 1e-12 {
            return Err(format!("s_ps {} > s_origin {}", self.s_ps, self.s_origin));
        }
        if self.s_origin > 0.0 {
            let product = self.s_consist * self.s_origin;
            if (product - self.s_ps).abs() > 1e-12 {
                return Err(format!(
                    "s_consist × s_origin = {product} differs from s_ps = {}",
                    self.s_ps
                ));
            }
        }
        Ok(())
    }
}

/// Sampling policy for the target model during scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSampling {
    #[default]
    Greedy,
}

/// Prompt and template texts used across the pipeline. All fields are
/// plain text (templates inline, not paths) so they participate in the
/// run-config hash and resumed runs cannot silently change wording.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSet {
    /// Fixed instruction shown before each situational question.
    pub task_instruction: String,
    /// Fixed instruction shown before each Likert statement.
    pub likert_instruction: String,
    /// Instruction for the paraphrase augmenter.
    pub augment_instruction: String,
    /// Instruction for one-sentence checkpoint summaries.
    pub summary_instruction: String,
    /// Meta-prompt skeleton with `{task_instruct}`, `{trajectory}`,
    /// `{examples}`, and `{format_directive}` slots.
    pub meta_template: String,
    /// Task-instruct prose for the meta-prompt, with a `{trait}` slot.
    pub meta_task_instruct: String,
    /// Markers the optimizer must emit around each candidate profile.
    pub sentinel_start: String,
    pub sentinel_end: String,
}

impl Default for InstructionSet {
    fn default() -> Self {
        InstructionSet {
            task_instruction: "You will be shown a scenario and a question about how you would \
                               respond, followed by four options. Choose the single option that \
                               best matches what you would do. Reply with only the letter of \
                               your chosen option."
                .to_string(),
            likert_instruction: "Rate how accurately the following statement describes you, on a \
                                 scale from 1 (very inaccurate) to 5 (very accurate). Reply with \
                                 only the number."
                .to_string(),
            augment_instruction: "Rewrite the text between the markers so that it keeps exactly \
                                  the same meaning but uses different wording. Preserve names, \
                                  facts, and intent. Reply with only the rewritten text and \
                                  nothing else. Do not alter any answer options."
                .to_string(),
            summary_instruction: "Summarize the following persona profile in one sentence."
                .to_string(),
            meta_template: include_str!("templates/meta_template.txt").to_string(),
            meta_task_instruct: include_str!("templates/meta_task_instruct.txt").to_string(),
            sentinel_start: "<<PROFILE>>".to_string(),
            sentinel_end: "<</PROFILE>>".to_string(),
        }
    }
}

/// Full configuration of one optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub max_steps: u32,
    /// Candidates sampled from the optimizer per step (k).
    pub candidates_per_step: u32,
    /// Highest-scoring prompts retained in the meta-prompt trajectory (n).
    pub trajectory_top_n: u32,
    /// Questions sampled from the train split per step (q).
    pub questions_per_step: u32,
    pub optimizer_temperature: f64,
    pub target_sampling: TargetSampling,
    /// Which option keying counts as the target. `High` optimizes toward
    /// strong trait expression; `Low` inverts the direction.
    pub target_keying: TraitKeying,
    pub seed: u64,
    /// Backend references, resolved by the caller against its registry.
    pub optimizer_backend: String,
    pub target_backend: String,
    pub augmenter_backend: String,
    /// Approximate token budget for the rendered meta-prompt; trajectory
    /// entries are dropped lowest-score-first to stay under it.
    pub meta_token_budget: usize,
    pub max_in_flight: usize,
    /// Cache temperature>0 optimizer calls too (for exact replay).
    pub cache_stochastic: bool,
    /// When set, re-score the top-m buffer entries on the full train set
    /// before declaring the best prompt. Off by default.
    pub rescore_top: Option<u32>,
    pub target_max_tokens: u32,
    pub optimizer_max_tokens: u32,
    pub augmenter_max_tokens: u32,
    pub instructions: InstructionSet,
}

impl RunConfig {
    /// Defaults for a trait: 25 steps, or 15 for the two traits whose
    /// scores plateau early (Agreeableness and Conscientiousness).
    pub fn for_trait(trait_dim: TraitDimension) -> Self {
        let max_steps = match trait_dim {
            TraitDimension::Agreeableness | TraitDimension::Conscientiousness => 15,
            _ => 25,
        };
        RunConfig {
            trait_dim,
            max_steps,
            candidates_per_step: 8,
            trajectory_top_n: 3,
            questions_per_step: 3,
            optimizer_temperature: 1.2,
            target_sampling: TargetSampling::Greedy,
            target_keying: TraitKeying::High,
            seed: 0,
            optimizer_backend: "optimizer".to_string(),
            target_backend: "target".to_string(),
            augmenter_backend: "augmenter".to_string(),
            meta_token_budget: 4096,
            max_in_flight: 8,
            cache_stochastic: false,
            rescore_top: None,
            target_max_tokens: 16,
            optimizer_max_tokens: 1024,
            augmenter_max_tokens: 512,
            instructions: InstructionSet::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.max_steps < 1 {
            return Err(DomainError::InvalidConfig("max_steps must be ≥ 1".into()));
        }
        if self.candidates_per_step < 1 {
            return Err(DomainError::InvalidConfig("candidates_per_step must be ≥ 1".into()));
        }
        if self.trajectory_top_n < 1 {
            return Err(DomainError::InvalidConfig("trajectory_top_n must be ≥ 1".into()));
        }
        if self.questions_per_step < 1 {
            return Err(DomainError::InvalidConfig("questions_per_step must be ≥ 1".into()));
        }
        if self.optimizer_temperature <= 0.0 {
            return Err(DomainError::InvalidConfig("optimizer_temperature must be > 0".into()));
        }
        if self.max_in_flight < 1 {
            return Err(DomainError::InvalidConfig("max_in_flight must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Hash over the serialized config; resumed runs must match it.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One invariant violation found while validating an item bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub item_id: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "item `{}`: {}", self.item_id, self.message)
    }
}

/// Outcome of validating an item bank. Violations are data, not failures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub per_trait_counts: BTreeMap<TraitDimension, usize>,
    pub source_count: usize,
    pub twin_count: usize,
    /// Fraction of source items that have a paraphrase twin.
    pub paraphrase_coverage: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Validate a question bank: per-item invariants plus cross-item checks
/// (unique ids, paraphrase links resolving to a source of the same trait,
/// one twin per source).
pub fn validate_item_bank(items: &[QuestionItem]) -> ValidationReport {
    let mut violations = Vec::new();
    let mut per_trait_counts: BTreeMap<TraitDimension, usize> = BTreeMap::new();
    let mut by_id: BTreeMap<&str, &QuestionItem> = BTreeMap::new();

    for item in items {
        *per_trait_counts.entry(item.trait_dim).or_insert(0) += 1;
        for message in item.local_violations() {
            violations.push(Violation { item_id: item.id.clone(), message });
        }
        if by_id.insert(item.id.as_str(), item).is_some() {
            violations.push(Violation {
                item_id: item.id.clone(),
                message: "duplicate item id".to_string(),
            });
        }
    }

    let mut twin_of: BTreeMap<&str, &str> = BTreeMap::new();
    for item in items {
        let Some(source_id) = item.paraphrase_of.as_deref() else {
            continue;
        };
        match by_id.get(source_id) {
            None => violations.push(Violation {
                item_id: item.id.clone(),
                message: format!("paraphrase target `{source_id}` not found"),
            }),
            Some(source) => {
                if source.trait_dim != item.trait_dim {
                    violations.push(Violation {
                        item_id: item.id.clone(),
                        message: "cross-trait paraphrase".to_string(),
                    });
                }
                if source.is_twin() {
                    violations.push(Violation {
                        item_id: item.id.clone(),
                        message: format!("paraphrase target `{source_id}` is itself a paraphrase"),
                    });
                }
                if let Some(prior) = twin_of.insert(source_id, item.id.as_str()) {
                    violations.push(Violation {
                        item_id: item.id.clone(),
                        message: format!(
                            "paraphrase source `{source_id}` already has twin `{prior}`"
                        ),
                    });
                }
            }
        }
    }

    let source_count = items.iter().filter(|i| !i.is_twin()).count();
    let twin_count = items.len() - source_count;
    let twinned_sources = items
        .iter()
        .filter(|i| !i.is_twin() && twin_of.contains_key(i.id.as_str()))
        .count();
    let paraphrase_coverage = if source_count == 0 {
        0.0
    } else {
        twinned_sources as f64 / source_count as f64
    };

    ValidationReport {
        per_trait_counts,
        source_count,
        twin_count,
        paraphrase_coverage,
        violations,
    }
}
