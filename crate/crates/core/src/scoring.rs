//! Administers items to a target model under a candidate prompt and turns
//! raw responses into scores.
//!
//! Three fractions summarize a prompt's effect on one trait: the
//! personality score (target-keyed answers on original items), the
//! consistency score (target-keyed on both forms, relative to the
//! originals), and the paraphrase-sensitive score (target-keyed on both
//! forms, relative to the whole item set). The Likert path administers
//! second-person statements over several randomized orderings and reports
//! per-trait means and across-trial standard deviations.

use crate::backend::{Backend, BackendError};
use crate::domain::{
    reverse_score, InstructionSet, LikertItem, OptionLabel, PersonaPrompt, QuestionItem,
    ScoredPrompt, TraitDimension, TraitKeying,
};
use crate::seeds;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("backend failure while administering `{item_id}`: {source}")]
    Backend {
        item_id: String,
        #[source]
        source: BackendError,
    },
    #[error("no twinned items to score (all {0} items lack paraphrase twins)")]
    NoTwinnedItems(usize),
    #[error("no valid trials: every trial exceeded the skip threshold")]
    NoValidTrials,
    #[error("trials must be ≥ 1")]
    NoTrials,
}

/// How administrations are phrased and keyed.
#[derive(Clone, Debug)]
pub struct ScoringOptions {
    pub instructions: InstructionSet,
    pub max_tokens: u32,
    /// Which keying counts as the target. `High` optimizes toward strong
    /// trait expression (the standard direction); `Low` inverts it.
    pub target_keying: TraitKeying,
    pub max_in_flight: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            instructions: InstructionSet::default(),
            max_tokens: 16,
            target_keying: TraitKeying::High,
            max_in_flight: 8,
        }
    }
}

/// Record of one item administration: what was presented, what came back,
/// and how it scored. `parsed_choice` is the stable label of the chosen
/// option (identity, not position); `is_target_keyed` is defined exactly
/// when a choice was parsed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Administration {
    pub item_id: String,
    /// Stable option labels in presentation order: slot 0 was shown as
    /// presentation letter A, slot 1 as B, and so on.
    pub presented_order: Vec<OptionLabel>,
    pub raw_response: String,
    pub parsed_choice: Option<OptionLabel>,
    pub is_target_keyed: Option<bool>,
}

impl Administration {
    /// The binary scoring value: 1 when the choice is target-keyed,
    /// 0 otherwise (including parse failures). Total over any response.
    pub fn binary_score(&self) -> u8 {
        u8::from(self.is_target_keyed == Some(true))
    }
}

/// A prepared administration: the request plus everything needed to
/// interpret the response.
pub struct PreparedAdministration {
    pub request: crate::backend::ChatRequest,
    item_id: String,
    presented_order: Vec<OptionLabel>,
    presented_texts: Vec<String>,
    keyed_by_label: BTreeMap<OptionLabel, TraitKeying>,
    target_keying: TraitKeying,
}

/// Build the request for one administration. Options are shuffled by a
/// seeded permutation and shown under fresh presentation letters A–D; the
/// fixed task instruction comes first, verbatim from the options.
pub fn prepare_administration(
    prompt: &PersonaPrompt,
    item: &QuestionItem,
    backend: &Backend,
    options: &ScoringOptions,
    rng_seed: u64,
) -> PreparedAdministration {
    let mut order: Vec<usize> = (0..item.options.len()).collect();
    let mut rng = seeds::rng(rng_seed, &["option-permutation"]);
    order.shuffle(&mut rng);

    let mut lines = String::new();
    let mut presented_order = Vec::with_capacity(order.len());
    let mut presented_texts = Vec::with_capacity(order.len());
    for (slot, &source_index) in order.iter().enumerate() {
        let option = &item.options[source_index];
        let letter = OptionLabel::ALL[slot];
        lines.push_str(&format!("{}) {}\n", letter.as_char(), option.text));
        presented_order.push(option.label);
        presented_texts.push(option.text.clone());
    }

    let user = format!(
        "{}\n\nScenario: {}\nQuestion: {}\nOptions:\n{}",
        options.instructions.task_instruction, item.scenario, item.question, lines
    );
    let system = (!prompt.text.is_empty()).then(|| prompt.text.clone());
    let request = backend
        .new_request(user)
        .with_system(system)
        .with_temperature(0.0)
        .with_max_tokens(options.max_tokens);
    let keyed_by_label = item.options.iter().map(|o| (o.label, o.keyed)).collect();

    PreparedAdministration {
        request,
        item_id: item.id.clone(),
        presented_order,
        presented_texts,
        keyed_by_label,
        target_keying: options.target_keying,
    }
}

/// Interpret a raw response against a prepared administration.
pub fn finish_administration(prep: &PreparedAdministration, raw_response: &str) -> Administration {
    let slot = parse_choice_slot(raw_response, &prep.presented_texts);
    let parsed_choice = slot.map(|s| prep.presented_order[s]);
    let is_target_keyed =
        parsed_choice.map(|label| prep.keyed_by_label[&label] == prep.target_keying);
    Administration {
        item_id: prep.item_id.clone(),
        presented_order: prep.presented_order.clone(),
        raw_response: raw_response.to_string(),
        parsed_choice,
        is_target_keyed,
    }
}

/// Administer one item: shuffle options under the seed, query the target,
/// parse the choice. Parse failures yield an administration with no
/// choice (scoring 0); transport errors propagate.
pub fn administer(
    prompt: &PersonaPrompt,
    item: &QuestionItem,
    backend: &Backend,
    options: &ScoringOptions,
    rng_seed: u64,
) -> Result<Administration, ScoringError> {
    let prep = prepare_administration(prompt, item, backend, options, rng_seed);
    let response = backend
        .complete(&prep.request)
        .map_err(|source| ScoringError::Backend { item_id: item.id.clone(), source })?;
    Ok(finish_administration(&prep, &response.text))
}

/// Response-parsing ladder: (1) leading presentation letter, (2) unique
/// letter token anywhere, (3) unique option-text substring. Total: every
/// string maps to a choice or to none, never an error.
fn parse_choice_slot(raw: &str, presented_texts: &[String]) -> Option<usize> {
    let letters: Vec<char> = (0..presented_texts.len())
        .map(|i| OptionLabel::ALL[i].as_char())
        .collect();

    // Rung 1: leading letter, alone or followed by punctuation ("A",
    // "b)", "(C) because..."). A letter followed by plain prose is not a
    // rung-1 match: "A good choice" must not read as option A.
    let stripped = raw.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '(' | '[' | '{' | '"' | '\'' | '*' | '#' | '-' | '>')
    });
    let mut chars = stripped.chars();
    if let Some(first) = chars.next() {
        let upper = first.to_ascii_uppercase();
        if let Some(slot) = letters.iter().position(|&l| l == upper) {
            let rest = chars.as_str();
            if rest.trim().is_empty() {
                return Some(slot);
            }
            if rest.starts_with(|c: char| !c.is_alphanumeric() && !c.is_whitespace()) {
                return Some(slot);
            }
        }
    }

    // Rung 2: a unique letter mentioned anywhere as a standalone token.
    let mut mentioned: BTreeSet<char> = BTreeSet::new();
    for token in raw.split(|c: char| !c.is_alphanumeric()) {
        if token.len() == 1 {
            let upper = token.chars().next().unwrap().to_ascii_uppercase();
            if letters.contains(&upper) {
                mentioned.insert(upper);
            }
        }
    }
    if mentioned.len() == 1 {
        let letter = *mentioned.iter().next().unwrap();
        return letters.iter().position(|&l| l == letter);
    }

    // Rung 3: a unique option text appearing inside the response.
    let lower = raw.to_lowercase();
    let matching: Vec<usize> = presented_texts
        .iter()
        .enumerate()
        .filter(|(_, text)| lower.contains(&text.to_lowercase()))
        .map(|(slot, _)| slot)
        .collect();
    if matching.len() == 1 {
        return Some(matching[0]);
    }

    None
}

/// The two answer sets behind the three scores, keyed by source-item id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitScoreSet {
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub origin_correct: BTreeSet<String>,
    /// Source ids whose paraphrase twin was answered target-keyed.
    pub aug_correct: BTreeSet<String>,
    pub n_items: usize,
}

impl TraitScoreSet {
    fn both(&self) -> usize {
        self.origin_correct.intersection(&self.aug_correct).count()
    }

    pub fn s_origin(&self) -> f64 {
        if self.n_items == 0 {
            return 0.0;
        }
        self.origin_correct.len() as f64 / self.n_items as f64
    }

    /// 0 when no original was answered target-keyed (the 0/0 case).
    pub fn s_consist(&self) -> f64 {
        if self.origin_correct.is_empty() {
            return 0.0;
        }
        self.both() as f64 / self.origin_correct.len() as f64
    }

    pub fn s_ps(&self) -> f64 {
        if self.n_items == 0 {
            return 0.0;
        }
        self.both() as f64 / self.n_items as f64
    }
}

/// Outcome of scoring one prompt on one item sample.
#[derive(Debug)]
pub struct TraitScoreOutcome {
    pub scored: ScoredPrompt,
    pub score_set: TraitScoreSet,
    /// Origin-form administrations followed by twin-form administrations,
    /// both in source-id order.
    pub administrations: Vec<Administration>,
    /// Source items skipped because they lack a twin.
    pub untwinned: Vec<String>,
}

/// Score one prompt over the twinned items in `items` (sources paired with
/// their twins via `paraphrase_of`). Untwinned sources are excluded from
/// the computation and reported.
///
/// Permutation seeds derive from (seed, prompt id, item id, form), so
/// re-scoring the same prompt on the same items reproduces the exact same
/// administrations regardless of when or where it runs.
pub fn trait_scores(
    prompt: &PersonaPrompt,
    trait_dim: TraitDimension,
    items: &[QuestionItem],
    backend: &Backend,
    options: &ScoringOptions,
    seed: u64,
    step: u32,
) -> Result<TraitScoreOutcome, ScoringError> {
    let twins: BTreeMap<&str, &QuestionItem> = items
        .iter()
        .filter_map(|i| i.paraphrase_of.as_deref().map(|src| (src, i)))
        .collect();
    let mut sources: Vec<&QuestionItem> = items
        .iter()
        .filter(|i| !i.is_twin() && i.trait_dim == trait_dim)
        .collect();
    sources.sort_by(|a, b| a.id.cmp(&b.id));

    let mut untwinned = Vec::new();
    let mut paired = Vec::new();
    for source in sources {
        match twins.get(source.id.as_str()) {
            Some(twin) => paired.push((source, *twin)),
            None => untwinned.push(source.id.clone()),
        }
    }
    if paired.is_empty() {
        return Err(ScoringError::NoTwinnedItems(untwinned.len()));
    }

    let mut preps = Vec::with_capacity(paired.len() * 2);
    for (source, _) in &paired {
        let rng_seed = seeds::derive(seed, &["perm", &prompt.id, &source.id, "origin"]);
        preps.push(prepare_administration(prompt, source, backend, options, rng_seed));
    }
    for (_, twin) in &paired {
        let rng_seed = seeds::derive(seed, &["perm", &prompt.id, &twin.id, "twin"]);
        preps.push(prepare_administration(prompt, twin, backend, options, rng_seed));
    }

    let requests: Vec<_> = preps.iter().map(|p| p.request.clone()).collect();
    let responses = backend.complete_batch(&requests, options.max_in_flight);

    let mut administrations = Vec::with_capacity(preps.len());
    for (prep, response) in preps.iter().zip(responses) {
        let response = response.map_err(|source| ScoringError::Backend {
            item_id: prep.item_id.clone(),
            source,
        })?;
        administrations.push(finish_administration(prep, &response.text));
    }

    let score_set = scores_from_administrations(trait_dim, items, &administrations);
    let question_sample: Vec<String> = paired.iter().map(|(s, _)| s.id.clone()).collect();
    let scored = ScoredPrompt {
        prompt: prompt.clone(),
        trait_dim,
        s_ps: score_set.s_ps(),
        s_consist: score_set.s_consist(),
        s_origin: score_set.s_origin(),
        step,
        question_sample,
    };
    Ok(TraitScoreOutcome { scored, score_set, administrations, untwinned })
}

/// Rebuild the score sets from persisted administrations. Reports are pure
/// functions of their logs: recomputing through this function reproduces
/// the original scores exactly.
pub fn scores_from_administrations(
    trait_dim: TraitDimension,
    items: &[QuestionItem],
    administrations: &[Administration],
) -> TraitScoreSet {
    let by_id: BTreeMap<&str, &QuestionItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut origin_correct = BTreeSet::new();
    let mut aug_correct = BTreeSet::new();
    let mut origin_seen = BTreeSet::new();
    for admin in administrations {
        let Some(item) = by_id.get(admin.item_id.as_str()) else {
            continue;
        };
        match item.paraphrase_of.as_deref() {
            None => {
                origin_seen.insert(item.id.clone());
                if admin.is_target_keyed == Some(true) {
                    origin_correct.insert(item.id.clone());
                }
            }
            Some(source_id) => {
                if admin.is_target_keyed == Some(true) {
                    aug_correct.insert(source_id.to_string());
                }
            }
        }
    }
    TraitScoreSet {
        trait_dim,
        origin_correct,
        aug_correct,
        n_items: origin_seen.len(),
    }
}

/// One Likert administration, logged per (trial, item).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertAdministration {
    pub trial: u32,
    pub item_id: String,
    /// 1-based position of the statement within its trial's ordering.
    pub position: usize,
    pub raw_response: String,
    /// Keyed rating (reverse-scored for negative items), when parseable.
    pub rating: Option<u8>,
}

/// Per-trait Likert statistics across trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikertTraitStats {
    pub mean: f64,
    /// Sample standard deviation of the per-trial means.
    pub std_dev: f64,
    pub trial_means: Vec<f64>,
}

/// Likert questionnaire outcome: per-trait mean-of-means and across-trial
/// standard deviation, plus the grand averages over traits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikertReport {
    pub per_trait: BTreeMap<TraitDimension, LikertTraitStats>,
    pub grand_mean: f64,
    /// Mean of the per-trait standard deviations.
    pub grand_std: f64,
    pub trials: u32,
    /// Trials excluded because more than 20% of their items were skipped.
    pub invalid_trials: Vec<u32>,
    pub skipped_responses: u32,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Parse a 1–5 rating: leading integer first, then a unique digit
/// anywhere.
fn parse_rating(raw: &str) -> Option<u8> {
    let stripped = raw.trim_start_matches(|c: char| !c.is_ascii_digit() && !c.is_alphanumeric());
    let leading: String = stripped.chars().take_while(|c| c.is_ascii_digit()).collect();
    if let Ok(value) = leading.parse::<u8>() {
        if (1..=5).contains(&value) {
            return Some(value);
        }
    }
    let digits: BTreeSet<u8> = raw
        .chars()
        .filter_map(|c| c.to_digit(10))
        .map(|d| d as u8)
        .filter(|d| (1..=5).contains(d))
        .collect();
    if digits.len() == 1 {
        return digits.into_iter().next();
    }
    None
}

/// Administer all statements across `trials` randomized orderings and
/// aggregate per-trait statistics. Each statement is presented with its
/// 1-based position in the trial's ordering, so order randomization is
/// visible to the model the way a numbered questionnaire would be.
pub fn likert_assess(
    prompt: &PersonaPrompt,
    items: &[LikertItem],
    backend: &Backend,
    trials: u32,
    options: &ScoringOptions,
    seed: u64,
) -> Result<(LikertReport, Vec<LikertAdministration>), ScoringError> {
    if trials == 0 {
        return Err(ScoringError::NoTrials);
    }
    let total = items.len();
    let mut log = Vec::with_capacity(total * trials as usize);
    let mut trial_trait_means: Vec<BTreeMap<TraitDimension, f64>> = Vec::new();
    let mut invalid_trials = Vec::new();
    let mut skipped_responses = 0u32;

    for trial in 0..trials {
        let mut order: Vec<usize> = (0..total).collect();
        let mut rng = seeds::rng(seed, &["likert-trial", &trial.to_string()]);
        order.shuffle(&mut rng);

        let requests: Vec<_> = order
            .iter()
            .enumerate()
            .map(|(pos, &idx)| {
                let item = &items[idx];
                let user = format!(
                    "{}\n\nStatement {} of {}: {}",
                    options.instructions.likert_instruction,
                    pos + 1,
                    total,
                    item.statement
                );
                backend
                    .new_request(user)
                    .with_system((!prompt.text.is_empty()).then(|| prompt.text.clone()))
                    .with_temperature(0.0)
                    .with_max_tokens(options.max_tokens)
            })
            .collect();
        let responses = backend.complete_batch(&requests, options.max_in_flight);

        let mut by_trait: BTreeMap<TraitDimension, Vec<f64>> = BTreeMap::new();
        let mut skips = 0usize;
        for ((pos, &idx), response) in order.iter().enumerate().zip(responses) {
            let item = &items[idx];
            let response = response.map_err(|source| ScoringError::Backend {
                item_id: item.id.clone(),
                source,
            })?;
            let rating = parse_rating(&response.text)
                .and_then(|raw| reverse_score(raw, item.keying).ok());
            if let Some(value) = rating {
                by_trait.entry(item.trait_dim).or_default().push(value as f64);
            } else {
                skips += 1;
                skipped_responses += 1;
            }
            log.push(LikertAdministration {
                trial,
                item_id: item.id.clone(),
                position: pos + 1,
                raw_response: response.text,
                rating,
            });
        }

        if skips as f64 > 0.2 * total as f64 {
            invalid_trials.push(trial);
            continue;
        }
        let means: BTreeMap<TraitDimension, f64> =
            by_trait.into_iter().map(|(dim, vals)| (dim, mean(&vals))).collect();
        trial_trait_means.push(means);
    }

    if trial_trait_means.is_empty() {
        return Err(ScoringError::NoValidTrials);
    }

    let mut per_trait = BTreeMap::new();
    for dim in TraitDimension::ALL {
        let trial_means: Vec<f64> = trial_trait_means
            .iter()
            .filter_map(|m| m.get(&dim).copied())
            .collect();
        if trial_means.is_empty() {
            continue;
        }
        per_trait.insert(
            dim,
            LikertTraitStats {
                mean: mean(&trial_means),
                std_dev: sample_std(&trial_means),
                trial_means,
            },
        );
    }
    let trait_means: Vec<f64> = per_trait.values().map(|s| s.mean).collect();
    let trait_stds: Vec<f64> = per_trait.values().map(|s| s.std_dev).collect();
    let report = LikertReport {
        grand_mean: mean(&trait_means),
        grand_std: mean(&trait_stds),
        per_trait,
        trials,
        invalid_trials,
        skipped_responses,
    };
    Ok((report, log))
}
