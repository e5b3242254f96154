//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `cargo test --test acceptance -- --nocapture`). Every
//! tolerance is pinned in the assertions below. All runs are offline,
//! driven by scripted mock backends.

use personaforge::backend::{
    Backend, MockBackend, MockBehavior, MockMatcher, MockRule, MockScript,
};
use personaforge::domain::{
    AnswerOption, LikertItem, LikertKeying, OptionLabel, PersonaPrompt, PromptOrigin,
    QuestionItem, RunConfig, ScoredPrompt, TargetSampling, TraitDimension, TraitKeying,
};
use personaforge::evaluation::{
    evaluate, resolve_condition, transfer_matrix, CellOutcome, Condition, EvalItems,
};
use personaforge::optimizer::{self, RunBackends, TrajectoryBuffer};
use personaforge::scoring::{
    likert_assess, trait_scores, Administration, ScoringOptions,
};
use personaforge::trajectory::{self, CheckpointSource};
use personaforge::{dataset, seeds};
use rand::seq::SliceRandom;
use rand::Rng;
use std::sync::Arc;
use std::time::Instant;

// ---------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------

fn twin_pair(id: &str, trait_dim: TraitDimension, req: Option<u32>) -> [QuestionItem; 2] {
    let tag = req.map(|r| format!("REQ{r} ")).unwrap_or_default();
    let source = QuestionItem {
        id: id.to_string(),
        trait_dim,
        scenario: format!("{tag}Scenario {id} places you in an unfamiliar spot."),
        question: "What do you do next?".to_string(),
        options: vec![
            AnswerOption { label: OptionLabel::A, text: format!("HIGHWORD lean in {id}"), keyed: TraitKeying::High },
            AnswerOption { label: OptionLabel::B, text: format!("LOWWORD hold back {id}"), keyed: TraitKeying::Low },
            AnswerOption { label: OptionLabel::C, text: format!("HIGHWORD reach out {id}"), keyed: TraitKeying::High },
            AnswerOption { label: OptionLabel::D, text: format!("LOWWORD stay aside {id}"), keyed: TraitKeying::Low },
        ],
        paraphrase_of: None,
    };
    let twin = QuestionItem {
        id: format!("{id}-aug"),
        scenario: format!("{tag}Reworded, the same situation {id} unfolds."),
        paraphrase_of: Some(id.to_string()),
        ..source.clone()
    };
    [source, twin]
}

fn twinned_bank(n: usize, trait_dim: TraitDimension) -> Vec<QuestionItem> {
    (0..n)
        .flat_map(|i| twin_pair(&format!("{}-{i:04}", trait_dim.code().to_lowercase()), trait_dim, None))
        .collect()
}

fn mock(name: &str, script: MockScript) -> Arc<Backend> {
    Arc::new(Backend::new(name, Box::new(MockBackend::new(script))))
}

fn behavior_backend(name: &str, seed: u64, behavior: MockBehavior) -> Arc<Backend> {
    mock(name, MockScript { seed, rules: Vec::new(), default: behavior })
}

fn always_high(name: &str) -> Arc<Backend> {
    behavior_backend(
        name,
        0,
        MockBehavior::OptionContaining { needle: "HIGHWORD".into(), fallback: String::new() },
    )
}

fn uniform_responder(name: &str, seed: u64) -> Arc<Backend> {
    behavior_backend(
        name,
        seed,
        MockBehavior::UniformChoice {
            choices: vec!["A".into(), "B".into(), "C".into(), "D".into()],
        },
    )
}

const HILL_TOKENS: [&str; 3] = ["quartz", "meadow", "lantern"];

/// Three-item hill landscape: item i requires i+1 magic tokens, q=3
/// samples all three every step, so a candidate with c tokens scores c/3.
fn hill_train() -> Vec<QuestionItem> {
    [1u32, 2, 3]
        .iter()
        .enumerate()
        .flat_map(|(i, &req)| twin_pair(&format!("hill-{i}"), TraitDimension::Openness, Some(req)))
        .collect()
}

fn hill_target() -> Arc<Backend> {
    behavior_backend(
        "hill-target",
        1,
        MockBehavior::TokenGateOption {
            tokens: HILL_TOKENS.iter().map(|t| t.to_string()).collect(),
            threshold_marker: "REQ".into(),
            high_needle: "HIGHWORD".into(),
            low_needle: "LOWWORD".into(),
        },
    )
}

fn extend_optimizer(name: &str, tokens: &[String], config: &RunConfig) -> Arc<Backend> {
    behavior_backend(
        name,
        2,
        MockBehavior::ExtendDelimitedPrompt {
            prior_start: "Profile:\n".into(),
            prior_end: "\nScore:".into(),
            tokens: tokens.to_vec(),
            wrap_start: config.instructions.sentinel_start.clone(),
            wrap_end: config.instructions.sentinel_end.clone(),
        },
    )
}

// ---------------------------------------------------------------------
// Independent oracle: brute-force recomputation of the three scores from
// raw administrations, without sets and without the scoring module.
// ---------------------------------------------------------------------

fn oracle_scores(bank: &[QuestionItem], administrations: &[Administration]) -> (f64, f64, f64) {
    let admin_of = |id: &str| administrations.iter().find(|a| a.item_id == id);
    let mut n = 0usize;
    let mut origin_hits = 0usize;
    let mut both_hits = 0usize;
    for item in bank {
        if item.paraphrase_of.is_some() {
            continue;
        }
        let Some(origin_admin) = admin_of(&item.id) else { continue };
        n += 1;
        let origin_ok = origin_admin.is_target_keyed == Some(true);
        if origin_ok {
            origin_hits += 1;
        }
        let twin = bank
            .iter()
            .find(|t| t.paraphrase_of.as_deref() == Some(item.id.as_str()));
        let twin_ok = twin
            .and_then(|t| admin_of(&t.id))
            .map(|a| a.is_target_keyed == Some(true))
            .unwrap_or(false);
        if origin_ok && twin_ok {
            both_hits += 1;
        }
    }
    let s_origin = origin_hits as f64 / n as f64;
    let s_ps = both_hits as f64 / n as f64;
    let s_consist = if origin_hits == 0 { 0.0 } else { both_hits as f64 / origin_hits as f64 };
    (s_origin, s_consist, s_ps)
}

fn assert_identity(scored: &ScoredPrompt) {
    assert!(scored.s_ps <= scored.s_origin + 1e-12);
    if scored.s_origin > 0.0 {
        assert!(
            (scored.s_consist * scored.s_origin - scored.s_ps).abs() <= 1e-12,
            "identity violated: {} × {} vs {}",
            scored.s_consist,
            scored.s_origin,
            scored.s_ps
        );
    }
}

// ---------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------

/// Criterion 1: on 50 randomized synthetic banks (≤ 20 items) with
/// scripted responders, the scoring module matches a brute-force
/// recomputation from the raw administration log exactly. Runtime < 10 s.
#[test]
fn acceptance_01_scoring_formula_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = seeds::rng(1001, &["acceptance-banks"]);
    let traits = TraitDimension::ALL;
    for bank_index in 0..50 {
        let n = rng.random_range(3..=20usize);
        let trait_dim = traits[rng.random_range(0..traits.len())];
        let bank: Vec<QuestionItem> = (0..n)
            .flat_map(|i| twin_pair(&format!("b{bank_index}-q{i:02}"), trait_dim, None))
            .collect();
        let behavior = match bank_index % 5 {
            0 => MockBehavior::UniformChoice {
                choices: vec!["A".into(), "B".into(), "C".into(), "D".into()],
            },
            1 => MockBehavior::OptionContaining { needle: "HIGHWORD".into(), fallback: String::new() },
            2 => MockBehavior::OptionContaining { needle: "LOWWORD".into(), fallback: String::new() },
            3 => MockBehavior::RateGatedOption {
                high_needle: "HIGHWORD".into(),
                low_needle: "LOWWORD".into(),
                high_rate: 0.6,
            },
            // Some responses unparseable: "elephant" never matches.
            _ => MockBehavior::UniformChoice {
                choices: vec!["A".into(), "elephant".into(), "C".into(), "D".into()],
            },
        };
        let backend = behavior_backend("oracle-target", bank_index as u64, behavior);
        let prompt =
            PersonaPrompt::new(format!("persona {bank_index}"), PromptOrigin::Seed).unwrap();
        let outcome = trait_scores(
            &prompt,
            trait_dim,
            &bank,
            &backend,
            &ScoringOptions::default(),
            bank_index as u64,
            0,
        )
        .unwrap();
        let (s_origin, s_consist, s_ps) = oracle_scores(&bank, &outcome.administrations);
        assert_eq!(outcome.scored.s_origin, s_origin, "bank {bank_index}: s_origin");
        assert_eq!(outcome.scored.s_consist, s_consist, "bank {bank_index}: s_consist");
        assert_eq!(outcome.scored.s_ps, s_ps, "bank {bank_index}: s_ps");
        assert_identity(&outcome.scored);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}, budget 10 s");
    println!("ACCEPTANCE 01 PASS: scoring formulas match brute-force oracle on 50 banks ({elapsed:?})");
}

/// Criterion 2: s_ps = s_consist × s_origin (when s_origin > 0) within
/// 1e-12 on every ScoredPrompt produced.
#[test]
fn acceptance_02_score_identity_holds_everywhere() {
    // Randomized synthetic score sets.
    let mut rng = seeds::rng(1002, &["identity"]);
    for _ in 0..1000 {
        let n = rng.random_range(1..=50usize);
        let origin: std::collections::BTreeSet<String> = (0..n)
            .filter(|_| rng.random_bool(0.5))
            .map(|i| format!("q{i}"))
            .collect();
        let both: std::collections::BTreeSet<String> = origin
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .cloned()
            .collect();
        let s_origin = origin.len() as f64 / n as f64;
        let s_ps = both.len() as f64 / n as f64;
        let s_consist =
            if origin.is_empty() { 0.0 } else { both.len() as f64 / origin.len() as f64 };
        let scored = ScoredPrompt {
            prompt: PersonaPrompt::origin_empty(),
            trait_dim: TraitDimension::Openness,
            s_ps,
            s_consist,
            s_origin,
            step: 0,
            question_sample: Vec::new(),
        };
        assert_identity(&scored);
    }
    // Every entry of a real mock run.
    let mut config = RunConfig::for_trait(TraitDimension::Openness);
    config.max_steps = 5;
    config.seed = 1002;
    let backends = RunBackends {
        optimizer: extend_optimizer(
            "ident-opt",
            &HILL_TOKENS.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            &config,
        ),
        target: uniform_responder("ident-target", 7),
    };
    let dir = tempfile::tempdir().unwrap();
    optimizer::run(&config, &backends, &hill_train(), None, dir.path()).unwrap();
    let buffer = optimizer::load_buffer(dir.path()).unwrap();
    assert!(!buffer.entries().is_empty());
    for entry in buffer.entries() {
        assert_identity(entry);
    }
    println!("ACCEPTANCE 02 PASS: s_ps = s_consist × s_origin on 1000 synthetic sets and a full run");
}

/// Criterion 3: a uniform-random responder on a 400-item twinned bank
/// calibrates to s_origin ∈ [0.45, 0.55] and s_ps ∈ [0.20, 0.30]
/// (analytic 0.5 and 0.25). Runtime < 30 s.
#[test]
fn acceptance_03_random_responder_calibration() {
    let started = Instant::now();
    let bank = twinned_bank(400, TraitDimension::Extraversion);
    let backend = uniform_responder("calibration", 23);
    let prompt = PersonaPrompt::origin_empty();
    let outcome = trait_scores(
        &prompt,
        TraitDimension::Extraversion,
        &bank,
        &backend,
        &ScoringOptions::default(),
        23,
        0,
    )
    .unwrap();
    let s_origin = outcome.scored.s_origin;
    let s_ps = outcome.scored.s_ps;
    assert!((0.45..=0.55).contains(&s_origin), "s_origin {s_origin} outside [0.45, 0.55]");
    assert!((0.20..=0.30).contains(&s_ps), "s_ps {s_ps} outside [0.20, 0.30]");
    assert_identity(&outcome.scored);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}, budget 30 s");
    println!(
        "ACCEPTANCE 03 PASS: random responder calibrates to s_origin={s_origin:.3}, s_ps={s_ps:.3} ({elapsed:?})"
    );
}

/// Criterion 4: the scripted magic-token optimizer/target pair drives a
/// 15-step, k=8 run to best-so-far s_ps = 1.0, never decreasing.
/// Runtime < 60 s.
#[test]
fn acceptance_04_hill_climb_convergence() {
    let started = Instant::now();
    let mut config = RunConfig::for_trait(TraitDimension::Openness);
    config.max_steps = 15;
    config.seed = 1004;
    assert_eq!(config.candidates_per_step, 8);
    let backends = RunBackends {
        optimizer: extend_optimizer(
            "hill-opt",
            &HILL_TOKENS.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            &config,
        ),
        target: hill_target(),
    };
    let dir = tempfile::tempdir().unwrap();
    let result = optimizer::run(&config, &backends, &hill_train(), None, dir.path()).unwrap();
    assert_eq!(result.q_star.s_ps, 1.0, "best prompt must reach 1.0");

    let buffer = optimizer::load_buffer(dir.path()).unwrap();
    let mut best = f64::MIN;
    let mut trace = Vec::new();
    for step in 0..=config.max_steps {
        for entry in buffer.entries_at_step(step) {
            assert_identity(entry);
            best = best.max(entry.s_ps);
        }
        trace.push(best);
    }
    for pair in trace.windows(2) {
        assert!(pair[1] >= pair[0], "best-so-far decreased: {trace:?}");
    }
    assert_eq!(trace.last().copied(), Some(1.0));
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 60 s");
    println!("ACCEPTANCE 04 PASS: hill climb reaches 1.0 with non-decreasing best-so-far ({elapsed:?})");
}

/// Criterion 5: default configuration equals the published protocol:
/// k=8, n=3, q=3, temperature 1.2, greedy target, 25 steps (15 for
/// AGR/CON), 200/800 split.
#[test]
fn acceptance_05_protocol_fidelity_snapshot() {
    for trait_dim in TraitDimension::ALL {
        let config = RunConfig::for_trait(trait_dim);
        assert_eq!(config.candidates_per_step, 8, "k");
        assert_eq!(config.trajectory_top_n, 3, "n");
        assert_eq!(config.questions_per_step, 3, "q");
        assert!((config.optimizer_temperature - 1.2).abs() < 1e-12, "temperature");
        assert_eq!(config.target_sampling, TargetSampling::Greedy, "target sampling");
        let expected_steps = match trait_dim {
            TraitDimension::Agreeableness | TraitDimension::Conscientiousness => 15,
            _ => 25,
        };
        assert_eq!(config.max_steps, expected_steps, "steps for {trait_dim}");
        let split = dataset::SplitSpec::new(trait_dim, 0);
        assert_eq!(split.train_size, 200, "train");
        assert_eq!(split.test_size, 800, "test");
    }
    println!("ACCEPTANCE 05 PASS: default config matches the protocol snapshot");
}

/// Criterion 6: 100 seeded meta-prompts contain (a) the top-n trajectory
/// in ascending score order, (b) problem examples embedding exactly one
/// option text, (c) the sentinel format directive — checked structurally
/// on the rendered text.
#[test]
fn acceptance_06_meta_prompt_structure() {
    let config = RunConfig::for_trait(TraitDimension::Extraversion);
    let bank = twinned_bank(6, TraitDimension::Extraversion);
    let sources: Vec<QuestionItem> = bank.iter().filter(|i| !i.is_twin()).cloned().collect();
    let mut outer = seeds::rng(1006, &["meta-structure"]);
    for round in 0..100 {
        // Random buffer of 1..=10 entries with random scores.
        let mut buffer = TrajectoryBuffer::new();
        let entries = outer.random_range(1..=10usize);
        for e in 0..entries {
            let step = e as u32;
            let text = format!("profile text {round}-{e}");
            let score = (outer.random_range(0..=1000) as f64) / 1000.0;
            buffer.append(ScoredPrompt {
                prompt: PersonaPrompt::new(text, PromptOrigin::Generated { step }).unwrap(),
                trait_dim: TraitDimension::Extraversion,
                s_ps: score,
                s_consist: score,
                s_origin: score,
                step,
                question_sample: vec!["x".into()],
            });
        }
        let mut sampled: Vec<QuestionItem> = sources.clone();
        sampled.shuffle(&mut outer);
        sampled.truncate(3);
        let mut rng = seeds::rng(round as u64, &["meta-acceptance"]);
        let meta =
            optimizer::build_meta_prompt(&buffer, &config, &sampled, &mut rng).unwrap();
        let rendered = meta.render();

        // (a) Scores appear in ascending order.
        let scores: Vec<f64> = rendered
            .lines()
            .filter_map(|l| l.strip_prefix("Score: "))
            .map(|s| s.parse::<f64>().unwrap())
            .collect();
        assert!(!scores.is_empty());
        assert!(scores.len() <= config.trajectory_top_n as usize);
        assert!(
            scores.windows(2).all(|w| w[0] <= w[1]),
            "round {round}: trajectory not ascending: {scores:?}"
        );

        // (b) Each example line embeds exactly one option text.
        let example_lines: Vec<&str> = rendered
            .lines()
            .filter(|l| l.starts_with("- "))
            .collect();
        assert_eq!(example_lines.len(), 3);
        for (line, item) in example_lines.iter().zip(&sampled) {
            let embedded = item.options.iter().filter(|o| line.contains(&o.text)).count();
            assert_eq!(embedded, 1, "round {round}: example must embed exactly one option");
            assert!(line.contains(&item.scenario));
        }

        // (c) The sentinel directive is present.
        assert!(rendered.contains(&config.instructions.sentinel_start));
        assert!(rendered.contains(&config.instructions.sentinel_end));
    }
    println!("ACCEPTANCE 06 PASS: 100 seeded meta-prompts are structurally well-formed");
}

/// Criterion 7: a content-keyed responder yields identical trait scores
/// across 10 permutation seeds (exact equality); the Likert path shows
/// nonzero across-trial std under a position-biased responder and zero
/// without bias.
#[test]
fn acceptance_07_order_bias_handling() {
    let bank = twinned_bank(12, TraitDimension::Neuroticism);
    let backend = behavior_backend(
        "content-keyed",
        3,
        MockBehavior::OptionContaining { needle: "HIGHWORD reach".into(), fallback: String::new() },
    );
    let prompt = PersonaPrompt::origin_empty();
    let mut scored = Vec::new();
    for seed in 0..10u64 {
        let outcome = trait_scores(
            &prompt,
            TraitDimension::Neuroticism,
            &bank,
            &backend,
            &ScoringOptions::default(),
            seed,
            0,
        )
        .unwrap();
        scored.push(outcome.scored);
    }
    for other in &scored[1..] {
        assert_eq!(&scored[0], other, "content-keyed scores must be permutation-invariant");
    }

    let items: Vec<LikertItem> = TraitDimension::ALL
        .iter()
        .flat_map(|&dim| {
            (0..24).map(move |i| LikertItem {
                id: format!("{}-{i:02}", dim.code().to_lowercase()),
                trait_dim: dim,
                statement: format!("You often behave in ways typical of {} ({i}).", dim.name()),
                keying: LikertKeying::Positive,
            })
        })
        .collect();
    let biased = behavior_backend(
        "position-biased",
        5,
        MockBehavior::CycleByMarkerIndex {
            marker: "Statement ".into(),
            cycle: vec!["1".into(), "2".into(), "3".into(), "4".into(), "5".into()],
        },
    );
    let (biased_report, _) =
        likert_assess(&prompt, &items, &biased, 15, &ScoringOptions::default(), 7).unwrap();
    let unbiased = behavior_backend("steady", 5, MockBehavior::Text { text: "3".into() });
    let (steady_report, _) =
        likert_assess(&prompt, &items, &unbiased, 15, &ScoringOptions::default(), 7).unwrap();
    assert!(
        biased_report.grand_std > 0.0,
        "position-biased responder must show across-trial variance"
    );
    assert_eq!(steady_report.grand_std, 0.0, "content-keyed responder must show none");
    println!(
        "ACCEPTANCE 07 PASS: permutation-invariant MC scores; Likert std {:.3} under bias, 0 without",
        biased_report.grand_std
    );
}

/// Criterion 8: killing a mock run after any step and resuming yields a
/// buffer byte-identical to the uninterrupted run.
#[test]
fn acceptance_08_resumability() {
    let mut config = RunConfig::for_trait(TraitDimension::Openness);
    config.max_steps = 5;
    config.seed = 1008;
    let backends = RunBackends {
        optimizer: extend_optimizer(
            "resume-opt",
            &HILL_TOKENS.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            &config,
        ),
        target: hill_target(),
    };
    let train = hill_train();
    let full_dir = tempfile::tempdir().unwrap();
    optimizer::run(&config, &backends, &train, None, full_dir.path()).unwrap();
    let full = std::fs::read(full_dir.path().join("buffer.jsonl")).unwrap();

    for stop in 0..config.max_steps {
        let dir = tempfile::tempdir().unwrap();
        let partial = optimizer::run_resumable(
            &config,
            &backends,
            &train,
            None,
            dir.path(),
            Some(stop),
        )
        .unwrap();
        assert!(partial.is_none(), "stopped run must not finalize");
        optimizer::run(&config, &backends, &train, None, dir.path()).unwrap();
        let resumed = std::fs::read(dir.path().join("buffer.jsonl")).unwrap();
        assert_eq!(resumed, full, "resume after step {stop} diverged");
    }
    println!("ACCEPTANCE 08 PASS: resume after every stop point reproduces the buffer byte-for-byte");
}

/// Criterion 9: checkpoints exported at steps 6, 16, and 24 reload as
/// evaluation conditions and reproduce their recorded s_ps on the
/// recorded question sample exactly; the window-8 smoothed curve matches
/// a hand-computed trailing average on a 10-point fixture to 1e-12.
#[test]
fn acceptance_09_checkpoint_degree_control_round_trip() {
    // A 25-step run whose candidates keep changing: a 30-token extender
    // against a uniform-random target gives varied mini-batch scores.
    let gradual_tokens: Vec<String> = (0..30).map(|i| format!("facet{i:02}")).collect();
    let mut config = RunConfig::for_trait(TraitDimension::Openness);
    config.seed = 1009;
    assert_eq!(config.max_steps, 25);
    let backends = RunBackends {
        optimizer: extend_optimizer("ckpt-opt", &gradual_tokens, &config),
        target: uniform_responder("ckpt-target", 31),
    };
    let train = hill_train();
    let dir = tempfile::tempdir().unwrap();
    optimizer::run(&config, &backends, &train, None, dir.path()).unwrap();
    let buffer = optimizer::load_buffer(dir.path()).unwrap();

    let source = CheckpointSource {
        run_config_hash: config.config_hash(),
        target_backend: config.target_backend.clone(),
        trait_dim: config.trait_dim,
    };
    let selected = trajectory::checkpoints(&buffer, &[6, 16, 24], config.seed, &source).unwrap();
    assert_eq!(selected.len(), 3);
    let ckpt_dir = dir.path().join("checkpoints");
    let paths = trajectory::export_checkpoints(&ckpt_dir, &selected).unwrap();

    for (path, original) in paths.iter().zip(&selected) {
        let condition = Condition::profile_from_checkpoint(path);
        let resolved = resolve_condition(&condition, config.trait_dim).unwrap();
        assert_eq!(resolved.prompt.text, original.prompt.text);
        // Re-score on the recorded question sample with the run's seed.
        let sample: Vec<QuestionItem> = original
            .question_sample
            .iter()
            .flat_map(|id| {
                train
                    .iter()
                    .filter(move |i| {
                        &i.id == id || i.paraphrase_of.as_deref() == Some(id.as_str())
                    })
                    .cloned()
            })
            .collect();
        let outcome = trait_scores(
            &resolved.prompt,
            config.trait_dim,
            &sample,
            &backends.target,
            &ScoringOptions::default(),
            config.seed,
            original.step,
        )
        .unwrap();
        assert_eq!(
            outcome.scored.s_ps, original.s_ps,
            "checkpoint at step {} must reproduce its recorded score exactly",
            original.step
        );
    }

    // Hand-computed trailing average on a 10-point fixture.
    let values = [0.05, 0.9, 0.2, 0.7, 0.4, 0.65, 0.3, 0.85, 0.1, 0.5];
    let mut fixture = TrajectoryBuffer::new();
    for (step, value) in values.iter().enumerate() {
        fixture.append(ScoredPrompt {
            prompt: PersonaPrompt::new(format!("p{step}"), PromptOrigin::Generated {
                step: step as u32,
            })
            .unwrap(),
            trait_dim: TraitDimension::Openness,
            s_ps: *value,
            s_consist: *value,
            s_origin: *value,
            step: step as u32,
            question_sample: Vec::new(),
        });
    }
    let curve = trajectory::curve(&fixture, 8).unwrap();
    for (i, point) in curve.smoothed.iter().enumerate() {
        let lo = i.saturating_sub(7);
        let mut sum = 0.0;
        let mut count = 0.0;
        for value in &values[lo..=i] {
            sum += value;
            count += 1.0;
        }
        let expected = sum / count;
        assert!(
            (point.value - expected).abs() <= 1e-12,
            "smoothed[{i}] = {} differs from hand average {expected}",
            point.value
        );
    }
    println!("ACCEPTANCE 09 PASS: checkpoints round-trip exactly; window-8 smoothing matches hand arithmetic");
}

/// Criterion 10: a 2-model × 3-condition × 5-trait matrix with one
/// deliberately failing backend completes with 25 successful cells,
/// 5 failed cells, and self-transfer cells rendered "—".
#[test]
fn acceptance_10_transfer_matrix_integrity() {
    let bank: Vec<QuestionItem> = TraitDimension::ALL
        .iter()
        .flat_map(|&dim| twinned_bank(2, dim))
        .collect();

    // A small completed run on mock-a to supply the profile condition.
    let mut config = RunConfig::for_trait(TraitDimension::Openness);
    config.max_steps = 2;
    config.seed = 1010;
    config.target_backend = "mock-a".to_string();
    let run_backends = RunBackends {
        optimizer: mock(
            "profile-writer",
            MockScript::constant("<<PROFILE>>\na warm, adventurous correspondent\n<</PROFILE>>"),
        ),
        target: always_high("mock-a"),
    };
    let run_dir = tempfile::tempdir().unwrap();
    optimizer::run(&config, &run_backends, &twinned_bank(4, TraitDimension::Openness), None, run_dir.path())
        .unwrap();

    // mock-b fails exactly the naive condition (its system prompt says
    // "assistant with"); other conditions answer normally.
    let flaky = mock(
        "mock-b",
        MockScript {
            seed: 9,
            rules: vec![MockRule {
                when: MockMatcher::SystemContains { needle: "assistant with".into() },
                respond: MockBehavior::Fail { message: "endpoint unreachable".into() },
            }],
            default: MockBehavior::OptionContaining {
                needle: "HIGHWORD".into(),
                fallback: String::new(),
            },
        },
    );
    let models = vec![
        ("mock-a".to_string(), always_high("mock-a")),
        ("mock-b".to_string(), flaky),
    ];
    let conditions = vec![
        Condition::Origin,
        Condition::naive_prefixed("very"),
        Condition::profile_from_run(run_dir.path()),
    ];
    let out_dir = tempfile::tempdir().unwrap();
    let matrix = transfer_matrix(
        &models,
        &conditions,
        &TraitDimension::ALL,
        &EvalItems::Trait(&bank),
        &ScoringOptions::default(),
        1010,
        Some(out_dir.path()),
        4,
    );
    assert_eq!(matrix.cells.len(), 30);
    let scored = matrix
        .cells
        .iter()
        .filter(|c| matches!(c.outcome, CellOutcome::Scored { .. }))
        .count();
    let dashes = matrix
        .cells
        .iter()
        .filter(|c| matches!(c.outcome, CellOutcome::SelfTransfer))
        .count();
    let failed: Vec<&personaforge::evaluation::TransferCell> = matrix
        .cells
        .iter()
        .filter(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
        .collect();
    assert_eq!(scored + dashes, 25, "successful cells");
    assert_eq!(dashes, 5, "self-transfer cells for the profile's source model");
    assert_eq!(failed.len(), 5, "failing backend affects exactly its naive cells");
    assert!(failed.iter().all(|c| c.model == "mock-b" && c.condition == "naive[very]"));

    matrix.save(out_dir.path()).unwrap();
    let text = std::fs::read_to_string(out_dir.path().join("report.txt")).unwrap();
    assert!(text.contains("—"), "self-transfer cells render as —");
    assert!(text.contains("failed"));
    for cell in &matrix.cells {
        if let CellOutcome::Scored { report } = &cell.outcome {
            if let personaforge::evaluation::ReportScores::Trait { s_ps, .. } = report.scores {
                assert!(text.contains(&format!("{s_ps:.3}")));
            }
        }
    }
    println!("ACCEPTANCE 10 PASS: 25 successful + 5 failed cells, self-transfer rendered as —");
}

/// Companion check to criterion 10's setup: evaluation under the origin
/// condition with a scripted ceiling responder reaches s_ps = 1.0.
#[test]
fn acceptance_10a_origin_ceiling_sanity() {
    let bank = twinned_bank(4, TraitDimension::Conscientiousness);
    let backend = always_high("ceiling");
    let report = evaluate(
        &Condition::Origin,
        TraitDimension::Conscientiousness,
        &backend,
        &EvalItems::Trait(&bank),
        &ScoringOptions::default(),
        0,
        None,
    )
    .unwrap();
    assert_eq!(report.scores.headline(), 1.0);
    println!("ACCEPTANCE 10a PASS: origin condition under a ceiling responder scores 1.0");
}
