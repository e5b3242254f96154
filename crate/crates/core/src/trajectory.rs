//! Degree control over a completed run: training curves, checkpoint
//! export, and one-sentence checkpoint summaries.
//!
//! The optimization buffer keeps every prompt from every step, so trait
//! intensity can be modulated after the fact by exporting a prompt from an
//! intermediate step instead of the final best. Checkpoint selection is
//! uniform among the step's retained candidates, seeded, so nothing is
//! cherry-picked.

use crate::backend::{Backend, ChatRequest};
use crate::domain::{InstructionSet, PersonaPrompt, TraitDimension};
use crate::optimizer::TrajectoryBuffer;
use crate::seeds;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("smoothing window must be ≥ 1")]
    WindowTooSmall,
    #[error("buffer has no steps")]
    EmptyBuffer,
    #[error("step {0} not present in buffer")]
    MissingStep(u32),
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

/// Which per-step statistic the curve plots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveStat {
    /// Mean paraphrase-sensitive score of the step's candidates.
    #[default]
    Mean,
    /// Best paraphrase-sensitive score of the step's candidates.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u32,
    pub value: f64,
}

/// A training curve: raw per-step values and their trailing moving
/// average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
    pub stat: CurveStat,
    pub window: usize,
    pub points: Vec<CurvePoint>,
    pub smoothed: Vec<CurvePoint>,
}

/// Per-step curve with the default per-step mean.
pub fn curve(buffer: &TrajectoryBuffer, window: usize) -> Result<Curve, TrajectoryError> {
    curve_with_stat(buffer, window, CurveStat::Mean)
}

/// Build the training curve. Smoothing is a trailing moving average over
/// `window` steps; prefix windows average over the points available so
/// far, which keeps the curve causal for live monitoring.
pub fn curve_with_stat(
    buffer: &TrajectoryBuffer,
    window: usize,
    stat: CurveStat,
) -> Result<Curve, TrajectoryError> {
    if window < 1 {
        return Err(TrajectoryError::WindowTooSmall);
    }
    if buffer.is_empty() {
        return Err(TrajectoryError::EmptyBuffer);
    }
    let mut per_step: std::collections::BTreeMap<u32, Vec<f64>> = std::collections::BTreeMap::new();
    for entry in buffer.entries() {
        per_step.entry(entry.step).or_default().push(entry.s_ps);
    }
    let trait_dim = buffer.entries()[0].trait_dim;
    let points: Vec<CurvePoint> = per_step
        .into_iter()
        .map(|(step, values)| {
            let value = match stat {
                CurveStat::Mean => values.iter().sum::<f64>() / values.len() as f64,
                CurveStat::Max => values.iter().copied().fold(f64::MIN, f64::max),
            };
            CurvePoint { step, value }
        })
        .collect();
    let smoothed = points
        .iter()
        .enumerate()
        .map(|(i, point)| {
            let lo = i.saturating_sub(window - 1);
            let slice = &points[lo..=i];
            let value = slice.iter().map(|p| p.value).sum::<f64>() / slice.len() as f64;
            CurvePoint { step: point.step, value }
        })
        .collect();
    Ok(Curve { trait_dim, stat, window, points, smoothed })
}

/// Provenance stamped into exported checkpoints so they stay usable as
/// standalone evaluation conditions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointSource {
    pub run_config_hash: String,
    /// Backend reference of the run's target model (for self-transfer
    /// detection in transfer matrices).
    pub target_backend: String,
    #[serde(rename = "trait")]
    pub trait_dim: TraitDimension,
}

/// One prompt exported from an intermediate optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u32,
    pub prompt: PersonaPrompt,
    /// Mini-batch score recorded when the prompt was generated.
    pub s_ps: f64,
    pub question_sample: Vec<String>,
    /// Derived seed used for the uniform selection at this step.
    pub sampling_seed: u64,
    pub source: CheckpointSource,
}

/// Select one prompt per requested step, uniformly among the candidates
/// retained at that step, deterministically under `seed`.
pub fn checkpoints(
    buffer: &TrajectoryBuffer,
    steps: &[u32],
    seed: u64,
    source: &CheckpointSource,
) -> Result<Vec<Checkpoint>, TrajectoryError> {
    let mut out = Vec::with_capacity(steps.len());
    for &step in steps {
        let entries = buffer.entries_at_step(step);
        if entries.is_empty() {
            return Err(TrajectoryError::MissingStep(step));
        }
        let sampling_seed = seeds::derive(seed, &["checkpoint", &step.to_string()]);
        let mut rng = seeds::rng(sampling_seed, &["pick"]);
        let pick = rng.random_range(0..entries.len());
        let entry = entries[pick];
        out.push(Checkpoint {
            step,
            prompt: entry.prompt.clone(),
            s_ps: entry.s_ps,
            question_sample: entry.question_sample.clone(),
            sampling_seed,
            source: source.clone(),
        });
    }
    Ok(out)
}

/// Write each checkpoint to `<dir>/step-<n>.json`.
pub fn export_checkpoints(dir: &Path, checkpoints: &[Checkpoint]) -> Result<Vec<PathBuf>, TrajectoryError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| TrajectoryError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let mut paths = Vec::with_capacity(checkpoints.len());
    for checkpoint in checkpoints {
        let path = dir.join(format!("step-{}.json", checkpoint.step));
        let json = serde_json::to_string_pretty(checkpoint).expect("checkpoint serializes");
        std::fs::write(&path, json)
            .map_err(|e| TrajectoryError::Io(format!("cannot write {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrajectoryError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| TrajectoryError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| TrajectoryError::Format(format!("{}: {e}", path.display())))
}

/// Markers the summary prompt wraps around the profile text.
pub const SUMMARY_SOURCE_START: &str = "<<<PROFILE>>>\n";
pub const SUMMARY_SOURCE_END: &str = "\n<<<END>>>";

/// Produce a one-sentence summary per checkpoint. Failures are recorded
/// per checkpoint; the rest proceed.
pub fn summarize_checkpoints(
    checkpoints: &[Checkpoint],
    backend: &Backend,
    instructions: &InstructionSet,
    max_tokens: u32,
) -> Vec<(u32, Result<String, String>)> {
    checkpoints
        .iter()
        .map(|checkpoint| {
            let request: ChatRequest = backend
                .new_request(format!(
                    "{}\n\n{SUMMARY_SOURCE_START}{}{SUMMARY_SOURCE_END}",
                    instructions.summary_instruction, checkpoint.prompt.text
                ))
                .with_max_tokens(max_tokens);
            let outcome = backend
                .complete(&request)
                .map(|response| response.text.trim().to_string())
                .map_err(|e| e.to_string());
            (checkpoint.step, outcome)
        })
        .collect()
}

pub fn write_curve_json(curve: &Curve, path: &Path) -> Result<(), TrajectoryError> {
    let json = serde_json::to_string_pretty(curve).expect("curve serializes");
    std::fs::write(path, json)
        .map_err(|e| TrajectoryError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Emit a simple line plot: raw points in grey, smoothed curve in blue.
/// Output is byte-stable for a given curve.
pub fn write_curve_svg(curve: &Curve, path: &Path) -> Result<(), TrajectoryError> {
    const WIDTH: f64 = 640.0;
    const HEIGHT: f64 = 400.0;
    const MARGIN: f64 = 48.0;

    let steps: Vec<u32> = curve.points.iter().map(|p| p.step).collect();
    let min_step = *steps.first().unwrap_or(&0) as f64;
    let max_step = *steps.last().unwrap_or(&1) as f64;
    let span = (max_step - min_step).max(1.0);
    let x = |step: u32| MARGIN + (step as f64 - min_step) / span * (WIDTH - 2.0 * MARGIN);
    let y = |value: f64| HEIGHT - MARGIN - value.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN);

    let polyline = |points: &[CurvePoint]| {
        points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.step), y(p.value)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{} ({:?}, window {})</text>\n",
        WIDTH / 2.0,
        MARGIN / 2.0,
        curve.trait_dim.name(),
        curve.stat,
        curve.window
    ));
    svg.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#b0b0b0\" stroke-width=\"1\"/>\n",
        polyline(&curve.points)
    ));
    svg.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\"/>\n",
        polyline(&curve.smoothed)
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
        .map_err(|e| TrajectoryError::Io(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockBehavior, MockRule, MockMatcher, MockScript};
    use crate::domain::{PromptOrigin, ScoredPrompt};

    fn scored(text: &str, s_ps: f64, step: u32) -> ScoredPrompt {
        ScoredPrompt {
            prompt: PersonaPrompt::new(text, PromptOrigin::Generated { step }).unwrap(),
            trait_dim: TraitDimension::Openness,
            s_ps,
            s_consist: s_ps,
            s_origin: s_ps,
            step,
            question_sample: vec!["q1".into(), "q2".into(), "q3".into()],
        }
    }

    fn buffer_with_steps(values: &[(u32, &[f64])]) -> TrajectoryBuffer {
        let mut buffer = TrajectoryBuffer::new();
        for (step, scores) in values {
            for (i, s) in scores.iter().enumerate() {
                buffer.append(scored(&format!("p-{step}-{i}"), *s, *step));
            }
        }
        buffer
    }

    fn source() -> CheckpointSource {
        CheckpointSource {
            run_config_hash: "hash".into(),
            target_backend: "target".into(),
            trait_dim: TraitDimension::Openness,
        }
    }

    #[test]
    fn constant_scores_give_flat_curves() {
        let buffer = buffer_with_steps(&[(0, &[0.5]), (1, &[0.5, 0.5]), (2, &[0.5])]);
        let curve = curve(&buffer, 8).unwrap();
        for point in curve.points.iter().chain(&curve.smoothed) {
            assert!((point.value - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_smoothing_matches_hand_arithmetic() {
        let buffer = buffer_with_steps(&[(0, &[0.0]), (1, &[1.0])]);
        let curve = curve_with_stat(&buffer, 2, CurveStat::Mean).unwrap();
        assert_eq!(curve.smoothed[0].value, 0.0);
        assert!((curve.smoothed[1].value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn per_step_mean_and_max_differ() {
        let buffer = buffer_with_steps(&[(0, &[0.2, 0.8])]);
        let mean_curve = curve_with_stat(&buffer, 1, CurveStat::Mean).unwrap();
        let max_curve = curve_with_stat(&buffer, 1, CurveStat::Max).unwrap();
        assert!((mean_curve.points[0].value - 0.5).abs() < 1e-12);
        assert!((max_curve.points[0].value - 0.8).abs() < 1e-12);
    }

    #[test]
    fn window_zero_is_domain_error() {
        let buffer = buffer_with_steps(&[(0, &[0.5])]);
        assert!(matches!(curve(&buffer, 0), Err(TrajectoryError::WindowTooSmall)));
    }

    #[test]
    fn smoothed_values_stay_within_window_bounds() {
        let buffer = buffer_with_steps(&[
            (0, &[0.1]),
            (1, &[0.7]),
            (2, &[0.3]),
            (3, &[0.9]),
            (4, &[0.5]),
        ]);
        let curve = curve(&buffer, 3).unwrap();
        for (i, smoothed) in curve.smoothed.iter().enumerate() {
            let lo = i.saturating_sub(2);
            let window = &curve.points[lo..=i];
            let min = window.iter().map(|p| p.value).fold(f64::MAX, f64::min);
            let max = window.iter().map(|p| p.value).fold(f64::MIN, f64::max);
            assert!(smoothed.value >= min - 1e-12 && smoothed.value <= max + 1e-12);
        }
    }

    #[test]
    fn checkpoints_are_deterministic_and_fail_on_missing_steps() {
        let buffer = buffer_with_steps(&[
            (0, &[0.1]),
            (6, &[0.2, 0.3, 0.4]),
            (16, &[0.5, 0.6]),
            (24, &[0.9]),
        ]);
        let a = checkpoints(&buffer, &[6, 16, 24], 5, &source()).unwrap();
        let b = checkpoints(&buffer, &[6, 16, 24], 5, &source()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].step, 6);
        match checkpoints(&buffer, &[40], 5, &source()) {
            Err(TrajectoryError::MissingStep(40)) => {}
            other => panic!("expected missing-step error, got {other:?}"),
        }
    }

    #[test]
    fn exported_checkpoints_round_trip() {
        let buffer = buffer_with_steps(&[(0, &[0.1]), (6, &[0.2, 0.3])]);
        let selected = checkpoints(&buffer, &[6], 5, &source()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_checkpoints(dir.path(), &selected).unwrap();
        assert_eq!(paths.len(), 1);
        let loaded = load_checkpoint(&paths[0]).unwrap();
        assert_eq!(loaded, selected[0]);
    }

    #[test]
    fn summaries_echo_through_mock_and_isolate_failures() {
        let buffer = buffer_with_steps(&[(1, &[0.2]), (2, &[0.4]), (3, &[0.6])]);
        let selected = checkpoints(&buffer, &[1, 2, 3], 5, &source()).unwrap();
        let script = MockScript {
            seed: 0,
            rules: vec![MockRule {
                when: MockMatcher::UserContains { needle: "p-2-0".into() },
                respond: MockBehavior::Fail { message: "summarizer down".into() },
            }],
            default: MockBehavior::EchoBetween {
                start: SUMMARY_SOURCE_START.into(),
                end: SUMMARY_SOURCE_END.into(),
                prefix: String::new(),
                max_words: Some(10),
            },
        };
        let backend = Backend::new("summarizer", Box::new(MockBackend::new(script)));
        let summaries =
            summarize_checkpoints(&selected, &backend, &InstructionSet::default(), 64);
        assert_eq!(summaries.len(), 3);
        assert_eq!(summaries[0].1.as_deref().unwrap(), "p-1-0");
        assert!(summaries[1].1.is_err());
        assert_eq!(summaries[2].1.as_deref().unwrap(), "p-3-0");

        let none = summarize_checkpoints(&[], &backend, &InstructionSet::default(), 64);
        assert!(none.is_empty());
    }

    #[test]
    fn curve_artifacts_are_byte_stable() {
        let buffer = buffer_with_steps(&[(0, &[0.1]), (1, &[0.4]), (2, &[0.7])]);
        let curve = curve(&buffer, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json_a = dir.path().join("a.json");
        let json_b = dir.path().join("b.json");
        let svg_a = dir.path().join("a.svg");
        let svg_b = dir.path().join("b.svg");
        write_curve_json(&curve, &json_a).unwrap();
        write_curve_json(&curve, &json_b).unwrap();
        write_curve_svg(&curve, &svg_a).unwrap();
        write_curve_svg(&curve, &svg_b).unwrap();
        assert_eq!(std::fs::read(&json_a).unwrap(), std::fs::read(&json_b).unwrap());
        assert_eq!(std::fs::read(&svg_a).unwrap(), std::fs::read(&svg_b).unwrap());
        let svg = std::fs::read_to_string(&svg_a).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("Openness"));
    }
}
