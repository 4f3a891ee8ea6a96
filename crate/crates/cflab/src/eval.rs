//! Split accuracies, shortcut diagnostics, Wilson intervals, and figure-ready
//! CSV emission.
//!
//! Correctness is exact match of the greedy answer against the gold tokens.
//! Two diagnostics instrument the known failure modes: `copy_rate` (fraction
//! of predictions equal to the premise tail — context-overfitting) and
//! `factual_default_rate` (fraction equal to the no-premise walk answer —
//! context-ignoring).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetExample, SplitLabel, Vocabulary};
use crate::kg::{Entity, KnowledgeGraph, Relation};
use crate::model::{ModelError, ModelState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("confidence interval undefined for n = 0")]
    ZeroSamples,
    #[error("successes {0} exceed trials {1}")]
    TooManySuccesses(u64, u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Outcome of scoring one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub meta: crate::corpus::ExampleMeta,
    pub split: SplitLabel,
    pub predicted: Vec<u32>,
    pub gold: Vec<u32>,
    pub correct: bool,
    /// Predicted token equals the premise tail token (examples with premises).
    pub matched_premise_tail: Option<bool>,
    /// Predicted token equals the no-premise walk answer (needs graph access).
    pub matched_factual: Option<bool>,
}

/// Aggregate over one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEval {
    pub n: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub copy_rate: Option<f64>,
    pub factual_default_rate: Option<f64>,
    pub ci95: (f64, f64),
}

/// Per-split report with worst-split summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_split: BTreeMap<String, SplitEval>,
    pub worst_split: f64,
}

impl EvalReport {
    pub fn from_splits(per_split: BTreeMap<String, SplitEval>) -> Self {
        let worst_split = per_split
            .values()
            .map(|s| s.accuracy)
            .fold(f64::INFINITY, f64::min);
        Self {
            per_split,
            worst_split: if worst_split.is_finite() { worst_split } else { 0.0 },
        }
    }
}

/// Score one dataset: exact-match accuracy plus the two shortcut meters.
/// `graph` enables the factual-default meter; pass `None` when the stored
/// answer is not reconstructible.
pub fn evaluate_split(
    state: &ModelState,
    vocab: &Vocabulary,
    examples: &[DatasetExample],
    graph: Option<&KnowledgeGraph>,
) -> Result<(SplitEval, Vec<ExampleOutcome>), EvalError> {
    use rayon::prelude::*;

    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let outcomes: Vec<ExampleOutcome> = examples
        .par_iter()
        .map(|ex| -> Result<ExampleOutcome, EvalError> {
            let seq = ex.sequence();
            let prompt = seq.prompt();
            let gold = seq.answer_tokens();
            let predicted = state.greedy_answer(prompt, gold.len())?;
            let is_correct = predicted == gold;
            let last_predicted = predicted.last().copied();

            let matched_premise_tail = ex
                .meta
                .premise
                .map(|[_, _, tail]| vocab.entity(Entity(tail)).ok() == last_predicted);

            let matched_factual = match (graph, ex.meta.query.len()) {
                (Some(g), 3) => g
                    .oracle_answer(
                        None,
                        Entity(ex.meta.query[0]),
                        Relation(ex.meta.query[1]),
                        Relation(ex.meta.query[2]),
                    )
                    .map(|e| vocab.entity(e).ok() == last_predicted),
                _ => None,
            };

            Ok(ExampleOutcome {
                meta: ex.meta.clone(),
                split: ex.split,
                predicted,
                gold,
                correct: is_correct,
                matched_premise_tail,
                matched_factual,
            })
        })
        .collect::<Result<_, _>>()?;

    let n = examples.len() as u64;
    let correct = outcomes.iter().filter(|o| o.correct).count() as u64;
    let copy_n = outcomes.iter().filter(|o| o.matched_premise_tail.is_some()).count() as u64;
    let copy_hits = outcomes
        .iter()
        .filter(|o| o.matched_premise_tail == Some(true))
        .count() as u64;
    let factual_n = outcomes.iter().filter(|o| o.matched_factual.is_some()).count() as u64;
    let factual_hits = outcomes
        .iter()
        .filter(|o| o.matched_factual == Some(true))
        .count() as u64;

    let eval = SplitEval {
        n,
        correct,
        accuracy: correct as f64 / n as f64,
        copy_rate: (copy_n > 0).then(|| copy_hits as f64 / copy_n as f64),
        factual_default_rate: (factual_n > 0).then(|| factual_hits as f64 / factual_n as f64),
        ci95: confidence_interval(correct, n)?,
    };
    Ok((eval, outcomes))
}

/// Wilson score interval at 95% confidence.
pub fn confidence_interval(successes: u64, n: u64) -> Result<(f64, f64), EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroSamples);
    }
    if successes > n {
        return Err(EvalError::TooManySuccesses(successes, n));
    }
    // z for the 97.5th percentile of the standard normal.
    const Z: f64 = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p_hat = successes as f64 / n_f;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n_f;
    let center = (p_hat + z2 / (2.0 * n_f)) / denom;
    let half = (Z / denom) * (p_hat * (1.0 - p_hat) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// One logged trajectory point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub step: u64,
    pub split: String,
    pub accuracy: f64,
    pub copy_rate: Option<f64>,
    pub loss: Option<f64>,
}

/// A named accuracy trajectory in long format (one row per step x split).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub name: String,
    pub points: Vec<TrajPoint>,
}

impl Trajectory {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            points: Vec::new(),
        }
    }

    /// Rows for one split, in step order.
    pub fn split(&self, split: &str) -> Vec<&TrajPoint> {
        self.points.iter().filter(|p| p.split == split).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "split", "accuracy", "copy_rate", "loss"])?;
        for p in &self.points {
            w.write_record([
                p.step.to_string(),
                p.split.clone(),
                format!("{:.6}", p.accuracy),
                p.copy_rate.map(|c| format!("{c:.6}")).unwrap_or_default(),
                p.loss.map(|l| format!("{l:.6}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut points = Vec::new();
        for record in r.records() {
            let record = record?;
            let parse_opt = |s: &str| -> Option<f64> {
                if s.is_empty() {
                    None
                } else {
                    s.parse().ok()
                }
            };
            points.push(TrajPoint {
                step: record[0].parse().unwrap_or(0),
                split: record[1].to_string(),
                accuracy: record[2].parse().unwrap_or(0.0),
                copy_rate: parse_opt(&record[3]),
                loss: parse_opt(&record[4]),
            });
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self { name, points })
    }
}

impl From<csv::Error> for EvalError {
    fn from(e: csv::Error) -> Self {
        EvalError::Io(std::io::Error::other(e))
    }
}

/// Emit one CSV per figure panel from the given trajectories: the three
/// counterfactual splits, the CoT control, and the worst-split panel. Every
/// panel is always written (header-only when no trajectory feeds it), and
/// re-emission over identical inputs is byte-identical.
pub fn emit_figure_data(
    trajectories: &[Trajectory],
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let panel_splits = [
        ("hop1", "fig4a_hop1.csv"),
        ("hop2", "fig4b_hop2.csv"),
        ("irrelevant", "fig4c_irrelevant.csv"),
        ("cot", "fig4d_cot.csv"),
    ];
    for (split, filename) in panel_splits {
        let path = out_dir.join(filename);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["run", "step", "accuracy", "copy_rate"])?;
        for t in trajectories {
            for p in t.points.iter().filter(|p| p.split == split) {
                w.write_record([
                    t.name.clone(),
                    p.step.to_string(),
                    format!("{:.6}", p.accuracy),
                    p.copy_rate.map(|c| format!("{c:.6}")).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);
    }

    let path = out_dir.join("fig5_worst_split.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["run", "step", "worst_split_accuracy"])?;
    for t in trajectories {
        for p in t.points.iter().filter(|p| p.split == "cf_worst") {
            w.write_record([t.name.clone(), p.step.to_string(), format!("{:.6}", p.accuracy)])?;
        }
    }
    w.flush()?;
    written.push(path);

    Ok(written)
}

/// Write per-example outcome records as JSONL.
pub fn write_outcomes(path: &Path, outcomes: &[ExampleOutcome]) -> Result<(), EvalError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for o in outcomes {
        serde_json::to_writer(&mut file, o)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Oracle used by the acceptance suite: recompute the Wilson interval with an
/// independently arranged formula (quadratic in p solved directly).
pub fn wilson_interval_reference(successes: u64, n: u64) -> (f64, f64) {
    const Z: f64 = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    // Roots of (p - x)^2 = z^2 x (1 - x) / n in x.
    let z2 = Z * Z;
    let a = 1.0 + z2 / n_f;
    let b = -(2.0 * p + z2 / n_f);
    let c = p * p;
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    (((-b - disc) / (2.0 * a)).max(0.0), ((-b + disc) / (2.0 * a)).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_finetune_sets, cf_dataset_example, CfKind};
    use crate::model::ModelConfig;

    #[test]
    fn wilson_edge_cases() {
        let (low, _) = confidence_interval(0, 20).unwrap();
        assert_eq!(low, 0.0);
        let (_, high) = confidence_interval(20, 20).unwrap();
        assert_eq!(high, 1.0);
        assert!(matches!(confidence_interval(0, 0), Err(EvalError::ZeroSamples)));
        assert!(matches!(
            confidence_interval(5, 4),
            Err(EvalError::TooManySuccesses(5, 4))
        ));
    }

    #[test]
    fn wilson_matches_independent_formula() {
        for (s, n) in [(8u64, 10u64), (1, 7), (499, 1000), (0, 3), (3, 3), (97, 200)] {
            let (low, high) = confidence_interval(s, n).unwrap();
            let (rlow, rhigh) = wilson_interval_reference(s, n);
            assert!(
                (low - rlow).abs() < 1e-9 && (high - rhigh).abs() < 1e-9,
                "({s},{n}): ({low},{high}) vs ({rlow},{rhigh})"
            );
        }
    }

    #[test]
    fn wilson_narrows_with_n() {
        let mut last_width = f64::INFINITY;
        for n in [10u64, 100, 1000, 10000] {
            let (low, high) = confidence_interval(n * 8 / 10, n).unwrap();
            let width = high - low;
            assert!(width < last_width);
            last_width = width;
        }
    }

    fn tiny_model(vocab: u32) -> ModelState {
        ModelState::new(
            ModelConfig {
                num_layers: 1,
                model_dim: 16,
                num_heads: 2,
                context_length: 12,
                vocab_size: vocab as usize,
                init_scale: 0.02,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn containment_identities_hold_by_construction() {
        // On hop2, gold = premise tail, so every correct prediction is a copy:
        // copy_rate >= accuracy. On irrelevant, gold = factual answer, so
        // factual_default_rate >= accuracy.
        let graph = KnowledgeGraph::generate(30, 4, 1.0, 5).unwrap();
        let vocab = Vocabulary::for_graph(&graph);
        let state = tiny_model(vocab.size());
        let (train, _) = build_finetune_sets(&graph, 60, 9, 0.3, 1).unwrap();

        let hop2: Vec<_> = train
            .iter()
            .filter(|e| e.split == CfKind::Hop2Relevant)
            .map(|e| cf_dataset_example(&vocab, e, false).unwrap())
            .collect();
        let (eval2, _) = evaluate_split(&state, &vocab, &hop2, Some(&graph)).unwrap();
        assert!(eval2.copy_rate.unwrap() >= eval2.accuracy);

        let irr: Vec<_> = train
            .iter()
            .filter(|e| e.split == CfKind::Irrelevant)
            .map(|e| cf_dataset_example(&vocab, e, false).unwrap())
            .collect();
        let (eval_irr, _) = evaluate_split(&state, &vocab, &irr, Some(&graph)).unwrap();
        assert!(eval_irr.factual_default_rate.unwrap() >= eval_irr.accuracy);
    }

    #[test]
    fn aggregate_matches_recomputation_from_records() {
        let graph = KnowledgeGraph::generate(25, 3, 1.0, 9).unwrap();
        let vocab = Vocabulary::for_graph(&graph);
        let state = tiny_model(vocab.size());
        let (train, _) = build_finetune_sets(&graph, 30, 9, 0.3, 2).unwrap();
        let rows: Vec<_> = train
            .iter()
            .map(|e| cf_dataset_example(&vocab, e, false).unwrap())
            .collect();
        let (eval, outcomes) = evaluate_split(&state, &vocab, &rows, Some(&graph)).unwrap();
        let recomputed = outcomes.iter().filter(|o| o.correct).count() as u64;
        assert_eq!(eval.correct, recomputed);
        assert_eq!(eval.accuracy, recomputed as f64 / outcomes.len() as f64);
        let copies = outcomes
            .iter()
            .filter(|o| o.matched_premise_tail == Some(true))
            .count() as f64;
        assert_eq!(eval.copy_rate.unwrap(), copies / outcomes.len() as f64);
    }

    #[test]
    fn evaluate_split_rejects_empty() {
        let graph = KnowledgeGraph::generate(10, 2, 1.0, 0).unwrap();
        let vocab = Vocabulary::for_graph(&graph);
        let state = tiny_model(vocab.size());
        assert!(matches!(
            evaluate_split(&state, &vocab, &[], Some(&graph)),
            Err(EvalError::EmptyDataset)
        ));
    }

    #[test]
    fn trajectory_csv_round_trip_and_figures() {
        let mut traj = Trajectory::new("finetune-test");
        for step in [0u64, 500, 1000] {
            for split in ["hop1", "hop2", "irrelevant"] {
                traj.points.push(TrajPoint {
                    step,
                    split: split.into(),
                    accuracy: 0.5 + step as f64 / 4000.0,
                    copy_rate: Some(0.25),
                    loss: (step > 0).then_some(1.25),
                });
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        traj.write_csv(&path).unwrap();
        let back = Trajectory::read_csv(&path).unwrap();
        assert_eq!(back.points, traj.points);

        let out = dir.path().join("figs");
        let files = emit_figure_data(std::slice::from_ref(&traj), &out).unwrap();
        assert!(files.iter().any(|f| f.ends_with("fig4a_hop1.csv")));
        let hop1 = std::fs::read_to_string(out.join("fig4a_hop1.csv")).unwrap();
        // Header + one row per trajectory point of that split.
        assert_eq!(hop1.lines().count(), 1 + 3);

        // Byte-identical re-emission.
        let before = std::fs::read(out.join("fig4a_hop1.csv")).unwrap();
        emit_figure_data(std::slice::from_ref(&traj), &out).unwrap();
        let after = std::fs::read(out.join("fig4a_hop1.csv")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_trajectory_emits_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("figs");
        let empty = Trajectory::new("empty");
        let files = emit_figure_data(&[empty], &out).unwrap();
        assert!(!files.is_empty());
        for f in files {
            let text = std::fs::read_to_string(f).unwrap();
            assert_eq!(text.lines().count(), 1, "expected header only");
        }
    }
}
