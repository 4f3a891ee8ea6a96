//! Training loops for the three experimental regimes: knowledge-graph
//! pretraining, counterfactual finetuning, and counterfactual-augmented
//! pretraining, plus the factual chain-of-thought control.
//!
//! One shared loop drives all regimes. Epoch shuffling is a seeded
//! permutation derived from `(shuffle_seed, epoch)` alone, so any step is
//! reproducible and a run resumed from a checkpoint continues on exactly the
//! batches the original run would have seen. Every logged metric is computed
//! by the eval module on the live state, which round-trips bitwise through
//! checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint;
use crate::corpus::{
    cf_dataset_example, cot_dataset_example, inferred_dataset_example, CorpusError,
    CounterfactualExample, DatasetExample, TokenSequence, Vocabulary,
};
use crate::eval::{evaluate_split, EvalError, TrajPoint, Trajectory};
use crate::kg::{InferredFact, KnowledgeGraph};
use crate::model::{ModelError, ModelState, OptimSettings};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint vocab size {checkpoint} does not match dataset vocab size {dataset}")]
    VocabMismatch { checkpoint: usize, dataset: usize },
    #[error("sequence of length {0} does not fit context length {1}")]
    SequenceTooLong(usize, usize),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loop schedule: budget, evaluation cadence, early stopping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub max_steps: u64,
    pub eval_interval: u64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Early-stop once every split named here holds `target_accuracy` for
    /// `patience` consecutive evals. Empty disables early stopping.
    pub stop_splits: Vec<String>,
    pub target_accuracy: f64,
    pub patience: u32,
    /// Cap on examples scored per eval set (0 = score everything). The
    /// subsample is drawn once per run and frozen across evals.
    pub eval_sample: usize,
    /// Write a checkpoint every k-th eval (1 = every eval, 0 = never).
    pub checkpoint_every: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            max_steps: 20_000,
            eval_interval: 500,
            batch_size: 512,
            shuffle_seed: 0,
            stop_splits: Vec::new(),
            target_accuracy: 0.99,
            patience: 5,
            eval_sample: 2048,
            checkpoint_every: 1,
        }
    }
}

/// A named dataset scored at every eval point.
pub struct EvalSet {
    pub name: String,
    pub rows: Vec<DatasetExample>,
}

/// Names of the three counterfactual eval splits, in logging order.
pub const CF_SPLITS: [&str; 3] = ["hop1", "hop2", "irrelevant"];
/// Synthesized minimum over the three counterfactual splits.
pub const CF_WORST: &str = "cf_worst";

/// Permutation of `0..n` for one epoch; pure function of seed and epoch.
fn epoch_permutation(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mixed = shuffle_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Frozen deterministic subsample of an eval set.
fn freeze_sample(rows: &[DatasetExample], cap: usize, shuffle_seed: u64, salt: u64) -> Vec<DatasetExample> {
    if cap == 0 || rows.len() <= cap {
        return rows.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut indices: Vec<usize> = (0..rows.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(cap);
    indices.sort_unstable();
    indices.into_iter().map(|i| rows[i].clone()).collect()
}

/// Shared training loop. Evaluates at step 0, every `eval_interval` steps,
/// and at the final step; checkpoints alongside evals when `out_dir` is set.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    state: &mut ModelState,
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    corpus: &[TokenSequence],
    eval_sets: &[EvalSet],
    opt: &OptimSettings,
    sched: &TrainSchedule,
    out_dir: Option<&Path>,
) -> Result<Trajectory, TrainerError> {
    if corpus.is_empty() {
        return Err(TrainerError::EmptyCorpus);
    }
    if state.config.vocab_size != vocab.size() as usize {
        return Err(TrainerError::VocabMismatch {
            checkpoint: state.config.vocab_size,
            dataset: vocab.size() as usize,
        });
    }
    for seq in corpus {
        if seq.len() > state.config.context_length {
            return Err(TrainerError::SequenceTooLong(
                seq.len(),
                state.config.context_length,
            ));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let frozen: Vec<(String, Vec<DatasetExample>)> = eval_sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            (
                set.name.clone(),
                freeze_sample(&set.rows, sched.eval_sample, sched.shuffle_seed, i as u64 + 1),
            )
        })
        .collect();

    let mut trajectory = Trajectory::new(
        out_dir
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
    );
    let batch = sched.batch_size.max(1);
    let steps_per_epoch = corpus.len().div_ceil(batch) as u64;
    let mut loss_since_eval = 0.0f64;
    let mut batches_since_eval = 0u64;
    let mut streak = 0u32;
    let mut evals_done = 0u64;

    let run_eval = |state: &ModelState,
                        loss: Option<f64>,
                        trajectory: &mut Trajectory,
                        streak: &mut u32,
                        evals_done: &mut u64|
     -> Result<bool, TrainerError> {
        let mut accuracies: BTreeMap<String, f64> = BTreeMap::new();
        for (name, rows) in &frozen {
            let (eval, _) = evaluate_split(state, vocab, rows, Some(graph))?;
            accuracies.insert(name.clone(), eval.accuracy);
            trajectory.points.push(TrajPoint {
                step: state.step,
                split: name.clone(),
                accuracy: eval.accuracy,
                copy_rate: eval.copy_rate,
                loss,
            });
        }
        if CF_SPLITS.iter().all(|s| accuracies.contains_key(*s)) {
            let worst = CF_SPLITS
                .iter()
                .map(|s| accuracies[*s])
                .fold(f64::INFINITY, f64::min);
            accuracies.insert(CF_WORST.into(), worst);
            trajectory.points.push(TrajPoint {
                step: state.step,
                split: CF_WORST.into(),
                accuracy: worst,
                copy_rate: None,
                loss,
            });
        }
        if let Some(dir) = out_dir {
            if sched.checkpoint_every > 0 && *evals_done % sched.checkpoint_every == 0 {
                checkpoint::save(state, &dir.join(format!("ckpt-{:08}.bin", state.step)))?;
            }
        }
        *evals_done += 1;
        if sched.stop_splits.is_empty() {
            return Ok(false);
        }
        let all_met = sched
            .stop_splits
            .iter()
            .all(|s| accuracies.get(s).copied().unwrap_or(0.0) >= sched.target_accuracy);
        if all_met {
            *streak += 1;
        } else {
            *streak = 0;
        }
        Ok(*streak >= sched.patience)
    };

    // Step-0 (or resume-point) snapshot.
    let should_stop = run_eval(state, None, &mut trajectory, &mut streak, &mut evals_done)?;
    if should_stop || state.step >= sched.max_steps {
        finish(&trajectory, out_dir)?;
        return Ok(trajectory);
    }

    'outer: loop {
        let epoch = state.step / steps_per_epoch;
        let offset = state.step % steps_per_epoch;
        let perm = epoch_permutation(corpus.len(), sched.shuffle_seed, epoch);
        for batch_idx in offset..steps_per_epoch {
            let start = (batch_idx as usize) * batch;
            let end = (start + batch).min(perm.len());
            let seqs: Vec<TokenSequence> = perm[start..end].iter().map(|&i| corpus[i].clone()).collect();
            let (loss, grads) = match state.loss_and_grads(&seqs) {
                Ok(ok) => ok,
                Err(ModelError::NonFinite(_)) => {
                    return Err(TrainerError::Diverged {
                        step: state.step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                return Err(TrainerError::Diverged {
                    step: state.step,
                    loss,
                });
            }
            state.adamw_step(&grads, opt)?;
            loss_since_eval += loss;
            batches_since_eval += 1;

            let at_eval = state.step % sched.eval_interval == 0;
            let at_end = state.step >= sched.max_steps;
            if at_eval || at_end {
                let mean_loss = loss_since_eval / batches_since_eval as f64;
                loss_since_eval = 0.0;
                batches_since_eval = 0;
                let stop = run_eval(
                    state,
                    Some(mean_loss),
                    &mut trajectory,
                    &mut streak,
                    &mut evals_done,
                )?;
                if stop || at_end {
                    break 'outer;
                }
            }
        }
    }
    finish(&trajectory, out_dir)?;
    Ok(trajectory)
}

fn finish(trajectory: &Trajectory, out_dir: Option<&Path>) -> Result<(), TrainerError> {
    if let Some(dir) = out_dir {
        trajectory.write_csv(&dir.join("trajectory.csv"))?;
    }
    Ok(())
}

/// Knowledge-graph pretraining: all atomic facts plus a subset of inferred
/// facts, early-stopped once heldout inferred accuracy holds the target.
pub fn pretrain(
    state: &mut ModelState,
    graph: &KnowledgeGraph,
    corpus: &[DatasetExample],
    heldout: &[InferredFact],
    opt: &OptimSettings,
    sched: &TrainSchedule,
    out_dir: Option<&Path>,
) -> Result<Trajectory, TrainerError> {
    let vocab = Vocabulary::for_graph(graph);
    let sequences: Vec<TokenSequence> = corpus.iter().map(|e| e.sequence()).collect();

    let atomic_rows: Vec<DatasetExample> = corpus
        .iter()
        .filter(|e| e.split == crate::corpus::SplitLabel::Atomic)
        .cloned()
        .collect();
    let inferred_rows: Vec<DatasetExample> = corpus
        .iter()
        .filter(|e| e.split == crate::corpus::SplitLabel::Inferred)
        .cloned()
        .collect();
    let heldout_rows: Vec<DatasetExample> = heldout
        .iter()
        .map(|f| inferred_dataset_example(&vocab, f))
        .collect::<Result<_, _>>()?;

    let mut eval_sets = vec![EvalSet {
        name: "atomic_train".into(),
        rows: atomic_rows,
    }];
    if !inferred_rows.is_empty() {
        eval_sets.push(EvalSet {
            name: "inferred_train".into(),
            rows: inferred_rows,
        });
    }
    eval_sets.push(EvalSet {
        name: "inferred_heldout".into(),
        rows: heldout_rows,
    });

    let mut sched = sched.clone();
    if sched.stop_splits.is_empty() {
        sched.stop_splits = vec!["inferred_heldout".into()];
    }
    train_loop(state, &vocab, graph, &sequences, &eval_sets, opt, &sched, out_dir)
}

/// Pretraining with counterfactual examples mixed in. `cf_test` provides the
/// held-out counterfactual queries scored per split; they are serialized in
/// the same (marked or unmarked) format the corpus uses.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_with_cf(
    state: &mut ModelState,
    graph: &KnowledgeGraph,
    corpus: &[DatasetExample],
    heldout: &[InferredFact],
    cf_test: &[CounterfactualExample],
    marked: bool,
    opt: &OptimSettings,
    sched: &TrainSchedule,
    out_dir: Option<&Path>,
) -> Result<Trajectory, TrainerError> {
    let vocab = Vocabulary::for_graph(graph);
    let sequences: Vec<TokenSequence> = corpus.iter().map(|e| e.sequence()).collect();

    let heldout_rows: Vec<DatasetExample> = heldout
        .iter()
        .map(|f| inferred_dataset_example(&vocab, f))
        .collect::<Result<_, _>>()?;
    let mut eval_sets = vec![EvalSet {
        name: "inferred_heldout".into(),
        rows: heldout_rows,
    }];
    for (kind, name) in crate::corpus::CfKind::ALL.iter().zip(CF_SPLITS) {
        let rows: Vec<DatasetExample> = cf_test
            .iter()
            .filter(|e| e.split == *kind)
            .map(|e| cf_dataset_example(&vocab, e, marked))
            .collect::<Result<_, _>>()?;
        eval_sets.push(EvalSet {
            name: name.into(),
            rows,
        });
    }

    let mut sched = sched.clone();
    if sched.stop_splits.is_empty() {
        sched.stop_splits = vec!["inferred_heldout".into(), CF_WORST.into()];
    }
    train_loop(state, &vocab, graph, &sequences, &eval_sets, opt, &sched, out_dir)
}

/// Counterfactual finetuning from a pretrained checkpoint. Runs the full
/// budget by default (the split dynamics, not final train accuracy, are the
/// object of study); logs per-split accuracy, copy rate, and a frozen factual
/// probe measuring parametric-knowledge degradation.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    state: &mut ModelState,
    graph: &KnowledgeGraph,
    train: &[CounterfactualExample],
    test: &[CounterfactualExample],
    factual_probe: &[InferredFact],
    opt: &OptimSettings,
    sched: &TrainSchedule,
    out_dir: Option<&Path>,
) -> Result<Trajectory, TrainerError> {
    let vocab = Vocabulary::for_graph(graph);
    let train_rows: Vec<DatasetExample> = train
        .iter()
        .map(|e| cf_dataset_example(&vocab, e, false))
        .collect::<Result<_, _>>()?;
    let sequences: Vec<TokenSequence> = train_rows.iter().map(|e| e.sequence()).collect();

    let mut eval_sets = vec![EvalSet {
        name: "train".into(),
        rows: train_rows,
    }];
    for (kind, name) in crate::corpus::CfKind::ALL.iter().zip(CF_SPLITS) {
        let rows: Vec<DatasetExample> = test
            .iter()
            .filter(|e| e.split == *kind)
            .map(|e| cf_dataset_example(&vocab, e, false))
            .collect::<Result<_, _>>()?;
        eval_sets.push(EvalSet {
            name: name.into(),
            rows,
        });
    }
    if !factual_probe.is_empty() {
        let rows: Vec<DatasetExample> = factual_probe
            .iter()
            .map(|f| inferred_dataset_example(&vocab, f))
            .collect::<Result<_, _>>()?;
        eval_sets.push(EvalSet {
            name: "factual".into(),
            rows,
        });
    }

    train_loop(state, &vocab, graph, &sequences, &eval_sets, opt, sched, out_dir)
}

/// Factual chain-of-thought control task: same finetuning machinery on the
/// trace-serialized inferred facts; a prediction is correct only when every
/// supervised trace token matches.
#[allow(clippy::too_many_arguments)]
pub fn finetune_factual_cot(
    state: &mut ModelState,
    graph: &KnowledgeGraph,
    train: &[InferredFact],
    test: &[InferredFact],
    trace_with_relations: bool,
    opt: &OptimSettings,
    sched: &TrainSchedule,
    out_dir: Option<&Path>,
) -> Result<Trajectory, TrainerError> {
    let vocab = Vocabulary::for_graph(graph);
    let train_rows: Vec<DatasetExample> = train
        .iter()
        .map(|f| cot_dataset_example(&vocab, f, trace_with_relations))
        .collect::<Result<_, _>>()?;
    let test_rows: Vec<DatasetExample> = test
        .iter()
        .map(|f| cot_dataset_example(&vocab, f, trace_with_relations))
        .collect::<Result<_, _>>()?;
    let sequences: Vec<TokenSequence> = train_rows.iter().map(|e| e.sequence()).collect();

    let eval_sets = vec![
        EvalSet {
            name: "train".into(),
            rows: train_rows,
        },
        EvalSet {
            name: "cot".into(),
            rows: test_rows,
        },
    ];
    train_loop(state, &vocab, graph, &sequences, &eval_sets, opt, sched, out_dir)
}

/// Paths of the checkpoints a run directory holds, in step order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>, TrainerError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("ckpt-") && n.ends_with(".bin"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}
