//! Token-sequence serialization of facts and counterfactual queries, plus the
//! pretraining / finetuning dataset builders.
//!
//! The synthetic language assigns one token per entity, one per relation, and
//! four specials. Sequence layouts (answer always last, supervised positions
//! marked by the loss mask):
//!
//! - atomic fact       `[e_h, r, e_t]`
//! - inferred fact     `[e_h, r1, r2, e_t]`
//! - counterfactual    `[CFM?] [e_x, r~, e_y, SEP, e_h, r1, r2, gold]`
//! - factual CoT       `[e_h, r1, r2, TRC, e_b, e_t]` (bridge + tail supervised)

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{AtomicFact, Entity, InferredFact, KnowledgeGraph, Relation};

pub type TokenId = u32;

/// Retry budget when a sampled base fact admits no valid premise.
const PREMISE_RETRIES: usize = 64;
/// Retry budget on fresh base facts before giving up entirely.
const BASE_FACT_RETRIES: usize = 1024;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("token id {0} out of vocabulary (size {1})")]
    OutOfVocabulary(u32, u32),
    #[error("graph has no inferred facts to build on")]
    NoInferredFacts,
    #[error("sampling exhausted after {0} attempts building a {1} example")]
    SamplingExhausted(usize, &'static str),
    #[error("head fraction {0} outside (0, 1)")]
    InvalidHeadFraction(f64),
    #[error("fraction {0} leaves a degenerate train/heldout split")]
    DegenerateFraction(f64),
    #[error("cannot balance {requested} examples from {available} distinct candidates for split {split}")]
    InfeasibleBalance {
        requested: usize,
        available: usize,
        split: &'static str,
    },
    #[error("malformed dataset line {line}: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token-id assignments for a graph's synthetic language.
///
/// Entities occupy `[0, E)`, relations `[E, E+R)`, then SEP, TRC, CFM, PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    num_entities: u32,
    num_relations: u32,
}

impl Vocabulary {
    pub fn for_graph(graph: &KnowledgeGraph) -> Self {
        Self {
            num_entities: graph.num_entities(),
            num_relations: graph.num_relations(),
        }
    }

    pub fn new(num_entities: u32, num_relations: u32) -> Self {
        Self {
            num_entities,
            num_relations,
        }
    }

    pub fn num_entities(&self) -> u32 {
        self.num_entities
    }

    pub fn num_relations(&self) -> u32 {
        self.num_relations
    }

    pub fn size(&self) -> u32 {
        self.num_entities + self.num_relations + 4
    }

    pub fn entity(&self, e: Entity) -> Result<TokenId, CorpusError> {
        if e.0 >= self.num_entities {
            return Err(CorpusError::OutOfVocabulary(e.0, self.size()));
        }
        Ok(e.0)
    }

    pub fn relation(&self, r: Relation) -> Result<TokenId, CorpusError> {
        if r.0 >= self.num_relations {
            return Err(CorpusError::OutOfVocabulary(
                self.num_entities + r.0,
                self.size(),
            ));
        }
        Ok(self.num_entities + r.0)
    }

    /// Premise/query separator.
    pub fn sep(&self) -> TokenId {
        self.num_entities + self.num_relations
    }

    /// Trace marker for the factual chain-of-thought task.
    pub fn trc(&self) -> TokenId {
        self.num_entities + self.num_relations + 1
    }

    /// Counterfactual mark prepended in the marked-augmented regime.
    pub fn cfm(&self) -> TokenId {
        self.num_entities + self.num_relations + 2
    }

    pub fn pad(&self) -> TokenId {
        self.num_entities + self.num_relations + 3
    }

    /// Inverse mapping for entity tokens.
    pub fn token_as_entity(&self, t: TokenId) -> Option<Entity> {
        (t < self.num_entities).then_some(Entity(t))
    }

    /// Inverse mapping for relation tokens.
    pub fn token_as_relation(&self, t: TokenId) -> Option<Relation> {
        (t >= self.num_entities && t < self.num_entities + self.num_relations)
            .then(|| Relation(t - self.num_entities))
    }

    /// Manifest document listing every token-id assignment.
    pub fn manifest_json(&self) -> String {
        let manifest = serde_json::json!({
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
            "vocab_size": self.size(),
            "entity_tokens": { "start": 0, "end": self.num_entities },
            "relation_tokens": { "start": self.num_entities,
                                 "end": self.num_entities + self.num_relations },
            "special_tokens": {
                "SEP": self.sep(),
                "TRC": self.trc(),
                "CFM": self.cfm(),
                "PAD": self.pad(),
            },
        });
        serde_json::to_string_pretty(&manifest).expect("manifest serializes")
    }
}

/// A token sequence with per-position supervision flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prompt prefix: everything before the first supervised position.
    pub fn prompt(&self) -> &[TokenId] {
        let first = self
            .loss_mask
            .iter()
            .position(|&m| m)
            .unwrap_or(self.tokens.len());
        &self.tokens[..first]
    }

    /// Supervised (answer/trace) tokens in order.
    pub fn answer_tokens(&self) -> Vec<TokenId> {
        self.tokens
            .iter()
            .zip(&self.loss_mask)
            .filter_map(|(&t, &m)| m.then_some(t))
            .collect()
    }
}

/// Which counterfactual evaluation split an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfKind {
    #[serde(rename = "hop1")]
    Hop1Relevant,
    #[serde(rename = "hop2")]
    Hop2Relevant,
    Irrelevant,
}

impl CfKind {
    pub const ALL: [CfKind; 3] = [CfKind::Hop1Relevant, CfKind::Hop2Relevant, CfKind::Irrelevant];

    pub fn as_str(&self) -> &'static str {
        match self {
            CfKind::Hop1Relevant => "hop1",
            CfKind::Hop2Relevant => "hop2",
            CfKind::Irrelevant => "irrelevant",
        }
    }
}

/// A counterfactual query: premise triple, two-hop question, gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CounterfactualExample {
    pub premise: AtomicFact,
    pub head: Entity,
    pub rel1: Relation,
    pub rel2: Relation,
    pub gold: Entity,
    pub split: CfKind,
}

impl CounterfactualExample {
    /// Re-derive the split label from the premise/query structure alone.
    /// Consistency with the stored label is a dataset invariant.
    pub fn relabel(&self, graph: &KnowledgeGraph) -> Option<CfKind> {
        if self.premise.head == self.head && self.premise.relation == self.rel1 {
            return Some(CfKind::Hop1Relevant);
        }
        let bridge = graph.oracle_answer_first_hop(Some(&self.premise), self.head, self.rel1)?;
        if self.premise.head == bridge && self.premise.relation == self.rel2 {
            return Some(CfKind::Hop2Relevant);
        }
        Some(CfKind::Irrelevant)
    }
}

/// Label carried on every serialized dataset line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Hop1,
    Hop2,
    Irrelevant,
    Atomic,
    Inferred,
    Cot,
}

impl SplitLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitLabel::Hop1 => "hop1",
            SplitLabel::Hop2 => "hop2",
            SplitLabel::Irrelevant => "irrelevant",
            SplitLabel::Atomic => "atomic",
            SplitLabel::Inferred => "inferred",
            SplitLabel::Cot => "cot",
        }
    }
}

impl From<CfKind> for SplitLabel {
    fn from(k: CfKind) -> Self {
        match k {
            CfKind::Hop1Relevant => SplitLabel::Hop1,
            CfKind::Hop2Relevant => SplitLabel::Hop2,
            CfKind::Irrelevant => SplitLabel::Irrelevant,
        }
    }
}

/// Raw-id metadata describing where an example came from; enables replaying
/// gold answers through the oracle on any dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    /// `[head, relation, tail]` in raw id space, absent for plain facts.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub premise: Option<[u32; 3]>,
    /// `[head, rel1]` for atomic facts, `[head, rel1, rel2]` otherwise.
    pub query: Vec<u32>,
    /// Gold entity id(s): one for answer tasks, `[bridge, tail]` for CoT.
    pub gold: Vec<u32>,
}

/// One dataset line: tokens, supervision mask, split label, provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExample {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub split: SplitLabel,
    pub meta: ExampleMeta,
}

impl DatasetExample {
    pub fn sequence(&self) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens.clone(),
            loss_mask: self.loss_mask.clone(),
        }
    }
}

/// `[e_h, r, e_t]`, tail supervised.
pub fn serialize_atomic(vocab: &Vocabulary, fact: &AtomicFact) -> Result<TokenSequence, CorpusError> {
    Ok(TokenSequence {
        tokens: vec![
            vocab.entity(fact.head)?,
            vocab.relation(fact.relation)?,
            vocab.entity(fact.tail)?,
        ],
        loss_mask: vec![false, false, true],
    })
}

/// `[e_h, r1, r2, e_t]`, tail supervised. The bridge never appears.
pub fn serialize_inferred(
    vocab: &Vocabulary,
    fact: &InferredFact,
) -> Result<TokenSequence, CorpusError> {
    Ok(TokenSequence {
        tokens: vec![
            vocab.entity(fact.head)?,
            vocab.relation(fact.rel1)?,
            vocab.relation(fact.rel2)?,
            vocab.entity(fact.tail)?,
        ],
        loss_mask: vec![false, false, false, true],
    })
}

/// `[CFM?] [e_x, r~, e_y, SEP, e_h, r1, r2, gold]`, gold supervised.
pub fn serialize_cf(
    vocab: &Vocabulary,
    example: &CounterfactualExample,
    marked: bool,
) -> Result<TokenSequence, CorpusError> {
    let mut tokens = Vec::with_capacity(9);
    if marked {
        tokens.push(vocab.cfm());
    }
    tokens.extend([
        vocab.entity(example.premise.head)?,
        vocab.relation(example.premise.relation)?,
        vocab.entity(example.premise.tail)?,
        vocab.sep(),
        vocab.entity(example.head)?,
        vocab.relation(example.rel1)?,
        vocab.relation(example.rel2)?,
        vocab.entity(example.gold)?,
    ]);
    let mut loss_mask = vec![false; tokens.len()];
    *loss_mask.last_mut().unwrap() = true;
    Ok(TokenSequence { tokens, loss_mask })
}

/// `[e_h, r1, r2, TRC, e_b, e_t]`, bridge and tail supervised.
pub fn serialize_factual_cot(
    vocab: &Vocabulary,
    fact: &InferredFact,
) -> Result<TokenSequence, CorpusError> {
    serialize_factual_cot_opts(vocab, fact, false)
}

/// CoT layout with the trace optionally spelling out relations as well:
/// `[e_h, r1, r2, TRC, r1, e_b, r2, e_t]` (all post-TRC tokens supervised).
pub fn serialize_factual_cot_opts(
    vocab: &Vocabulary,
    fact: &InferredFact,
    trace_with_relations: bool,
) -> Result<TokenSequence, CorpusError> {
    let mut tokens = vec![
        vocab.entity(fact.head)?,
        vocab.relation(fact.rel1)?,
        vocab.relation(fact.rel2)?,
        vocab.trc(),
    ];
    let prefix = tokens.len();
    if trace_with_relations {
        tokens.extend([
            vocab.relation(fact.rel1)?,
            vocab.entity(fact.bridge)?,
            vocab.relation(fact.rel2)?,
            vocab.entity(fact.tail)?,
        ]);
    } else {
        tokens.extend([vocab.entity(fact.bridge)?, vocab.entity(fact.tail)?]);
    }
    let mut loss_mask = vec![false; tokens.len()];
    for m in loss_mask.iter_mut().skip(prefix) {
        *m = true;
    }
    Ok(TokenSequence { tokens, loss_mask })
}

fn meta_for_cf(example: &CounterfactualExample) -> ExampleMeta {
    ExampleMeta {
        premise: Some([
            example.premise.head.0,
            example.premise.relation.0,
            example.premise.tail.0,
        ]),
        query: vec![example.head.0, example.rel1.0, example.rel2.0],
        gold: vec![example.gold.0],
    }
}

/// Dataset line for a counterfactual example.
pub fn cf_dataset_example(
    vocab: &Vocabulary,
    example: &CounterfactualExample,
    marked: bool,
) -> Result<DatasetExample, CorpusError> {
    let seq = serialize_cf(vocab, example, marked)?;
    Ok(DatasetExample {
        tokens: seq.tokens,
        loss_mask: seq.loss_mask,
        split: example.split.into(),
        meta: meta_for_cf(example),
    })
}

pub fn atomic_dataset_example(
    vocab: &Vocabulary,
    fact: &AtomicFact,
) -> Result<DatasetExample, CorpusError> {
    let seq = serialize_atomic(vocab, fact)?;
    Ok(DatasetExample {
        tokens: seq.tokens,
        loss_mask: seq.loss_mask,
        split: SplitLabel::Atomic,
        meta: ExampleMeta {
            premise: None,
            query: vec![fact.head.0, fact.relation.0],
            gold: vec![fact.tail.0],
        },
    })
}

pub fn inferred_dataset_example(
    vocab: &Vocabulary,
    fact: &InferredFact,
) -> Result<DatasetExample, CorpusError> {
    let seq = serialize_inferred(vocab, fact)?;
    Ok(DatasetExample {
        tokens: seq.tokens,
        loss_mask: seq.loss_mask,
        split: SplitLabel::Inferred,
        meta: ExampleMeta {
            premise: None,
            query: vec![fact.head.0, fact.rel1.0, fact.rel2.0],
            gold: vec![fact.tail.0],
        },
    })
}

pub fn cot_dataset_example(
    vocab: &Vocabulary,
    fact: &InferredFact,
    trace_with_relations: bool,
) -> Result<DatasetExample, CorpusError> {
    let seq = serialize_factual_cot_opts(vocab, fact, trace_with_relations)?;
    let gold = if trace_with_relations {
        vec![fact.rel1.0, fact.bridge.0, fact.rel2.0, fact.tail.0]
    } else {
        vec![fact.bridge.0, fact.tail.0]
    };
    Ok(DatasetExample {
        tokens: seq.tokens,
        loss_mask: seq.loss_mask,
        split: SplitLabel::Cot,
        meta: ExampleMeta {
            premise: None,
            query: vec![fact.head.0, fact.rel1.0, fact.rel2.0],
            gold,
        },
    })
}

/// Build one counterfactual example of the requested kind on a base inferred
/// fact drawn from `pool`. Every constructed example is checked against the
/// walk oracle and the relabeling rule before it is returned.
pub fn build_cf_example(
    graph: &KnowledgeGraph,
    pool: &[InferredFact],
    kind: CfKind,
    rng: &mut ChaCha8Rng,
) -> Result<CounterfactualExample, CorpusError> {
    if pool.is_empty() {
        return Err(CorpusError::NoInferredFacts);
    }
    let entities = graph.num_entities();
    let relations = graph.num_relations();
    for _ in 0..BASE_FACT_RETRIES {
        let base = pool[rng.gen_range(0..pool.len())];
        let candidate = match kind {
            CfKind::Hop1Relevant => sample_hop1(graph, &base, entities, rng),
            CfKind::Hop2Relevant => sample_hop2(&base, entities, rng),
            CfKind::Irrelevant => sample_irrelevant(&base, entities, relations, rng),
        };
        if let Some(example) = candidate {
            let oracle = graph.oracle_answer(Some(&example.premise), example.head, example.rel1, example.rel2);
            if oracle != Some(example.gold) {
                continue;
            }
            if example.relabel(graph) != Some(kind) {
                continue;
            }
            return Ok(example);
        }
    }
    Err(CorpusError::SamplingExhausted(BASE_FACT_RETRIES, kind.as_str()))
}

/// Premise rewires the first hop onto a new bridge whose second hop exists.
fn sample_hop1(
    graph: &KnowledgeGraph,
    base: &InferredFact,
    entities: u32,
    rng: &mut ChaCha8Rng,
) -> Option<CounterfactualExample> {
    for _ in 0..PREMISE_RETRIES {
        let new_bridge = Entity(rng.gen_range(0..entities));
        if new_bridge == base.bridge {
            continue;
        }
        // Degenerate when the premise key also matches the second hop.
        if new_bridge == base.head && base.rel2 == base.rel1 {
            continue;
        }
        let Some(gold) = graph.lookup(new_bridge, base.rel2) else {
            continue;
        };
        return Some(CounterfactualExample {
            premise: AtomicFact {
                head: base.head,
                relation: base.rel1,
                tail: new_bridge,
            },
            head: base.head,
            rel1: base.rel1,
            rel2: base.rel2,
            gold,
            split: CfKind::Hop1Relevant,
        });
    }
    None
}

/// Premise rewires the bridge's second hop; the premise tail is the answer.
fn sample_hop2(
    base: &InferredFact,
    entities: u32,
    rng: &mut ChaCha8Rng,
) -> Option<CounterfactualExample> {
    // Degenerate when both hop keys coincide: the premise would override hop 1 too.
    if base.bridge == base.head && base.rel2 == base.rel1 {
        return None;
    }
    for _ in 0..PREMISE_RETRIES {
        let new_tail = Entity(rng.gen_range(0..entities));
        if new_tail == base.tail {
            continue;
        }
        return Some(CounterfactualExample {
            premise: AtomicFact {
                head: base.bridge,
                relation: base.rel2,
                tail: new_tail,
            },
            head: base.head,
            rel1: base.rel1,
            rel2: base.rel2,
            gold: new_tail,
            split: CfKind::Hop2Relevant,
        });
    }
    None
}

/// Premise source avoids the head and bridge; relation and target are free.
fn sample_irrelevant(
    base: &InferredFact,
    entities: u32,
    relations: u32,
    rng: &mut ChaCha8Rng,
) -> Option<CounterfactualExample> {
    for _ in 0..PREMISE_RETRIES {
        let source = Entity(rng.gen_range(0..entities));
        if source == base.head || source == base.bridge {
            continue;
        }
        let relation = Relation(rng.gen_range(0..relations));
        let target = Entity(rng.gen_range(0..entities));
        return Some(CounterfactualExample {
            premise: AtomicFact {
                head: source,
                relation,
                tail: target,
            },
            head: base.head,
            rel1: base.rel1,
            rel2: base.rel2,
            gold: base.tail,
            split: CfKind::Irrelevant,
        });
    }
    None
}

/// Split `total` into three per-kind counts differing by at most one,
/// with the remainder assigned in fixed split order.
fn balanced_thirds(total: usize) -> [usize; 3] {
    let base = total / 3;
    let rem = total % 3;
    [
        base + usize::from(rem > 0),
        base + usize::from(rem > 1),
        base,
    ]
}

/// Counterfactual finetuning sets: train heads restricted to a seeded
/// `head_fraction` subset of entities, test heads to its complement, each set
/// balanced in thirds across the three splits.
pub fn build_finetune_sets(
    graph: &KnowledgeGraph,
    num_train: usize,
    num_test: usize,
    head_fraction: f64,
    seed: u64,
) -> Result<(Vec<CounterfactualExample>, Vec<CounterfactualExample>), CorpusError> {
    if !(head_fraction > 0.0 && head_fraction < 1.0) {
        return Err(CorpusError::InvalidHeadFraction(head_fraction));
    }
    let inferred = graph.enumerate_inferred();
    if inferred.is_empty() {
        return Err(CorpusError::NoInferredFacts);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entities: Vec<u32> = (0..graph.num_entities()).collect();
    entities.shuffle(&mut rng);
    let cut = ((graph.num_entities() as f64 * head_fraction).round() as usize)
        .clamp(1, entities.len() - 1);
    let train_heads: HashSet<u32> = entities[..cut].iter().copied().collect();

    let train_pool: Vec<InferredFact> = inferred
        .iter()
        .copied()
        .filter(|f| train_heads.contains(&f.head.0))
        .collect();
    let test_pool: Vec<InferredFact> = inferred
        .iter()
        .copied()
        .filter(|f| !train_heads.contains(&f.head.0))
        .collect();

    let train = sample_balanced(graph, &train_pool, num_train, &mut rng)?;
    let test = sample_balanced(graph, &test_pool, num_test, &mut rng)?;
    Ok((train, test))
}

fn sample_balanced(
    graph: &KnowledgeGraph,
    pool: &[InferredFact],
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CounterfactualExample>, CorpusError> {
    let counts = balanced_thirds(total);
    let mut out = Vec::with_capacity(total);
    let mut seen = HashSet::new();
    for (kind, &count) in CfKind::ALL.iter().zip(&counts) {
        let mut produced = 0;
        let mut attempts = 0;
        while produced < count {
            attempts += 1;
            if attempts > BASE_FACT_RETRIES * count.max(1) {
                return Err(CorpusError::InfeasibleBalance {
                    requested: count,
                    available: pool.len(),
                    split: kind.as_str(),
                });
            }
            let example = build_cf_example(graph, pool, *kind, rng)?;
            if seen.insert(example) {
                out.push(example);
                produced += 1;
            }
        }
    }
    Ok(out)
}

/// Counterfactual mixing mode for augmented pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMode {
    None,
    Augmented,
    MarkedAugmented,
}

impl CfMode {
    pub fn marked(&self) -> bool {
        matches!(self, CfMode::MarkedAugmented)
    }
}

/// Pretraining corpus: all atomic facts, a fraction of inferred facts, and
/// (in the augmented regimes) counterfactual examples anchored on a fraction
/// of the graph's edges. Returns the corpus and the heldout inferred facts.
pub fn build_pretrain_corpus(
    graph: &KnowledgeGraph,
    inferred_train_fraction: f64,
    cf_mode: CfMode,
    cf_edge_fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetExample>, Vec<InferredFact>), CorpusError> {
    if !(inferred_train_fraction > 0.0 && inferred_train_fraction < 1.0) {
        return Err(CorpusError::DegenerateFraction(inferred_train_fraction));
    }
    let vocab = Vocabulary::for_graph(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut inferred = graph.enumerate_inferred();
    if inferred.is_empty() {
        return Err(CorpusError::NoInferredFacts);
    }
    inferred.shuffle(&mut rng);
    let heldout_count = ((1.0 - inferred_train_fraction) * inferred.len() as f64).round() as usize;
    if heldout_count == 0 || heldout_count == inferred.len() {
        return Err(CorpusError::DegenerateFraction(inferred_train_fraction));
    }
    let heldout: Vec<InferredFact> = inferred.split_off(inferred.len() - heldout_count);
    let train_inferred = inferred;

    let mut corpus = Vec::new();
    for fact in graph.edges() {
        corpus.push(atomic_dataset_example(&vocab, &fact)?);
    }
    for fact in &train_inferred {
        corpus.push(inferred_dataset_example(&vocab, fact)?);
    }

    if cf_mode != CfMode::None {
        let edges: Vec<AtomicFact> = graph.edges().collect();
        let num_cf = (cf_edge_fraction * edges.len() as f64).round() as usize;
        let mut picked = edges;
        picked.shuffle(&mut rng);
        picked.truncate(num_cf);
        let train_pool = &train_inferred;
        for (i, edge) in picked.iter().enumerate() {
            let kind = CfKind::ALL[i % 3];
            let example = build_cf_anchored(graph, train_pool, edge, kind, &mut rng)?;
            corpus.push(cf_dataset_example(&vocab, &example, cf_mode.marked())?);
        }
    }

    Ok((corpus, heldout))
}

/// Counterfactual example anchored on a specific edge: the edge is the one
/// overridden (hop-1/hop-2 kinds) or the premise source (irrelevant kind).
fn build_cf_anchored(
    graph: &KnowledgeGraph,
    pool: &[InferredFact],
    edge: &AtomicFact,
    kind: CfKind,
    rng: &mut ChaCha8Rng,
) -> Result<CounterfactualExample, CorpusError> {
    let anchored: Vec<InferredFact> = match kind {
        // The edge is the first hop of the queried composition.
        CfKind::Hop1Relevant => pool
            .iter()
            .copied()
            .filter(|f| f.head == edge.head && f.rel1 == edge.relation)
            .collect(),
        // The edge is the second hop.
        CfKind::Hop2Relevant => pool
            .iter()
            .copied()
            .filter(|f| f.bridge == edge.head && f.rel2 == edge.relation)
            .collect(),
        // The edge's head must be disjoint from the query's head and bridge.
        CfKind::Irrelevant => pool
            .iter()
            .copied()
            .filter(|f| f.head != edge.head && f.bridge != edge.head)
            .collect(),
    };
    let fallback;
    let effective: &[InferredFact] = if anchored.is_empty() {
        // No composition touches this edge in the requested role; fall back to
        // an un-anchored example of the same kind so balance is preserved.
        fallback = pool.to_vec();
        &fallback
    } else {
        &anchored
    };
    if kind == CfKind::Irrelevant && !anchored.is_empty() {
        // Keep the premise rooted at the anchor edge's head.
        for _ in 0..PREMISE_RETRIES {
            let base = anchored[rng.gen_range(0..anchored.len())];
            let target = Entity(rng.gen_range(0..graph.num_entities()));
            let example = CounterfactualExample {
                premise: AtomicFact {
                    head: edge.head,
                    relation: edge.relation,
                    tail: target,
                },
                head: base.head,
                rel1: base.rel1,
                rel2: base.rel2,
                gold: base.tail,
                split: CfKind::Irrelevant,
            };
            if graph.oracle_answer(Some(&example.premise), example.head, example.rel1, example.rel2)
                == Some(example.gold)
                && example.relabel(graph) == Some(CfKind::Irrelevant)
            {
                return Ok(example);
            }
        }
    }
    build_cf_example(graph, effective, kind, rng)
}

/// Write a dataset as JSONL, one example per line.
pub fn write_jsonl(path: &std::path::Path, examples: &[DatasetExample]) -> Result<(), CorpusError> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut file, ex).map_err(|e| CorpusError::MalformedLine {
            line: 0,
            source: e,
        })?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Read a JSONL dataset written by [`write_jsonl`].
pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<DatasetExample>, CorpusError> {
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: DatasetExample = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedLine { line: i + 1, source: e })?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(entities: u32, relations: u32, seed: u64) -> KnowledgeGraph {
        KnowledgeGraph::generate(entities, relations, 1.0, seed).unwrap()
    }

    #[test]
    fn vocab_ranges_are_disjoint_and_stable() {
        let v = Vocabulary::new(10, 3);
        assert_eq!(v.size(), 17);
        assert_eq!(v.entity(Entity(9)).unwrap(), 9);
        assert_eq!(v.relation(Relation(0)).unwrap(), 10);
        assert_eq!(v.sep(), 13);
        assert_eq!(v.trc(), 14);
        assert_eq!(v.cfm(), 15);
        assert_eq!(v.pad(), 16);
        assert!(v.entity(Entity(10)).is_err());
        assert!(v.relation(Relation(3)).is_err());
        assert_eq!(v.token_as_entity(9), Some(Entity(9)));
        assert_eq!(v.token_as_entity(10), None);
        assert_eq!(v.token_as_relation(12), Some(Relation(2)));
        assert_eq!(v.token_as_relation(13), None);
    }

    #[test]
    fn atomic_layout() {
        let v = Vocabulary::new(5, 2);
        let fact = AtomicFact {
            head: Entity(0),
            relation: Relation(1),
            tail: Entity(3),
        };
        let seq = serialize_atomic(&v, &fact).unwrap();
        assert_eq!(seq.tokens, vec![0, 6, 3]);
        assert_eq!(seq.loss_mask, vec![false, false, true]);
        assert_eq!(seq.prompt(), &[0, 6]);
        assert_eq!(seq.answer_tokens(), vec![3]);
    }

    #[test]
    fn atomic_sequences_distinct_exhaustively() {
        let g = graph(20, 3, 11);
        let v = Vocabulary::for_graph(&g);
        let mut seen = HashSet::new();
        for fact in g.edges() {
            let seq = serialize_atomic(&v, &fact).unwrap();
            assert!(seen.insert(seq.tokens.clone()), "duplicate sequence {:?}", seq.tokens);
        }
        assert_eq!(seen.len(), g.num_edges());
    }

    #[test]
    fn inferred_layout_and_no_duplicates() {
        let g = graph(50, 4, 3);
        let v = Vocabulary::for_graph(&g);
        let mut seen = HashSet::new();
        for fact in g.enumerate_inferred() {
            let seq = serialize_inferred(&v, &fact).unwrap();
            assert_eq!(seq.tokens.len(), 4);
            assert_eq!(seq.loss_mask, vec![false, false, false, true]);
            // Bridge entity never appears in the surface form.
            let bridge_tok = v.entity(fact.bridge).unwrap();
            if bridge_tok != seq.tokens[0] && bridge_tok != seq.tokens[3] {
                assert!(!seq.tokens.contains(&bridge_tok));
            }
            assert!(seen.insert(seq.tokens.clone()));
        }
    }

    #[test]
    fn cf_layout_marked_and_unmarked() {
        let g = graph(30, 3, 5);
        let v = Vocabulary::for_graph(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = g.enumerate_inferred();
        let ex = build_cf_example(&g, &pool, CfKind::Hop2Relevant, &mut rng).unwrap();

        let plain = serialize_cf(&v, &ex, false).unwrap();
        assert_eq!(plain.tokens.len(), 8);
        assert_eq!(plain.tokens[3], v.sep());
        assert_eq!(*plain.tokens.last().unwrap(), v.entity(ex.gold).unwrap());
        assert_eq!(plain.answer_tokens(), vec![v.entity(ex.gold).unwrap()]);
        // Hop-2 gold is the premise tail.
        assert_eq!(ex.gold, ex.premise.tail);

        let marked = serialize_cf(&v, &ex, true).unwrap();
        assert_eq!(marked.tokens.len(), 9);
        assert_eq!(marked.tokens[0], v.cfm());
        assert_eq!(&marked.tokens[1..], &plain.tokens[..]);
    }

    #[test]
    fn cot_layout_and_trace_matches_bridge() {
        let g = graph(25, 3, 9);
        let v = Vocabulary::for_graph(&g);
        for fact in g.enumerate_inferred() {
            let seq = serialize_factual_cot(&v, &fact).unwrap();
            assert_eq!(seq.tokens[3], v.trc());
            assert_eq!(seq.tokens[4], v.entity(fact.bridge).unwrap());
            assert_eq!(seq.tokens[5], v.entity(fact.tail).unwrap());
            assert_eq!(seq.loss_mask, vec![false, false, false, false, true, true]);
            // Dropping the trace yields the plain inferred prefix.
            let plain = serialize_inferred(&v, &fact).unwrap();
            assert_eq!(&seq.tokens[..3], &plain.tokens[..3]);
        }
    }

    #[test]
    fn cot_layout_with_relations() {
        let v = Vocabulary::new(6, 2);
        let fact = InferredFact {
            head: Entity(0),
            rel1: Relation(0),
            rel2: Relation(1),
            bridge: Entity(2),
            tail: Entity(4),
        };
        let seq = serialize_factual_cot_opts(&v, &fact, true).unwrap();
        assert_eq!(seq.tokens, vec![0, 6, 7, v.trc(), 6, 2, 7, 4]);
        assert_eq!(seq.answer_tokens(), vec![6, 2, 7, 4]);
    }

    #[test]
    fn build_cf_example_agrees_with_oracle_in_bulk() {
        let g = graph(40, 5, 21);
        let pool = g.enumerate_inferred();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for i in 0..3000 {
            let kind = CfKind::ALL[i % 3];
            let ex = build_cf_example(&g, &pool, kind, &mut rng).unwrap();
            assert_eq!(
                g.oracle_answer(Some(&ex.premise), ex.head, ex.rel1, ex.rel2),
                Some(ex.gold)
            );
            assert_eq!(ex.relabel(&g), Some(kind));
            assert_eq!(ex.split, kind);
            match kind {
                CfKind::Hop1Relevant => {
                    assert_eq!(ex.premise.head, ex.head);
                    assert_eq!(ex.premise.relation, ex.rel1);
                }
                CfKind::Hop2Relevant => assert_eq!(ex.gold, ex.premise.tail),
                CfKind::Irrelevant => {
                    assert_eq!(Some(ex.gold), g.oracle_answer(None, ex.head, ex.rel1, ex.rel2));
                }
            }
        }
    }

    #[test]
    fn finetune_sets_balanced_and_head_disjoint() {
        let g = graph(60, 4, 42);
        let (train, test) = build_finetune_sets(&g, 91, 30, 0.2, 7).unwrap();
        assert_eq!(train.len(), 91);
        assert_eq!(test.len(), 30);

        let count = |set: &[CounterfactualExample], k: CfKind| {
            set.iter().filter(|e| e.split == k).count()
        };
        // 91 = 31 + 30 + 30.
        assert_eq!(count(&train, CfKind::Hop1Relevant), 31);
        assert_eq!(count(&train, CfKind::Hop2Relevant), 30);
        assert_eq!(count(&train, CfKind::Irrelevant), 30);
        for k in CfKind::ALL {
            assert_eq!(count(&test, k), 10);
        }

        let train_heads: HashSet<Entity> = train.iter().map(|e| e.head).collect();
        let test_heads: HashSet<Entity> = test.iter().map(|e| e.head).collect();
        assert!(train_heads.is_disjoint(&test_heads));
        // 20% of 60 entities: train heads confined to a 12-entity subset.
        assert!(train_heads.len() <= 12);

        // Sequence-level disjointness via hashing.
        let v = Vocabulary::for_graph(&g);
        let train_seqs: HashSet<Vec<u32>> = train
            .iter()
            .map(|e| serialize_cf(&v, e, false).unwrap().tokens)
            .collect();
        let test_seqs: HashSet<Vec<u32>> = test
            .iter()
            .map(|e| serialize_cf(&v, e, false).unwrap().tokens)
            .collect();
        assert!(train_seqs.is_disjoint(&test_seqs));
    }

    #[test]
    fn finetune_tiny_counts() {
        let g = graph(30, 3, 1);
        let (train, test) = build_finetune_sets(&g, 3, 3, 0.3, 2).unwrap();
        for set in [&train, &test] {
            for k in CfKind::ALL {
                assert_eq!(set.iter().filter(|e| e.split == k).count(), 1);
            }
        }
    }

    #[test]
    fn finetune_rejects_bad_fraction() {
        let g = graph(20, 2, 1);
        assert!(matches!(
            build_finetune_sets(&g, 3, 3, 0.0, 0),
            Err(CorpusError::InvalidHeadFraction(_))
        ));
        assert!(matches!(
            build_finetune_sets(&g, 3, 3, 1.0, 0),
            Err(CorpusError::InvalidHeadFraction(_))
        ));
    }

    #[test]
    fn pretrain_corpus_counts_and_cf_modes() {
        let g = graph(24, 3, 13);
        let total_inferred = g.enumerate_inferred().len();

        let (plain, heldout) = build_pretrain_corpus(&g, 0.7, CfMode::None, 0.0, 5).unwrap();
        assert_eq!(heldout.len(), ((1.0 - 0.7) * total_inferred as f64).round() as usize);
        let v = Vocabulary::for_graph(&g);
        assert!(plain.iter().all(|e| !e.tokens.contains(&v.sep())));
        let atomics = plain.iter().filter(|e| e.split == SplitLabel::Atomic).count();
        assert_eq!(atomics, g.num_edges());
        let inferred_count = plain.iter().filter(|e| e.split == SplitLabel::Inferred).count();
        assert_eq!(inferred_count + heldout.len(), total_inferred);

        let (aug, _) = build_pretrain_corpus(&g, 0.7, CfMode::Augmented, 0.2, 5).unwrap();
        let cf_rows: Vec<_> = aug
            .iter()
            .filter(|e| matches!(e.split, SplitLabel::Hop1 | SplitLabel::Hop2 | SplitLabel::Irrelevant))
            .collect();
        assert_eq!(cf_rows.len(), (0.2 * g.num_edges() as f64).round() as usize);
        assert!(cf_rows.iter().all(|e| e.tokens[0] != v.cfm()));

        let (marked, _) = build_pretrain_corpus(&g, 0.7, CfMode::MarkedAugmented, 0.2, 5).unwrap();
        let marked_rows: Vec<_> = marked
            .iter()
            .filter(|e| matches!(e.split, SplitLabel::Hop1 | SplitLabel::Hop2 | SplitLabel::Irrelevant))
            .collect();
        assert!(marked_rows.iter().all(|e| e.tokens[0] == v.cfm()));
    }

    #[test]
    fn pretrain_corpus_rejects_degenerate_fractions() {
        let g = graph(20, 2, 3);
        assert!(build_pretrain_corpus(&g, 0.0, CfMode::None, 0.0, 1).is_err());
        assert!(build_pretrain_corpus(&g, 1.0, CfMode::None, 0.0, 1).is_err());
        // So close to 1 that the rounded heldout is empty.
        assert!(build_pretrain_corpus(&g, 0.9999, CfMode::None, 0.0, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let g = graph(20, 3, 8);
        let (corpus, _) = build_pretrain_corpus(&g, 0.6, CfMode::MarkedAugmented, 0.3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_jsonl(&path, &corpus).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn dataset_gold_replays_through_oracle() {
        // The replayable oracle property over a dataset file.
        let g = graph(30, 4, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cf.jsonl");
        let v = Vocabulary::for_graph(&g);
        let (train, _) = build_finetune_sets(&g, 120, 30, 0.25, 3).unwrap();
        let rows: Vec<DatasetExample> = train
            .iter()
            .map(|e| cf_dataset_example(&v, e, false).unwrap())
            .collect();
        write_jsonl(&path, &rows).unwrap();

        for row in read_jsonl(&path).unwrap() {
            let meta = &row.meta;
            let premise = meta.premise.map(|[h, r, t]| AtomicFact {
                head: Entity(h),
                relation: Relation(r),
                tail: Entity(t),
            });
            let gold = g
                .oracle_answer(
                    premise.as_ref(),
                    Entity(meta.query[0]),
                    Relation(meta.query[1]),
                    Relation(meta.query[2]),
                )
                .unwrap();
            assert_eq!(meta.gold, vec![gold.0]);
            assert_eq!(*row.tokens.last().unwrap(), v.entity(gold).unwrap());
        }
    }

    #[test]
    fn token_range_discipline() {
        // Entity positions hold entity tokens, relation positions relation tokens.
        let g = graph(25, 3, 31);
        let v = Vocabulary::for_graph(&g);
        let (corpus, _) = build_pretrain_corpus(&g, 0.5, CfMode::Augmented, 0.2, 9).unwrap();
        for ex in &corpus {
            match ex.split {
                SplitLabel::Atomic => {
                    assert!(v.token_as_entity(ex.tokens[0]).is_some());
                    assert!(v.token_as_relation(ex.tokens[1]).is_some());
                    assert!(v.token_as_entity(ex.tokens[2]).is_some());
                }
                SplitLabel::Inferred => {
                    assert!(v.token_as_entity(ex.tokens[0]).is_some());
                    assert!(v.token_as_relation(ex.tokens[1]).is_some());
                    assert!(v.token_as_relation(ex.tokens[2]).is_some());
                    assert!(v.token_as_entity(ex.tokens[3]).is_some());
                }
                _ => {
                    let body = &ex.tokens[..];
                    assert!(v.token_as_entity(body[0]).is_some());
                    assert!(v.token_as_relation(body[1]).is_some());
                    assert!(v.token_as_entity(body[2]).is_some());
                    assert_eq!(body[3], v.sep());
                    assert!(v.token_as_entity(body[4]).is_some());
                    assert!(v.token_as_relation(body[5]).is_some());
                    assert!(v.token_as_relation(body[6]).is_some());
                    assert!(v.token_as_entity(body[7]).is_some());
                }
            }
        }
    }
}
