//! Functional directed knowledge graphs over opaque entity/relation tokens.
//!
//! A graph maps `(entity, relation)` keys to exactly one target entity, so
//! every one-hop lookup and every two-hop composition has a unique answer.
//! The walk oracle in [`KnowledgeGraph::oracle_answer`] is the ground truth
//! for every dataset built on top of a graph, including counterfactual
//! queries where a context premise overrides one stored edge.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into the entity vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Entity(pub u32);

/// Index into the relation vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Relation(pub u32);

/// A single stored edge: `(head, relation) -> tail`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomicFact {
    pub head: Entity,
    pub relation: Relation,
    pub tail: Entity,
}

/// A two-hop composition `(head, rel1, rel2) -> tail` through `bridge`.
///
/// Both hops are stored edges of the graph the fact was enumerated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InferredFact {
    pub head: Entity,
    pub rel1: Relation,
    pub rel2: Relation,
    pub bridge: Entity,
    pub tail: Entity,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge density {0} outside [0, 1]")]
    InvalidDensity(f64),
    #[error("need at least 2 entities, got {0}")]
    TooFewEntities(u32),
    #[error("need at least 1 relation, got {0}")]
    NoRelations(u32),
    #[error("duplicate key (entity {0}, relation {1}) violates functionality")]
    NonFunctional(u32, u32),
    #[error("edge ({head}, {relation}, {tail}) out of range for {num_entities} entities / {num_relations} relations")]
    EdgeOutOfRange {
        head: u32,
        relation: u32,
        tail: u32,
        num_entities: u32,
        num_relations: u32,
    },
    #[error("malformed graph json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Functional directed multigraph: at most one target per `(entity, relation)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    num_entities: u32,
    num_relations: u32,
    seed: u64,
    edges: BTreeMap<(Entity, Relation), Entity>,
}

/// On-disk form: edges as sorted `[head, relation, tail]` triples.
#[derive(Serialize, Deserialize)]
struct GraphDoc {
    num_entities: u32,
    num_relations: u32,
    seed: u64,
    edges: Vec<[u32; 3]>,
}

impl KnowledgeGraph {
    /// Randomly generate a graph. Each `(entity, relation)` pair independently
    /// receives an edge with probability `edge_density`, whose target is drawn
    /// uniformly from all entities (self-loops permitted).
    ///
    /// The sampling procedure is part of the contract: a `ChaCha8Rng` seeded
    /// with `seed` is consumed in entity-major, relation-minor order, drawing
    /// first `f64` in `[0, 1)` for edge presence and then, when present, a
    /// uniform target via `gen_range(0..num_entities)`.
    pub fn generate(
        num_entities: u32,
        num_relations: u32,
        edge_density: f64,
        seed: u64,
    ) -> Result<Self, GraphError> {
        Self::generate_with_self_loops(num_entities, num_relations, edge_density, seed, true)
    }

    /// As [`KnowledgeGraph::generate`], with self-loops optionally resampled
    /// away (rejection on `target == head`, same generator stream).
    pub fn generate_with_self_loops(
        num_entities: u32,
        num_relations: u32,
        edge_density: f64,
        seed: u64,
        allow_self_loops: bool,
    ) -> Result<Self, GraphError> {
        if !(0.0..=1.0).contains(&edge_density) || edge_density.is_nan() {
            return Err(GraphError::InvalidDensity(edge_density));
        }
        if num_entities < 2 {
            return Err(GraphError::TooFewEntities(num_entities));
        }
        if num_relations < 1 {
            return Err(GraphError::NoRelations(num_relations));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = BTreeMap::new();
        for head in 0..num_entities {
            for relation in 0..num_relations {
                if rng.gen::<f64>() < edge_density {
                    let mut tail = rng.gen_range(0..num_entities);
                    while !allow_self_loops && tail == head {
                        tail = rng.gen_range(0..num_entities);
                    }
                    edges.insert((Entity(head), Relation(relation)), Entity(tail));
                }
            }
        }
        Ok(Self {
            num_entities,
            num_relations,
            seed,
            edges,
        })
    }

    pub fn num_entities(&self) -> u32 {
        self.num_entities
    }

    pub fn num_relations(&self) -> u32 {
        self.num_relations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Stored target for `(head, relation)`, if any.
    pub fn lookup(&self, head: Entity, relation: Relation) -> Option<Entity> {
        self.edges.get(&(head, relation)).copied()
    }

    /// All stored edges in sorted key order.
    pub fn edges(&self) -> impl Iterator<Item = AtomicFact> + '_ {
        self.edges.iter().map(|(&(head, relation), &tail)| AtomicFact {
            head,
            relation,
            tail,
        })
    }

    /// Every two-hop composition present in the graph, in sorted
    /// (head, rel1, rel2) order. Functionality guarantees there are no
    /// duplicate (head, rel1, rel2) keys.
    pub fn enumerate_inferred(&self) -> Vec<InferredFact> {
        let mut out = Vec::new();
        for (&(head, rel1), &bridge) in &self.edges {
            for rel2 in 0..self.num_relations {
                let rel2 = Relation(rel2);
                if let Some(tail) = self.lookup(bridge, rel2) {
                    out.push(InferredFact {
                        head,
                        rel1,
                        rel2,
                        bridge,
                        tail,
                    });
                }
            }
        }
        out
    }

    /// First hop of the premise-modified walk; used for split relabeling.
    pub fn oracle_answer_first_hop(
        &self,
        premise: Option<&AtomicFact>,
        head: Entity,
        rel1: Relation,
    ) -> Option<Entity> {
        if let Some(p) = premise {
            if p.head == head && p.relation == rel1 {
                return Some(p.tail);
            }
        }
        self.lookup(head, rel1)
    }

    /// Evaluate the two-hop walk `head -rel1-> ? -rel2-> ?` with the premise's
    /// `(head, relation)` mapping, when given, replacing the stored mapping
    /// for that key. Returns `None` if either hop is undefined.
    pub fn oracle_answer(
        &self,
        premise: Option<&AtomicFact>,
        head: Entity,
        rel1: Relation,
        rel2: Relation,
    ) -> Option<Entity> {
        let hop = |e: Entity, r: Relation| -> Option<Entity> {
            if let Some(p) = premise {
                if p.head == e && p.relation == r {
                    return Some(p.tail);
                }
            }
            self.lookup(e, r)
        };
        let bridge = hop(head, rel1)?;
        hop(bridge, rel2)
    }

    /// Canonical JSON document; byte-stable for a given graph (edges sorted
    /// lexicographically by `[head, relation, tail]`).
    pub fn to_canonical_json(&self) -> String {
        let doc = GraphDoc {
            num_entities: self.num_entities,
            num_relations: self.num_relations,
            seed: self.seed,
            edges: self
                .edges
                .iter()
                .map(|(&(h, r), &t)| [h.0, r.0, t.0])
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph doc serializes")
    }

    /// Parse and validate a graph document. Rejects out-of-range ids and
    /// duplicate `(entity, relation)` keys.
    pub fn from_json(json: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(json)?;
        if doc.num_entities < 2 {
            return Err(GraphError::TooFewEntities(doc.num_entities));
        }
        if doc.num_relations < 1 {
            return Err(GraphError::NoRelations(doc.num_relations));
        }
        let mut edges = BTreeMap::new();
        for &[h, r, t] in &doc.edges {
            if h >= doc.num_entities || t >= doc.num_entities || r >= doc.num_relations {
                return Err(GraphError::EdgeOutOfRange {
                    head: h,
                    relation: r,
                    tail: t,
                    num_entities: doc.num_entities,
                    num_relations: doc.num_relations,
                });
            }
            if edges.insert((Entity(h), Relation(r)), Entity(t)).is_some() {
                return Err(GraphError::NonFunctional(h, r));
            }
        }
        Ok(Self {
            num_entities: doc.num_entities,
            num_relations: doc.num_relations,
            seed: doc.seed,
            edges,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    #[test]
    fn density_one_fills_every_pair() {
        let g = KnowledgeGraph::generate(2, 1, 1.0, 7).unwrap();
        assert_eq!(g.num_edges(), 2);
        for e in 0..2 {
            assert!(g.lookup(Entity(e), Relation(0)).is_some());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = KnowledgeGraph::generate(40, 5, 0.7, 123).unwrap();
        let b = KnowledgeGraph::generate(40, 5, 0.7, 123).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_canonical_json(), b.to_canonical_json());
    }

    #[test]
    fn generation_matches_documented_sampling_procedure() {
        // Independent re-derivation of the documented generator sequence.
        let (entities, relations, density, seed) = (100u32, 10u32, 0.5f64, 99u64);
        let g = KnowledgeGraph::generate(entities, relations, density, seed).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut expected = BTreeMap::new();
        for head in 0..entities {
            for relation in 0..relations {
                if rng.gen::<f64>() < density {
                    let tail = rng.gen_range(0..entities);
                    expected.insert((head, relation), tail);
                }
            }
        }
        assert_eq!(g.num_edges(), expected.len());
        for (&(h, r), &t) in &expected {
            assert_eq!(g.lookup(Entity(h), Relation(r)), Some(Entity(t)));
        }
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(matches!(
            KnowledgeGraph::generate(10, 2, 1.5, 0),
            Err(GraphError::InvalidDensity(_))
        ));
        assert!(matches!(
            KnowledgeGraph::generate(10, 2, -0.1, 0),
            Err(GraphError::InvalidDensity(_))
        ));
        assert!(matches!(
            KnowledgeGraph::generate(1, 2, 0.5, 0),
            Err(GraphError::TooFewEntities(1))
        ));
        assert!(matches!(
            KnowledgeGraph::generate(10, 0, 0.5, 0),
            Err(GraphError::NoRelations(0))
        ));
    }

    #[test]
    fn self_loop_flag_respected() {
        let g = KnowledgeGraph::generate_with_self_loops(20, 4, 1.0, 5, false).unwrap();
        for fact in g.edges() {
            assert_ne!(fact.head, fact.tail);
        }
    }

    /// Hand-built two-edge graph for the walk oracle.
    fn chain_graph() -> KnowledgeGraph {
        // a=0, b=1, c=2, d=3, b'=4; r1=0, r2=1
        let json = r#"{
            "num_entities": 5, "num_relations": 3, "seed": 0,
            "edges": [[0,0,1],[1,1,2],[4,1,3]]
        }"#;
        KnowledgeGraph::from_json(json).unwrap()
    }

    #[test]
    fn enumerate_inferred_tiny_cases() {
        let g = chain_graph();
        let inferred = g.enumerate_inferred();
        assert_eq!(
            inferred,
            vec![InferredFact {
                head: Entity(0),
                rel1: Relation(0),
                rel2: Relation(1),
                bridge: Entity(1),
                tail: Entity(2),
            }]
        );

        let only_one_edge =
            KnowledgeGraph::from_json(r#"{"num_entities":2,"num_relations":1,"seed":0,"edges":[[0,0,1]]}"#)
                .unwrap();
        // (0,0)->1 then (1,0) undefined: no composition.
        assert!(only_one_edge.enumerate_inferred().is_empty());
    }

    #[test]
    fn enumerate_inferred_matches_brute_force_join() {
        let g = KnowledgeGraph::generate(50, 6, 0.4, 2024).unwrap();
        let fast: BTreeSet<_> = g
            .enumerate_inferred()
            .into_iter()
            .map(|f| (f.head, f.rel1, f.rel2, f.bridge, f.tail))
            .collect();

        // Brute force double loop over all edge pairs.
        let edges: Vec<AtomicFact> = g.edges().collect();
        let mut slow = BTreeSet::new();
        for first in &edges {
            for second in &edges {
                if first.tail == second.head {
                    slow.insert((
                        first.head,
                        first.relation,
                        second.relation,
                        second.head,
                        second.tail,
                    ));
                }
            }
        }
        assert_eq!(fast, slow);
        assert_eq!(fast.len(), g.enumerate_inferred().len(), "no duplicates");
    }

    #[test]
    fn oracle_factual_and_override() {
        let g = chain_graph();
        let (a, r1, r2) = (Entity(0), Relation(0), Relation(1));
        // No premise: a -r1-> b -r2-> c.
        assert_eq!(g.oracle_answer(None, a, r1, r2), Some(Entity(2)));
        // Premise (a, r1, b') reroutes the first hop onto b' -r2-> d.
        let premise = AtomicFact {
            head: a,
            relation: r1,
            tail: Entity(4),
        };
        assert_eq!(g.oracle_answer(Some(&premise), a, r1, r2), Some(Entity(3)));
        // Premise not touching either hop key leaves the walk unchanged.
        let irrelevant = AtomicFact {
            head: Entity(3),
            relation: Relation(2),
            tail: Entity(4),
        };
        assert_eq!(g.oracle_answer(Some(&irrelevant), a, r1, r2), Some(Entity(2)));
        // Undefined walks come back as None.
        assert_eq!(g.oracle_answer(None, a, r2, r1), None);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = KnowledgeGraph::generate(30, 4, 0.6, 77).unwrap();
        let json = g.to_canonical_json();
        let back = KnowledgeGraph::from_json(&json).unwrap();
        assert_eq!(g, back);
        assert_eq!(json, back.to_canonical_json());

        let dup = r#"{"num_entities":3,"num_relations":1,"seed":0,"edges":[[0,0,1],[0,0,2]]}"#;
        assert!(matches!(
            KnowledgeGraph::from_json(dup),
            Err(GraphError::NonFunctional(0, 0))
        ));
        let oob = r#"{"num_entities":3,"num_relations":1,"seed":0,"edges":[[0,0,3]]}"#;
        assert!(matches!(
            KnowledgeGraph::from_json(oob),
            Err(GraphError::EdgeOutOfRange { .. })
        ));
    }

    proptest! {
        /// A premise whose key differs from both hop keys never changes the walk.
        #[test]
        fn oracle_override_locality(
            seed in 0u64..500,
            head in 0u32..30,
            r1 in 0u32..4,
            r2 in 0u32..4,
            p_head in 0u32..30,
            p_rel in 0u32..4,
            p_tail in 0u32..30,
        ) {
            let g = KnowledgeGraph::generate(30, 4, 0.8, seed).unwrap();
            let (head, r1, r2) = (Entity(head), Relation(r1), Relation(r2));
            let premise = AtomicFact {
                head: Entity(p_head),
                relation: Relation(p_rel),
                tail: Entity(p_tail),
            };
            let factual_bridge = g.lookup(head, r1);
            let touches_hop1 = premise.head == head && premise.relation == r1;
            let touches_hop2 = factual_bridge
                .map(|b| premise.head == b && premise.relation == r2)
                .unwrap_or(false);
            prop_assume!(!touches_hop1 && !touches_hop2);
            prop_assert_eq!(
                g.oracle_answer(Some(&premise), head, r1, r2),
                g.oracle_answer(None, head, r1, r2)
            );
        }

        /// Generated graphs respect functionality and id ranges by construction;
        /// serialization is canonical.
        #[test]
        fn generated_graphs_are_well_formed(seed in 0u64..200, density in 0.0f64..=1.0) {
            let g = KnowledgeGraph::generate(25, 3, density, seed).unwrap();
            let mut keys = BTreeSet::new();
            for f in g.edges() {
                prop_assert!(f.head.0 < 25 && f.tail.0 < 25 && f.relation.0 < 3);
                prop_assert!(keys.insert((f.head, f.relation)));
            }
            let round = KnowledgeGraph::from_json(&g.to_canonical_json()).unwrap();
            prop_assert_eq!(g, round);
        }
    }
}
