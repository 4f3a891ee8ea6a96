//! Event-chain corpus and the reachability oracle that defines gold labels.
//!
//! A bundle is one linear causal chain plus two context-only branch points
//! rooted at one of its events: a "transition" branch (a strange but specific
//! effect with its own plausible continuation) and an "anticausal" branch
//! (an effect contradicting the stored continuation). Consecutive events
//! within every chain are stored edges; the branch bridges are not stored —
//! they only ever enter a query as in-context premises.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a chain was generated, mirroring the three expansion prompt styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainKind {
    Causal,
    Anticausal,
    IrrelevantTransition,
}

/// An ordered list of natural-language events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventChain {
    pub events: Vec<String>,
    pub kind: ChainKind,
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("chain must have at least 2 events, got {0}")]
    TooShort(usize),
    #[error("duplicate event within a chain: {0}")]
    DuplicateEvent(String),
    #[error("duplicate event across bundles: {0}")]
    CrossBundleDuplicate(String),
    #[error("branch from_index {0} out of range for main chain of length {1}")]
    BranchOutOfRange(usize, usize),
    #[error("corpus needs at least 2 bundles, got {0}")]
    TooFewBundles(usize),
    #[error("malformed corpus json: {0}")]
    Json(#[from] serde_json::Error),
}

impl EventChain {
    pub fn new(events: Vec<String>, kind: ChainKind) -> Result<Self, ChainError> {
        if events.len() < 2 {
            return Err(ChainError::TooShort(events.len()));
        }
        let mut seen = HashSet::new();
        for e in &events {
            if !seen.insert(e.as_str()) {
                return Err(ChainError::DuplicateEvent(e.clone()));
            }
        }
        Ok(Self { events, kind })
    }

    /// Consecutive `(cause, effect)` pairs.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.events.windows(2).map(|w| (w[0].as_str(), w[1].as_str()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BranchDoc {
    from_index: usize,
    events: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleDoc {
    name: String,
    main: Vec<String>,
    transition: BranchDoc,
    anticausal: BranchDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusDoc {
    bundles: Vec<BundleDoc>,
}

/// A main chain with its two context-only branches.
#[derive(Debug, Clone)]
pub struct ChainBundle {
    pub name: String,
    pub main: EventChain,
    /// Index into `main.events` where both branches attach.
    pub transition_from: usize,
    pub transition: EventChain,
    pub anticausal_from: usize,
    pub anticausal: EventChain,
}

impl ChainBundle {
    /// Bridge edge for the transition branch (context-only).
    pub fn transition_bridge(&self) -> (&str, &str) {
        (
            self.main.events[self.transition_from].as_str(),
            self.transition.events[0].as_str(),
        )
    }

    /// Bridge edge for the anticausal branch (context-only).
    pub fn anticausal_bridge(&self) -> (&str, &str) {
        (
            self.main.events[self.anticausal_from].as_str(),
            self.anticausal.events[0].as_str(),
        )
    }

    fn all_events(&self) -> impl Iterator<Item = &String> {
        self.main
            .events
            .iter()
            .chain(&self.transition.events)
            .chain(&self.anticausal.events)
    }
}

/// The full offline corpus with its merged stored-edge graph.
#[derive(Debug, Clone)]
pub struct ChainCorpus {
    pub bundles: Vec<ChainBundle>,
    /// Stored (parametric) edges: event -> direct effects.
    stored: HashMap<String, BTreeSet<String>>,
    /// Anticausal bridges: cause -> branch heads that replace its stored edge.
    anticausal_bridges: HashMap<String, BTreeSet<String>>,
}

/// Premise handling when computing gold labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PremiseEffect {
    /// Add the premise edge alongside stored edges (reinforce/add/irrelevant).
    Add,
    /// Replace the stored out-edges of the premise cause (contradict).
    Replace,
}

impl ChainCorpus {
    /// Corpus bundled with the crate.
    pub fn bundled() -> Self {
        Self::from_json(include_str!("../../data/chains.json"))
            .expect("bundled chain corpus is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, ChainError> {
        let doc: CorpusDoc = serde_json::from_str(json)?;
        if doc.bundles.len() < 2 {
            return Err(ChainError::TooFewBundles(doc.bundles.len()));
        }
        let mut bundles = Vec::with_capacity(doc.bundles.len());
        for b in doc.bundles {
            let main = EventChain::new(b.main, ChainKind::Causal)?;
            if b.transition.from_index >= main.events.len() {
                return Err(ChainError::BranchOutOfRange(
                    b.transition.from_index,
                    main.events.len(),
                ));
            }
            if b.anticausal.from_index >= main.events.len() {
                return Err(ChainError::BranchOutOfRange(
                    b.anticausal.from_index,
                    main.events.len(),
                ));
            }
            bundles.push(ChainBundle {
                name: b.name,
                transition_from: b.transition.from_index,
                transition: EventChain::new(b.transition.events, ChainKind::IrrelevantTransition)?,
                anticausal_from: b.anticausal.from_index,
                anticausal: EventChain::new(b.anticausal.events, ChainKind::Anticausal)?,
                main,
            });
        }

        let mut all = HashSet::new();
        for bundle in &bundles {
            for event in bundle.all_events() {
                if !all.insert(event.clone()) {
                    return Err(ChainError::CrossBundleDuplicate(event.clone()));
                }
            }
        }

        let mut stored: HashMap<String, BTreeSet<String>> = HashMap::new();
        let mut anticausal_bridges: HashMap<String, BTreeSet<String>> = HashMap::new();
        for bundle in &bundles {
            for chain in [&bundle.main, &bundle.transition, &bundle.anticausal] {
                for (cause, effect) in chain.edges() {
                    stored
                        .entry(cause.to_string())
                        .or_default()
                        .insert(effect.to_string());
                }
            }
            let (cause, effect) = bundle.anticausal_bridge();
            anticausal_bridges
                .entry(cause.to_string())
                .or_default()
                .insert(effect.to_string());
        }

        Ok(Self {
            bundles,
            stored,
            anticausal_bridges,
        })
    }

    pub fn has_event(&self, event: &str) -> bool {
        self.stored.contains_key(event)
            || self.stored.values().any(|effects| effects.contains(event))
    }

    pub fn is_stored_edge(&self, cause: &str, effect: &str) -> bool {
        self.stored
            .get(cause)
            .map(|e| e.contains(effect))
            .unwrap_or(false)
    }

    /// Whether a premise contradicts stored knowledge (anticausal bridge),
    /// which is what makes its effect *replace* rather than extend.
    pub fn premise_effect(&self, cause: &str, effect: &str) -> PremiseEffect {
        let contradicts = self
            .anticausal_bridges
            .get(cause)
            .map(|heads| heads.contains(effect))
            .unwrap_or(false);
        if contradicts {
            PremiseEffect::Replace
        } else {
            PremiseEffect::Add
        }
    }

    /// Gold label oracle: is `target` reachable from `query` along a path of
    /// length >= 1 in the premise-modified stored graph?
    pub fn reachable_with_premise(
        &self,
        premise: (&str, &str),
        effect: PremiseEffect,
        query: &str,
        target: &str,
    ) -> bool {
        let (p_cause, p_effect) = premise;
        let neighbors = |event: &str| -> Vec<String> {
            let mut out: Vec<String> = Vec::new();
            if event == p_cause {
                if effect == PremiseEffect::Add {
                    if let Some(stored) = self.stored.get(event) {
                        out.extend(stored.iter().cloned());
                    }
                }
                out.push(p_effect.to_string());
            } else if let Some(stored) = self.stored.get(event) {
                out.extend(stored.iter().cloned());
            }
            out
        };

        let mut visited = HashSet::new();
        let mut queue = VecDeque::new();
        for n in neighbors(query) {
            if n == target {
                return true;
            }
            if visited.insert(n.clone()) {
                queue.push_back(n);
            }
        }
        while let Some(event) = queue.pop_front() {
            for n in neighbors(&event) {
                if n == target {
                    return true;
                }
                if visited.insert(n.clone()) {
                    queue.push_back(n);
                }
            }
        }
        false
    }

    /// Shortest premise-modified path from `query` to `target`, inclusive of
    /// both endpoints; used to generate faithful reasoning traces.
    pub fn path_with_premise(
        &self,
        premise: (&str, &str),
        effect: PremiseEffect,
        query: &str,
        target: &str,
    ) -> Option<Vec<String>> {
        let (p_cause, p_effect) = premise;
        let neighbors = |event: &str| -> Vec<String> {
            let mut out: Vec<String> = Vec::new();
            if event == p_cause {
                if effect == PremiseEffect::Add {
                    if let Some(stored) = self.stored.get(event) {
                        out.extend(stored.iter().cloned());
                    }
                }
                out.push(p_effect.to_string());
            } else if let Some(stored) = self.stored.get(event) {
                out.extend(stored.iter().cloned());
            }
            out
        };
        let mut parents: BTreeMap<String, String> = BTreeMap::new();
        let mut queue = VecDeque::new();
        queue.push_back(query.to_string());
        let mut found = false;
        'search: while let Some(event) = queue.pop_front() {
            for n in neighbors(&event) {
                if !parents.contains_key(&n) && n != query {
                    parents.insert(n.clone(), event.clone());
                    if n == target {
                        found = true;
                        break 'search;
                    }
                    queue.push_back(n);
                }
            }
        }
        if !found {
            return None;
        }
        let mut path = vec![target.to_string()];
        while let Some(parent) = parents.get(path.last().unwrap()) {
            path.push(parent.clone());
            if parent == query {
                break;
            }
        }
        path.reverse();
        Some(path)
    }
}
