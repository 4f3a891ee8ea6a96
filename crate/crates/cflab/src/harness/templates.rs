//! Prompt templates, shipped as data files under `templates/` and embedded
//! verbatim. Rendering only substitutes the `<...>` placeholders; everything
//! else is byte-identical to the shipped files.

pub const STANDARD: &str = include_str!("../../templates/standard.txt");
pub const COT: &str = include_str!("../../templates/cot.txt");
pub const CHAIN_CAUSAL: &str = include_str!("../../templates/chain_causal.txt");
pub const CHAIN_ANTICAUSAL: &str = include_str!("../../templates/chain_anticausal.txt");
pub const CHAIN_TRANSITION: &str = include_str!("../../templates/chain_transition.txt");
pub const CHAIN_POST_TRANSITION: &str = include_str!("../../templates/chain_post_transition.txt");

/// Prompting strategy for causal queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Standard,
    CoT,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::CoT => "cot",
        }
    }
}

/// Which chain-expansion prompt to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionKind {
    Causal,
    Anticausal,
    Transition,
    PostTransition,
}

/// Causal-query prompt with all four placeholders bound.
pub fn render_query(strategy: Strategy, cause: &str, effect: &str, query: &str, target: &str) -> String {
    let template = match strategy {
        Strategy::Standard => STANDARD,
        Strategy::CoT => COT,
    };
    template
        .replace("<Cause>", cause)
        .replace("<Effect>", effect)
        .replace("<Query>", query)
        .replace("<Target>", target)
}

/// Chain-expansion prompt. `existing` is serialized the way the original
/// tooling did: as a Python-style list string.
pub fn render_expansion(kind: ExpansionKind, prev_event: &str, existing: &[String]) -> String {
    let template = match kind {
        ExpansionKind::Causal => CHAIN_CAUSAL,
        ExpansionKind::Anticausal => CHAIN_ANTICAUSAL,
        ExpansionKind::Transition => CHAIN_TRANSITION,
        ExpansionKind::PostTransition => CHAIN_POST_TRANSITION,
    };
    let list = format!(
        "[{}]",
        existing
            .iter()
            .map(|e| format!("'{e}'"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    template
        .replace("<PrevEvent>", prev_event)
        .replace("<ExistingList>", &list)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rendering with placeholder-shaped values must reproduce the shipped
    /// template files byte for byte.
    #[test]
    fn rendering_is_identity_on_placeholders() {
        let rendered = render_query(Strategy::Standard, "<Cause>", "<Effect>", "<Query>", "<Target>");
        assert_eq!(rendered, STANDARD);
        let rendered = render_query(Strategy::CoT, "<Cause>", "<Effect>", "<Query>", "<Target>");
        assert_eq!(rendered, COT);
    }

    #[test]
    fn rendered_prompt_differs_only_at_placeholders() {
        let rendered = render_query(Strategy::Standard, "Rain", "Floods", "Rain", "Damage");
        let expected = STANDARD
            .replace("<Cause>", "Rain")
            .replace("<Effect>", "Floods")
            .replace("<Query>", "Rain")
            .replace("<Target>", "Damage");
        assert_eq!(rendered, expected);
        assert!(rendered.contains("Assume that Rain causes Floods."));
        assert!(rendered.contains("does Rain logically cause Damage?"));
    }

    #[test]
    fn expansion_list_uses_python_list_shape() {
        let existing = vec!["Cancer".to_string(), "Death".to_string()];
        let rendered = render_expansion(ExpansionKind::Causal, "Death", &existing);
        assert!(rendered.contains("is not already in the list: ['Cancer', 'Death']."));
        assert!(rendered.starts_with("generate an event that is caused by the event: Death\n"));
    }
}
