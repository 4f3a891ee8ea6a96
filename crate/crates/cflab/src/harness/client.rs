//! Chat clients: a provider-agnostic HTTP client for chat-completions style
//! endpoints plus deterministic offline clients used by tests and the
//! acceptance suite.
//!
//! Request shape (POST, JSON): `{"model": ..., "messages": [{"role": "user",
//! "content": ...}]}` with `Authorization: Bearer <key>`; the response must
//! carry `choices[0].message.content`. The API key is read from an
//! environment variable and never appears in logs, reports, or errors.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use super::chains::ChainCorpus;
use super::templates::{Strategy, COT, STANDARD};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("endpoint returned status {status} after {attempts} attempts")]
    BadStatus { status: u16, attempts: u32 },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("could not parse an event pair from response: {raw:?}")]
    UnparseableEventPair { raw: String },
    #[error("duplicate event {event:?} persisted after {attempts} attempts")]
    DuplicateEvent { event: String, attempts: u32 },
    #[error("scripted client ran out of responses")]
    ScriptExhausted,
}

/// Anything that can answer a single-turn prompt.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
    fn model_name(&self) -> &str;
}

/// Provider-agnostic chat-completions client.
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: String,
    timeout: Duration,
    max_retries: u32,
    agent: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl HttpChatClient {
    /// `api_key_env` names the environment variable holding the credential.
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key_env: &str,
        timeout: Duration,
        max_retries: u32,
    ) -> Result<Self, ClientError> {
        let api_key = std::env::var(api_key_env)
            .map_err(|_| ClientError::MissingApiKey(api_key_env.to_string()))?;
        let agent = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport {
                endpoint: String::new(),
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            timeout,
            max_retries,
            agent,
        })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last_status = 0u16;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 * (1 << attempt.min(6)) as u64));
            }
            let response = self
                .agent
                .post(&self.endpoint)
                .bearer_auth(&self.api_key)
                .timeout(self.timeout)
                .json(&body)
                .send();
            let response = match response {
                Ok(r) => r,
                Err(e) => {
                    if attempt == self.max_retries {
                        return Err(ClientError::Transport {
                            endpoint: self.endpoint.clone(),
                            // reqwest errors do not include the bearer token.
                            message: e.to_string(),
                        });
                    }
                    continue;
                }
            };
            let status = response.status();
            if status.is_success() {
                let parsed: ChatResponse = response
                    .json()
                    .map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
                return parsed
                    .choices
                    .first()
                    .map(|c| c.message.content.clone())
                    .ok_or_else(|| ClientError::MalformedResponse("no choices".into()));
            }
            last_status = status.as_u16();
            // Retry 429 and 5xx; anything else is final.
            if !(status.as_u16() == 429 || status.is_server_error()) {
                break;
            }
        }
        Err(ClientError::BadStatus {
            status: last_status,
            attempts: self.max_retries + 1,
        })
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

/// Deterministic oracle: parses the causal-query prompt, replays the corpus
/// reachability semantics, and answers with the gold label.
pub struct MockOracleClient {
    corpus: ChainCorpus,
}

impl MockOracleClient {
    pub fn new(corpus: ChainCorpus) -> Self {
        Self { corpus }
    }

    /// Extract `(cause, effect, query, target)` from a rendered Standard or
    /// CoT prompt by peeling the fixed template text around the placeholders.
    pub fn parse_prompt(prompt: &str) -> Option<(String, String, String, String)> {
        [STANDARD, COT]
            .iter()
            .find_map(|template| parse_against_template(template, prompt))
    }
}

/// Match a rendered prompt against a template whose placeholders appear in
/// the order Cause, Effect, Query, Target.
fn parse_against_template(template: &str, prompt: &str) -> Option<(String, String, String, String)> {
    let placeholders = ["<Cause>", "<Effect>", "<Query>", "<Target>"];
    // Split the template into the five literal segments around placeholders.
    let mut segments = Vec::with_capacity(5);
    let mut rest = template;
    for ph in placeholders {
        let idx = rest.find(ph)?;
        segments.push(&rest[..idx]);
        rest = &rest[idx + ph.len()..];
    }
    segments.push(rest);

    let mut values = Vec::with_capacity(4);
    let mut cursor = prompt;
    cursor = cursor.strip_prefix(segments[0])?;
    for segment in &segments[1..] {
        let idx = if segment.is_empty() {
            cursor.len()
        } else {
            cursor.find(segment)?
        };
        values.push(cursor[..idx].to_string());
        cursor = &cursor[idx + segment.len()..];
    }
    if !cursor.is_empty() {
        return None;
    }
    let mut it = values.into_iter();
    Some((it.next()?, it.next()?, it.next()?, it.next()?))
}

impl ChatClient for MockOracleClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let (cause, effect, query, target) = Self::parse_prompt(prompt)
            .ok_or_else(|| ClientError::MalformedResponse("unrecognized prompt shape".into()))?;
        let premise_effect = self.corpus.premise_effect(&cause, &effect);
        let yes = self
            .corpus
            .reachable_with_premise((&cause, &effect), premise_effect, &query, &target);
        Ok(format!(
            "<answer>{}</answer>",
            if yes { "Yes" } else { "No" }
        ))
    }

    fn model_name(&self) -> &str {
        "mock-oracle"
    }
}

/// Seeded fair-coin client for chance baselines.
pub struct CoinFlipClient {
    rng: Mutex<ChaCha8Rng>,
}

impl CoinFlipClient {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl ChatClient for CoinFlipClient {
    fn complete(&self, _prompt: &str) -> Result<String, ClientError> {
        let yes = self.rng.lock().unwrap().gen::<bool>();
        Ok(format!(
            "I will answer directly. <answer>{}</answer>",
            if yes { "Yes" } else { "No" }
        ))
    }

    fn model_name(&self) -> &str {
        "mock-coinflip"
    }
}

/// Replays a fixed transcript; used to exercise parsing and retry paths.
pub struct ScriptedClient {
    responses: Mutex<VecDeque<String>>,
    calls: Mutex<u64>,
}

impl ScriptedClient {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses: Mutex::new(responses.into()),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, _prompt: &str) -> Result<String, ClientError> {
        *self.calls.lock().unwrap() += 1;
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(ClientError::ScriptExhausted)
    }

    fn model_name(&self) -> &str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::templates::render_query;

    #[test]
    fn prompt_parsing_recovers_placeholders() {
        for strategy in [Strategy::Standard, Strategy::CoT] {
            let prompt = render_query(strategy, "Excessive Rain", "Desert Expansion", "Excessive Rain", "Flooding");
            let (c, e, q, t) = MockOracleClient::parse_prompt(&prompt).unwrap();
            assert_eq!(c, "Excessive Rain");
            assert_eq!(e, "Desert Expansion");
            assert_eq!(q, "Excessive Rain");
            assert_eq!(t, "Flooding");
        }
        assert!(MockOracleClient::parse_prompt("not a template").is_none());
    }

    #[test]
    fn oracle_answers_follow_reachability() {
        let oracle = MockOracleClient::new(ChainCorpus::bundled());
        let corpus = ChainCorpus::bundled();
        let bundle = &corpus.bundles[0];
        let cause = bundle.main.events[0].clone();
        let stored_next = bundle.main.events[1].clone();
        let two_down = bundle.main.events[2].clone();

        // Reinforcing premise: stored continuation intact.
        let prompt = render_query(Strategy::Standard, &cause, &stored_next, &cause, &two_down);
        assert_eq!(oracle.complete(&prompt).unwrap(), "<answer>Yes</answer>");

        // Contradicting premise severs the stored continuation.
        let (acause, a0) = bundle.anticausal_bridge();
        let prompt = render_query(Strategy::Standard, acause, a0, acause, &stored_next);
        assert_eq!(oracle.complete(&prompt).unwrap(), "<answer>No</answer>");
    }

    #[test]
    fn coinflip_is_seeded_and_roughly_fair() {
        let client = CoinFlipClient::new(9);
        let mut yes = 0;
        for _ in 0..1000 {
            if client.complete("x").unwrap().contains("Yes") {
                yes += 1;
            }
        }
        assert!((400..=600).contains(&yes), "yes count {yes}");
        // Same seed, same sequence.
        let a = CoinFlipClient::new(7);
        let b = CoinFlipClient::new(7);
        for _ in 0..20 {
            assert_eq!(a.complete("x").unwrap(), b.complete("x").unwrap());
        }
    }

    #[test]
    fn scripted_client_exhausts() {
        let client = ScriptedClient::new(vec!["one".into()]);
        assert_eq!(client.complete("p").unwrap(), "one");
        assert!(matches!(client.complete("p"), Err(ClientError::ScriptExhausted)));
        assert_eq!(client.calls(), 2);
    }
}
