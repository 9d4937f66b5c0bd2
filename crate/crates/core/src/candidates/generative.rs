//! Few-shot generative entity retrieval against a chat-completion endpoint.

use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::CandidateSet;
use crate::kb::KnowledgeBase;

pub const QUERY_PLACEHOLDER: &str = "{query}";

pub const DEFAULT_PROMPT_TEMPLATE: &str = r#"Identify Wikipedia entities that are helpful to retrieve documents relevant to a web search query. Please return a list of entity names only:
Example 1:
Query: How is the push towards electric cars impacting the demand for raw materials?
Entities: ["Cobalt", "Automotive battery", "China", "Electric car", "Electric battery", "Gigafactory 1", "Demand", "Fossil fuel", "Electric vehicle industry in China", "Electric vehicle battery", "Electric vehicle conversion", "Electric vehicle", "Supply and demand", "Mining industry of the Democratic Republic of the Congo", "Raw material", "Lithium iron phosphate", "Lithium-ion battery", "Mining", "Lithium", "Petroleum"]
Example 2:
Query: Why do many economists argue against fixed exchange rates?
Entities: ["Argentine peso", "Currency crisis", "Inflation", "Hong Kong dollar", "Exchange rate", "Gold standard", "European Exchange Rate Mechanism", "1998 Russian financial crisis", "Black Saturday (1983)", "Black Wednesday", "Optimum currency area", "Mexican peso crisis", "Milton Friedman", "Euro", "Recession", "Currency intervention", "1997 Asian financial crisis", "Devaluation", "Original sin (economics)", "Exchange-rate regime"]
Please find relevant entities for this new example:
Query: {query}
Entities:"#;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeClientConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env_var: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on every further attempt.
    pub backoff: Duration,
    pub prompt_template: String,
}

impl GenerativeClientConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::InvalidArgument("timeout must be positive".into()));
        }
        if !self.prompt_template.contains(QUERY_PLACEHOLDER) {
            return Err(Error::InvalidArgument(format!(
                "prompt template lacks the {QUERY_PLACEHOLDER} placeholder"
            )));
        }
        Ok(())
    }
}

pub fn render_prompt(template: &str, query_text: &str) -> String {
    template.replace(QUERY_PLACEHOLDER, query_text)
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Blocking chat-completion client with exponential-backoff retries on
/// transport failures, 429 and 5xx responses.
pub struct ChatClient {
    cfg: GenerativeClientConfig,
    agent: ureq::Agent,
}

impl ChatClient {
    pub fn new(cfg: GenerativeClientConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    pub fn config(&self) -> &GenerativeClientConfig {
        &self.cfg
    }

    /// Sends one user message and returns the first choice's content.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::to_string(&ChatRequest {
            model: &self.cfg.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
        })?;
        let token = std::env::var(&self.cfg.api_key_env_var).ok();
        if token.is_none() {
            debug!(
                "{} is unset; sending request without authorization",
                self.cfg.api_key_env_var
            );
        }

        let attempts = self.cfg.max_retries + 1;
        let mut delay = self.cfg.backoff;
        let mut last_failure = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(delay);
                delay *= 2;
            }
            let mut req = self
                .agent
                .post(&self.cfg.endpoint_url)
                .header("Content-Type", "application/json");
            if let Some(t) = &token {
                req = req.header("Authorization", format!("Bearer {t}"));
            }
            let mut resp = match req.send(body.as_str()) {
                Ok(r) => r,
                Err(e) => {
                    warn!(
                        "attempt {attempt}/{attempts} to {} failed: {e}",
                        self.cfg.endpoint_url
                    );
                    last_failure = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last_failure = e.to_string();
                    continue;
                }
            };
            if status == 429 || status >= 500 {
                warn!("attempt {attempt}/{attempts}: HTTP {status}");
                last_failure = format!("HTTP {status}: {text}");
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(Error::HttpStatus {
                    status,
                    url: self.cfg.endpoint_url.clone(),
                    body: text,
                });
            }
            let parsed: ChatResponse =
                serde_json::from_str(&text).map_err(|e| Error::Completion {
                    reason: format!("response is not a chat completion: {e}"),
                    raw: text.clone(),
                })?;
            return parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| Error::Completion {
                    reason: "response has no message content".into(),
                    raw: text,
                });
        }
        Err(Error::Transport {
            attempts,
            message: last_failure,
        })
    }
}

/// Accepts a JSON array of strings or a bracketed list of single- or
/// double-quoted names. Anything else is an error carrying the raw text.
pub fn parse_completion(raw: &str) -> Result<Vec<String>> {
    let text = raw.trim();
    if let Ok(names) = serde_json::from_str::<Vec<String>>(text) {
        return Ok(names);
    }
    parse_quoted_list(text).map_err(|reason| Error::Completion {
        reason,
        raw: raw.to_string(),
    })
}

fn parse_quoted_list(text: &str) -> std::result::Result<Vec<String>, String> {
    let inner = text
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or("expected a bracketed list")?;
    let mut names = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.next_if(|c| c.is_whitespace()).is_some() {}
        let Some(quote) = chars.next() else {
            break;
        };
        if quote != '"' && quote != '\'' {
            return Err(format!("expected a quoted name, found {quote:?}"));
        }
        let mut name = String::new();
        loop {
            match chars.next() {
                None => return Err("unterminated quoted name".into()),
                Some('\\') => match chars.next() {
                    Some(c) => name.push(c),
                    None => return Err("dangling escape".into()),
                },
                Some(c) if c == quote => break,
                Some(c) => name.push(c),
            }
        }
        names.push(name);
        while chars.next_if(|c| c.is_whitespace()).is_some() {}
        match chars.next() {
            None => break,
            Some(',') => {}
            Some(c) => return Err(format!("expected ',' between names, found {c:?}")),
        }
    }
    Ok(names)
}

/// Resolves names through the title index, dropping unknown ones and
/// keeping the first occurrence of each entity.
pub fn resolve_names(kb: &KnowledgeBase, names: &[String]) -> (CandidateSet, usize) {
    let mut dropped = 0;
    let ids: Vec<_> = names
        .iter()
        .filter_map(|n| {
            let id = kb.resolve(n);
            if id.is_none() {
                dropped += 1;
            }
            id
        })
        .collect();
    (CandidateSet::dedup_from(ids), dropped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeOutcome {
    pub candidates: CandidateSet,
    /// Generated names without a knowledge-base entry.
    pub dropped: usize,
    pub names: Vec<String>,
}

pub fn generative_retrieve(
    client: &ChatClient,
    query_text: &str,
    kb: &KnowledgeBase,
) -> Result<GenerativeOutcome> {
    let prompt = render_prompt(&client.config().prompt_template, query_text);
    let completion = client.complete(&prompt)?;
    let names = parse_completion(&completion)?;
    let (candidates, dropped) = resolve_names(kb, &names);
    Ok(GenerativeOutcome {
        candidates,
        dropped,
        names,
    })
}
