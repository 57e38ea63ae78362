//! Prompt templates, a completion-service client and response parsers.

mod client;
mod parse;
mod prompt;

use thiserror::Error;

pub use client::{
    ApiStyle, CACHE_ENV, ClientConfig, CompletionRequest, CompletionResponse, HttpReply, HttpTransport, LlmClient,
    RequestKey, ResponseCache, Transport,
};
pub use parse::{ParsedList, parse_cc_list, parse_visibility};
pub use prompt::{PromptKind, PromptTemplate, render};

use crate::filters::{OracleError, Source, VisibilityOracle};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("no completion endpoint configured")]
    NoEndpoint,
    #[error("request to {endpoint} failed after {attempts} attempts: {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("completion service returned {status}: {body}")]
    Service { status: u16, body: String },
    #[error("cannot decode completion response: {0}")]
    Decode(String),
    #[error("unparseable answer: {0:?}")]
    Unparseable(String),
    #[error("response cache")]
    Cache(#[source] std::io::Error),
}

impl LlmError {
    /// True for failures of the remote service rather than of the caller.
    pub fn is_remote(&self) -> bool {
        matches!(self, LlmError::Transport { .. } | LlmError::Service { .. } | LlmError::Decode(_))
    }
}

/// Visibility answers from the completion service.
pub struct LlmVisibility<'a> {
    client: &'a LlmClient,
    template: PromptTemplate,
}

impl<'a> LlmVisibility<'a> {
    pub fn new(client: &'a LlmClient, template: PromptTemplate) -> Self {
        Self { client, template }
    }
}

impl VisibilityOracle for LlmVisibility<'_> {
    fn query(&self, concept: &str) -> Result<bool, OracleError> {
        let response = self
            .client
            .ask(&self.template, concept)
            .map_err(|e| OracleError::Unavailable(e.to_string()))?;
        parse_visibility(&response.text).map_err(|_| OracleError::Unparseable(response.text))
    }

    fn source(&self) -> Option<Source> {
        Some(Source::Llm)
    }
}

/// Asks for the parts of `q` and drops them from `concepts`.
///
/// Off by default in the pipelines; kept for comparison studies.
pub fn remove_parts(
    client: &LlmClient,
    template: &PromptTemplate,
    q: &str,
    concepts: &[String],
) -> Result<Vec<String>, LlmError> {
    let parts = parse_cc_list(&client.ask(template, q)?.text).items;
    Ok(concepts.iter().filter(|c| !parts.contains(c)).cloned().collect())
}
