//! Turning agent text into distributions, and reaching remote agents.

mod connector;
mod parse;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{DebateRecord, ParseStatus};

pub use connector::{
    build_prompt, extract_path, remote_agent_respond, ChatMessage, ChatRequest, ChatTransport, ConnectorConfig,
    ConnectorError, HttpTransport, RemoteConnector, DEFAULT_API_KEY_ENV, DEFAULT_MAX_TOKENS, DEFAULT_RESPONSE_PATH,
    DEFAULT_TEMPERATURE, SYSTEM_PROMPT,
};
pub use parse::{format_answer, parse_verbalized};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElicitError {
    #[error("no records to summarise")]
    EmptyCorpus,
}

/// Parse-outcome counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParseCounts {
    pub total_responses: u64,
    pub parsed: u64,
    pub renormalized: u64,
    pub fallback_uniform: u64,
}

impl ParseCounts {
    pub fn record(&mut self, status: ParseStatus) {
        self.total_responses += 1;
        match status {
            ParseStatus::Parsed => self.parsed += 1,
            ParseStatus::Renormalized => self.renormalized += 1,
            ParseStatus::FallbackUniform => self.fallback_uniform += 1,
        }
    }

    pub fn fallback_rate(&self) -> f64 {
        if self.total_responses == 0 {
            0.0
        } else {
            self.fallback_uniform as f64 / self.total_responses as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParseReport {
    #[serde(flatten)]
    pub overall: ParseCounts,
    pub fallback_rate: f64,
    pub per_agent: BTreeMap<String, ParseCounts>,
}

impl ParseReport {
    pub fn from_counts(overall: ParseCounts, per_agent: BTreeMap<String, ParseCounts>) -> Self {
        Self { fallback_rate: overall.fallback_rate(), overall, per_agent }
    }
}

/// Counts parse outcomes across every agent-round response in the corpus.
pub fn aggregate_parse_report(records: &[DebateRecord]) -> Result<ParseReport, ElicitError> {
    if records.is_empty() {
        return Err(ElicitError::EmptyCorpus);
    }
    let mut overall = ParseCounts::default();
    let mut per_agent: BTreeMap<String, ParseCounts> = BTreeMap::new();
    for belief in records.iter().flat_map(|r| r.rounds().iter().flatten()) {
        overall.record(belief.parse_status);
        per_agent.entry(belief.agent_id.clone()).or_default().record(belief.parse_status);
    }
    Ok(ParseReport::from_counts(overall, per_agent))
}
