//! Round-based debate orchestration.
//!
//! Every agent sees the question plus a summary of the immediately preceding
//! round only (nothing for round 0). Agent calls within a round run
//! concurrently; round `t + 1` starts once every round-`t` belief is recorded.
//! An agent that errors or produces unparseable text contributes a uniform
//! belief for that round.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;
use tracing::warn;

use crate::domain::{AgentRoundBelief, DebateRecord, Distribution, DomainError, LabelSpace, ParseStatus};
use crate::elicit::{parse_verbalized, remote_agent_respond, ChatTransport, ConnectorError, RemoteConnector};
use crate::seeding::rng_for;
use crate::sim::sample_belief;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DebateError {
    #[error("debate needs at least one agent")]
    NoAgents,
    #[error("debate needs at least one round")]
    ZeroRounds,
    #[error("agent id `{0}` appears twice")]
    DuplicateAgentId(String),
    #[error("every agent failed in every round for question `{0}`")]
    AllAgentsFailed(String),
    #[error("round {requested} has not been played (record has {played} rounds)")]
    RoundNotYetPlayed { requested: usize, played: usize },
    #[error(transparent)]
    Record(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Question {
    pub id: String,
    pub text: String,
    /// Ground truth, when known. Remote agents never see it.
    pub truth: Option<usize>,
    pub partition: Option<String>,
}

/// What an agent is given for one turn.
#[derive(Debug, Clone, Copy)]
pub struct AgentTurn<'a> {
    pub question: &'a Question,
    pub labels: &'a LabelSpace,
    pub round: usize,
    /// Summary of round `round - 1`; empty at round 0.
    pub peer_summary: &'a str,
}

pub trait Agent: Send + Sync {
    fn respond(&self, turn: &AgentTurn<'_>) -> Result<String, AgentError>;
}

impl<T: ChatTransport> Agent for RemoteConnector<T> {
    fn respond(&self, turn: &AgentTurn<'_>) -> Result<String, AgentError> {
        Ok(remote_agent_respond(self, &turn.question.text, turn.labels, turn.peer_summary)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Remote,
    Synthetic,
}

pub struct AgentHandle {
    pub agent_id: String,
    pub kind: AgentKind,
    agent: Box<dyn Agent>,
}

impl AgentHandle {
    pub fn new(agent_id: impl Into<String>, kind: AgentKind, agent: impl Agent + 'static) -> Self {
        Self { agent_id: agent_id.into(), kind, agent: Box::new(agent) }
    }

    pub fn remote<T: ChatTransport + 'static>(agent_id: impl Into<String>, connector: RemoteConnector<T>) -> Self {
        Self::new(agent_id, AgentKind::Remote, connector)
    }

    pub fn synthetic(agent: SyntheticAgent) -> Self {
        Self::new(agent.id.clone(), AgentKind::Synthetic, agent)
    }

    pub fn respond(&self, turn: &AgentTurn<'_>) -> Result<String, AgentError> {
        self.agent.respond(turn)
    }
}

impl std::fmt::Debug for AgentHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentHandle").field("agent_id", &self.agent_id).field("kind", &self.kind).finish()
    }
}

fn reasoning_of(raw: &str) -> &str {
    let lower = raw.to_ascii_lowercase();
    match (lower.find("<reasoning>"), lower.find("</reasoning>")) {
        (Some(start), Some(end)) if end > start => raw[start + "<reasoning>".len()..end].trim(),
        _ => raw.trim(),
    }
}

pub const SUMMARY_AGENT_PREFIX: &str = "- agent ";

fn summarize(labels: &LabelSpace, round: usize, beliefs: &[AgentRoundBelief]) -> String {
    let mut out = format!("Round {round} responses:\n");
    for belief in beliefs {
        let probs = labels
            .labels()
            .iter()
            .zip(belief.dist.probs())
            .map(|(l, p)| format!("{l}={p:.3}"))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(out, "{SUMMARY_AGENT_PREFIX}{}: {probs}", belief.agent_id);
        if let Some(raw) = &belief.raw_text {
            let reasoning = reasoning_of(raw);
            if !reasoning.is_empty() {
                let _ = writeln!(out, "  reasoning: {}", reasoning.replace('\n', "\n  "));
            }
        }
    }
    out
}

/// Deterministic text summary of round `t`: per agent (in record order) its
/// distribution to three decimals and its reasoning text when present.
pub fn build_round_summary(record: &DebateRecord, t: usize) -> Result<String, DebateError> {
    if t >= record.num_rounds() {
        return Err(DebateError::RoundNotYetPlayed { requested: t, played: record.num_rounds() });
    }
    Ok(summarize(record.label_space(), t, record.round(t)))
}

/// Runs a `rounds`-round debate and returns the complete record.
pub fn run_debate(
    question: &Question,
    labels: &LabelSpace,
    agents: &[AgentHandle],
    rounds: usize,
) -> Result<DebateRecord, DebateError> {
    if agents.is_empty() {
        return Err(DebateError::NoAgents);
    }
    if rounds == 0 {
        return Err(DebateError::ZeroRounds);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = agents.iter().find(|a| !seen.insert(a.agent_id.as_str())) {
        return Err(DebateError::DuplicateAgentId(dup.agent_id.clone()));
    }

    let k = labels.len();
    let mut table: Vec<Vec<AgentRoundBelief>> = Vec::with_capacity(rounds);
    let mut any_success = false;
    for t in 0..rounds {
        let summary = match table.last() {
            Some(previous) => summarize(labels, t - 1, previous),
            None => String::new(),
        };
        let turn = AgentTurn { question, labels, round: t, peer_summary: &summary };
        let replies: Vec<Result<String, AgentError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = agents.iter().map(|agent| scope.spawn(move || agent.respond(&turn))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(AgentError::Other("agent panicked".into()))))
                .collect()
        });
        let row = agents
            .iter()
            .zip(replies)
            .map(|(agent, reply)| match reply {
                Ok(raw) => {
                    let (dist, status) = parse_verbalized(&raw, labels);
                    any_success |= status != ParseStatus::FallbackUniform;
                    AgentRoundBelief::new(agent.agent_id.clone(), t, dist, status).with_raw_text(raw)
                }
                Err(e) => {
                    warn!(question = %question.id, agent = %agent.agent_id, round = t, error = %e, "agent failed; substituting uniform belief");
                    AgentRoundBelief::fallback(agent.agent_id.clone(), t, k)
                }
            })
            .collect();
        table.push(row);
    }
    if !any_success {
        return Err(DebateError::AllAgentsFailed(question.id.clone()));
    }
    let mut record = DebateRecord::new(question.id.clone(), labels.clone(), question.truth, table)?;
    if let Some(p) = &question.partition {
        record = record.with_partition(p.clone());
    }
    Ok(record)
}

/// Offline stand-in for a model.
///
/// Round 0 draws a belief centred on the truth with probability `accuracy`
/// (otherwise on a random wrong label; a uniformly random label when the truth
/// is unknown). Later rounds read the peer summary and move a fraction
/// `sycophancy` of the way from the agent's own previous belief toward the
/// equal-weight mean of everyone's previous beliefs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAgent {
    pub id: String,
    pub accuracy: f64,
    pub concentration: f64,
    pub sycophancy: f64,
    pub seed: u64,
}

fn parse_summary_probs(line: &str, k: usize) -> Option<Vec<f64>> {
    let values: Vec<f64> = line
        .split(", ")
        .map(|pair| pair.rsplit_once('=').and_then(|(_, v)| v.trim().parse().ok()))
        .collect::<Option<_>>()?;
    (values.len() == k).then_some(values)
}

impl SyntheticAgent {
    fn initial_belief(&self, turn: &AgentTurn<'_>) -> Distribution {
        let k = turn.labels.len();
        let mut rng = rng_for(self.seed, &[self.id.as_bytes(), turn.question.id.as_bytes()]);
        let center = match turn.question.truth {
            Some(truth) if rng.random::<f64>() < self.accuracy => truth,
            Some(truth) => {
                let wrong = rng.random_range(0..k - 1);
                if wrong >= truth {
                    wrong + 1
                } else {
                    wrong
                }
            }
            None => rng.random_range(0..k),
        };
        sample_belief(&mut rng, k, center, self.concentration)
    }

    fn updated_belief(&self, turn: &AgentTurn<'_>) -> Option<Distribution> {
        let k = turn.labels.len();
        let own_prefix = format!("{SUMMARY_AGENT_PREFIX}{}: ", self.id);
        let mut own = None;
        let mut peers = Vec::new();
        for line in turn.peer_summary.lines() {
            if let Some(rest) = line.strip_prefix(SUMMARY_AGENT_PREFIX) {
                let (_, probs) = rest.rsplit_once(": ")?;
                let values = parse_summary_probs(probs, k)?;
                if line.starts_with(&own_prefix) {
                    own = Some(values.clone());
                }
                peers.push(values);
            }
        }
        let own = own?;
        let n = peers.len() as f64;
        let s = self.sycophancy;
        let mixed: Vec<f64> = (0..k)
            .map(|y| (1.0 - s) * own[y] + s * peers.iter().map(|p| p[y]).sum::<f64>() / n)
            .collect();
        let sum: f64 = mixed.iter().sum();
        (sum > 0.0).then(|| Distribution::validate(mixed.iter().map(|v| v / sum).collect(), k).ok()).flatten()
    }

    pub fn belief_for(&self, turn: &AgentTurn<'_>) -> Distribution {
        if turn.round == 0 {
            return self.initial_belief(turn);
        }
        self.updated_belief(turn).unwrap_or_else(|| self.initial_belief(turn))
    }
}

impl Agent for SyntheticAgent {
    fn respond(&self, turn: &AgentTurn<'_>) -> Result<String, AgentError> {
        let dist = self.belief_for(turn);
        let answer = crate::elicit::format_answer(&dist, turn.labels);
        Ok(format!(
            "<reasoning>synthetic agent {} at round {} (accuracy {:.2})</reasoning>\n{answer}",
            self.id, turn.round, self.accuracy
        ))
    }
}
