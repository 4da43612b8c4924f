//! JSON Lines transcripts: one debate record per line.
//!
//! ```json
//! {"question_id":"q1","partition":"law","truth":"B","labels":["A","B"],
//!  "rounds":[{"agents":[{"agent_id":"a","probs":[0.3,0.7],"parse_status":"parsed"}]}]}
//! ```
//!
//! `truth` may be a label or a zero-based index; it is written as the label.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentRoundBelief, DebateRecord, Distribution, DomainError, LabelSpace, ParseStatus};

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {source}")]
    Record { line: usize, source: DomainError },
    #[error("line {line}: truth `{truth}` is not one of the labels")]
    UnknownTruth { line: usize, truth: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum TruthField {
    Index(usize),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AgentLine {
    agent_id: String,
    probs: Vec<f64>,
    parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RoundLine {
    agents: Vec<AgentLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordLine {
    question_id: String,
    #[serde(default)]
    partition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<TruthField>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    rounds: Vec<RoundLine>,
}

impl From<&DebateRecord> for RecordLine {
    fn from(record: &DebateRecord) -> Self {
        let labels = record.label_space();
        RecordLine {
            question_id: record.question_id().to_string(),
            partition: Some(record.partition().to_string()),
            truth: record.truth().and_then(|t| labels.label(t)).map(|l| TruthField::Label(l.to_string())),
            labels: labels.labels().to_vec(),
            meta: record.meta().clone(),
            rounds: record
                .rounds()
                .iter()
                .map(|agents| RoundLine {
                    agents: agents
                        .iter()
                        .map(|b| AgentLine {
                            agent_id: b.agent_id.clone(),
                            probs: b.dist.probs().to_vec(),
                            parse_status: b.parse_status,
                            raw_text: b.raw_text.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl RecordLine {
    fn into_record(self, line: usize) -> Result<DebateRecord, TranscriptError> {
        let record_err = |source| TranscriptError::Record { line, source };
        let labels = LabelSpace::new(self.labels).map_err(record_err)?;
        let k = labels.len();
        let truth = match self.truth {
            None => None,
            Some(TruthField::Index(i)) => Some(i),
            Some(TruthField::Label(l)) => {
                Some(labels.index_of(&l).ok_or(TranscriptError::UnknownTruth { line, truth: l })?)
            }
        };
        let mut rounds = Vec::with_capacity(self.rounds.len());
        for (t, round) in self.rounds.into_iter().enumerate() {
            let mut row = Vec::with_capacity(round.agents.len());
            for agent in round.agents {
                let dist = Distribution::validate(agent.probs, k).map_err(record_err)?;
                let mut belief = AgentRoundBelief::new(agent.agent_id, t, dist, agent.parse_status);
                belief.raw_text = agent.raw_text;
                row.push(belief);
            }
            rounds.push(row);
        }
        let mut record = DebateRecord::new(self.question_id, labels, truth, rounds).map_err(record_err)?.with_meta(self.meta);
        if let Some(p) = self.partition {
            record = record.with_partition(p);
        }
        Ok(record)
    }
}

pub fn record_to_line(record: &DebateRecord) -> String {
    serde_json::to_string(&RecordLine::from(record)).expect("record lines always serialize")
}

/// Parses one line; `line` is only used in error messages.
pub fn record_from_line(text: &str, line: usize) -> Result<DebateRecord, TranscriptError> {
    let parsed: RecordLine = serde_json::from_str(text).map_err(|source| TranscriptError::Json { line, source })?;
    parsed.into_record(line)
}

/// Reads every non-blank line. Line numbers in errors are 1-based.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<DebateRecord>, TranscriptError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(record_from_line(&line, i + 1)?);
    }
    Ok(records)
}

pub fn write_jsonl<W: Write>(mut writer: W, records: &[DebateRecord]) -> Result<(), TranscriptError> {
    for record in records {
        writeln!(writer, "{}", record_to_line(record))?;
    }
    writer.flush()?;
    Ok(())
}
