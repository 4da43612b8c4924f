use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use csc_core::debate::{run_debate, AgentHandle, DebateError, Question, SyntheticAgent};
use csc_core::elicit::{aggregate_parse_report, RemoteConnector};
use csc_core::eval::{calibrate_corpus, emit_report, evaluate_corpus, CalibrationFile};
use csc_core::sim::{generate_population, SimParams};
use csc_core::stopping::{majority_vote, unanimous_label};
use csc_core::transcript::{read_jsonl, write_jsonl};
use csc_core::{DebateRecord, LabelSpace, RunConfig};
use serde::Deserialize;
use tracing::{info, warn};

use crate::config::{AgentSpec, DebateConfig};
use crate::error::CliError;

pub fn read_transcripts(path: &Path) -> Result<Vec<DebateRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let records = read_jsonl(BufReader::new(file))?;
    if records.is_empty() {
        return Err(CliError::BadInput(format!("{}: no records", path.display())));
    }
    Ok(records)
}

fn write_transcripts(path: &Path, records: &[DebateRecord]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_jsonl(BufWriter::new(file), records)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn simulate(params: &SimParams, out: &Path) -> Result<String, CliError> {
    let records = generate_population(params)?;
    write_transcripts(out, &records)?;
    let last = params.num_rounds - 1;
    let unanimous = records.iter().filter(|r| unanimous_label(r, last).is_some()).count();
    let majority_correct = records.iter().filter(|r| Some(majority_vote(r, last).index) == r.truth()).count();
    Ok(format!(
        "wrote {} records to {}\nlabels: {}  agents: {}  rounds: {}\nfinal-round unanimous: {}  final-round majority correct: {}\n",
        records.len(),
        out.display(),
        params.num_labels,
        params.num_agents,
        params.num_rounds,
        unanimous,
        majority_correct
    ))
}

pub fn calibrate(transcripts: &Path, run: &RunConfig, partition_key: &str, out: &Path) -> Result<String, CliError> {
    let records = read_transcripts(transcripts)?;
    let calibration = calibrate_corpus(&records, run, partition_key)?;
    let mut text = serde_json::to_string_pretty(&calibration).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_text(out, &text)?;
    let mut summary = format!("wrote {} thresholds to {}\n", calibration.entries.len(), out.display());
    summary.push_str("partition\tround\talpha\tq_hat\tn_cal\tsaturated\n");
    for e in &calibration.entries {
        summary.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{}\n",
            e.partition, e.round, e.alpha, e.q_hat, e.n_cal, e.saturated
        ));
    }
    Ok(summary)
}

pub fn load_calibration(path: &Path) -> Result<CalibrationFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))
}

pub fn evaluate(transcripts: &Path, calibration: &Path, alphas: &[f64], out_dir: &Path) -> Result<String, CliError> {
    let records = read_transcripts(transcripts)?;
    let calibration = load_calibration(calibration)?;
    let report = evaluate_corpus(&records, &calibration, alphas)?;
    let files = emit_report(&report, out_dir)?;
    let mut summary = String::from("partition\tround\talpha\tcoverage\tavg_set_size\tsingleton_rate\n");
    for m in &report.round_metrics {
        summary.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.3}\t{:.4}\n",
            m.partition, m.round, m.alpha, m.coverage, m.avg_set_size, m.singleton_rate_cumulative
        ));
    }
    for l in &report.safety {
        summary.push_str(&format!(
            "{} alpha={}: wrong consensus {} ({} escalated), correct consensus {} ({} escalated), introduced wrong singletons {}\n",
            l.partition,
            l.alpha,
            l.wrong_consensus_total,
            l.wrong_consensus_rejected,
            l.correct_consensus_total,
            l.correct_consensus_rejected,
            l.introduced_wrong_singletons
        ));
    }
    for p in &files.paths {
        summary.push_str(&format!("wrote {}\n", p.display()));
    }
    Ok(summary)
}

pub fn parse_report(transcripts: &Path) -> Result<String, CliError> {
    let records = read_transcripts(transcripts)?;
    let report = aggregate_parse_report(&records).map_err(|e| CliError::BadInput(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TruthInput {
    Index(usize),
    Label(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionLine {
    id: String,
    text: String,
    #[serde(default)]
    truth: Option<TruthInput>,
    #[serde(default)]
    partition: Option<String>,
}

fn read_questions(path: &Path, labels: &LabelSpace) -> Result<Vec<Question>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut questions = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: String| CliError::BadInput(format!("{}:{}: {msg}", path.display(), i + 1));
        let q: QuestionLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let truth = match q.truth {
            None => None,
            Some(TruthInput::Index(t)) if t < labels.len() => Some(t),
            Some(TruthInput::Index(t)) => return Err(bad(format!("truth index {t} out of range"))),
            Some(TruthInput::Label(l)) => {
                Some(labels.index_of(&l).ok_or_else(|| bad(format!("truth `{l}` is not a label")))?)
            }
        };
        questions.push(Question { id: q.id, text: q.text, truth, partition: q.partition });
    }
    Ok(questions)
}

fn build_agents(specs: &[AgentSpec]) -> Result<Vec<AgentHandle>, CliError> {
    specs
        .iter()
        .map(|spec| match spec {
            AgentSpec::Synthetic { id, accuracy, concentration, sycophancy, seed } => {
                if !(*accuracy > 0.0 && *accuracy < 1.0) {
                    return Err(CliError::BadConfig(format!("agent `{id}`: accuracy {accuracy} is not in (0, 1)")));
                }
                if !(0.0..=1.0).contains(sycophancy) {
                    return Err(CliError::BadConfig(format!("agent `{id}`: sycophancy {sycophancy} is not in [0, 1]")));
                }
                if !(*concentration > 0.0 && concentration.is_finite()) {
                    return Err(CliError::BadConfig(format!("agent `{id}`: concentration must be positive")));
                }
                Ok(AgentHandle::synthetic(SyntheticAgent {
                    id: id.clone(),
                    accuracy: *accuracy,
                    concentration: *concentration,
                    sycophancy: *sycophancy,
                    seed: *seed,
                }))
            }
            AgentSpec::Remote { id, connector } => {
                let remote = RemoteConnector::from_config(connector)
                    .map_err(|e| CliError::BadConfig(format!("agent `{id}`: {e}")))?;
                Ok(AgentHandle::remote(id.clone(), remote))
            }
        })
        .collect()
}

pub fn debate(questions: &Path, agents: &Path, rounds: Option<usize>, out: &Path) -> Result<String, CliError> {
    let config = DebateConfig::load(agents)?;
    let labels = LabelSpace::new(config.labels.clone())?;
    let rounds = rounds.or(config.rounds).unwrap_or(RunConfig::default().num_rounds);
    if rounds == 0 {
        return Err(CliError::BadConfig("invalid configuration field `rounds`: must be at least 1".into()));
    }
    let handles = build_agents(&config.agents)?;
    let questions = read_questions(questions, &labels)?;
    let mut records = Vec::with_capacity(questions.len());
    let mut skipped = 0;
    for q in &questions {
        match run_debate(q, &labels, &handles, rounds) {
            Ok(r) => records.push(r),
            Err(DebateError::AllAgentsFailed(id)) => {
                warn!(question = %id, "every agent failed; record skipped");
                skipped += 1;
            }
            Err(e) => return Err(CliError::BadInput(e.to_string())),
        }
        info!(question = %q.id, "debate finished");
    }
    let file = File::create(out).map_err(|e| CliError::io(out, e))?;
    let mut writer = BufWriter::new(file);
    write_jsonl(&mut writer, &records)?;
    writer.flush().map_err(|e| CliError::io(out, e))?;
    Ok(format!("wrote {} records to {} ({} skipped)\n", records.len(), out.display(), skipped))
}
