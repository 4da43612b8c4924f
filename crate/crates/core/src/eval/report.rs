use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{EvaluationReport, RoundMetrics};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub const ROUND_METRICS_COLUMNS: [&str; 9] =
    ["partition", "round", "alpha", "q_hat", "coverage", "avg_set_size", "singleton_rate", "singleton_acc", "n_test"];

fn f6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn f6_opt(v: Option<f64>) -> String {
    v.map(f6).unwrap_or_default()
}

fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is built from strings"))
}

fn round_metrics_row(m: &RoundMetrics) -> Vec<String> {
    vec![
        m.partition.clone(),
        m.round.to_string(),
        f6(m.alpha),
        f6(m.q_hat),
        f6(m.coverage),
        f6(m.avg_set_size),
        f6(m.singleton_rate_cumulative),
        f6_opt(m.singleton_accuracy),
        m.n_test.to_string(),
    ]
}

pub fn render_round_metrics(metrics: &[RoundMetrics]) -> Result<String, ReportError> {
    table(&ROUND_METRICS_COLUMNS, metrics.iter().map(round_metrics_row))
}

fn rule_name(rule: crate::stopping::StopRule) -> &'static str {
    match rule {
        crate::stopping::StopRule::Consensus => "consensus",
        crate::stopping::StopRule::Conformal => "conformal",
    }
}

/// Every CSV table keyed by file name.
pub fn render_csv_tables(report: &EvaluationReport) -> Result<BTreeMap<&'static str, String>, ReportError> {
    let mut out = BTreeMap::new();
    out.insert("round_metrics.csv", render_round_metrics(&report.round_metrics)?);

    out.insert(
        "stopping.csv",
        table(
            &["partition", "alpha", "rule", "n", "avg_round", "resolved_rate", "accuracy", "escalation_rate", "delta_acc"],
            report.stopping.iter().flat_map(|c| {
                [&c.consensus, &c.conformal].map(|s| {
                    vec![
                        c.partition.clone(),
                        f6(c.alpha),
                        rule_name(s.rule).to_string(),
                        s.n.to_string(),
                        f6(s.avg_round),
                        f6(s.resolved_rate),
                        f6_opt(s.accuracy),
                        f6(s.escalation_rate),
                        f6_opt(c.delta_accuracy),
                    ]
                })
            }),
        )?,
    );

    out.insert(
        "safety.csv",
        table(
            &[
                "partition",
                "alpha",
                "n_records",
                "initially_disagreeing",
                "wrong_consensus_total",
                "wrong_consensus_rejected",
                "interception_rate",
                "correct_consensus_total",
                "correct_consensus_rejected",
                "over_rejection_rate",
                "introduced_wrong_singletons",
                "net_ratio",
            ],
            report.safety.iter().map(|l| {
                vec![
                    l.partition.clone(),
                    f6(l.alpha),
                    l.n_records.to_string(),
                    l.initially_disagreeing.to_string(),
                    l.wrong_consensus_total.to_string(),
                    l.wrong_consensus_rejected.to_string(),
                    f6_opt(l.interception_rate()),
                    l.correct_consensus_total.to_string(),
                    l.correct_consensus_rejected.to_string(),
                    f6_opt(l.over_rejection_rate()),
                    l.introduced_wrong_singletons.to_string(),
                    f6(l.net_ratio),
                ]
            }),
        )?,
    );

    out.insert(
        "safety_rounds.csv",
        table(
            &[
                "partition",
                "alpha",
                "round",
                "converged_wrong",
                "wrong_consensus",
                "wrong_consensus_rejected",
                "correct_consensus",
                "correct_consensus_rejected",
                "introduced_wrong_singletons",
            ],
            report.safety.iter().flat_map(|l| {
                (0..l.wrong_consensus_at_round.len()).map(move |t| {
                    vec![
                        l.partition.clone(),
                        f6(l.alpha),
                        t.to_string(),
                        l.wrong_consensus_by_round[t].to_string(),
                        l.wrong_consensus_at_round[t].to_string(),
                        l.wrong_consensus_rejected_at_round[t].to_string(),
                        l.correct_consensus_at_round[t].to_string(),
                        l.correct_consensus_rejected_at_round[t].to_string(),
                        l.introduced_wrong_singletons_by_round[t].to_string(),
                    ]
                })
            }),
        )?,
    );

    out.insert(
        "stop_rounds.csv",
        table(
            &["partition", "alpha", "rule", "round", "fraction"],
            report.stop_rounds.iter().map(|r| {
                vec![r.partition.clone(), f6(r.alpha), rule_name(r.rule).to_string(), r.round.to_string(), f6(r.fraction)]
            }),
        )?,
    );

    // Long format for plotting: coverage and escalation against round, per α.
    let long_rows = report.round_metrics.iter().flat_map(|m| {
        let mut metrics = vec![
            ("coverage", m.coverage),
            ("target_coverage", 1.0 - m.alpha),
            ("avg_set_size", m.avg_set_size),
            ("singleton_rate", m.singleton_rate_cumulative),
            ("escalation_rate", 1.0 - m.singleton_rate_cumulative),
        ];
        if let Some(acc) = m.singleton_accuracy {
            metrics.push(("singleton_acc", acc));
        }
        metrics.into_iter().map(move |(name, value)| {
            vec![m.partition.clone(), f6(m.alpha), m.round.to_string(), name.to_string(), f6(value)]
        })
    });
    out.insert("plot_long.csv", table(&["partition", "alpha", "round", "metric", "value"], long_rows)?);
    Ok(out)
}

pub fn render_json(report: &EvaluationReport) -> Result<String, ReportError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub paths: Vec<PathBuf>,
}

/// Writes every CSV table and `report.json` into `dir`, creating it if needed.
pub fn emit_report(report: &EvaluationReport, dir: &Path) -> Result<ReportFiles, ReportError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, body) in render_csv_tables(report)? {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        paths.push(path);
    }
    let path = dir.join("report.json");
    std::fs::write(&path, render_json(report)?)?;
    paths.push(path);
    Ok(ReportFiles { paths })
}
