//! Flat TOML configuration. Command-line flags override file values, which override defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use csc_core::elicit::ConnectorConfig;
use csc_core::eval::PARTITION_FIELD;
use csc_core::sim::SimParams;
use csc_core::{LabelSpace, RunConfig, ScoreKind, Weighting};
use serde::Deserialize;

use crate::error::CliError;

const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WeightingArg {
    Uniform,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScoreArg {
    Prob,
    Rank,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Prob => ScoreKind::Prob,
            ScoreArg::Rank => ScoreKind::Rank,
        }
    }
}

/// Every key the config file may contain.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub alphas: Option<Vec<f64>>,
    pub rounds: Option<usize>,
    pub split_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub weighting: Option<WeightingArg>,
    pub lambda: Option<f64>,
    pub score: Option<ScoreArg>,
    pub partition_key: Option<String>,
    pub num_questions: Option<usize>,
    pub num_labels: Option<usize>,
    pub num_agents: Option<usize>,
    pub agent_accuracy: Option<Vec<f64>>,
    pub concentration: Option<f64>,
    pub sycophancy: Option<f64>,
    pub argmax_attraction: Option<f64>,
    pub partition: Option<String>,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Miscoverage level; repeat for several.
    #[arg(long = "alpha")]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingArg>,
    /// Entropy-weighting temperature.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub score: Option<ScoreArg>,
    /// `partition` or the name of a `meta` entry.
    #[arg(long)]
    pub partition_key: Option<String>,
}

pub struct Resolved {
    pub run: RunConfig,
    pub partition_key: String,
}

pub fn resolve_run(args: &RunArgs, file: &FileConfig) -> Result<Resolved, CliError> {
    let defaults = RunConfig::default();
    let alphas = if args.alphas.is_empty() { file.alphas.clone() } else { Some(args.alphas.clone()) };
    let weighting = match args.weighting.or(file.weighting).unwrap_or(WeightingArg::Uniform) {
        WeightingArg::Uniform => Weighting::Uniform,
        WeightingArg::Entropy => Weighting::Entropy { lambda: args.lambda.or(file.lambda).unwrap_or(DEFAULT_LAMBDA) },
    };
    let run = RunConfig {
        alphas: alphas.unwrap_or(defaults.alphas),
        num_rounds: args.rounds.or(file.rounds).unwrap_or(defaults.num_rounds),
        split_ratio: args.split_ratio.or(file.split_ratio).unwrap_or(defaults.split_ratio),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        weighting,
        score_kind: args.score.or(file.score).map(ScoreKind::from).unwrap_or(defaults.score_kind),
    };
    run.validate()?;
    let partition_key = args.partition_key.clone().or_else(|| file.partition_key.clone()).unwrap_or(PARTITION_FIELD.into());
    if partition_key.trim().is_empty() {
        return Err(CliError::BadConfig("invalid configuration field `partition_key`: must not be blank".into()));
    }
    Ok(Resolved { run, partition_key })
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub num_questions: Option<usize>,
    #[arg(long)]
    pub num_labels: Option<usize>,
    #[arg(long)]
    pub num_agents: Option<usize>,
    /// Per-agent accuracy; repeat once per agent, or give one value for all.
    #[arg(long = "accuracy")]
    pub accuracy: Vec<f64>,
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Mixing weight toward the previous round's pooled belief.
    #[arg(long)]
    pub sycophancy: Option<f64>,
    #[arg(long)]
    pub argmax_attraction: Option<f64>,
    #[arg(long)]
    pub partition: Option<String>,
}

pub fn resolve_sim(args: &SimArgs, run: &RunArgs, file: &FileConfig) -> Result<SimParams, CliError> {
    let d = SimParams::default();
    let num_agents = args.num_agents.or(file.num_agents).unwrap_or(d.num_agents);
    let accuracy = if args.accuracy.is_empty() { file.agent_accuracy.clone() } else { Some(args.accuracy.clone()) };
    let agent_accuracy = match accuracy {
        Some(a) if a.len() == 1 => vec![a[0]; num_agents],
        Some(a) => a,
        None if num_agents == d.num_agents => d.agent_accuracy.clone(),
        None => vec![d.agent_accuracy[0]; num_agents],
    };
    let params = SimParams {
        num_labels: args.num_labels.or(file.num_labels).unwrap_or(d.num_labels),
        num_agents,
        num_rounds: run.rounds.or(file.rounds).unwrap_or(d.num_rounds),
        num_questions: args.num_questions.or(file.num_questions).unwrap_or(d.num_questions),
        agent_accuracy,
        concentration: args.concentration.or(file.concentration).unwrap_or(d.concentration),
        sycophancy: args.sycophancy.or(file.sycophancy).unwrap_or(d.sycophancy),
        argmax_attraction: args.argmax_attraction.or(file.argmax_attraction).unwrap_or(d.argmax_attraction),
        seed: run.seed.or(file.seed).unwrap_or(d.seed),
        partition: args.partition.clone().or_else(|| file.partition.clone()).unwrap_or(d.partition),
    };
    params.validate()?;
    Ok(params)
}

/// One participant in `debate`, tagged by `kind`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    Synthetic {
        id: String,
        accuracy: f64,
        #[serde(default = "default_concentration")]
        concentration: f64,
        #[serde(default)]
        sycophancy: f64,
        #[serde(default)]
        seed: u64,
    },
    Remote {
        id: String,
        #[serde(flatten)]
        connector: ConnectorConfig,
    },
}

fn default_concentration() -> f64 {
    SimParams::default().concentration
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebateConfig {
    pub labels: Vec<String>,
    #[serde(default)]
    pub rounds: Option<usize>,
    pub agents: Vec<AgentSpec>,
}

impl DebateConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: DebateConfig =
            toml::from_str(&text).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))?;
        LabelSpace::new(config.labels.clone())?;
        if config.agents.is_empty() {
            return Err(CliError::BadConfig("invalid configuration field `agents`: at least one agent required".into()));
        }
        Ok(config)
    }
}
