//! Command-line surface. Flags override the config file, which overrides
//! built-in defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use classim_core::gateway::DistractorPolicy;
use classim_core::metrics::AucMode;
use classim_core::pipeline::{ExperimentConfig, MockConfig};
use classim_core::promptgen::MessageLayout;
use classim_core::{ContentArea, DifficultyLabel, Grade};

#[derive(Debug, Parser)]
#[command(name = "classim", version, about = "Simulated-classroom item difficulty estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Role-play every student on every item and log the answers.
    Simulate(RunArgs),
    /// Ask the model directly for each item's percent correct.
    Dpce {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Variant::Greedy)]
        variant: Variant,
        /// Samples per item (default 1 for greedy, 10 for averaged).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Have the model solve each item as an expert and score it.
    Baseline(RunArgs),
    /// Fit and score a finished simulation run.
    Evaluate {
        /// Simulation output directory.
        #[arg(long)]
        run: PathBuf,
        /// Corpus to score against (default: the one the run used).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Where to write report.json and report.csv (default: the run).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AucChoice::EasyVsHard)]
        auc_mode: AucChoice,
        /// Subgroup labels to correlate (repeatable).
        #[arg(long = "subgroup")]
        subgroups: Vec<String>,
    },
    /// Average item success rates across models.
    Ensemble {
        /// NAME=PATH of a success_rates.json or dpce_rates.json (repeatable).
        #[arg(long = "input", required = true, value_parser = parse_pair)]
        inputs: Vec<(String, String)>,
        /// NAME=WEIGHT (repeatable; unlisted members weigh 1).
        #[arg(long = "weight", value_parser = parse_pair)]
        weights: Vec<(String, String)>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a readable summary of an evaluation report.
    Report {
        /// report.json, or a directory containing one.
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Greedy,
    Averaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AucChoice {
    EasyVsHard,
    HardVsRest,
}

impl From<AucChoice> for AucMode {
    fn from(c: AucChoice) -> Self {
        match c {
            AucChoice::EasyVsHard => AucMode::EasyVsHard,
            AucChoice::HardVsRest => AucMode::HardVsRest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutChoice {
    SingleUser,
    SystemSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistractorChoice {
    Uniform,
    RealMarginal,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected NAME=VALUE, got {s:?}")),
    }
}

/// Options shared by the generating subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON experiment config; flags given here take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub grade: Option<Grade>,
    #[arg(long)]
    pub content_area: Option<ContentArea>,
    #[arg(long)]
    pub difficulty: Option<DifficultyLabel>,
    /// Classroom size.
    #[arg(long)]
    pub n: Option<usize>,
    /// none, ids, single:<name> or diverse.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub name_pool: Option<PathBuf>,
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutChoice>,
    #[arg(long)]
    pub replicates: Option<u32>,
    #[arg(long)]
    pub model: Option<String>,
    /// Chat-completions server, e.g. http://localhost:8000/v1.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Answer with the offline Rasch mock instead of an endpoint.
    #[arg(long)]
    pub mock: bool,
    #[arg(long, value_enum)]
    pub mock_distractors: Option<DistractorChoice>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Stop after this many new requests; re-run to resume.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Mirror requests and responses to capture.jsonl in the run.
    #[arg(long)]
    pub capture: bool,
}

impl RunArgs {
    /// Defaults, then the config file, then the flags given.
    pub fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).map_err(|e| e.to_string())?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    c.$($target)+ = v;
                }
            };
        }
        if self.corpus.is_some() {
            c.corpus = self.corpus.clone();
        }
        if self.grade.is_some() {
            c.grade = self.grade;
        }
        if self.content_area.is_some() {
            c.content_area = self.content_area;
        }
        if self.difficulty.is_some() {
            c.difficulty = self.difficulty;
        }
        if self.name_pool.is_some() {
            c.name_pool = self.name_pool.clone();
        }
        if self.prompt_dir.is_some() {
            c.prompt_dir = self.prompt_dir.clone();
        }
        if self.stop_after.is_some() {
            c.stop_after = self.stop_after;
        }
        set!(n => n);
        set!(strategy => strategy);
        set!(replicates => replicates);
        set!(seed => seed);
        set!(out => out);
        set!(chunk_size => chunk_size);
        set!(model => gateway.model);
        set!(endpoint => gateway.endpoint);
        set!(temperature => gateway.temperature);
        set!(max_tokens => gateway.max_tokens);
        set!(max_in_flight => gateway.max_in_flight);
        set!(max_retries => gateway.max_retries);
        set!(timeout => gateway.timeout_secs);
        if let Some(l) = self.layout {
            c.layout = match l {
                LayoutChoice::SingleUser => MessageLayout::SingleUser,
                LayoutChoice::SystemSplit => MessageLayout::SystemSplit,
            };
        }
        if self.mock && c.mock.is_none() {
            c.mock = Some(MockConfig::default());
        }
        if let Some(d) = self.mock_distractors {
            let mock = c.mock.get_or_insert_with(MockConfig::default);
            mock.distractors = match d {
                DistractorChoice::Uniform => DistractorPolicy::Uniform,
                DistractorChoice::RealMarginal => DistractorPolicy::RealMarginal,
            };
        }
        if self.capture {
            c.capture = true;
        }
        c.gateway = c.gateway.with_env_key();
        Ok(c)
    }
}
