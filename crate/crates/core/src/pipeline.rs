//! Run orchestration: configuration, resumable simulation, direct
//! estimates, the expert baseline, evaluation reports and ensembles.
//!
//! A run owns one output directory:
//!
//! | file                 | written by                     |
//! |----------------------|--------------------------------|
//! | `config.json`        | every run                      |
//! | `manifest.json`      | every run                      |
//! | `classroom.json`     | simulate                       |
//! | `responses.jsonl`    | simulate (append-only, resumable) |
//! | `matrix.csv`         | simulate                       |
//! | `success_rates.json` | simulate                       |
//! | `dpce.jsonl`, `dpce_rates.json` | dpce                |
//! | `baseline.jsonl`, `baseline.json` | baseline          |
//! | `report.json`, `report.csv` | evaluate                |
//! | `ensemble.json`      | ensemble                       |
//! | `capture.jsonl`      | any run with `capture` set     |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classroom::{
    sample_classroom, ClassroomError, IdentifierStrategy, NamePool, SkillDistribution, SkillLevel, StudentProfile,
};
use crate::corpus::{load_corpus, ContentArea, Corpus, CorpusError, CorpusFilter, DifficultyLabel, Grade, Letter};
use crate::gateway::{
    DirectPolicy, DistractorPolicy, ExpertPolicy, Gateway, GatewayConfig, GatewayError, MockStudentModel, RequestKey,
    DEFAULT_MOCK_ABILITIES,
};
use crate::irt::{fit_rasch, group_ability_profile, FitConfig, IrtError, RaschFit};
use crate::metrics::{
    auc_difficulty, auc_labels, distractor_match, ensemble, pearson, skill_correctness, spearman, subgroup_correlation,
    subgroup_series, AucMode, Correlation, DistractorReport, MetricError, PairedSeries, SkillCorrectness,
    SubgroupReport,
};
use crate::promptgen::{render_prompt, MessageLayout, PromptError, PromptKind, PromptSet};
use crate::responses::{
    build_matrix, incorrect_choice_counts, parse_answer, simulated_success_rates, DirectEstimate, DirectVariant,
    JsonlLog, ParseStatus, ParseSummary, ResponseMatrix, SimulatedResponse, StoreError,
};
use crate::rng::{derive_seed, fnv1a64};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASSROOM_FILE: &str = "classroom.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const SUCCESS_RATES_FILE: &str = "success_rates.json";
pub const DPCE_FILE: &str = "dpce.jsonl";
pub const DPCE_RATES_FILE: &str = "dpce_rates.json";
pub const BASELINE_FILE: &str = "baseline.jsonl";
pub const BASELINE_REPORT_FILE: &str = "baseline.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const CAPTURE_FILE: &str = "capture.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Classroom(#[from] ClassroomError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Irt(#[from] IrtError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input file(s): {}", list_paths(.0))]
    MissingInputs(Vec<PathBuf>),
    #[error("{failed} request(s) failed; completed results are saved and a re-run resumes. First failure: {first}")]
    Incomplete { failed: usize, first: String },
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Simulate,
    DpceGreedy,
    DpceAveraged,
    KnowledgeBaseline,
    Fit,
    Evaluate,
    Ensemble,
}

/// Settings for the offline mock backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub name: String,
    pub abilities: [f64; 4],
    /// Per-item overrides; other items take their difficulty from the
    /// real percent correct.
    pub difficulties: BTreeMap<String, f64>,
    pub distractors: DistractorPolicy,
    pub expert: ExpertPolicy,
    pub direct: DirectPolicy,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            name: "mock".into(),
            abilities: DEFAULT_MOCK_ABILITIES,
            difficulties: BTreeMap::new(),
            distractors: DistractorPolicy::default(),
            expert: ExpertPolicy::default(),
            direct: DirectPolicy::default(),
            seed: None,
        }
    }
}

/// Lists expanded into one run per combination.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub n: Vec<usize>,
    pub strategies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateOptions {
    pub auc_mode: AucMode,
    pub subgroups: Vec<String>,
    pub fit: FitConfig,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            auc_mode: AucMode::default(),
            subgroups: vec!["female".into(), "male".into()],
            fit: FitConfig::default(),
        }
    }
}

/// Everything a run needs. Loaded from JSON with every field optional;
/// command-line flags then override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub corpus: Option<PathBuf>,
    pub grade: Option<Grade>,
    pub content_area: Option<ContentArea>,
    pub difficulty: Option<DifficultyLabel>,
    pub n: usize,
    pub skill_distribution: SkillDistribution,
    pub strategy: String,
    pub name_pool: Option<PathBuf>,
    pub prompt_dir: Option<PathBuf>,
    pub layout: MessageLayout,
    pub replicates: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub gateway: GatewayConfig,
    pub mock: Option<MockConfig>,
    /// Samples per item for direct estimates; defaults by variant.
    pub dpce_samples: Option<usize>,
    pub baseline_temperature: f64,
    /// Requests written to the log per batch.
    pub chunk_size: usize,
    /// Stop after this many new requests, leaving the run resumable.
    pub stop_after: Option<usize>,
    pub sweep: Option<Sweep>,
    pub evaluate: EvaluateOptions,
    /// Mirror every request and response to `capture.jsonl`.
    pub capture: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::default(),
            corpus: None,
            grade: None,
            content_area: None,
            difficulty: None,
            n: 300,
            skill_distribution: SkillDistribution::default(),
            strategy: "none".into(),
            name_pool: None,
            prompt_dir: None,
            layout: MessageLayout::default(),
            replicates: 1,
            seed: 0,
            out: PathBuf::from("runs/default"),
            gateway: GatewayConfig::default(),
            mock: None,
            dpce_samples: None,
            baseline_temperature: 0.0,
            chunk_size: 256,
            stop_after: None,
            sweep: None,
            evaluate: EvaluateOptions::default(),
            capture: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        read_json(path)
    }

    pub fn filter(&self) -> CorpusFilter {
        CorpusFilter {
            grade: self.grade,
            content_area: self.content_area,
            difficulty: self.difficulty,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n == 0 {
            return Err(PipelineError::Config("classroom size n must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(PipelineError::Config("replicates must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(PipelineError::Config("chunk_size must be at least 1".into()));
        }
        self.gateway.validate()?;
        Ok(())
    }

    /// SHA-256 of the settings that determine outputs. Output location
    /// and interruption controls are left out so a resumed run hashes the
    /// same as an uninterrupted one.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.stop_after = None;
        c.chunk_size = 0;
        c.sweep = None;
        c.capture = false;
        let text = serde_json::to_string(&c).expect("config serializes");
        crate::promptgen::sha256_hex(text.as_bytes())
    }

    pub fn load_corpus(&self) -> Result<Corpus, PipelineError> {
        let path = self
            .corpus
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no corpus given".into()))?;
        if !path.exists() {
            return Err(PipelineError::MissingInputs(vec![path.clone()]));
        }
        let corpus = load_corpus(path)?.filtered(&self.filter());
        if corpus.is_empty() {
            return Err(PipelineError::Config("no items match the corpus filter".into()));
        }
        Ok(corpus)
    }

    pub fn prompt_set(&self) -> Result<PromptSet, PipelineError> {
        let set = match &self.prompt_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::default(),
        };
        Ok(set.with_layout(self.layout))
    }

    pub fn identifier_strategy(&self) -> Result<IdentifierStrategy, PipelineError> {
        let pool = match &self.name_pool {
            Some(p) => NamePool::load(p)?,
            None => NamePool::default_pool(),
        };
        Ok(IdentifierStrategy::parse(&self.strategy, &pool)?)
    }
}

/// One config per sweep combination, each with its own output directory
/// and a seed of `seed XOR hash(run index)`. Without a sweep, the config
/// itself.
pub fn expand_sweep(config: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let Some(sweep) = &config.sweep else {
        return vec![config.clone()];
    };
    let ns = if sweep.n.is_empty() {
        vec![config.n]
    } else {
        sweep.n.clone()
    };
    let strategies = if sweep.strategies.is_empty() {
        vec![config.strategy.clone()]
    } else {
        sweep.strategies.clone()
    };
    let mut runs = Vec::new();
    for n in &ns {
        for s in &strategies {
            let i = runs.len();
            let mut c = config.clone();
            c.sweep = None;
            c.n = *n;
            c.strategy = s.clone();
            c.seed = config.seed ^ fnv1a64(format!("run-{i}").as_bytes());
            let label: String = s
                .chars()
                .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '-' })
                .collect();
            c.out = config.out.join(format!("run-{i:03}-n{n}-{label}"));
            runs.push(c);
        }
    }
    runs
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub prompts_sent: u64,
    pub retries: u64,
    pub records_total: usize,
    pub records_new: usize,
    pub failed_requests: usize,
    pub parse_failures: usize,
    pub parse_recovered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub mode: Mode,
    pub config_hash: String,
    pub seed: u64,
    pub fixture_hashes: BTreeMap<String, String>,
    pub gateway: GatewayConfig,
    pub model: String,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub complete: bool,
    pub counts: RunCounts,
    pub outputs: Vec<String>,
}

/// Item success rates tagged with where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesFile {
    pub config_hash: String,
    pub model: String,
    pub source: String,
    pub rates: BTreeMap<String, f64>,
    pub excluded: Vec<String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline, written via a temporary file.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Which model answers the prompts.
#[derive(Debug, Clone)]
pub enum Backend {
    Http,
    Mock(MockStudentModel),
}

impl Backend {
    /// The mock described by `config.mock`, or HTTP when there is none.
    pub fn from_config(config: &ExperimentConfig, corpus: &Corpus) -> Backend {
        match &config.mock {
            None => Backend::Http,
            Some(m) => Backend::Mock(
                MockStudentModel::from_corpus(corpus, m.seed.unwrap_or(config.seed))
                    .with_name(m.name.clone())
                    .with_abilities(m.abilities)
                    .with_difficulties(&m.difficulties)
                    .with_distractors(m.distractors)
                    .with_expert(m.expert)
                    .with_direct(m.direct),
            ),
        }
    }

    fn gateway(self, run: &ExperimentConfig, roster: &[StudentProfile]) -> Result<Gateway, PipelineError> {
        let gateway = match self {
            Backend::Http => Gateway::http(run.gateway.clone())?,
            Backend::Mock(m) => Gateway::new(run.gateway.clone(), Arc::new(m.with_roster(roster)))?,
        };
        Ok(if run.capture {
            gateway.with_capture(&run.out.join(CAPTURE_FILE))?
        } else {
            gateway
        })
    }
}

fn manifest(
    config: &ExperimentConfig,
    prompts: &PromptSet,
    gateway: &Gateway,
    started_at_ms: u64,
    complete: bool,
    counts: RunCounts,
    outputs: &[&str],
) -> RunManifest {
    RunManifest {
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        mode: config.mode,
        config_hash: config.hash(),
        seed: config.seed,
        fixture_hashes: prompts.fixture_hashes(),
        gateway: gateway.config().clone(),
        model: gateway.model_name().to_string(),
        started_at_ms,
        finished_at_ms: now_ms(),
        complete,
        counts,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
}

/// One classroom per grade in the corpus. Grades are simulated with
/// separate students so student indices are offset by `n` per grade.
pub fn build_classrooms(config: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<StudentProfile>, PipelineError> {
    let strategy = config.identifier_strategy()?;
    let mut all = Vec::new();
    for (g, grade) in corpus.grades().into_iter().enumerate() {
        let seed = derive_seed(config.seed, &format!("grade-{}", grade.number()));
        let mut students = sample_classroom(config.n, grade, &config.skill_distribution, &strategy, seed)?;
        for s in &mut students {
            s.student_index += g * config.n;
        }
        all.extend(students);
    }
    Ok(all)
}

/// Canonical request order: students in classroom order, then the items
/// of the student's grade in corpus order, then replicates.
fn simulation_tasks(classroom: &[StudentProfile], corpus: &Corpus, replicates: u32) -> Vec<(usize, usize, u32)> {
    let mut by_grade: HashMap<Grade, Vec<usize>> = HashMap::new();
    for (i, item) in corpus.items().iter().enumerate() {
        by_grade.entry(item.grade).or_default().push(i);
    }
    let mut tasks = Vec::new();
    for (s, profile) in classroom.iter().enumerate() {
        for &i in by_grade.get(&profile.grade).map(Vec::as_slice).unwrap_or(&[]) {
            for r in 0..replicates {
                tasks.push((s, i, r));
            }
        }
    }
    tasks
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub out: PathBuf,
    pub classroom: Vec<StudentProfile>,
    pub responses: Vec<SimulatedResponse>,
    pub matrix: ResponseMatrix,
    pub rates: BTreeMap<String, f64>,
    pub manifest: RunManifest,
}

pub fn run_simulation(config: &ExperimentConfig) -> Result<SimulationOutput, PipelineError> {
    let corpus = config.load_corpus()?;
    let backend = Backend::from_config(config, &corpus);
    run_simulation_with(config, backend)
}

/// Simulate every (student, item, replicate) of the run. Completed keys
/// already in the response log are skipped, so an interrupted run picks
/// up where it stopped and finishes with the same log.
pub fn run_simulation_with(config: &ExperimentConfig, backend: Backend) -> Result<SimulationOutput, PipelineError> {
    config.validate()?;
    let started = now_ms();
    let corpus = config.load_corpus()?;
    let prompts = config.prompt_set()?;
    let classroom = build_classrooms(config, &corpus)?;
    let out = &config.out;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let classroom_path = out.join(CLASSROOM_FILE);
    if classroom_path.exists() {
        let existing: Vec<StudentProfile> = read_json(&classroom_path)?;
        if existing != classroom {
            return Err(PipelineError::Config(format!(
                "{} holds a different classroom; use a fresh output directory",
                out.display()
            )));
        }
    }
    write_json(&out.join(CONFIG_FILE), config)?;
    write_json(&classroom_path, &classroom)?;

    let gateway = backend.gateway(config, &classroom)?;
    let tasks = simulation_tasks(&classroom, &corpus, config.replicates);
    let (log, mut records) = JsonlLog::<SimulatedResponse>::open(&out.join(RESPONSES_FILE))?;
    let expected: HashSet<(String, usize, u32)> = tasks
        .iter()
        .map(|&(s, i, r)| (corpus.items()[i].item_id.clone(), classroom[s].student_index, r))
        .collect();
    let mut done = HashSet::new();
    for rec in &records {
        let key = rec.key();
        if !expected.contains(&key) {
            return Err(PipelineError::Config(format!(
                "response log has key {key:?} outside this configuration; use a fresh output directory"
            )));
        }
        done.insert(key);
    }
    let mut pending: Vec<(usize, usize, u32)> = tasks
        .into_iter()
        .filter(|&(s, i, r)| !done.contains(&(corpus.items()[i].item_id.clone(), classroom[s].student_index, r)))
        .collect();
    let interrupted = config.stop_after.is_some_and(|k| k < pending.len());
    if let Some(k) = config.stop_after {
        pending.truncate(k);
    }

    let mut failures = Vec::new();
    let mut new_records = 0;
    for chunk in pending.chunks(config.chunk_size) {
        let batch = chunk
            .iter()
            .map(|&(s, i, r)| {
                let item = &corpus.items()[i];
                let profile = &classroom[s];
                let prompt = render_prompt(PromptKind::StudentRolePlay, item, Some(profile), &prompts)?;
                Ok((RequestKey::new(&item.item_id, Some(profile.student_index), r), prompt))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let results = gateway.complete_batch(&batch, false)?;
        let mut fresh = Vec::with_capacity(results.len());
        for ((_, result), &(s, i, r)) in results.into_iter().zip(chunk) {
            match result {
                Ok(rec) => fresh.push(SimulatedResponse::from_raw(
                    &corpus.items()[i],
                    &classroom[s],
                    r,
                    rec.raw,
                )),
                Err(e) => failures.push(e.to_string()),
            }
        }
        log.append(&fresh)?;
        new_records += fresh.len();
        records.extend(fresh);
    }

    let matrix = build_matrix(&records, &classroom, &corpus)?;
    let rates = simulated_success_rates(&matrix);
    write_text(&out.join(MATRIX_FILE), &matrix_csv(&matrix))?;
    write_json(
        &out.join(SUCCESS_RATES_FILE),
        &RatesFile {
            config_hash: config.hash(),
            model: gateway.model_name().to_string(),
            source: "simulated".into(),
            rates: rates.rates.clone(),
            excluded: rates.excluded.clone(),
        },
    )?;
    let parse = ParseSummary::from_responses(&records);
    let stats = gateway.stats();
    let counts = RunCounts {
        prompts_sent: stats.requests,
        retries: stats.retries,
        records_total: records.len(),
        records_new: new_records,
        failed_requests: failures.len(),
        parse_failures: parse.failed,
        parse_recovered: parse.recovered,
    };
    let complete = failures.is_empty() && !interrupted;
    let manifest = manifest(
        config,
        &prompts,
        &gateway,
        started,
        complete,
        counts,
        &[
            CONFIG_FILE,
            CLASSROOM_FILE,
            RESPONSES_FILE,
            MATRIX_FILE,
            SUCCESS_RATES_FILE,
        ],
    );
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    if let Some(first) = failures.first() {
        return Err(PipelineError::Incomplete {
            failed: failures.len(),
            first: first.clone(),
        });
    }
    Ok(SimulationOutput {
        out: out.clone(),
        classroom,
        responses: records,
        matrix,
        rates: rates.rates,
        manifest,
    })
}

/// Rows are students (index, skill), columns items; cells 1, 0 or empty.
pub fn matrix_csv(matrix: &ResponseMatrix) -> String {
    let mut s = String::from("student_index,skill");
    for id in &matrix.items {
        s.push(',');
        s.push_str(&csv_field(id));
    }
    s.push('\n');
    for (r, (idx, skill)) in matrix.students.iter().enumerate() {
        let _ = write!(s, "{idx},{}", skill.display_name());
        for c in 0..matrix.n_items() {
            s.push(',');
            match matrix.cell(r, c) {
                Some(true) => s.push('1'),
                Some(false) => s.push('0'),
                None => {}
            }
        }
        s.push('\n');
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct DpceOutput {
    pub estimates: Vec<DirectEstimate>,
    pub rates: BTreeMap<String, f64>,
    /// Items where no sample gave a parseable percentage.
    pub unparsed: Vec<String>,
    pub manifest: RunManifest,
}

pub fn run_dpce(config: &ExperimentConfig) -> Result<DpceOutput, PipelineError> {
    let corpus = config.load_corpus()?;
    let backend = Backend::from_config(config, &corpus);
    run_dpce_with(config, backend)
}

/// Direct percent-correct estimates, one record per item.
pub fn run_dpce_with(config: &ExperimentConfig, backend: Backend) -> Result<DpceOutput, PipelineError> {
    let variant = match config.mode {
        Mode::DpceGreedy => DirectVariant::Greedy,
        Mode::DpceAveraged => DirectVariant::Averaged,
        other => {
            return Err(PipelineError::Config(format!(
                "direct estimates need mode dpce-greedy or dpce-averaged, not {other:?}"
            )))
        }
    };
    config.validate()?;
    let started = now_ms();
    let corpus = config.load_corpus()?;
    let prompts = config.prompt_set()?;
    let out = &config.out;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join(CONFIG_FILE), config)?;
    let gateway = backend.gateway(config, &[])?.with_temperature(variant.temperature());
    let samples = config.dpce_samples.unwrap_or(variant.default_samples()).max(1);

    let (log, mut estimates) = JsonlLog::<DirectEstimate>::open(&out.join(DPCE_FILE))?;
    let done: HashSet<String> = estimates.iter().map(|e| e.item_id.clone()).collect();
    let mut failures = Vec::new();
    for item in corpus.items().iter().filter(|it| !done.contains(&it.item_id)) {
        let prompt = render_prompt(PromptKind::DirectPercentage, item, None, &prompts)?;
        let batch: Vec<_> = (0..samples as u32)
            .map(|r| (RequestKey::new(&item.item_id, None, r), prompt.clone()))
            .collect();
        let mut raw = Vec::with_capacity(samples);
        for (_, result) in gateway.complete_batch(&batch, false)? {
            match result {
                Ok(rec) => raw.push(rec.raw),
                Err(e) => failures.push(e.to_string()),
            }
        }
        if raw.len() == samples {
            let est = DirectEstimate::from_raw(&item.item_id, variant, raw);
            log.append(std::slice::from_ref(&est))?;
            estimates.push(est);
        }
    }
    let order: HashMap<&str, usize> = corpus
        .items()
        .iter()
        .enumerate()
        .map(|(i, it)| (it.item_id.as_str(), i))
        .collect();
    estimates.sort_by_key(|e| order.get(e.item_id.as_str()).copied().unwrap_or(usize::MAX));
    let rates: BTreeMap<String, f64> = estimates
        .iter()
        .filter_map(|e| Some((e.item_id.clone(), e.predicted_percent?)))
        .collect();
    let unparsed: Vec<String> = estimates
        .iter()
        .filter(|e| e.predicted_percent.is_none())
        .map(|e| e.item_id.clone())
        .collect();
    write_json(
        &out.join(DPCE_RATES_FILE),
        &RatesFile {
            config_hash: config.hash(),
            model: gateway.model_name().to_string(),
            source: format!("direct-{variant:?}").to_lowercase(),
            rates: rates.clone(),
            excluded: unparsed.clone(),
        },
    )?;
    let stats = gateway.stats();
    let counts = RunCounts {
        prompts_sent: stats.requests,
        retries: stats.retries,
        records_total: estimates.len(),
        records_new: estimates.len() - done.len(),
        failed_requests: failures.len(),
        parse_failures: estimates
            .iter()
            .flat_map(|e| &e.samples)
            .filter(|s| s.is_none())
            .count(),
        parse_recovered: 0,
    };
    let manifest = manifest(
        config,
        &prompts,
        &gateway,
        started,
        failures.is_empty(),
        counts,
        &[CONFIG_FILE, DPCE_FILE, DPCE_RATES_FILE],
    );
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    if let Some(first) = failures.first() {
        return Err(PipelineError::Incomplete {
            failed: failures.len(),
            first: first.clone(),
        });
    }
    Ok(DpceOutput {
        estimates,
        rates,
        unparsed,
        manifest,
    })
}

/// One expert-solver answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub item_id: String,
    pub grade: Grade,
    pub raw: String,
    pub chosen: Option<Letter>,
    pub correct: bool,
    pub parse_status: ParseStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub config_hash: String,
    pub model: String,
    pub overall: Accuracy,
    pub per_grade: BTreeMap<String, Accuracy>,
    pub parse_failures: usize,
    pub manifest: String,
}

fn accuracy<'a>(records: impl Iterator<Item = &'a BaselineRecord>) -> Accuracy {
    let (mut yes, mut n) = (0, 0);
    for r in records {
        n += 1;
        yes += usize::from(r.correct);
    }
    Accuracy {
        accuracy: if n == 0 { 0.0 } else { yes as f64 / n as f64 },
        n_items: n,
    }
}

pub fn run_knowledge_baseline(config: &ExperimentConfig) -> Result<BaselineReport, PipelineError> {
    let corpus = config.load_corpus()?;
    let backend = Backend::from_config(config, &corpus);
    run_knowledge_baseline_with(config, backend)
}

/// Ask the model to solve every item as an expert and score it.
pub fn run_knowledge_baseline_with(
    config: &ExperimentConfig,
    backend: Backend,
) -> Result<BaselineReport, PipelineError> {
    config.validate()?;
    let started = now_ms();
    let corpus = config.load_corpus()?;
    let prompts = config.prompt_set()?;
    let out = &config.out;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join(CONFIG_FILE), config)?;
    let gateway = backend
        .gateway(config, &[])?
        .with_temperature(config.baseline_temperature);

    let (log, mut records) = JsonlLog::<BaselineRecord>::open(&out.join(BASELINE_FILE))?;
    let done: HashSet<String> = records.iter().map(|r| r.item_id.clone()).collect();
    let pending: Vec<_> = corpus.items().iter().filter(|it| !done.contains(&it.item_id)).collect();
    let mut failures = Vec::new();
    for chunk in pending.chunks(config.chunk_size) {
        let batch = chunk
            .iter()
            .map(|it| {
                Ok((
                    RequestKey::new(&it.item_id, None, 0),
                    render_prompt(PromptKind::KnowledgeBaseline, it, None, &prompts)?,
                ))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let mut fresh = Vec::new();
        for ((_, result), item) in gateway.complete_batch(&batch, false)?.into_iter().zip(chunk) {
            match result {
                Ok(rec) => {
                    let (chosen, parse_status) = parse_answer(&rec.raw, item);
                    fresh.push(BaselineRecord {
                        item_id: item.item_id.clone(),
                        grade: item.grade,
                        raw: rec.raw,
                        correct: chosen == Some(item.correct_key),
                        chosen,
                        parse_status,
                    });
                }
                Err(e) => failures.push(e.to_string()),
            }
        }
        log.append(&fresh)?;
        records.extend(fresh);
    }
    let mut per_grade = BTreeMap::new();
    for grade in corpus.grades() {
        per_grade.insert(
            grade.number().to_string(),
            accuracy(records.iter().filter(|r| r.grade == grade)),
        );
    }
    let report = BaselineReport {
        config_hash: config.hash(),
        model: gateway.model_name().to_string(),
        overall: accuracy(records.iter()),
        per_grade,
        parse_failures: records.iter().filter(|r| r.parse_status == ParseStatus::Failed).count(),
        manifest: MANIFEST_FILE.into(),
    };
    write_json(&out.join(BASELINE_REPORT_FILE), &report)?;
    let stats = gateway.stats();
    let counts = RunCounts {
        prompts_sent: stats.requests,
        retries: stats.retries,
        records_total: records.len(),
        records_new: records.len() - done.len(),
        failed_requests: failures.len(),
        parse_failures: report.parse_failures,
        parse_recovered: records
            .iter()
            .filter(|r| r.parse_status == ParseStatus::Recovered)
            .count(),
    };
    write_json(
        &out.join(MANIFEST_FILE),
        &manifest(
            config,
            &prompts,
            &gateway,
            started,
            failures.is_empty(),
            counts,
            &[CONFIG_FILE, BASELINE_FILE, BASELINE_REPORT_FILE],
        ),
    )?;
    if let Some(first) = failures.first() {
        return Err(PipelineError::Incomplete {
            failed: failures.len(),
            first: first.clone(),
        });
    }
    Ok(report)
}

/// A metric value, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defined<T> {
    Value(T),
    Undefined(String),
}

impl<T> Defined<T> {
    pub fn value(&self) -> Option<&T> {
        match self {
            Defined::Value(v) => Some(v),
            Defined::Undefined(_) => None,
        }
    }

    fn from_result<E: ToString>(r: Result<T, E>) -> Self {
        match r {
            Ok(v) => Defined::Value(v),
            Err(e) => Defined::Undefined(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub pearson: Correlation,
    pub spearman: Correlation,
}

fn correlate(predicted: &BTreeMap<String, f64>, real: &BTreeMap<String, f64>) -> Defined<CorrelationPair> {
    Defined::from_result(PairedSeries::align(predicted, real).and_then(|s| {
        Ok(CorrelationPair {
            pearson: pearson(&s)?,
            spearman: spearman(&s)?,
        })
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub beta: BTreeMap<SkillLevel, f64>,
    pub monotone: bool,
    pub converged: bool,
    pub iterations: usize,
    pub max_gradient: f64,
    pub log_likelihood: f64,
    pub lambda: f64,
    pub excluded_items: Vec<String>,
}

impl From<&RaschFit> for FitSummary {
    fn from(fit: &RaschFit) -> Self {
        FitSummary {
            beta: fit.beta.clone(),
            monotone: group_ability_profile(fit).monotone,
            converged: fit.converged,
            iterations: fit.iterations,
            max_gradient: fit.max_gradient,
            log_likelihood: fit.log_likelihood,
            lambda: fit.regularization,
            excluded_items: fit.excluded_items.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeReport {
    pub grade: Grade,
    pub n_items: usize,
    pub n_students: usize,
    pub parse: ParseSummary,
    /// Simulated success rate against real percent correct.
    pub success_vs_real: Defined<CorrelationPair>,
    pub fit: Defined<FitSummary>,
    /// Fitted difficulty against real percent correct; expected negative.
    pub difficulty_vs_real: Defined<CorrelationPair>,
    pub auc_easy_vs_hard: Defined<f64>,
    pub auc_hard_vs_rest: Defined<f64>,
    pub skill_correctness: SkillCorrectness,
    pub distractors: DistractorReport,
    pub subgroups: SubgroupReport,
    pub content_areas: BTreeMap<String, Defined<CorrelationPair>>,
    pub predicted: BTreeMap<String, f64>,
    pub difficulties: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub model: String,
    pub strategy: String,
    pub n: usize,
    pub seed: u64,
    pub temperature: f64,
    pub replicates: u32,
    pub auc_mode: AucMode,
    pub manifest: String,
    pub grades: Vec<GradeReport>,
}

type CsvRow<'a> = dyn FnMut(Grade, &str, &str, Option<f64>) + 'a;

impl EvaluationReport {
    /// The headline figures as `grade,section,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("grade,section,metric,value\n");
        let mut row = |g: Grade, section: &str, metric: &str, v: Option<f64>| {
            let value = v.map(|x| format!("{x}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", g.number(), csv_field(section), metric, value);
        };
        for g in &self.grades {
            let pair = |row: &mut CsvRow, section: &str, c: &Defined<CorrelationPair>| {
                let c = c.value();
                row(g.grade, section, "pearson_r", c.map(|c| c.pearson.r));
                row(g.grade, section, "pearson_p", c.map(|c| c.pearson.p));
                row(g.grade, section, "spearman_rho", c.map(|c| c.spearman.r));
                row(g.grade, section, "spearman_p", c.map(|c| c.spearman.p));
                row(g.grade, section, "n", c.map(|c| c.pearson.n as f64));
            };
            pair(&mut row, "success_vs_real", &g.success_vs_real);
            pair(&mut row, "difficulty_vs_real", &g.difficulty_vs_real);
            row(g.grade, "auc", "easy_vs_hard", g.auc_easy_vs_hard.value().copied());
            row(g.grade, "auc", "hard_vs_rest", g.auc_hard_vs_rest.value().copied());
            if let Some(fit) = g.fit.value() {
                for (level, b) in &fit.beta {
                    row(g.grade, "beta", level.display_name(), Some(*b));
                }
            }
            for (level, m) in &g.skill_correctness.means {
                row(g.grade, "skill_correctness", level.display_name(), Some(*m));
            }
            row(g.grade, "distractors", "match_rate", g.distractors.match_rate);
            row(
                g.grade,
                "distractors",
                "chance_wrong_choices",
                g.distractors.chance_wrong_choices,
            );
            row(
                g.grade,
                "distractors",
                "chance_all_choices",
                g.distractors.chance_all_choices,
            );
            for (name, c) in &g.subgroups.results {
                row(g.grade, &format!("subgroup:{name}"), "pearson_r", Some(c.pearson.r));
                row(g.grade, &format!("subgroup:{name}"), "spearman_rho", Some(c.spearman.r));
            }
            for (area, c) in &g.content_areas {
                pair(&mut row, &format!("content:{area}"), c);
            }
        }
        s
    }

    /// Plain-text summary for terminals.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {}  strategy {}  n {}  seed {}  temperature {}  replicates {}",
            self.model, self.strategy, self.n, self.seed, self.temperature, self.replicates
        );
        let fmt_pair = |c: &Defined<CorrelationPair>| match c {
            Defined::Value(c) => format!(
                "r = {:.3} (p = {:.2e}), rho = {:.3} (p = {:.2e}), n = {}",
                c.pearson.r, c.pearson.p, c.spearman.r, c.spearman.p, c.pearson.n
            ),
            Defined::Undefined(why) => format!("undefined ({why})"),
        };
        let fmt_auc = |a: &Defined<f64>| match a {
            Defined::Value(v) => format!("{v:.3}"),
            Defined::Undefined(why) => format!("undefined ({why})"),
        };
        for g in &self.grades {
            let _ = writeln!(
                s,
                "\ngrade {}: {} items, {} students",
                g.grade.number(),
                g.n_items,
                g.n_students
            );
            let _ = writeln!(s, "  success vs real:    {}", fmt_pair(&g.success_vs_real));
            let _ = writeln!(s, "  difficulty vs real: {}", fmt_pair(&g.difficulty_vs_real));
            let _ = writeln!(
                s,
                "  AUC easy/hard {}  hard/rest {}",
                fmt_auc(&g.auc_easy_vs_hard),
                fmt_auc(&g.auc_hard_vs_rest)
            );
            match &g.fit {
                Defined::Value(f) => {
                    let betas: Vec<String> = f
                        .beta
                        .iter()
                        .map(|(l, b)| format!("{} {:+.3}", l.display_name(), b))
                        .collect();
                    let _ = writeln!(
                        s,
                        "  abilities: {}  (monotone {}, converged {} in {} iterations)",
                        betas.join(", "),
                        f.monotone,
                        f.converged,
                        f.iterations
                    );
                }
                Defined::Undefined(why) => {
                    let _ = writeln!(s, "  fit skipped: {why}");
                }
            }
            let means: Vec<String> = g
                .skill_correctness
                .means
                .iter()
                .map(|(l, m)| format!("{} {:.3}", l.display_name(), m))
                .collect();
            let _ = writeln!(s, "  correctness by skill: {}", means.join(", "));
            if let Some(rate) = g.distractors.match_rate {
                let _ = writeln!(
                    s,
                    "  distractor match {:.3} over {} items (chance {:.3} among wrong answers, {:.3} among all)",
                    rate,
                    g.distractors.n_items,
                    g.distractors.chance_wrong_choices.unwrap_or(f64::NAN),
                    g.distractors.chance_all_choices.unwrap_or(f64::NAN)
                );
            }
            for (name, c) in &g.subgroups.results {
                let _ = writeln!(
                    s,
                    "  subgroup {name}: r = {:.3}, rho = {:.3}",
                    c.pearson.r, c.spearman.r
                );
            }
            for (area, c) in &g.content_areas {
                let _ = writeln!(s, "  {area}: {}", fmt_pair(c));
            }
            let _ = writeln!(
                s,
                "  parse: {} ok, {} recovered, {} failed",
                g.parse.ok, g.parse.recovered, g.parse.failed
            );
        }
        s
    }
}

/// Build the report for one simulation run directory. `corpus` overrides
/// the corpus path recorded in the run's config.
pub fn evaluate_run(
    run_dir: &Path,
    corpus: Option<&Path>,
    options: &EvaluateOptions,
) -> Result<EvaluationReport, PipelineError> {
    let required = [CONFIG_FILE, CLASSROOM_FILE, RESPONSES_FILE];
    let missing: Vec<PathBuf> = required
        .iter()
        .map(|f| run_dir.join(f))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingInputs(missing));
    }
    let mut config: ExperimentConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    if let Some(c) = corpus {
        config.corpus = Some(c.to_path_buf());
    }
    let corpus = config.load_corpus()?;
    let classroom: Vec<StudentProfile> = read_json(&run_dir.join(CLASSROOM_FILE))?;
    let responses: Vec<SimulatedResponse> = JsonlLog::read_all(&run_dir.join(RESPONSES_FILE))?;
    let model = read_json::<RunManifest>(&run_dir.join(MANIFEST_FILE))
        .map(|m| m.model)
        .unwrap_or_else(|_| "unknown".into());

    let mut grades = Vec::new();
    for grade in corpus.grades() {
        let sub = corpus.filtered(&CorpusFilter {
            grade: Some(grade),
            ..Default::default()
        });
        let ids: HashSet<&str> = sub.items().iter().map(|i| i.item_id.as_str()).collect();
        let students: Vec<StudentProfile> = classroom.iter().filter(|p| p.grade == grade).cloned().collect();
        let resp: Vec<SimulatedResponse> = responses
            .iter()
            .filter(|r| ids.contains(r.item_id.as_str()))
            .cloned()
            .collect();
        grades.push(evaluate_grade(grade, &sub, &students, &resp, options)?);
    }
    Ok(EvaluationReport {
        config_hash: config.hash(),
        model,
        strategy: config.strategy.clone(),
        n: config.n,
        seed: config.seed,
        temperature: config.gateway.temperature,
        replicates: config.replicates,
        auc_mode: options.auc_mode,
        manifest: MANIFEST_FILE.into(),
        grades,
    })
}

fn evaluate_grade(
    grade: Grade,
    corpus: &Corpus,
    classroom: &[StudentProfile],
    responses: &[SimulatedResponse],
    options: &EvaluateOptions,
) -> Result<GradeReport, PipelineError> {
    let matrix = build_matrix(responses, classroom, corpus)?;
    let predicted = simulated_success_rates(&matrix).rates;
    let real: BTreeMap<String, f64> = corpus
        .items()
        .iter()
        .map(|i| (i.item_id.clone(), i.real_percent_correct))
        .collect();
    let fit = fit_rasch(&matrix, &options.fit);
    let difficulties = fit.as_ref().map(|f| f.delta.clone()).unwrap_or_default();
    let (difficulty_vs_real, auc_easy_vs_hard, auc_hard_vs_rest) = match &fit {
        Ok(_) => (
            correlate(&difficulties, &real),
            Defined::from_result(auc_difficulty(&difficulties, &auc_labels(corpus, AucMode::EasyVsHard))),
            Defined::from_result(auc_difficulty(&difficulties, &auc_labels(corpus, AucMode::HardVsRest))),
        ),
        Err(e) => {
            let why = format!("no fit: {e}");
            (
                Defined::Undefined(why.clone()),
                Defined::Undefined(why.clone()),
                Defined::Undefined(why),
            )
        }
    };
    let mut content_areas = BTreeMap::new();
    for area in corpus
        .items()
        .iter()
        .map(|i| i.content_area)
        .collect::<std::collections::BTreeSet<_>>()
    {
        let ids: Vec<&String> = corpus
            .items()
            .iter()
            .filter(|i| i.content_area == area)
            .map(|i| &i.item_id)
            .collect();
        let pick = |m: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
            ids.iter()
                .filter_map(|id| Some(((*id).clone(), *m.get(*id)?)))
                .collect()
        };
        content_areas.insert(area.as_str().to_string(), correlate(&pick(&predicted), &pick(&real)));
    }
    let subgroups = options
        .subgroups
        .iter()
        .map(|g| (g.clone(), subgroup_series(&matrix, classroom, corpus, g)))
        .collect();
    Ok(GradeReport {
        grade,
        n_items: corpus.len(),
        n_students: classroom.len(),
        parse: ParseSummary::from_responses(responses),
        success_vs_real: correlate(&predicted, &real),
        fit: Defined::from_result(fit.as_ref().map(FitSummary::from).map_err(|e| e.to_string())),
        difficulty_vs_real,
        auc_easy_vs_hard,
        auc_hard_vs_rest,
        skill_correctness: skill_correctness(&matrix),
        distractors: distractor_match(&incorrect_choice_counts(responses), corpus),
        subgroups: subgroup_correlation(&subgroups),
        content_areas,
        predicted,
        difficulties,
    })
}

/// Evaluate a run and write `report.json` and `report.csv` into `out`.
pub fn run_evaluate(
    run_dir: &Path,
    corpus: Option<&Path>,
    options: &EvaluateOptions,
    out: &Path,
) -> Result<EvaluationReport, PipelineError> {
    let report = evaluate_run(run_dir, corpus, options)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_text(&out.join(REPORT_CSV_FILE), &report.to_csv())?;
    Ok(report)
}

/// Fit a run's response matrix per grade without the rest of the report.
pub fn run_fit(
    run_dir: &Path,
    corpus: Option<&Path>,
    config: &FitConfig,
) -> Result<BTreeMap<String, RaschFit>, PipelineError> {
    let options = EvaluateOptions {
        fit: *config,
        ..Default::default()
    };
    let mut cfg: ExperimentConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    if let Some(c) = corpus {
        cfg.corpus = Some(c.to_path_buf());
    }
    let corpus = cfg.load_corpus()?;
    let classroom: Vec<StudentProfile> = read_json(&run_dir.join(CLASSROOM_FILE))?;
    let responses: Vec<SimulatedResponse> = JsonlLog::read_all(&run_dir.join(RESPONSES_FILE))?;
    let matrix = build_matrix(&responses, &classroom, &corpus)?;
    let mut fits = BTreeMap::new();
    for grade in corpus.grades() {
        let ids: HashSet<&str> = corpus
            .items()
            .iter()
            .filter(|i| i.grade == grade)
            .map(|i| i.item_id.as_str())
            .collect();
        let rows: HashSet<usize> = classroom
            .iter()
            .filter(|p| p.grade == grade)
            .map(|p| p.student_index)
            .collect();
        let sub = matrix.select_items(&ids).select_rows(|idx, _| rows.contains(&idx));
        fits.insert(grade.number().to_string(), fit_rasch(&sub, &options.fit)?);
    }
    write_json(&run_dir.join("fit.json"), &fits)?;
    Ok(fits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub weights: BTreeMap<String, f64>,
    pub rates: BTreeMap<String, f64>,
    /// Correlation of each member and of the ensemble with the real
    /// percent correct, when a corpus is given.
    pub members_vs_real: BTreeMap<String, Defined<CorrelationPair>>,
    pub ensemble_vs_real: Option<Defined<CorrelationPair>>,
}

/// Combine rates files (`success_rates.json` or `dpce_rates.json`).
/// Missing weights default to 1.
pub fn run_ensemble(
    inputs: &[(String, PathBuf)],
    weights: &BTreeMap<String, f64>,
    corpus: Option<&Path>,
    out: &Path,
) -> Result<EnsembleReport, PipelineError> {
    let missing: Vec<PathBuf> = inputs.iter().map(|(_, p)| p.clone()).filter(|p| !p.exists()).collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingInputs(missing));
    }
    let mut rates = BTreeMap::new();
    for (name, path) in inputs {
        let file: RatesFile = read_json(path)?;
        if rates.insert(name.clone(), file.rates).is_some() {
            return Err(PipelineError::Config(format!("ensemble member {name} given twice")));
        }
    }
    let weights: BTreeMap<String, f64> = rates
        .keys()
        .map(|k| (k.clone(), weights.get(k).copied().unwrap_or(1.0)))
        .collect();
    let combined = ensemble(&rates, &weights)?;
    let real = match corpus {
        Some(p) => Some(
            load_corpus(p)?
                .items()
                .iter()
                .map(|i| (i.item_id.clone(), i.real_percent_correct))
                .collect::<BTreeMap<_, _>>(),
        ),
        None => None,
    };
    let members_vs_real = match &real {
        Some(real) => rates.iter().map(|(k, r)| (k.clone(), correlate(r, real))).collect(),
        None => BTreeMap::new(),
    };
    let report = EnsembleReport {
        weights,
        ensemble_vs_real: real.as_ref().map(|r| correlate(&combined, r)),
        rates: combined,
        members_vs_real,
    };
    write_json(&out.join(ENSEMBLE_FILE), &report)?;
    Ok(report)
}
