//! Estimate multiple-choice item difficulty by simulating classrooms of
//! students through a chat-completion model, fitting a group-level Rasch
//! model to the simulated answers and scoring the result against real
//! item statistics.

pub mod classroom;
pub mod corpus;
pub mod gateway;
pub mod irt;
pub mod metrics;
pub mod pipeline;
pub mod promptgen;
pub mod responses;
pub mod rng;

pub use classroom::{
    allocate_counts, sample_classroom, Demographics, IdentifierStrategy, NamePool, SkillDistribution, SkillLevel,
    StudentProfile,
};
pub use corpus::{filter_corpus, load_corpus, ContentArea, Corpus, CorpusFilter, DifficultyLabel, Grade, Item, Letter};
pub use gateway::{CompletionRecord, Gateway, GatewayConfig, MockStudentModel, RequestKey};
pub use irt::{fit_rasch, FitConfig, RaschFit};
pub use metrics::{auc_difficulty, pearson, spearman, PairedSeries};
pub use pipeline::{Backend, EvaluationReport, ExperimentConfig, Mode, RunManifest};
pub use promptgen::{render_prompt, PromptKind, PromptSet, RenderedPrompt};
pub use responses::{parse_answer, ParseStatus, ResponseMatrix, SimulatedResponse};
