//! Engine for turning multi-step natural-language task descriptions into
//! executable guest-language (Python) programs.
//!
//! The pieces, bottom-up:
//!
//! - [`model`]: tasks, steps, agent configuration, the suite file format.
//! - [`analysis`]: guest-code parsing, call-label extraction, undefined-name
//!   detection, error classification and fix hints.
//! - [`retriever`]: embedding index over library documents with metadata filters.
//! - [`llm`]: provider-agnostic completion gateway and the prompt templates.
//! - [`sandbox`]: child-process kernel sessions speaking a line-oriented protocol.
//! - [`mcts`]: p-UCB selection, execution-filtered expansion, look-ahead
//!   evaluation, max-backpropagation and tree surgery.
//! - [`run`]: event-sourced run state; [`refine`]: the per-step attempt loop
//!   with self-repair and human intervention.
//! - [`harness`]: benchmark evaluation and multilabel metrics.

pub mod analysis;
pub mod harness;
pub mod llm;
pub mod mcts;
pub mod model;
pub mod refine;
pub mod retriever;
pub mod run;
pub mod sandbox;

pub use analysis::{CallLabel, ErrorClass, ErrorKind, FixHint, FixHintKind};
pub use harness::{LabelSet, MetricsReport};
pub use llm::{Candidate, LlmGateway, LlmProvider, PromptTemplate, ScriptedProvider};
pub use mcts::{NodeId, NodeStatus, SearchNode, SearchTree};
pub use model::{AgentConfig, SolutionProgram, StepSpec, TaskKind, TaskSpec};
pub use refine::{Agent, Deps, HumanEdit, InterventionRequest, RunMode};
pub use retriever::{CorpusDoc, EmbeddingIndex, EmbeddingVector, Embedder, RetrievedItem};
pub use run::{EventPayload, RunEvent, RunState, RunStatus};
pub use sandbox::{ExecutionOutcome, GuestSession, RunnerConfig, SandboxFactory, Session};
