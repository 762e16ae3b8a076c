//! Agentic reinforcement-learning harness.
//!
//! A small feature-hashed softmax policy stands in for a language model so
//! every quantity in the pipeline is exactly computable: multi-turn
//! tool-calling rollouts against rule-based sandboxes, a GRPO objective with
//! asymmetric clipping and truncated importance sampling, outcome and
//! turn-level rewards, an asynchronous rollout/train orchestrator, SCE
//! checkpoint merging and test-time candidate selection.

pub mod grpo;
pub mod io;
pub mod merge;
pub mod model;
pub mod orchestrator;
pub mod policy;
pub mod registry;
pub mod rewards;
pub mod sandbox;
pub mod tts;
pub mod value;
pub mod vocab;

pub use model::{Action, Observation, Step, ToolCall, Trajectory};
pub use registry::{ToolRegistry, ToolSpec};
pub use value::Value;
pub use vocab::Token;
