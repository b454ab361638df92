//! Edit-oriented speculative decoding.
//!
//! Code edits mostly copy their input. This crate decodes an edit by first
//! offering the original code to the target model as a draft (one forward
//! pass verifies an arbitrarily long stretch of it) and only falling back to
//! draft-model speculation at the places the target diverges. See
//! [`controller::run_edit_session`] for the entry point.

pub mod bench;
pub mod controller;
pub mod counters;
pub mod dist;
pub mod error;
pub mod generate;
pub mod model;
pub mod reuse;
pub mod selfcheck;
pub mod synth;
pub mod task;
pub mod traindata;

pub use controller::{run_edit_session, run_edit_tokens, ControllerConfig, EditResult, Phase};
pub use counters::RunCounters;
pub use dist::{ProbDist, TokenId, TokenSeq};
pub use error::{Error, Result};
pub use generate::{EpsilonMode, Strategy, VerifierConfig};
pub use model::{autoregressive_decode, ByteTokenizer, Model, Session, TableModel, Tokenizer};
pub use task::EditTask;
