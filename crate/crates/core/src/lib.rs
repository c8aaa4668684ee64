//! Learning corrective action plans for retrieval-augmented generation from
//! executed-plan preferences.
//!
//! A [`RagState`] (question, retrieved documents, initial answer and a coarse
//! correctness flag) is mapped to a [`Plan`] of retrieval and generation
//! operations. Plans are executed by the [`executor`], scored with token F1
//! against gold answers, turned into preference pairs and used to train a
//! featurized [`policy`] with the DPO objective in two phases: teacher
//! proposals under oracle correctness, then self-proposals under the judge's
//! estimate.

pub mod backend;
pub mod dpo;
pub mod dsl;
pub mod eval;
pub mod executor;
pub mod policy;
pub mod retrieval;
pub mod reward;
pub mod stats;
pub mod synthetic;
pub mod types;

pub use backend::{Backend, BackendError, GenRequest, Role, ScriptedBackend, ScriptedRule};
pub use dpo::{build_preferences, dpo_grad, dpo_loss, train_off_policy, train_on_policy, TrainConfig};
pub use dsl::{parse_plan, render_plan};
pub use executor::{ExecutionTrace, Executor, ExecutorConfig};
pub use policy::{PolicyParams, FEATURE_DIM};
pub use retrieval::{build_index, Corpus, InvertedIndex};
pub use reward::{max_f1, normalize, token_f1, Reward};
pub use types::{
    validate_state, Document, OpKind, Operation, Phase, Plan, PlanSource, PreferenceTriple, Question,
    RagState,
};
