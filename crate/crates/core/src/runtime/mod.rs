//! Managed-system data path: model repository, inference, post-processing
//! and the request processor.

pub mod executor;
pub mod inference;
pub mod repository;
pub mod switch_signal;
pub mod worker;

pub use executor::ExternalExecutor;
pub use inference::{compute_utility, infer, postprocess, request_rng, RawDetections};
pub use repository::{ActiveModel, PreparedModel, Repository, SwitchOutcome};
pub use switch_signal::{
    poll_switch_signal, read_switch_signal, write_switch_signal, SwitchSignalError,
};
pub use worker::{
    Backend, Completed, InFlight, MetricsSink, Processor, ResultStorage, WorkerSettings,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RuntimeError {
    #[error("model repository is empty")]
    EmptyRepository,
    #[error("too many models ({0})")]
    TooManyModels(usize),
    #[error("initial model {0:?} is not preloaded")]
    UnknownInitial(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("profile {id:?} cannot be sampled: {reason}")]
    InvalidProfile { id: String, reason: String },
    #[error("external executor: {0}")]
    Executor(String),
}
