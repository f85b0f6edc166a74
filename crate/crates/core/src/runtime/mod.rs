//! Client and server processes, the session state machine between them, and
//! the monolithic reference path.

pub mod report;
pub mod session;
pub mod state;
pub mod train;

pub use report::{write_report, Summary};
pub use session::{
    client_step_double, client_step_single, monolithic_step, run_client, server_session, ClientOptions,
    ClientOutcome, ServerConfig, ServerOutcome,
};
pub use state::{ParamSnapshot, SessionAbort, StepLog, TimingRecord, TrainState};
pub use train::{
    load_dataset, merge_server, run_monolithic, run_training, simulate_session, DataSource, SessionConfig,
    SessionRole, TrainingOutcome,
};
