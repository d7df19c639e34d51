//! Command-line pipeline around `dto_core`: checkpoints, run configuration,
//! the `dto` subcommands and sweep reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

pub use checkpoint::{
    load_checkpoint, load_for_vocab, save_checkpoint, vocab_hash, CheckpointError,
    CheckpointMeta, Stage,
};
pub use commands::run_command;
pub use config::RunConfig;
pub use report::{sweep_report, SweepRow};
