//! The `pag` command-line pipeline, the annotation backend and the
//! ablation harness shared by the CLI and the acceptance suite.

pub mod ablation;
pub mod cli;
pub mod pipeline;
pub mod service;
pub mod store;
