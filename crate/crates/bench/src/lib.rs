//! Workloads, reports and the command-line driver for the sage object
//! store: STREAM over windows, a window-based hash table, particle
//! checkpointing and streamed I/O offload.

pub mod checkpoint;
pub mod config;
pub mod dht;
pub mod error;
pub mod kernels;
pub mod offload;
pub mod report;
pub mod results;
pub mod run;

pub use config::{BenchConfig, Workload};
pub use error::{BenchError, Result};
pub use report::{build_report, render, report_from_tsv, RunReport};
pub use run::{run, RunResults};
