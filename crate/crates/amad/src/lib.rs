//! File formats, command line and threaded experiment harness for the AMAD
//! anomaly detector. The numerical core lives in `amad-core`.
//!
//! * [`series_csv`]: the series CSV contract (header row, optional `label`).
//! * [`container`]: versioned binary container for checkpoints and series.
//! * [`config`]: flat `key = value` run configuration with presets.
//! * [`manifest`]: per-run manifests with artifact hashes.
//! * [`reports`]: CSV outputs for logs, scores, metrics, grid and ablation.
//! * [`parallel`]: worker pool for independent grid and ablation cells.
//! * [`cli`]: the `amad` binary.

pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod manifest;
pub mod parallel;
pub mod reports;
pub mod series_csv;

pub use error::{CliError, Result};
