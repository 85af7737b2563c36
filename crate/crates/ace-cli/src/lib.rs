//! IO, file formats, and experiment orchestration for the `ace` command-line
//! tool, layered on the `ace-core` library.
//!
//! - [`dataset_io`]: the on-disk dataset directory format
//!   (`manifest.json`, `images.bin`, `concepts.csv`, `labels.csv`).
//! - [`checkpoint`]: the `ACEv1` binary model checkpoint.
//! - [`config`]: TOML experiment configs and dataset specs.
//! - [`runner`]: parallel execution of the one-vs-all grid.
//! - [`reports`]: deterministic JSON/CSV artifact writers.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod reports;
pub mod runner;
