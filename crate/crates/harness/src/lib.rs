//! Experiment harness around `sdlab_core`: TOML-configured distillation
//! runs, evaluation metrics, JSONL/CSV/SVG outputs, parameter sweeps and a
//! self-contained gradient audit, all exposed through the `sdlab` binary.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod jsonl;
pub mod metrics;
pub mod runner;
pub mod svg;
pub mod sweep;

pub use error::{HarnessError, Result};
