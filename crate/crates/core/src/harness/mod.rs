// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, scenarios and the end-to-end pipelines behind the
//! command-line tool.

pub mod config;
pub mod heatmap;
pub mod output;
pub mod pipeline;
pub mod scenario;

pub use config::{RunConfig, ScenarioKind, ScenarioSpec};
pub use heatmap::{emit_heatmap, render_svg, MatrixDump};
pub use output::{ensure_writable, Artifacts, SCHEMA_VERSION};
pub use pipeline::{
    execute, read_head_set, resolve_sensitive_heads, run_attribute, run_rectify, run_simulate, run_theory, Format,
};
pub use scenario::{derive_seed, Plant, Scenario};
