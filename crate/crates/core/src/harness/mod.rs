//! Desk-scale experiments on synthetic temporal tasks.
//!
//! A tiny decoder ([`model::TinyModel`]) built on the attention module is
//! trained from scratch with SGD on token sequences whose visual span encodes
//! frames. Trials, gamma sweeps and ablation grids measure only the direction
//! of an effect between settings. They do not reproduce video-benchmark
//! scores, which need a pretrained multimodal model.

pub mod model;
pub mod tasks;
pub mod trial;

pub use model::{ModelConfig, TinyModel};
pub use tasks::{gen_task, Dataset, Example, TaskKind};
pub use trial::{
    ablation_grid, gamma_sweep, median, sweep_csv, train_trial, GridReport, SummaryRow, TaskSummary,
    TrialConfig, TrialReport, SWEEP_GAMMAS, REPORT_HEADER,
};
