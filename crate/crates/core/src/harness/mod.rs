//! Experiment plumbing: configs, datasets, run artifacts, sweeps and plots.

pub mod config;
pub mod data;
pub mod plot;
pub mod registry;
pub mod run;
pub mod sweep;
pub mod presets;
pub mod report;
