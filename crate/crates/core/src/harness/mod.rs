//! Experiment configuration, pipelines, and artifact reporting.

pub mod config;
pub mod experiment;
pub mod report;
