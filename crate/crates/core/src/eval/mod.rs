//! Scoring, metrics, protocols and reports.

pub mod metrics;
pub mod protocol;
pub mod report;
