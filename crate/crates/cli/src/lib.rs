//! Experiment driver: resolves a run configuration, executes one experiment
//! and leaves CSVs plus a `manifest.json` in the output directory.

pub mod args;
pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

use anyhow::{Context, Result};
use nhl::NhlError;

pub use config::{Experiment, RunConfig};
pub use experiments::Summary;

use output::{Output, Seeds};

#[derive(Debug, Clone)]
pub struct Report {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub summary: Summary,
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let out = Output::create(&cfg.out)?;
    let seeds = Seeds::new(cfg.seed);
    let summary = experiments::dispatch(cfg, &seeds, &out).with_context(|| format!("{} failed", cfg.experiment))?;
    let manifest = out.finish(cfg, &seeds, &summary.0)?;
    Ok(Report { dir: out.dir().to_path_buf(), manifest, summary })
}

/// Short machine-readable class of an error, for the CLI's error line.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<NhlError>() {
            return match e {
                NhlError::InvalidShape(_) => "invalid_shape",
                NhlError::DimensionMismatch { .. } => "dimension_mismatch",
                NhlError::LayerOutOfRange { .. } => "layer_out_of_range",
                NhlError::InvalidExponent(_) => "invalid_exponent",
                NhlError::InvalidParameter(_) => "invalid_parameter",
                NhlError::EmptyDataset => "empty_dataset",
                NhlError::Unsupported(_) => "unsupported",
                NhlError::NonFinite { .. } => "non_finite",
                NhlError::Degenerate(_) => "degenerate",
                NhlError::Singular(_) => "singular",
                NhlError::Precondition(_) => "precondition",
                NhlError::Io(_) => "io",
            };
        }
        if cause.is::<serde_json::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return "io";
        }
    }
    "error"
}
