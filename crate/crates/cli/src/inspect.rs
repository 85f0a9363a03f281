//! The `inspect-init` subcommand: run the initialization stages only (no
//! training) for a configured task index and emit the surgery and rescaling
//! diagnostics.

use crate::config::{parse_file, resolve};
use crate::error::{CliError, Result};
use serde::Serialize;
use slice_core::init::RescaleReport;
use slice_core::surgery::SurgeryReport;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct InspectReport {
    pub schema_version: u32,
    pub task_index: usize,
    pub method: String,
    pub surgery_skipped: bool,
    /// Per-layer <G_cur, G_prev>_F (absent for the first task).
    pub per_layer_inner_products: BTreeMap<usize, f64>,
    /// Global surgery diagnostics: inner product, coefficient, cosines.
    pub surgery: Option<SurgeryReport>,
    pub rescale_reports: BTreeMap<usize, RescaleReport>,
    /// Top singular values of the reconciled gradient, per layer.
    pub singular_values: BTreeMap<usize, Vec<f64>>,
    pub fallback_layers: Vec<usize>,
}

pub fn cmd_inspect_init(config_path: &Path, out_path: &Path) -> Result<InspectReport> {
    let raw = parse_file(config_path)?;
    let config_dir = config_path.parent().unwrap_or(Path::new("."));
    let config = resolve(&raw, config_dir)?;
    let inspect = config.inspect.clone().ok_or(CliError::Config(
        "inspect.task_index: required for inspect-init".into(),
    ))?;

    let seed = config.seeds[0];
    let plan = config.build_plan(seed)?;
    let outcome = plan.initialize_stage(&plan.model, inspect.task_index)?;

    let report = InspectReport {
        schema_version: crate::config::SCHEMA_VERSION,
        task_index: inspect.task_index,
        method: plan.method.name(),
        surgery_skipped: outcome.surgery.is_none(),
        per_layer_inner_products: outcome.per_layer_inner.clone(),
        surgery: outcome.surgery.clone(),
        rescale_reports: outcome.rescale_reports.clone(),
        singular_values: outcome.singular_values.clone(),
        fallback_layers: outcome.fallback_layers.clone(),
    };

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::io(parent.display().to_string(), e))?;
        }
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Config(format!("inspect serialization: {e}")))?;
    std::fs::write(out_path, json)
        .map_err(|e| CliError::io(out_path.display().to_string(), e))?;
    Ok(report)
}
