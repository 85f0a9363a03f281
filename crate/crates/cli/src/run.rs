//! The `run` subcommand: execute the sweep grid x seeds, write one
//! results-matrix CSV and one summary JSON per run, then aggregate
//! mean +/- std per cell.

use crate::config::{parse_file, resolve, sweep_grid, ResolvedConfig, SweepCell};
use crate::error::{CliError, Result};
use serde::Serialize;
use slice_core::harness::{run_sequence, SequenceOutcome, StageReport};
use slice_core::init::{save_adapter_set, AdapterSetFile};
use slice_core::metrics::MetricsSummary;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    schema_version: u32,
    cell: &'a str,
    seed: u64,
    config: &'a ResolvedConfig,
    metrics: &'a MetricsSummary,
    stages: &'a [StageReport],
    results_matrix_file: &'a str,
}

pub struct RunReport {
    pub cells: usize,
    pub runs: usize,
    pub failures: Vec<(String, u64, String)>,
    pub aggregate_path: PathBuf,
}

/// Execute the configuration at `config_path`. `jobs` bounds the worker
/// pool; `dry_run` only prints the resolved grid.
pub fn cmd_run(
    config_path: &Path,
    out_override: Option<&Path>,
    jobs: usize,
    dry_run: bool,
) -> Result<RunReport> {
    let raw = parse_file(config_path)?;
    let config_dir = config_path.parent().unwrap_or(Path::new("."));
    let config = resolve(&raw, config_dir)?;
    let out_dir: PathBuf = match (out_override, &config.output_dir) {
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => {
            return Err(CliError::Config(
                "output.dir: set it in the config or pass --out".into(),
            ))
        }
    };

    let cells = sweep_grid(&config);
    if dry_run {
        println!(
            "resolved grid: {} cell(s) x {} seed(s) = {} run(s)",
            cells.len(),
            config.seeds.len(),
            cells.len() * config.seeds.len()
        );
        for cell in &cells {
            println!("  cell {}: {:?}", cell.label, cell.overrides);
        }
        return Ok(RunReport {
            cells: cells.len(),
            runs: 0,
            failures: Vec::new(),
            aggregate_path: out_dir.join("aggregate.csv"),
        });
    }

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::io(out_dir.display().to_string(), e))?;

    // One work item per (cell, seed); the pool runs them independently and
    // each writes into its own directory.
    let mut work: Vec<(usize, u64)> = Vec::new();
    for (cell_idx, _) in cells.iter().enumerate() {
        for &seed in &config.seeds {
            work.push((cell_idx, seed));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;

    type RunResult = (usize, u64, std::result::Result<MetricsSummary, String>);
    let results: Vec<RunResult> = pool.install(|| {
        use rayon::prelude::*;
        work.par_iter()
            .map(|&(cell_idx, seed)| {
                let outcome = execute_one(&config, &cells[cell_idx], seed, &out_dir);
                (cell_idx, seed, outcome.map_err(|e| e.to_string()))
            })
            .collect()
    });

    let mut failures = Vec::new();
    let mut per_cell: BTreeMap<usize, Vec<MetricsSummary>> = BTreeMap::new();
    for (cell_idx, seed, result) in results {
        match result {
            Ok(metrics) => per_cell.entry(cell_idx).or_default().push(metrics),
            Err(message) => failures.push((cells[cell_idx].label.clone(), seed, message)),
        }
    }

    let aggregate_path = out_dir.join("aggregate.csv");
    write_aggregate(&aggregate_path, &cells, &per_cell)?;

    let report = RunReport {
        cells: cells.len(),
        runs: work.len(),
        failures,
        aggregate_path,
    };
    if report.failures.is_empty() {
        Ok(report)
    } else {
        for (cell, seed, message) in &report.failures {
            eprintln!("cell {cell} seed {seed} failed: {message}");
        }
        Err(CliError::CellFailures {
            failed: report.failures.len(),
            total: report.runs,
        })
    }
}

fn execute_one(
    base: &ResolvedConfig,
    cell: &SweepCell,
    seed: u64,
    out_dir: &Path,
) -> Result<MetricsSummary> {
    let config = base.with_overrides(&cell.overrides)?;
    let plan = config.build_plan(seed)?;
    let run_dir = out_dir.join(&cell.label).join(format!("seed_{seed}"));
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| CliError::io(run_dir.display().to_string(), e))?;

    let outcome = run_sequence(&plan)?;
    write_run_artifacts(&config, cell, seed, &run_dir, &outcome, &plan)?;
    Ok(outcome.metrics)
}

fn write_run_artifacts(
    config: &ResolvedConfig,
    cell: &SweepCell,
    seed: u64,
    run_dir: &Path,
    outcome: &SequenceOutcome,
    plan: &slice_core::harness::SequencePlan,
) -> Result<()> {
    let matrix_path = run_dir.join("results_matrix.csv");
    std::fs::write(&matrix_path, outcome.matrix.to_csv())
        .map_err(|e| CliError::io(matrix_path.display().to_string(), e))?;

    let summary = RunSummary {
        schema_version: crate::config::SCHEMA_VERSION,
        cell: &cell.label,
        seed,
        config,
        metrics: &outcome.metrics,
        stages: &outcome.stages,
        results_matrix_file: "results_matrix.csv",
    };
    let summary_path = run_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Config(format!("summary serialization: {e}")))?;
    std::fs::write(&summary_path, json)
        .map_err(|e| CliError::io(summary_path.display().to_string(), e))?;

    if config.save_adapters {
        // Re-run each stage's initialization against the evolving base to
        // serialize the initialized adapters (no training involved).
        let mut base_model = plan.model.clone();
        for stage in 0..plan.tasks.len() {
            let init = plan.initialize_stage(&base_model, stage)?;
            let file = AdapterSetFile {
                method: plan.method,
                pairs: init.pairs.clone(),
                rescale_reports: init.rescale_reports.clone(),
            };
            let path = run_dir.join(format!("stage_{stage}_init_adapters.bin"));
            save_adapter_set(&path, &file)?;
            let absorbed = slice_core::init::absorb_all(&base_model, &init.pairs)?;
            let hyper = slice_core::harness::TrainHyper {
                epochs: plan.epochs,
                learning_rate: plan.learning_rate,
                batch_size: plan.batch_size,
                optimizer: plan.optimizer,
                seed: slice_core::seeds::derive(plan.seed, "train-stage", stage as u64),
            };
            let trained = slice_core::harness::train_task(
                &absorbed,
                &plan.tasks[stage],
                &init.pairs,
                &hyper,
            )?;
            base_model = slice_core::init::merge_all(&absorbed, &trained)?;
        }
    }
    Ok(())
}

fn fmt_stat(values: &[f64], pick: impl Fn(&[f64]) -> f64) -> String {
    if values.is_empty() {
        String::new()
    } else {
        format!("{}", pick(values))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn write_aggregate(
    path: &Path,
    cells: &[SweepCell],
    per_cell: &BTreeMap<usize, Vec<MetricsSummary>>,
) -> Result<()> {
    let mut param_names: Vec<String> = Vec::new();
    for cell in cells {
        for key in cell.overrides.keys() {
            if !param_names.contains(key) {
                param_names.push(key.clone());
            }
        }
    }
    param_names.sort();

    let mut out = String::from("cell");
    for p in &param_names {
        out.push_str(&format!(",{p}"));
    }
    out.push_str(",n_seeds,ap_mean,ap_std,fp_mean,fp_std,fgt_mean,fgt_std,gp_mean,gp_std,ip_mean,ip_std\n");

    for (idx, cell) in cells.iter().enumerate() {
        let metrics = per_cell.get(&idx).cloned().unwrap_or_default();
        out.push_str(&cell.label);
        for p in &param_names {
            out.push(',');
            if let Some(v) = cell.overrides.get(p) {
                out.push_str(&format!("{v}"));
            }
        }
        let aps: Vec<f64> = metrics.iter().map(|m| m.ap).collect();
        let fps: Vec<f64> = metrics.iter().map(|m| m.fp).collect();
        let fgts: Vec<f64> = metrics.iter().map(|m| m.fgt).collect();
        let gps: Vec<f64> = metrics.iter().filter_map(|m| m.gp).collect();
        let ips: Vec<f64> = metrics.iter().filter_map(|m| m.ip).collect();
        out.push_str(&format!(",{}", metrics.len()));
        for series in [&aps, &fps, &fgts, &gps, &ips] {
            out.push(',');
            out.push_str(&fmt_stat(series, mean));
            out.push(',');
            out.push_str(&fmt_stat(series, std_dev));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path.display().to_string(), e))
}
