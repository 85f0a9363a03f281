//! The `mine` subcommand: build or load task-gradient sketches, cache all
//! pairwise cosines, exhaustively enumerate candidate subsets, and write
//! the ranked output with the full pair-score table for audit.

use crate::config::{ModelConfig, TaskConfig, TargetLayers};
use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use slice_core::linalg::DenseMatrix;
use slice_core::miner::{
    build_pair_cache, load_sketch, mine, save_sketch, sketch_task_gradient, SequenceCandidate,
    TaskGradientSketch,
};
use slice_core::model::{DenseModel, LayerWeights};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolManifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub miner: MinerSection,
    pub pool: Vec<PoolEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinerSection {
    #[serde(default = "default_subset")]
    pub subset_size: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_budget")]
    pub budget: u64,
    /// Calibration size per task: accumulation steps x batch size.
    #[serde(default = "default_steps")]
    pub sketch_steps: usize,
    #[serde(default = "default_batch")]
    pub sketch_batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// When set, freshly computed sketches are also written next to the
    /// output for reuse.
    #[serde(default)]
    pub save_sketches: bool,
}

fn default_subset() -> usize {
    3
}
fn default_top_k() -> usize {
    5
}
fn default_budget() -> u64 {
    50_000_000
}
fn default_steps() -> usize {
    4
}
fn default_batch() -> usize {
    16
}

impl Default for MinerSection {
    fn default() -> Self {
        MinerSection {
            subset_size: default_subset(),
            top_k: default_top_k(),
            budget: default_budget(),
            sketch_steps: default_steps(),
            sketch_batch: default_batch(),
            seed: 0,
            save_sketches: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoolEntry {
    SketchFile { sketch_file: PathBuf },
    Task(TaskConfig),
}

#[derive(Debug, Serialize)]
struct MinerOutput<'a> {
    schema_version: u32,
    pool_size: usize,
    subset_size: usize,
    subsets_visited: u64,
    task_ids: &'a [String],
    candidates: &'a [SequenceCandidate],
    /// Full symmetric pair-score table in task-id order.
    pair_scores: Vec<Vec<f64>>,
}

fn build_model(model: &ModelConfig) -> Result<DenseModel> {
    use rand::Rng;
    let mut rng = slice_core::seeds::rng(model.base_weight_seed, "base-model", 0);
    let targets: Vec<bool> = match &model.target_layers {
        TargetLayers::All(_) => vec![true; model.layer_dims.len() - 1],
        TargetLayers::Indices(idx) => {
            let n = model.layer_dims.len() - 1;
            let mut mask = vec![false; n];
            for &i in idx {
                mask[i.min(n - 1)] = true;
            }
            mask
        }
    };
    let mut layers = Vec::new();
    for (pair, target) in model.layer_dims.windows(2).zip(targets) {
        let w = DenseMatrix::from_fn(pair[1], pair[0], |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * model.base_weight_std
        });
        let bias = model.bias.then(|| vec![0.0; pair[1]]);
        layers.push(LayerWeights::new(w, bias, target)?);
    }
    Ok(DenseModel::new(layers, model.activation, model.loss)?)
}

pub struct MineReport {
    pub pool_size: usize,
    pub subsets_visited: u64,
    pub best_phi_bar: f64,
}

pub fn cmd_mine(
    pool_path: &Path,
    out_path: &Path,
    subset_size: Option<usize>,
    top_k: Option<usize>,
) -> Result<MineReport> {
    let text = std::fs::read_to_string(pool_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", pool_path.display())))?;
    let manifest: PoolManifest = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", pool_path.display())))?;
    if manifest.schema_version != crate::config::SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version: expected {}, got {}",
            crate::config::SCHEMA_VERSION,
            manifest.schema_version
        )));
    }
    if manifest.pool.len() < 2 {
        return Err(CliError::Config("pool: need at least two entries".into()));
    }
    let n = subset_size.unwrap_or(manifest.miner.subset_size);
    let k = top_k.unwrap_or(manifest.miner.top_k);

    let model = build_model(&manifest.model)?;
    let base_dir = pool_path.parent().unwrap_or(Path::new("."));
    let mut sketches: Vec<TaskGradientSketch> = Vec::with_capacity(manifest.pool.len());
    for entry in &manifest.pool {
        match entry {
            PoolEntry::SketchFile { sketch_file } => {
                let full = if sketch_file.is_absolute() {
                    sketch_file.clone()
                } else {
                    base_dir.join(sketch_file)
                };
                sketches.push(load_sketch(&full)?);
            }
            PoolEntry::Task(task) => {
                let materialized = task.materialize(&model, manifest.miner.seed)?;
                let sketch = sketch_task_gradient(
                    &model,
                    &materialized,
                    manifest.miner.sketch_steps,
                    manifest.miner.sketch_batch,
                    slice_core::seeds::derive(manifest.miner.seed, "miner-sketch", 0),
                )?;
                if manifest.miner.save_sketches {
                    let dir = out_path.parent().unwrap_or(Path::new("."));
                    save_sketch(&dir.join(format!("{}.sketch", sketch.task_id)), &sketch)?;
                }
                sketches.push(sketch);
            }
        }
    }

    let cache = build_pair_cache(&sketches)?;
    let outcome = mine(&cache, n, k, manifest.miner.budget)?;

    let m = cache.pool_size();
    let pair_scores: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i == j { 1.0 } else { cache.score(i, j) })
                .collect()
        })
        .collect();
    let output = MinerOutput {
        schema_version: crate::config::SCHEMA_VERSION,
        pool_size: m,
        subset_size: n,
        subsets_visited: outcome.subsets_visited,
        task_ids: cache.ids(),
        candidates: &outcome.candidates,
        pair_scores,
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::io(parent.display().to_string(), e))?;
        }
    }
    let json = serde_json::to_string_pretty(&output)
        .map_err(|e| CliError::Config(format!("miner output serialization: {e}")))?;
    std::fs::write(out_path, json)
        .map_err(|e| CliError::io(out_path.display().to_string(), e))?;

    Ok(MineReport {
        pool_size: m,
        subsets_visited: outcome.subsets_visited,
        best_phi_bar: outcome.candidates.first().map(|c| c.phi_bar).unwrap_or(f64::NAN),
    })
}
