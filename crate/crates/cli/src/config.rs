//! Run-configuration schema, validation, and resolution.
//!
//! Configs are a single TOML file with an explicit `schema_version`.
//! Scientifically meaningful parameters (c, rank, alpha, scaling rule,
//! s_cur, s_prev) have no silent defaults: absence is an error unless the
//! `[defaults]` block opts the field in explicitly.

use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use slice_core::harness::{AdapterPolicy, Optimizer, SequencePlan};
use slice_core::init::{FactorizeVariant, InitMethod, ScalingRule};
use slice_core::linalg::{DenseMatrix, SvdMode};
use slice_core::model::{Activation, DenseModel, LayerWeights, LossKind};
use slice_core::surgery::CoefficientScope;
use slice_core::tasks::{load_task_file, SyntheticTaskSpec, Task, TaskKind, TeacherSpec};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub defaults: DefaultsBlock,
    pub model: ModelConfig,
    pub sequence: Sequencesection,
    #[serde(default)]
    pub svd: SvdSection,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub held_out_gp: Vec<TaskConfig>,
    #[serde(default)]
    pub held_out_ip: Vec<TaskConfig>,
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default)]
    pub inspect: Option<InspectSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Opt-in list for defaulted meaningful parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultsBlock {
    #[serde(default)]
    pub allow: Vec<String>,
}

impl DefaultsBlock {
    fn allows(&self, field: &str) -> bool {
        self.allow.iter().any(|f| f == field || f == "all")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Dimension chain: `[in, hidden..., out]`; one layer per adjacent pair.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    #[serde(default)]
    pub bias: bool,
    pub base_weight_seed: u64,
    pub base_weight_std: f64,
    /// `"all"` or an explicit list of layer indices.
    #[serde(default)]
    pub target_layers: TargetLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetLayers {
    All(String),
    Indices(Vec<usize>),
}

impl Default for TargetLayers {
    fn default() -> Self {
        TargetLayers::All("all".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSection {
    pub init_method: MethodName,
    pub c: Option<f64>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub scaling_rule: Option<ScalingRule>,
    pub s_cur: Option<usize>,
    pub s_prev: Option<usize>,
    #[serde(default = "default_scope")]
    pub coefficient_scope: CoefficientScope,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerName,
    #[serde(default = "default_prev_budget")]
    pub prev_per_task_budget: usize,
    #[serde(default = "default_policy")]
    pub adapter_policy: AdapterPolicy,
    #[serde(default)]
    pub factorize_variant: FactorizeVariant,
    #[serde(default)]
    pub save_adapters: bool,
}

fn default_scope() -> CoefficientScope {
    CoefficientScope::Global
}

fn default_prev_budget() -> usize {
    64
}

fn default_policy() -> AdapterPolicy {
    AdapterPolicy::FreshPerTask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Slice,
    LoraGa,
    Vanilla,
    Loram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

impl Default for OptimizerName {
    fn default() -> Self {
        OptimizerName::Sgd
    }
}

impl OptimizerName {
    fn to_optimizer(self) -> Optimizer {
        match self {
            OptimizerName::Sgd => Optimizer::Sgd,
            OptimizerName::Adam => Optimizer::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvdSection {
    pub mode: SvdMode,
    pub oversampling_multiplier: usize,
    pub power_iterations: usize,
}

impl Default for SvdSection {
    fn default() -> Self {
        SvdSection {
            mode: SvdMode::Randomized,
            oversampling_multiplier: 4,
            power_iterations: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic {
        id: String,
        seed: u64,
        input_dim: usize,
        output_dim: usize,
        train_count: usize,
        eval_count: usize,
        #[serde(default)]
        noise_std: f64,
        kind: TaskKind,
        teacher: TeacherSpec,
    },
    File {
        id: String,
        path: PathBuf,
        kind: TaskKind,
        train_count: usize,
        eval_count: usize,
    },
}

impl TaskConfig {
    pub fn id(&self) -> &str {
        match self {
            TaskConfig::Synthetic { id, .. } | TaskConfig::File { id, .. } => id,
        }
    }

    pub fn materialize(&self, model: &DenseModel, run_seed: u64) -> Result<Task> {
        match self {
            TaskConfig::Synthetic {
                id,
                seed,
                input_dim,
                output_dim,
                train_count,
                eval_count,
                noise_std,
                kind,
                teacher,
            } => {
                let spec = SyntheticTaskSpec {
                    id: id.clone(),
                    seed: *seed,
                    input_dim: *input_dim,
                    output_dim: *output_dim,
                    train_count: *train_count,
                    eval_count: *eval_count,
                    noise_std: *noise_std,
                    kind: *kind,
                    teacher: teacher.clone(),
                };
                Ok(spec.materialize(model, run_seed)?)
            }
            TaskConfig::File {
                id,
                path,
                kind,
                train_count,
                eval_count,
            } => Ok(load_task_file(path, id, *kind, *train_count, *eval_count)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectSection {
    pub task_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// Fully resolved configuration: every default materialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub init_method: MethodName,
    pub c: f64,
    pub rank: usize,
    pub alpha: f64,
    pub scaling_rule: ScalingRule,
    pub s_cur: usize,
    pub s_prev: usize,
    pub coefficient_scope: CoefficientScope,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub prev_per_task_budget: usize,
    pub adapter_policy: AdapterPolicy,
    pub factorize_variant: FactorizeVariant,
    pub save_adapters: bool,
    pub svd: SvdSection,
    pub tasks: Vec<TaskConfig>,
    pub held_out_gp: Vec<TaskConfig>,
    pub held_out_ip: Vec<TaskConfig>,
    pub sweep: BTreeMap<String, Vec<f64>>,
    pub inspect: Option<InspectSection>,
    pub output_dir: Option<PathBuf>,
}

/// Defaults used when the `[defaults]` block opts a field in. Desk-scale
/// values; rank follows the minimum the rescaling supports times two.
mod fallback {
    pub const C: f64 = 1.0;
    pub const RANK: usize = 4;
    pub const ALPHA: f64 = 2.0;
    pub const S_CUR: usize = 8;
    pub const S_PREV: usize = 8;
}

pub fn parse_file(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let raw: RawConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(raw)
}

pub fn resolve(raw: &RawConfig, config_dir: &Path) -> Result<ResolvedConfig> {
    if raw.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version: expected {SCHEMA_VERSION}, got {}",
            raw.schema_version
        )));
    }
    if raw.seeds.is_empty() {
        return Err(CliError::Config("seeds: list must be non-empty".into()));
    }
    if raw.model.layer_dims.len() < 2 {
        return Err(CliError::Config(
            "model.layer_dims: need at least [in, out]".into(),
        ));
    }
    if raw.model.base_weight_std <= 0.0 {
        return Err(CliError::Config(
            "model.base_weight_std: must be positive".into(),
        ));
    }

    let seq = &raw.sequence;
    let needs_c = seq.init_method == MethodName::Slice;
    let require = |value: Option<f64>, field: &str, fallback: f64| -> Result<f64> {
        match value {
            Some(v) => Ok(v),
            None if raw.defaults.allows(field) => Ok(fallback),
            None => Err(CliError::Config(format!(
                "sequence.{field}: required (opt in via [defaults] allow = [\"{field}\"] to accept the default)"
            ))),
        }
    };
    let require_usize = |value: Option<usize>, field: &str, fallback: usize| -> Result<usize> {
        match value {
            Some(v) => Ok(v),
            None if raw.defaults.allows(field) => Ok(fallback),
            None => Err(CliError::Config(format!(
                "sequence.{field}: required (opt in via [defaults] allow = [\"{field}\"] to accept the default)"
            ))),
        }
    };

    let c = if needs_c {
        require(seq.c, "c", fallback::C)?
    } else {
        if seq.c.is_some() {
            return Err(CliError::Config(format!(
                "sequence.c: only meaningful for init_method = \"slice\" (got {:?})",
                seq.init_method
            )));
        }
        0.0
    };
    if !(0.0..=1.0).contains(&c) {
        return Err(CliError::Config(format!(
            "sequence.c: {c} outside [0, 1]"
        )));
    }
    let rank = require_usize(seq.rank, "rank", fallback::RANK)?;
    let alpha = require(seq.alpha, "alpha", fallback::ALPHA)?;
    let scaling_rule = match seq.scaling_rule {
        Some(rule) => rule,
        None if raw.defaults.allows("scaling_rule") => ScalingRule::AlphaOverSqrtRank,
        None => {
            return Err(CliError::Config(
                "sequence.scaling_rule: required (opt in via [defaults] allow = [\"scaling_rule\"] to accept rs-LoRA alpha/sqrt(r))"
                    .into(),
            ))
        }
    };
    let s_cur = require_usize(seq.s_cur, "s_cur", fallback::S_CUR)?;
    let s_prev = require_usize(seq.s_prev, "s_prev", fallback::S_PREV)?;

    if raw.tasks.len() < 2 && raw.inspect.is_none() {
        return Err(CliError::Config(
            "tasks: a sequence run needs at least two tasks".into(),
        ));
    }
    // Referenced files must exist at load time.
    for (section, list) in [
        ("tasks", &raw.tasks),
        ("held_out_gp", &raw.held_out_gp),
        ("held_out_ip", &raw.held_out_ip),
    ] {
        for (i, t) in list.iter().enumerate() {
            if let TaskConfig::File { path, .. } = t {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    config_dir.join(path)
                };
                if !full.exists() {
                    return Err(CliError::Config(format!(
                        "{section}[{i}].path: file {} does not exist",
                        full.display()
                    )));
                }
            }
        }
    }

    // Sweep values must be numeric and target known parameters.
    let mut sweep = BTreeMap::new();
    for (key, values) in &raw.sweep {
        match key.as_str() {
            "alpha" | "c" | "learning_rate" | "rank" | "epochs" => {}
            other => {
                return Err(CliError::Config(format!(
                    "sweep.{other}: unsupported sweep parameter (supported: alpha, c, epochs, learning_rate, rank)"
                )))
            }
        }
        if values.is_empty() {
            return Err(CliError::Config(format!("sweep.{key}: empty value list")));
        }
        let mut nums = Vec::with_capacity(values.len());
        for v in values {
            let n = match v {
                toml::Value::Integer(i) => *i as f64,
                toml::Value::Float(f) => *f,
                other => {
                    return Err(CliError::Config(format!(
                        "sweep.{key}: non-numeric value {other}"
                    )))
                }
            };
            nums.push(n);
        }
        sweep.insert(key.clone(), nums);
    }

    if let Some(inspect) = &raw.inspect {
        if inspect.task_index >= raw.tasks.len() {
            return Err(CliError::Config(format!(
                "inspect.task_index: {} out of range for {} tasks",
                inspect.task_index,
                raw.tasks.len()
            )));
        }
    }

    Ok(ResolvedConfig {
        schema_version: raw.schema_version,
        seeds: raw.seeds.clone(),
        model: raw.model.clone(),
        init_method: seq.init_method,
        c,
        rank,
        alpha,
        scaling_rule,
        s_cur,
        s_prev,
        coefficient_scope: seq.coefficient_scope,
        epochs: seq.epochs,
        learning_rate: seq.learning_rate,
        batch_size: seq.batch_size,
        optimizer: seq.optimizer,
        prev_per_task_budget: seq.prev_per_task_budget,
        adapter_policy: seq.adapter_policy,
        factorize_variant: seq.factorize_variant,
        save_adapters: seq.save_adapters,
        svd: raw.svd.clone(),
        tasks: raw.tasks.clone(),
        held_out_gp: raw.held_out_gp.clone(),
        held_out_ip: raw.held_out_ip.clone(),
        sweep,
        inspect: raw.inspect.clone(),
        output_dir: raw.output.dir.clone(),
    })
}

impl ResolvedConfig {
    pub fn build_model(&self) -> Result<DenseModel> {
        use rand::Rng;
        let mut rng = slice_core::seeds::rng(self.model.base_weight_seed, "base-model", 0);
        let targets: Vec<bool> = match &self.model.target_layers {
            TargetLayers::All(tag) => {
                if tag != "all" {
                    return Err(CliError::Config(format!(
                        "model.target_layers: expected \"all\" or a list of indices, got \"{tag}\""
                    )));
                }
                vec![true; self.model.layer_dims.len() - 1]
            }
            TargetLayers::Indices(idx) => {
                let n = self.model.layer_dims.len() - 1;
                let mut mask = vec![false; n];
                for &i in idx {
                    if i >= n {
                        return Err(CliError::Config(format!(
                            "model.target_layers: index {i} out of range for {n} layers"
                        )));
                    }
                    mask[i] = true;
                }
                mask
            }
        };
        let mut layers = Vec::new();
        for (pair, target) in self.model.layer_dims.windows(2).zip(targets) {
            let (d_in, d_out) = (pair[0], pair[1]);
            let w = DenseMatrix::from_fn(d_out, d_in, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * self.model.base_weight_std
            });
            let bias = self.model.bias.then(|| vec![0.0; d_out]);
            layers.push(LayerWeights::new(w, bias, target)?);
        }
        Ok(DenseModel::new(layers, self.model.activation, self.model.loss)?)
    }

    pub fn init_method(&self) -> InitMethod {
        match self.init_method {
            MethodName::Slice => InitMethod::Slice { c: self.c },
            MethodName::LoraGa => InitMethod::LoraGa,
            MethodName::Vanilla => InitMethod::Vanilla,
            MethodName::Loram => InitMethod::Loram,
        }
    }

    /// Assemble the sequence plan for one run.
    pub fn build_plan(&self, seed: u64) -> Result<SequencePlan> {
        let model = self.build_model()?;
        let tasks = self
            .tasks
            .iter()
            .map(|t| t.materialize(&model, seed))
            .collect::<Result<Vec<_>>>()?;
        let held_out_gp = self
            .held_out_gp
            .iter()
            .map(|t| t.materialize(&model, seed))
            .collect::<Result<Vec<_>>>()?;
        let held_out_ip = self
            .held_out_ip
            .iter()
            .map(|t| t.materialize(&model, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(SequencePlan {
            model,
            tasks,
            held_out_gp,
            held_out_ip,
            method: self.init_method(),
            adapter_policy: self.adapter_policy,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            optimizer: self.optimizer.to_optimizer(),
            rank: self.rank,
            alpha: self.alpha,
            scaling_rule: self.scaling_rule,
            s_cur: self.s_cur,
            s_prev: self.s_prev,
            prev_per_task_budget: self.prev_per_task_budget,
            coefficient_scope: self.coefficient_scope,
            svd_mode: self.svd.mode,
            svd_oversampling_multiplier: self.svd.oversampling_multiplier,
            svd_power_iterations: self.svd.power_iterations,
            factorize_variant: self.factorize_variant,
            seed,
        })
    }

    /// Apply one sweep cell's overrides, returning the modified config.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, f64>) -> Result<ResolvedConfig> {
        let mut out = self.clone();
        for (key, value) in overrides {
            match key.as_str() {
                "alpha" => out.alpha = *value,
                "c" => out.c = *value,
                "learning_rate" => out.learning_rate = *value,
                "rank" => out.rank = *value as usize,
                "epochs" => out.epochs = *value as usize,
                other => {
                    return Err(CliError::Config(format!(
                        "sweep.{other}: unsupported sweep parameter"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// One sweep cell: a named combination of parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub label: String,
    pub overrides: BTreeMap<String, f64>,
}

/// Cartesian product of the sweep values, in deterministic order. With no
/// sweep block this is a single cell with no overrides.
pub fn sweep_grid(config: &ResolvedConfig) -> Vec<SweepCell> {
    if config.sweep.is_empty() {
        return vec![SweepCell {
            label: "base".into(),
            overrides: BTreeMap::new(),
        }];
    }
    let keys: Vec<&String> = config.sweep.keys().collect();
    let mut cells: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
    for key in &keys {
        let values = &config.sweep[*key];
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.insert((*key).clone(), *v);
                next.push(c);
            }
        }
        cells = next;
    }
    cells
        .into_iter()
        .map(|overrides| {
            let label = overrides
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join("-");
            SweepCell { label, overrides }
        })
        .collect()
}
