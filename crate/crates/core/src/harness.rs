//! Sequential continual-learning driver: per task, initialize fresh
//! adapters, absorb them into the base, train on the task, evaluate on all
//! tasks seen so far, then merge the trained adapters into the base for the
//! next stage. Previous knowledge therefore lives in the evolving base.

use crate::error::{Result, SliceError};
use crate::init::{
    absorb_all, lora_ga_init, loram_init, merge_all, slice_init, vanilla_init, FactorizeVariant,
    InitConfig, InitMethod, InitOutcome, RescaleReport, ScalingRule,
};
use crate::linalg::{matmul, DenseMatrix, SvdMode};
use crate::metrics::{compute_metrics, HeldOutScores, MetricsSummary, ResultsMatrix};
use crate::model::{AdapterSet, DenseModel};
use crate::seeds;
use crate::surgery::{CoefficientScope, SurgeryConfig, SurgeryReport};
use crate::tasks::{Task, TaskKind};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPolicy {
    /// Fresh adapters per task, merged into the base between tasks.
    FreshPerTask,
}

/// Optimizer for the adapter factors. Plain SGD is the default; Adam is
/// the option that matches common fine-tuning practice, where per-parameter
/// normalization lets a zero-initialized B factor move immediately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd
    }
}

/// Training hyperparameters for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Seed for the per-epoch batch order.
    pub seed: u64,
}

/// Plain SGD on adapter factors only; the base stays frozen. Batches are
/// seeded shuffles of the train split, `epochs x ceil(n / batch_size)`
/// steps in total. Deterministic given the seed.
pub fn train_task(
    model: &DenseModel,
    task: &Task,
    adapters: &AdapterSet,
    hyper: &TrainHyper,
) -> Result<AdapterSet> {
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(SliceError::InvalidConfig(
            "epochs and batch_size must be positive".into(),
        ));
    }
    if !hyper.learning_rate.is_finite() || hyper.learning_rate < 0.0 {
        return Err(SliceError::InvalidConfig(
            "learning_rate must be finite and non-negative".into(),
        ));
    }
    if task.train.is_empty() {
        return Err(SliceError::EmptyBatch);
    }
    let mut pairs = adapters.clone();
    let mut moments: BTreeMap<usize, AdamState> = BTreeMap::new();
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let mut rng = seeds::rng(hyper.seed, "epoch-order", epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| task.train[i].clone()).collect();
            let effective = model.effective_weights(&pairs)?;
            let loss = model_loss_through(model, &effective, &batch)?;
            if !loss.is_finite() {
                return Err(SliceError::Diverged { step, loss });
            }
            if hyper.learning_rate != 0.0 {
                let grads = model.layer_gradients_through(&effective, &batch)?;
                for (idx, pair) in pairs.iter_mut() {
                    let Some(g_w) = grads.get(idx) else { continue };
                    // dL/dB = s * dL/dW * Aᵀ, dL/dA = s * Bᵀ * dL/dW.
                    let g_b = matmul(g_w, &pair.a.transpose())?.scale(pair.scaling);
                    let g_a = matmul(&pair.b.transpose(), g_w)?.scale(pair.scaling);
                    match hyper.optimizer {
                        Optimizer::Sgd => {
                            pair.b = pair.b.sub_scaled(hyper.learning_rate, &g_b)?;
                            pair.a = pair.a.sub_scaled(hyper.learning_rate, &g_a)?;
                        }
                        Optimizer::Adam {
                            beta1,
                            beta2,
                            epsilon,
                        } => {
                            let state = moments.entry(*idx).or_insert_with(|| AdamState {
                                m_b: DenseMatrix::zeros(pair.b.rows(), pair.b.cols()),
                                v_b: DenseMatrix::zeros(pair.b.rows(), pair.b.cols()),
                                m_a: DenseMatrix::zeros(pair.a.rows(), pair.a.cols()),
                                v_a: DenseMatrix::zeros(pair.a.rows(), pair.a.cols()),
                            });
                            let t = (step + 1) as i32;
                            pair.b = adam_update(
                                &pair.b,
                                &g_b,
                                &mut state.m_b,
                                &mut state.v_b,
                                hyper.learning_rate,
                                beta1,
                                beta2,
                                epsilon,
                                t,
                            );
                            pair.a = adam_update(
                                &pair.a,
                                &g_a,
                                &mut state.m_a,
                                &mut state.v_a,
                                hyper.learning_rate,
                                beta1,
                                beta2,
                                epsilon,
                                t,
                            );
                        }
                    }
                }
            }
            step += 1;
        }
    }
    Ok(pairs)
}

struct AdamState {
    m_b: DenseMatrix,
    v_b: DenseMatrix,
    m_a: DenseMatrix,
    v_a: DenseMatrix,
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    param: &DenseMatrix,
    grad: &DenseMatrix,
    m: &mut DenseMatrix,
    v: &mut DenseMatrix,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
) -> DenseMatrix {
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    DenseMatrix::from_fn(param.rows(), param.cols(), |i, j| {
        let g = grad.get(i, j);
        let mi = beta1 * m.get(i, j) + (1.0 - beta1) * g;
        let vi = beta2 * v.get(i, j) + (1.0 - beta2) * g * g;
        m.set(i, j, mi);
        v.set(i, j, vi);
        let m_hat = mi / bias1;
        let v_hat = vi / bias2;
        param.get(i, j) - lr * m_hat / (v_hat.sqrt() + epsilon)
    })
}

fn model_loss_through(
    model: &DenseModel,
    effective: &[crate::linalg::DenseMatrix],
    batch: &[crate::model::Example],
) -> Result<f64> {
    // Reuse the adapter-free loss path against precomputed effective weights
    // by viewing them as a bare model.
    let shadow = model.with_base_weights(effective.to_vec())?;
    shadow.loss(&AdapterSet::new(), batch)
}

/// Task-type score on the eval split, in [0, 100], higher is better.
/// Regression: `100 * max(0, 1 - MSE / Var(targets))`; classification:
/// accuracy in percent.
pub fn evaluate(model: &DenseModel, adapters: &AdapterSet, task: &Task) -> Result<f64> {
    if task.eval.is_empty() {
        return Err(SliceError::EmptyBatch);
    }
    let effective = model.effective_weights(adapters)?;
    let shadow = model.with_base_weights(effective)?;
    match task.kind {
        TaskKind::Regression => {
            let d = task.output_dim;
            let n = task.eval.len();
            let mut target_mean = vec![0.0; d];
            for (_, t) in &task.eval {
                for (acc, v) in target_mean.iter_mut().zip(t) {
                    *acc += v;
                }
            }
            for v in target_mean.iter_mut() {
                *v /= n as f64;
            }
            let mut residual = 0.0;
            let mut spread = 0.0;
            for (x, t) in &task.eval {
                let y = shadow.forward_base(x)?;
                residual += y
                    .iter()
                    .zip(t)
                    .map(|(yi, ti)| (yi - ti) * (yi - ti))
                    .sum::<f64>();
                spread += t
                    .iter()
                    .zip(&target_mean)
                    .map(|(ti, mi)| (ti - mi) * (ti - mi))
                    .sum::<f64>();
            }
            if spread <= f64::MIN_POSITIVE {
                // Constant targets: perfect fit scores 100, anything else 0.
                return Ok(if residual <= 1e-18 { 100.0 } else { 0.0 });
            }
            Ok(100.0 * (1.0 - residual / spread).max(0.0))
        }
        TaskKind::Classification => {
            let mut correct = 0usize;
            for (x, t) in &task.eval {
                let y = shadow.forward_base(x)?;
                if crate::tasks::argmax(&y) == crate::tasks::argmax(t) {
                    correct += 1;
                }
            }
            Ok(100.0 * correct as f64 / task.eval.len() as f64)
        }
    }
}

/// Everything a sequence run needs, fully resolved.
#[derive(Debug, Clone)]
pub struct SequencePlan {
    pub model: DenseModel,
    pub tasks: Vec<Task>,
    pub held_out_gp: Vec<Task>,
    pub held_out_ip: Vec<Task>,
    pub method: InitMethod,
    pub adapter_policy: AdapterPolicy,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub rank: usize,
    pub alpha: f64,
    pub scaling_rule: ScalingRule,
    pub s_cur: usize,
    pub s_prev: usize,
    pub prev_per_task_budget: usize,
    pub coefficient_scope: CoefficientScope,
    pub svd_mode: SvdMode,
    pub svd_oversampling_multiplier: usize,
    pub svd_power_iterations: usize,
    pub factorize_variant: FactorizeVariant,
    pub seed: u64,
}

impl SequencePlan {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() < 2 {
            return Err(SliceError::InvalidConfig(
                "a sequence needs at least two tasks".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SliceError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(SliceError::InvalidConfig(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        self.init_config(0).validate()
    }

    fn init_config(&self, stage: usize) -> InitConfig {
        let c = match self.method {
            InitMethod::Slice { c } => c,
            _ => 0.0,
        };
        InitConfig {
            rank: self.rank,
            alpha: self.alpha,
            scaling_rule: self.scaling_rule,
            s_cur: self.s_cur,
            s_prev: self.s_prev,
            batch_size: self.batch_size,
            prev_per_task_budget: self.prev_per_task_budget,
            surgery: SurgeryConfig {
                c,
                coefficient_scope: self.coefficient_scope,
            },
            svd_mode: self.svd_mode,
            svd_oversampling_multiplier: self.svd_oversampling_multiplier,
            svd_power_iterations: self.svd_power_iterations,
            factorize_variant: self.factorize_variant,
            seed: seeds::derive(self.seed, "init-stage", stage as u64),
        }
    }

    /// Run the initializer for one stage against an arbitrary base model
    /// (used by the sequence loop and by initialization inspection).
    pub fn initialize_stage(
        &self,
        base: &DenseModel,
        stage: usize,
    ) -> Result<InitOutcome> {
        let cfg = self.init_config(stage);
        let cur = &self.tasks[stage];
        let prev: Vec<&Task> = self.tasks[..stage].iter().collect();
        match self.method {
            InitMethod::Slice { .. } => slice_init(base, cur, &prev, &cfg),
            InitMethod::LoraGa => lora_ga_init(base, cur, &cfg),
            InitMethod::Vanilla => vanilla_init(base, &cfg),
            InitMethod::Loram => loram_init(base, &cfg),
        }
    }
}

/// Per-stage audit record for the run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub task_id: String,
    pub wall_clock_ms: u64,
    pub surgery_skipped: bool,
    pub surgery: Option<SurgeryReport>,
    pub rescale_reports: BTreeMap<usize, RescaleReport>,
    pub fallback_layers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub matrix: ResultsMatrix,
    pub metrics: MetricsSummary,
    pub stages: Vec<StageReport>,
    pub final_model: DenseModel,
}

/// Execute the full task sequence under the plan.
pub fn run_sequence(plan: &SequencePlan) -> Result<SequenceOutcome> {
    plan.validate()?;
    let t = plan.tasks.len();
    let mut matrix = ResultsMatrix::new(t)?;
    let mut stages = Vec::with_capacity(t);
    let mut base = plan.model.clone();

    for stage in 0..t {
        let started = Instant::now();
        let outcome = plan.initialize_stage(&base, stage)?;
        let absorbed = absorb_all(&base, &outcome.pairs)?;
        let hyper = TrainHyper {
            epochs: plan.epochs,
            learning_rate: plan.learning_rate,
            batch_size: plan.batch_size,
            optimizer: plan.optimizer,
            seed: seeds::derive(plan.seed, "train-stage", stage as u64),
        };
        let trained = train_task(&absorbed, &plan.tasks[stage], &outcome.pairs, &hyper)?;

        let mut row = Vec::with_capacity(stage + 1);
        for j in 0..=stage {
            row.push(evaluate(&absorbed, &trained, &plan.tasks[j])?);
        }
        matrix.push_row(row)?;

        base = merge_all(&absorbed, &trained)?;
        stages.push(StageReport {
            task_id: plan.tasks[stage].id.clone(),
            wall_clock_ms: started.elapsed().as_millis() as u64,
            surgery_skipped: stage == 0 || !matches!(plan.method, InitMethod::Slice { .. }),
            surgery: outcome.surgery.clone(),
            rescale_reports: outcome.rescale_reports.clone(),
            fallback_layers: outcome.fallback_layers.clone(),
        });
    }

    let empty = AdapterSet::new();
    let mut held_out = HeldOutScores::default();
    for task in &plan.held_out_gp {
        held_out.gp.push(evaluate(&base, &empty, task)?);
    }
    for task in &plan.held_out_ip {
        held_out.ip.push(evaluate(&base, &empty, task)?);
    }
    let has_held_out = !held_out.gp.is_empty() || !held_out.ip.is_empty();
    let metrics = compute_metrics(&matrix, has_held_out.then_some(&held_out))?;

    Ok(SequenceOutcome {
        matrix,
        metrics,
        stages,
        final_model: base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::AdapterPair;
    use crate::linalg::DenseMatrix;
    use crate::model::{Activation, LayerWeights, LossKind};
    use crate::tasks::{SyntheticTaskSpec, TeacherSpec};

    fn model(dim: usize, seed: u64) -> DenseModel {
        let mut rng = seeds::rng(seed, "test-model", 0);
        use rand::Rng;
        let w = DenseMatrix::from_fn(dim, dim, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.05
        });
        DenseModel::new(
            vec![LayerWeights::new(w, None, true).unwrap()],
            Activation::Identity,
            LossKind::MeanSquaredError,
        )
        .unwrap()
    }

    fn task_spec(id: &str, seed: u64, dim: usize, teacher: TeacherSpec) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            id: id.into(),
            seed,
            input_dim: dim,
            output_dim: dim,
            train_count: 64,
            eval_count: 32,
            noise_std: 0.0,
            kind: TaskKind::Regression,
            teacher,
        }
    }

    fn plan(model: DenseModel, tasks: Vec<Task>, method: InitMethod, seed: u64) -> SequencePlan {
        SequencePlan {
            model,
            tasks,
            held_out_gp: Vec::new(),
            held_out_ip: Vec::new(),
            method,
            adapter_policy: AdapterPolicy::FreshPerTask,
            epochs: 2,
            learning_rate: 0.1,
            batch_size: 16,
            optimizer: Optimizer::Sgd,
            rank: 2,
            alpha: 2.0,
            scaling_rule: ScalingRule::AlphaOverSqrtRank,
            s_cur: 4,
            s_prev: 4,
            prev_per_task_budget: 32,
            coefficient_scope: CoefficientScope::Global,
            svd_mode: SvdMode::Exact,
            svd_oversampling_multiplier: 2,
            svd_power_iterations: 4,
            factorize_variant: FactorizeVariant::SecondBlock,
            seed,
        }
    }

    fn sample_adapters(dim: usize, rank: usize) -> AdapterSet {
        let b = DenseMatrix::from_fn(dim, rank, |i, j| 0.01 * (i + j) as f64);
        let a = DenseMatrix::from_fn(rank, dim, |i, j| 0.02 * (i as f64 - j as f64));
        [(0usize, AdapterPair::new(b, a, rank, 1.0).unwrap())]
            .into_iter()
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_adapters_unchanged() {
        let m = model(6, 1);
        let task = task_spec("t", 3, 6, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 0)
            .unwrap();
        let adapters = sample_adapters(6, 2);
        let hyper = TrainHyper {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 8,
            optimizer: Optimizer::Sgd,
            seed: 5,
        };
        let trained = train_task(&m, &task, &adapters, &hyper).unwrap();
        assert_eq!(trained, adapters);
    }

    #[test]
    fn full_batch_gd_is_non_increasing_on_linear_mse() {
        let m = model(6, 2);
        let task = task_spec("t", 4, 6, TeacherSpec::Random { gain: 0.8 })
            .materialize(&m, 1)
            .unwrap();
        let mut adapters = sample_adapters(6, 2);
        let mut last = m.loss(&adapters, &task.train).unwrap();
        for step in 0..20 {
            let hyper = TrainHyper {
                epochs: 1,
                learning_rate: 0.05,
                batch_size: task.train.len(),
                optimizer: Optimizer::Sgd,
                seed: step,
            };
            adapters = train_task(&m, &task, &adapters, &hyper).unwrap();
            let now = m.loss(&adapters, &task.train).unwrap();
            assert!(
                now <= last + 1e-12,
                "loss increased at step {step}: {last} -> {now}"
            );
            last = now;
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let m = model(6, 3);
        let task = task_spec("t", 5, 6, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 2)
            .unwrap();
        let adapters = sample_adapters(6, 2);
        let hyper = TrainHyper {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 8,
            optimizer: Optimizer::Sgd,
            seed: 11,
        };
        let a = train_task(&m, &task, &adapters, &hyper).unwrap();
        let b = train_task(&m, &task, &adapters, &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let m = model(6, 4);
        let task = task_spec("t", 6, 6, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 3)
            .unwrap();
        let adapters = sample_adapters(6, 2);
        let hyper = TrainHyper {
            epochs: 50,
            learning_rate: 1e6,
            batch_size: 64,
            optimizer: Optimizer::Sgd,
            seed: 0,
        };
        let err = train_task(&m, &task, &adapters, &hyper).unwrap_err();
        assert!(matches!(err, SliceError::Diverged { .. }));
    }

    #[test]
    fn teacher_scores_perfectly_on_its_own_noiseless_task() {
        let m = model(6, 5);
        // Task labeled by the base model itself: the base must score 100.
        let task = task_spec("self", 7, 6, TeacherSpec::Base)
            .materialize(&m, 4)
            .unwrap();
        let score = evaluate(&m, &AdapterSet::new(), &task).unwrap();
        assert!((score - 100.0).abs() < 1e-9, "score {score}");
    }

    #[test]
    fn constant_mean_predictor_scores_zero() {
        // A model that always outputs zero against zero-mean targets is the
        // constant-mean predictor: normalized MSE ~ 1, score ~ 0.
        let w = DenseMatrix::zeros(4, 4);
        let m = DenseModel::new(
            vec![LayerWeights::new(w, None, true).unwrap()],
            Activation::Identity,
            LossKind::MeanSquaredError,
        )
        .unwrap();
        let task = task_spec("t", 8, 4, TeacherSpec::Random { gain: 1.0 })
            .materialize(&model(4, 6), 5)
            .unwrap();
        let score = evaluate(&m, &AdapterSet::new(), &task).unwrap();
        // Sample mean of the targets is not exactly zero, so allow slack.
        assert!(score < 8.0, "score {score}");
    }

    #[test]
    fn random_classifier_is_near_chance() {
        let classes = 4;
        let mut hits = Vec::new();
        for seed in 0..12u64 {
            let m = DenseModel::new(
                vec![LayerWeights::new(
                    DenseMatrix::from_fn(classes, classes, |i, j| {
                        // An arbitrary fixed weight pattern unrelated to the tasks.
                        ((i * 3 + j * 7) as f64 * 0.13).sin()
                    }),
                    None,
                    true,
                )
                .unwrap()],
                Activation::Identity,
                LossKind::SoftmaxCrossEntropy,
            )
            .unwrap();
            let mut spec = task_spec("t", 100 + seed, classes, TeacherSpec::Random { gain: 2.0 });
            spec.kind = TaskKind::Classification;
            spec.eval_count = 64;
            let task = spec.materialize(&m, seed).unwrap();
            hits.push(evaluate(&m, &AdapterSet::new(), &task).unwrap());
        }
        let mean = hits.iter().sum::<f64>() / hits.len() as f64;
        // Binomial CI around 25% over 12 x 64 trials.
        assert!((mean - 25.0).abs() < 10.0, "mean accuracy {mean}");
    }

    #[test]
    fn empty_eval_split_is_rejected() {
        let m = model(4, 7);
        let mut task = task_spec("t", 9, 4, TeacherSpec::Base)
            .materialize(&m, 6)
            .unwrap();
        task.eval.clear();
        assert!(matches!(
            evaluate(&m, &AdapterSet::new(), &task),
            Err(SliceError::EmptyBatch)
        ));
    }

    #[test]
    fn retraining_the_same_task_does_not_hurt_it() {
        // T = 2 with both stages on the same task: seed-averaged Fgt <= 0
        // within noise.
        let mut fgts = Vec::new();
        for seed in 0..10u64 {
            let m = model(8, 20 + seed);
            let spec = task_spec("same", 11, 8, TeacherSpec::Random { gain: 1.0 });
            let t1 = spec.materialize(&m, seed).unwrap();
            let mut t2 = t1.clone();
            t2.id = "same-again".into();
            let p = plan(m, vec![t1, t2], InitMethod::Vanilla, seed);
            let outcome = run_sequence(&p).unwrap();
            fgts.push(outcome.metrics.fgt);
        }
        let mean = fgts.iter().sum::<f64>() / fgts.len() as f64;
        let var = fgts.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>()
            / (fgts.len() - 1) as f64;
        let sem = (var / fgts.len() as f64).sqrt();
        assert!(
            mean <= 2.0 * sem + 1e-9,
            "mean Fgt {mean} (sem {sem}) should be <= 0 within noise"
        );
    }

    #[test]
    fn sequence_outputs_complete_lower_triangle() {
        let m = model(8, 30);
        let t1 = task_spec("a", 1, 8, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 0)
            .unwrap();
        let t2 = task_spec("b", 2, 8, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 0)
            .unwrap();
        let p = plan(m, vec![t1, t2], InitMethod::Vanilla, 5);
        let outcome = run_sequence(&p).unwrap();
        assert!(outcome.matrix.is_complete());
        assert_eq!(outcome.matrix.rows()[0].len(), 1);
        assert_eq!(outcome.matrix.rows()[1].len(), 2);
        assert!(outcome.matrix.get(1, 0).unwrap().is_finite());
        assert_eq!(outcome.metrics.fgt, outcome.metrics.ap - outcome.metrics.fp);
    }

    #[test]
    fn sequence_is_reproducible_bit_for_bit() {
        for method in [
            InitMethod::Vanilla,
            InitMethod::LoraGa,
            InitMethod::Loram,
            InitMethod::Slice { c: 1.0 },
        ] {
            let m = model(8, 40);
            let t1 = task_spec("a", 3, 8, TeacherSpec::Random { gain: 1.0 })
                .materialize(&m, 9)
                .unwrap();
            let t2 = task_spec("b", 4, 8, TeacherSpec::Random { gain: 1.0 })
                .materialize(&m, 9)
                .unwrap();
            let p = plan(m, vec![t1, t2], method, 7);
            let a = run_sequence(&p).unwrap();
            let b = run_sequence(&p).unwrap();
            assert_eq!(a.matrix, b.matrix, "method {:?}", method);
        }
    }

    #[test]
    fn carry_over_preserves_end_of_stage_function() {
        let m = model(8, 50);
        let t1 = task_spec("a", 5, 8, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 1)
            .unwrap();
        let t2 = task_spec("b", 6, 8, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 1)
            .unwrap();
        let p = plan(m.clone(), vec![t1.clone(), t2], InitMethod::LoraGa, 3);

        // Re-run stage 0 by hand and compare the merged base against
        // adapter-attached outputs.
        let outcome0 = p.initialize_stage(&m, 0).unwrap();
        let absorbed = absorb_all(&m, &outcome0.pairs).unwrap();
        let hyper = TrainHyper {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            optimizer: Optimizer::Sgd,
            seed: seeds::derive(p.seed, "train-stage", 0),
        };
        let trained = train_task(&absorbed, &t1, &outcome0.pairs, &hyper).unwrap();
        let merged = merge_all(&absorbed, &trained).unwrap();
        for (x, _) in t1.eval.iter().take(20) {
            let with_adapters = absorbed.forward(&trained, x).unwrap();
            let as_base = merged.forward_base(x).unwrap();
            for (a, b) in with_adapters.iter().zip(&as_base) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn held_out_scores_flow_into_gp_ip() {
        let m = model(8, 60);
        let t1 = task_spec("a", 7, 8, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 2)
            .unwrap();
        let t2 = task_spec("b", 8, 8, TeacherSpec::Random { gain: 1.0 })
            .materialize(&m, 2)
            .unwrap();
        let gp = task_spec("gp", 9, 8, TeacherSpec::Base)
            .materialize(&m, 2)
            .unwrap();
        let ip = task_spec("ip", 10, 8, TeacherSpec::Base)
            .materialize(&m, 2)
            .unwrap();
        let mut p = plan(m, vec![t1, t2], InitMethod::Vanilla, 1);
        p.held_out_gp = vec![gp];
        p.held_out_ip = vec![ip];
        let outcome = run_sequence(&p).unwrap();
        assert!(outcome.metrics.gp.is_some());
        assert!(outcome.metrics.ip.is_some());
        assert!(outcome.metrics.held_out_note.is_some());
    }
}
