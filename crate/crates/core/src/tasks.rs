//! Task data: seeded synthetic teacher-labeled tasks, file-backed tasks,
//! and the batch samplers that feed gradient estimation and training.
//!
//! Synthetic data is fully determined by `(run_seed, spec.seed)`: the
//! effective generator seed is derived once and regenerating with it yields
//! bit-identical samples. Train and eval splits use distinct sub-seeds.

use crate::error::{Result, SliceError};
use crate::linalg::{frobenius_inner, frobenius_norm, matmul, DenseMatrix};
use crate::model::{Activation, DenseModel, Example, LayerWeights};
use crate::seeds;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// A materialized task: fixed train/eval splits plus scoring metadata.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: String,
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub noise_std: f64,
    /// Effective generator seed for synthetic tasks; `None` for file-backed.
    pub generator_seed: Option<u64>,
}

/// How a synthetic task labels its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TeacherSpec {
    /// Gaussian teacher mirroring the host model's layer dims.
    Random { gain: f64 },
    /// Member `index` of a family of `count` single-layer teachers whose
    /// weight matrices sit on a circle in a fixed 2-plane of matrix space,
    /// optionally lifted along a shared axis. Pairwise cosine between
    /// members is `(1 - axis_weight^2) * cos(angle) + axis_weight^2`, which
    /// makes strongly conflicting or strongly aligned task families easy to
    /// construct. With `direction_rank = Some(q)` the whole family lives in
    /// a shared rank-q matrix subspace, so low-rank adapters can actually
    /// fit the tasks.
    Ring {
        family_seed: u64,
        count: usize,
        index: usize,
        gain: f64,
        #[serde(default)]
        axis_weight: f64,
        /// Share of each teacher along its own orthogonal direction,
        /// invisible to the other members; this is the conflict-free
        /// component a surgery-aware initializer can exploit.
        #[serde(default)]
        private_weight: f64,
        #[serde(default)]
        jitter: f64,
        #[serde(default)]
        direction_rank: Option<usize>,
        /// With `pencil_rank = Some(rho)` every family direction is built
        /// from its own rank-rho pencil with mutually orthonormal column
        /// and row spaces, so the conflicting (ring) and conflict-free
        /// (private) components are separable by a low-rank factorization.
        #[serde(default)]
        pencil_rank: Option<usize>,
        /// Under `pencil_rank`, make the two ring-plane directions share a
        /// single column pencil (distinct rows), so every planar combination
        /// is rank one and the conflicting component occupies exactly one
        /// column direction.
        #[serde(default)]
        planar_shared_column: bool,
        /// Under `pencil_rank`, restrict each task's inputs to the
        /// orthogonal complement of the other members' private row
        /// directions. Training on one task then carries no signal about
        /// sibling privates, so damage to them comes only from update
        /// spillover, not from the loss itself.
        #[serde(default)]
        exclusive_private_inputs: bool,
        /// When set, the teacher is the base model plus `gain * direction`,
        /// so every task asks for a low-rank modification of the current
        /// function and the conflict geometry is independent of the base
        /// magnitude.
        #[serde(default)]
        relative_to_base: bool,
    },
    /// The run's base model itself; measures drift from the initial function.
    Base,
}

/// Declarative synthetic-task description (the config-file form).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub id: String,
    pub seed: u64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub noise_std: f64,
    pub kind: TaskKind,
    pub teacher: TeacherSpec,
}

impl SyntheticTaskSpec {
    /// Build the task for one run. All randomness is derived from
    /// `(run_seed, self.seed)` through named sub-seeds.
    pub fn materialize(&self, base_model: &DenseModel, run_seed: u64) -> Result<Task> {
        if self.input_dim != base_model.input_dim() || self.output_dim != base_model.output_dim()
        {
            return Err(SliceError::InvalidConfig(format!(
                "task '{}' dims {}->{} do not match model dims {}->{}",
                self.id,
                self.input_dim,
                self.output_dim,
                base_model.input_dim(),
                base_model.output_dim()
            )));
        }
        if self.train_count == 0 || self.eval_count == 0 {
            return Err(SliceError::InvalidConfig(format!(
                "task '{}' needs positive train_count and eval_count",
                self.id
            )));
        }
        if self.noise_std < 0.0 {
            return Err(SliceError::InvalidConfig(format!(
                "task '{}' has negative noise_std",
                self.id
            )));
        }
        let effective_seed = seeds::derive(run_seed, "task-data", self.seed);
        let teacher = self.build_teacher(base_model, run_seed, effective_seed)?;
        let train = generate_split(
            &teacher,
            self.kind,
            self.train_count,
            self.noise_std,
            seeds::derive(effective_seed, "train", 0),
        )?;
        let eval = generate_split(
            &teacher,
            self.kind,
            self.eval_count,
            self.noise_std,
            seeds::derive(effective_seed, "eval", 0),
        )?;
        Ok(Task {
            id: self.id.clone(),
            kind: self.kind,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            train,
            eval,
            noise_std: self.noise_std,
            generator_seed: Some(effective_seed),
        })
    }

    fn build_teacher(
        &self,
        base_model: &DenseModel,
        run_seed: u64,
        effective_seed: u64,
    ) -> Result<Teacher> {
        match &self.teacher {
            TeacherSpec::Base => Ok(Teacher::plain(TeacherFn::Model(base_model.clone()))),
            TeacherSpec::Random { gain } => {
                let mut rng = seeds::rng(effective_seed, "teacher", 0);
                let layers = base_model
                    .layers()
                    .iter()
                    .map(|layer| {
                        let std = gain / (layer.d_in() as f64).sqrt();
                        let w = DenseMatrix::from_fn(layer.d_out(), layer.d_in(), |_, _| {
                            rng.sample::<f64, _>(StandardNormal) * std
                        });
                        LayerWeights::new(w, None, false)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Teacher::plain(TeacherFn::Model(DenseModel::new(
                    layers,
                    base_model.activation(),
                    base_model.loss_kind(),
                )?)))
            }
            TeacherSpec::Ring {
                family_seed,
                count,
                index,
                gain,
                axis_weight,
                private_weight,
                jitter,
                direction_rank,
                pencil_rank,
                planar_shared_column,
                exclusive_private_inputs,
                relative_to_base,
            } => {
                if *count == 0 || index >= count {
                    return Err(SliceError::InvalidConfig(format!(
                        "task '{}': ring index {} out of range for count {}",
                        self.id, index, count
                    )));
                }
                let shared_sq = axis_weight * axis_weight + private_weight * private_weight;
                if shared_sq >= 1.0 || *axis_weight < 0.0 || *private_weight < 0.0 {
                    return Err(SliceError::InvalidConfig(format!(
                        "task '{}': axis_weight^2 + private_weight^2 must stay below 1",
                        self.id
                    )));
                }
                // Orthonormal directions per family per run: the ring plane,
                // a shared axis, and one private direction per member.
                let n_dirs = 3 + count;
                if direction_rank.is_some() && pencil_rank.is_some() {
                    return Err(SliceError::InvalidConfig(format!(
                        "task '{}': direction_rank and pencil_rank are mutually exclusive",
                        self.id
                    )));
                }
                if *exclusive_private_inputs && pencil_rank.is_none() {
                    return Err(SliceError::InvalidConfig(format!(
                        "task '{}': exclusive_private_inputs requires pencil_rank",
                        self.id
                    )));
                }
                let mut family_rng = seeds::rng(run_seed, "teacher-family", *family_seed);
                let mut input_projector: Option<DenseMatrix> = None;
                let dirs = if let Some(rho) = pencil_rank {
                    // Column pencil index per direction: with a shared
                    // planar column, directions 0 and 1 reuse column
                    // pencil 0 and everything shifts down by one.
                    let col_pencil = |k: usize| -> usize {
                        if *planar_shared_column {
                            if k <= 1 {
                                0
                            } else {
                                k - 1
                            }
                        } else {
                            k
                        }
                    };
                    let n_col_pencils = col_pencil(n_dirs - 1) + 1;
                    let need_cols = n_col_pencils * rho;
                    let need_rows = n_dirs * rho;
                    if *rho == 0
                        || need_cols > self.output_dim
                        || need_rows > self.input_dim
                    {
                        return Err(SliceError::InvalidConfig(format!(
                            "task '{}': pencil_rank {} needs {} column / {} row directions, dims are {}x{}",
                            self.id, rho, need_cols, need_rows, self.output_dim, self.input_dim
                        )));
                    }
                    let u_all = orthonormal_columns(self.output_dim, need_cols, &mut family_rng);
                    let v_all = orthonormal_columns(self.input_dim, need_rows, &mut family_rng);
                    if *exclusive_private_inputs {
                        // Project out the other members' private row pencils.
                        let mut proj = DenseMatrix::identity(self.input_dim);
                        for other in 0..*count {
                            if other == *index {
                                continue;
                            }
                            for r in 0..*rho {
                                let col = (3 + other) * rho + r;
                                for i in 0..self.input_dim {
                                    for j in 0..self.input_dim {
                                        let v = proj.get(i, j)
                                            - v_all.get(i, col) * v_all.get(j, col);
                                        proj.set(i, j, v);
                                    }
                                }
                            }
                        }
                        input_projector = Some(proj);
                    }
                    let scale = 1.0 / (*rho as f64).sqrt();
                    (0..n_dirs)
                        .map(|k| {
                            DenseMatrix::from_fn(self.output_dim, self.input_dim, |i, j| {
                                let mut acc = 0.0;
                                for r in 0..*rho {
                                    let ucol = col_pencil(k) * rho + r;
                                    let vcol = k * rho + r;
                                    acc += u_all.get(i, ucol) * v_all.get(j, vcol);
                                }
                                acc * scale
                            })
                        })
                        .collect()
                } else {
                    match direction_rank {
                    None => orthonormal_directions(
                        self.output_dim,
                        self.input_dim,
                        n_dirs,
                        &mut family_rng,
                    ),
                    Some(q) => {
                        if *q == 0 || *q > self.output_dim.min(self.input_dim) {
                            return Err(SliceError::InvalidConfig(format!(
                                "task '{}': direction_rank {} out of range",
                                self.id, q
                            )));
                        }
                        if q * q < n_dirs {
                            return Err(SliceError::InvalidConfig(format!(
                                "task '{}': direction_rank {} supports only {} orthonormal directions, need {}",
                                self.id,
                                q,
                                q * q,
                                n_dirs
                            )));
                        }
                        // Shared column/row spaces; orthonormal cores give
                        // orthonormal directions in matrix space.
                        let u = orthonormal_columns(self.output_dim, *q, &mut family_rng);
                        let v = orthonormal_columns(self.input_dim, *q, &mut family_rng);
                        let cores = orthonormal_directions(*q, *q, n_dirs, &mut family_rng);
                        cores
                            .iter()
                            .map(|c| {
                                matmul(&matmul(&u, c).expect("dims"), &v.transpose())
                                    .expect("dims")
                            })
                            .collect()
                    }
                    }
                };
                let angle = 2.0 * std::f64::consts::PI * (*index as f64) / (*count as f64);
                let planar = (1.0 - shared_sq).sqrt();
                let mut w = dirs[0]
                    .scale(planar * angle.cos())
                    .add(&dirs[1].scale(planar * angle.sin()))?
                    .add(&dirs[2].scale(*axis_weight))?
                    .add(&dirs[3 + index].scale(*private_weight))?;
                if *jitter > 0.0 {
                    let mut rng = seeds::rng(effective_seed, "teacher-jitter", 0);
                    let noise = DenseMatrix::from_fn(w.rows(), w.cols(), |_, _| {
                        rng.sample::<f64, _>(StandardNormal)
                    });
                    let noise = noise.scale(jitter / frobenius_norm(&noise));
                    w = w.add(&noise)?;
                    w = w.scale(1.0 / frobenius_norm(&w));
                }
                let delta = w.scale(*gain);
                let func = if *relative_to_base {
                    TeacherFn::Offset {
                        base: base_model.clone(),
                        delta,
                    }
                } else {
                    let layer = LayerWeights::new(delta, None, false)?;
                    TeacherFn::Model(DenseModel::new(
                        vec![layer],
                        Activation::Identity,
                        base_model.loss_kind(),
                    )?)
                };
                Ok(Teacher {
                    func,
                    input_projector,
                })
            }
        }
    }
}

/// A teacher plus an optional input-space projector restricting the task's
/// data distribution.
struct Teacher {
    func: TeacherFn,
    input_projector: Option<DenseMatrix>,
}

impl Teacher {
    fn plain(func: TeacherFn) -> Self {
        Teacher {
            func,
            input_projector: None,
        }
    }

    fn input_dim(&self) -> usize {
        self.func.input_dim()
    }

    fn draw_input(&self, raw: Vec<f64>) -> Result<Vec<f64>> {
        match &self.input_projector {
            None => Ok(raw),
            Some(p) => crate::linalg::matvec(p, &raw),
        }
    }

    fn label(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.func.label(x)
    }
}

/// A labeling function: either a standalone model or the base model plus a
/// linear offset `delta * x`.
enum TeacherFn {
    Model(DenseModel),
    Offset { base: DenseModel, delta: DenseMatrix },
}

impl TeacherFn {
    fn input_dim(&self) -> usize {
        match self {
            TeacherFn::Model(m) => m.input_dim(),
            TeacherFn::Offset { base, .. } => base.input_dim(),
        }
    }

    fn label(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            TeacherFn::Model(m) => m.forward_base(x),
            TeacherFn::Offset { base, delta } => {
                let mut y = base.forward_base(x)?;
                let extra = crate::linalg::matvec(delta, x)?;
                for (yi, ei) in y.iter_mut().zip(&extra) {
                    *yi += ei;
                }
                Ok(y)
            }
        }
    }
}

/// Gaussian matrix with Gram-Schmidt-orthonormalized columns.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut m = DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    for j in 0..cols {
        for prev in 0..j {
            let overlap: f64 = (0..rows).map(|i| m.get(i, j) * m.get(i, prev)).sum();
            for i in 0..rows {
                let v = m.get(i, j) - overlap * m.get(i, prev);
                m.set(i, j, v);
            }
        }
        let norm: f64 = (0..rows)
            .map(|i| m.get(i, j) * m.get(i, j))
            .sum::<f64>()
            .sqrt();
        for i in 0..rows {
            m.set(i, j, m.get(i, j) / norm);
        }
    }
    m
}

/// Gram-Schmidt over matrix space with unit Frobenius norm.
fn orthonormal_directions(
    rows: usize,
    cols: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DenseMatrix> {
    let mut dirs: Vec<DenseMatrix> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut cand =
            DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        for prev in &dirs {
            let overlap = frobenius_inner(&cand, prev).expect("same shape");
            cand = cand.sub_scaled(overlap, prev).expect("same shape");
        }
        let norm = frobenius_norm(&cand);
        if norm > 1e-8 {
            dirs.push(cand.scale(1.0 / norm));
        }
    }
    dirs
}

fn generate_split(
    teacher: &Teacher,
    kind: TaskKind,
    count: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let raw: Vec<f64> = (0..teacher.input_dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = teacher.draw_input(raw)?;
        let mut y = teacher.label(&x)?;
        if noise_std > 0.0 {
            for v in y.iter_mut() {
                *v += noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let target = match kind {
            TaskKind::Regression => y,
            TaskKind::Classification => {
                let class = argmax(&y);
                let mut one_hot = vec![0.0; y.len()];
                one_hot[class] = 1.0;
                one_hot
            }
        };
        out.push((x, target));
    }
    Ok(out)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty")
}

/// Load a line-delimited task file: one JSON object per line with
/// `"input"` and `"target"` real arrays. The first `train_count` records
/// form the train split and the next `eval_count` the eval split.
pub fn load_task_file(
    path: &Path,
    id: &str,
    kind: TaskKind,
    train_count: usize,
    eval_count: usize,
) -> Result<Task> {
    #[derive(Deserialize)]
    struct Record {
        input: Vec<f64>,
        target: Vec<f64>,
    }

    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| SliceError::io(&display, e))?;
    let reader = std::io::BufReader::new(file);
    let mut examples: Vec<Example> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SliceError::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| {
            SliceError::malformed(&display, format!("line {}: {e}", lineno + 1))
        })?;
        if record.input.iter().chain(&record.target).any(|v| !v.is_finite()) {
            return Err(SliceError::malformed(
                &display,
                format!("line {}: non-finite value", lineno + 1),
            ));
        }
        examples.push((record.input, record.target));
    }
    if examples.len() < train_count + eval_count {
        return Err(SliceError::malformed(
            &display,
            format!(
                "need {} records ({} train + {} eval), file has {}",
                train_count + eval_count,
                train_count,
                eval_count,
                examples.len()
            ),
        ));
    }
    let (input_dim, output_dim) = (examples[0].0.len(), examples[0].1.len());
    for (i, (x, t)) in examples.iter().enumerate() {
        if x.len() != input_dim || t.len() != output_dim {
            return Err(SliceError::malformed(
                &display,
                format!("line {}: inconsistent record dims", i + 1),
            ));
        }
    }
    let eval = examples.split_off(train_count)[..eval_count].to_vec();
    Ok(Task {
        id: id.to_string(),
        kind,
        input_dim,
        output_dim,
        train: examples,
        eval,
        noise_std: 0.0,
        generator_seed: None,
    })
}

/// A source of mini-batches.
pub trait BatchSource {
    fn next_batch(&mut self, batch_size: usize) -> Result<Vec<Example>>;
}

/// Seeded draws from one split, with or without replacement.
pub struct SplitSampler<'a> {
    data: &'a [Example],
    rng: ChaCha8Rng,
    queue: Option<Vec<usize>>,
}

impl<'a> SplitSampler<'a> {
    /// Sampling with replacement (the default for gradient accumulation).
    pub fn with_replacement(data: &'a [Example], seed: u64) -> Self {
        SplitSampler {
            data,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: None,
        }
    }

    /// Sampling without replacement; exhausting the split is an error.
    pub fn without_replacement(data: &'a [Example], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        order.reverse();
        SplitSampler {
            data,
            rng,
            queue: Some(order),
        }
    }
}

impl BatchSource for SplitSampler<'_> {
    fn next_batch(&mut self, batch_size: usize) -> Result<Vec<Example>> {
        if batch_size == 0 {
            return Err(SliceError::InvalidConfig("batch_size must be positive".into()));
        }
        match &mut self.queue {
            None => Ok((0..batch_size)
                .map(|_| self.data[self.rng.random_range(0..self.data.len())].clone())
                .collect()),
            Some(queue) => {
                if queue.len() < batch_size {
                    return Err(SliceError::SamplerExhausted {
                        drawn: self.data.len() - queue.len(),
                        requested: batch_size,
                    });
                }
                Ok((0..batch_size)
                    .map(|_| self.data[queue.pop().expect("checked")].clone())
                    .collect())
            }
        }
    }
}
