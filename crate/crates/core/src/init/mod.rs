//! Adapter construction: turn a reconciled gradient into initialized
//! low-rank pairs (factorization + variance-matched rescaling), provide the
//! baseline initializers under the identical rescaling protocol, and absorb
//! non-zero initializations into the base so the effective weight at step 0
//! is unchanged.

mod serialize;

pub use serialize::{load_adapter_set, save_adapter_set, AdapterSetFile, LayerManifestEntry};

use crate::error::{Result, SliceError};
use crate::gradients::{accumulate_gradients, build_prev_sampler, GradientSet, GradientSource};
use crate::linalg::{
    entrywise_variance, matmul, svd, DenseMatrix, SvdConfig, SvdMode,
};
use crate::model::{AdapterSet, DenseModel, LayerWeights};
use crate::seeds;
use crate::surgery::{pcgrad_project_with_report, SurgeryConfig, SurgeryReport};
use crate::tasks::{SplitSampler, Task};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One low-rank update `s·BA` attached to a host layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    /// `d_out x r`
    pub b: DenseMatrix,
    /// `r x d_in`
    pub a: DenseMatrix,
    pub rank: usize,
    /// Multiplier applied as `W_eff = W_base + scaling * B * A`.
    pub scaling: f64,
}

impl AdapterPair {
    pub fn new(b: DenseMatrix, a: DenseMatrix, rank: usize, scaling: f64) -> Result<Self> {
        if b.cols() != rank || a.rows() != rank {
            return Err(SliceError::InvalidConfig(format!(
                "factor shapes {}x{} / {}x{} do not match rank {}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols(),
                rank
            )));
        }
        if !scaling.is_finite() {
            return Err(SliceError::InvalidConfig("non-finite scaling".into()));
        }
        Ok(AdapterPair { b, a, rank, scaling })
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub(crate) fn check_host_shape(&self, d_out: usize, d_in: usize) -> Result<()> {
        if self.d_out() != d_out || self.d_in() != d_in {
            return Err(SliceError::ShapeMismatch {
                expected_rows: d_out,
                expected_cols: d_in,
                got_rows: self.d_out(),
                got_cols: self.d_in(),
            });
        }
        Ok(())
    }
}

/// How `scaling` is computed from `(alpha, rank)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingRule {
    /// Classic LoRA: `alpha / r`.
    AlphaOverRank,
    /// rs-LoRA: `alpha / sqrt(r)`.
    AlphaOverSqrtRank,
}

impl ScalingRule {
    pub fn scaling(self, alpha: f64, rank: usize) -> f64 {
        match self {
            ScalingRule::AlphaOverRank => alpha / rank as f64,
            ScalingRule::AlphaOverSqrtRank => alpha / (rank as f64).sqrt(),
        }
    }
}

/// Which right-singular-vector block seeds `Φ_A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorizeVariant {
    /// `Φ_A = (V[:, r:2r])ᵀ` — the validated default.
    SecondBlock,
    /// `Φ_A = (V[:, 0:r])ᵀ` — experimental alternative.
    LeadingBlock,
}

impl Default for FactorizeVariant {
    fn default() -> Self {
        FactorizeVariant::SecondBlock
    }
}

/// The rescaling audit record of Stage 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleReport {
    /// `Var(W0)`
    pub sigma_w_sq: f64,
    /// `Var(Φ_B Φ_A)`
    pub sigma_ba_sq: f64,
    /// `sigma_w_sq / sigma_ba_sq`
    pub eta_var: f64,
    /// `log_m(r)`
    pub eta_r: f64,
    /// `min(d_out, d_in)`
    pub m: usize,
    /// `(eta_r * eta_var)^(1/4)`
    pub beta: f64,
}

/// Split the top-2r singular structure of a reconciled gradient into the
/// adapter subspaces: `Φ_B` from the first r left singular vectors, `Φ_A`
/// from the (r+1)-th through 2r-th right singular vectors.
pub fn factorize(
    g_tilde: &DenseMatrix,
    rank: usize,
    svd_cfg: &SvdConfig,
    variant: FactorizeVariant,
) -> Result<(DenseMatrix, DenseMatrix)> {
    factorize_with_spectrum(g_tilde, rank, svd_cfg, variant).map(|(b, a, _)| (b, a))
}

/// As `factorize`, additionally returning the top-2r singular values.
pub fn factorize_with_spectrum(
    g_tilde: &DenseMatrix,
    rank: usize,
    svd_cfg: &SvdConfig,
    variant: FactorizeVariant,
) -> Result<(DenseMatrix, DenseMatrix, Vec<f64>)> {
    let min_dim = g_tilde.rows().min(g_tilde.cols());
    if rank == 0 || 2 * rank > min_dim {
        return Err(SliceError::RankTooLarge {
            requested: rank,
            max: min_dim / 2,
            rows: g_tilde.rows(),
            cols: g_tilde.cols(),
        });
    }
    if g_tilde.entries().iter().all(|&v| v == 0.0) {
        return Err(SliceError::Degenerate(
            "zero gradient matrix has no meaningful subspace".into(),
        ));
    }
    let decomp = svd(g_tilde, &svd_cfg.with_rank(2 * rank))?;
    let phi_b = decomp.u.columns(0, rank);
    let v_block = match variant {
        FactorizeVariant::SecondBlock => decomp.v.columns(rank, 2 * rank),
        FactorizeVariant::LeadingBlock => decomp.v.columns(0, rank),
    };
    Ok((phi_b, v_block.transpose(), decomp.singular_values))
}

/// Stage 4: scale both factors by `β = (η_r · η_var)^{1/4}` so that
/// `Var(B₀A₀) = η_r · Var(W₀)`.
pub fn magnitude_rescale(
    phi_b: &DenseMatrix,
    phi_a: &DenseMatrix,
    w0: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, RescaleReport)> {
    let rank = phi_b.cols();
    if phi_a.rows() != rank {
        return Err(SliceError::InvalidConfig(format!(
            "factor ranks disagree: Φ_B has {} columns, Φ_A has {} rows",
            rank,
            phi_a.rows()
        )));
    }
    let m = w0.rows().min(w0.cols());
    if rank < 2 {
        return Err(SliceError::Degenerate(
            "rank 1 is degenerate for magnitude rescaling (eta_r = 0 zeroes the init)".into(),
        ));
    }
    if rank > m {
        return Err(SliceError::RankTooLarge {
            requested: rank,
            max: m,
            rows: w0.rows(),
            cols: w0.cols(),
        });
    }
    let sigma_w_sq = entrywise_variance(w0)?;
    let product = matmul(phi_b, phi_a)?;
    let sigma_ba_sq = entrywise_variance(&product)?;
    if sigma_ba_sq <= 0.0 {
        return Err(SliceError::Degenerate(
            "Var(Φ_B Φ_A) = 0: nothing to rescale".into(),
        ));
    }
    let eta_var = sigma_w_sq / sigma_ba_sq;
    let eta_r = (rank as f64).ln() / (m as f64).ln();
    let beta = (eta_r * eta_var).powf(0.25);
    let report = RescaleReport {
        sigma_w_sq,
        sigma_ba_sq,
        eta_var,
        eta_r,
        m,
        beta,
    };
    Ok((phi_b.scale(beta), phi_a.scale(beta), report))
}

/// Configuration shared by every gradient-based initializer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub rank: usize,
    pub alpha: f64,
    pub scaling_rule: ScalingRule,
    /// Accumulation steps for the current-task gradient.
    pub s_cur: usize,
    /// Accumulation steps for the previous-tasks gradient.
    pub s_prev: usize,
    pub batch_size: usize,
    /// Fresh-sample size drawn per previous task.
    pub prev_per_task_budget: usize,
    pub surgery: SurgeryConfig,
    pub svd_mode: SvdMode,
    pub svd_oversampling_multiplier: usize,
    pub svd_power_iterations: usize,
    #[serde(default)]
    pub factorize_variant: FactorizeVariant,
    /// Master seed; all sampling/sketch randomness derives from it.
    pub seed: u64,
}

impl InitConfig {
    pub fn scaling(&self) -> f64 {
        self.scaling_rule.scaling(self.alpha, self.rank)
    }

    fn svd_config(&self, layer: usize) -> SvdConfig {
        SvdConfig {
            rank_requested: 2 * self.rank,
            oversampling_multiplier: self.svd_oversampling_multiplier,
            power_iterations: self.svd_power_iterations,
            mode: self.svd_mode,
            seed: seeds::derive(self.seed, "svd-sketch", layer as u64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 2 {
            return Err(SliceError::InvalidConfig(
                "rank must be >= 2 (rank 1 degenerates the rescaling)".into(),
            ));
        }
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(SliceError::InvalidConfig("alpha must be positive".into()));
        }
        if self.s_cur == 0 || self.s_prev == 0 || self.batch_size == 0 {
            return Err(SliceError::InvalidConfig(
                "accumulation steps and batch size must be positive".into(),
            ));
        }
        self.surgery.validate()
    }
}

/// Everything one initialization produces: the adapters plus the audit
/// trail the harness logs per stage.
#[derive(Debug, Clone)]
pub struct InitOutcome {
    pub pairs: AdapterSet,
    pub rescale_reports: BTreeMap<usize, RescaleReport>,
    pub surgery: Option<SurgeryReport>,
    /// Layers that fell back to vanilla init because their gradient was zero.
    pub fallback_layers: Vec<usize>,
    /// Top singular values of the reconciled gradient, per layer.
    pub singular_values: BTreeMap<usize, Vec<f64>>,
    /// Per-layer `<G_cur, G_prev>_F` (empty when no previous tasks).
    pub per_layer_inner: BTreeMap<usize, f64>,
}

/// Full conflict-aware initialization: estimate both gradients, reconcile,
/// factorize, rescale. With no previous tasks the surgery stage is skipped
/// and the result coincides with `lora_ga_init`.
pub fn slice_init(
    model: &DenseModel,
    cur_task: &Task,
    prev_tasks: &[&Task],
    cfg: &InitConfig,
) -> Result<InitOutcome> {
    cfg.validate()?;
    let no_adapters = AdapterSet::new();
    let mut cur_sampler = SplitSampler::with_replacement(
        &cur_task.train,
        seeds::derive(cfg.seed, "grad-cur", 0),
    );
    let g_cur = accumulate_gradients(
        model,
        &no_adapters,
        &mut cur_sampler,
        cfg.s_cur,
        cfg.batch_size,
        GradientSource::CurrentTask,
    )?;

    let (g_tilde, surgery, per_layer_inner) = if prev_tasks.is_empty() {
        (g_cur, None, BTreeMap::new())
    } else {
        let mut prev_sampler = build_prev_sampler(
            prev_tasks,
            cfg.prev_per_task_budget,
            seeds::derive(cfg.seed, "prev-sample", 0),
        )?;
        let g_prev = accumulate_gradients(
            model,
            &no_adapters,
            &mut prev_sampler,
            cfg.s_prev,
            cfg.batch_size,
            GradientSource::PreviousTasks,
        )?;
        let mut inners = BTreeMap::new();
        for (idx, gc) in &g_cur.per_layer {
            inners.insert(
                *idx,
                crate::linalg::frobenius_inner(gc, &g_prev.per_layer[idx])?,
            );
        }
        let (projected, report) = pcgrad_project_with_report(&g_cur, &g_prev, &cfg.surgery)?;
        (projected, Some(report), inners)
    };

    factorize_all(model, &g_tilde, cfg, surgery, per_layer_inner)
}

/// Gradient-alignment initialization from the current task only (the
/// surgery-free pipeline shared with `slice_init`).
pub fn lora_ga_init(model: &DenseModel, cur_task: &Task, cfg: &InitConfig) -> Result<InitOutcome> {
    slice_init(model, cur_task, &[], cfg)
}

fn factorize_all(
    model: &DenseModel,
    g_tilde: &GradientSet,
    cfg: &InitConfig,
    surgery: Option<SurgeryReport>,
    per_layer_inner: BTreeMap<usize, f64>,
) -> Result<InitOutcome> {
    let scaling = cfg.scaling();
    let mut pairs = AdapterSet::new();
    let mut rescale_reports = BTreeMap::new();
    let mut fallback_layers = Vec::new();
    let mut singular_values = BTreeMap::new();

    for (idx, grad) in &g_tilde.per_layer {
        let layer = &model.layers()[*idx];
        if grad.entries().iter().all(|&v| v == 0.0) {
            pairs.insert(
                *idx,
                vanilla_pair(layer, cfg, seeds::derive(cfg.seed, "fallback-init", *idx as u64))?,
            );
            fallback_layers.push(*idx);
            continue;
        }
        let (phi_b, phi_a, spectrum) =
            factorize_with_spectrum(grad, cfg.rank, &cfg.svd_config(*idx), cfg.factorize_variant)?;
        singular_values.insert(*idx, spectrum);
        let (b0, a0, report) = magnitude_rescale(&phi_b, &phi_a, &layer.w0)?;
        rescale_reports.insert(*idx, report);
        pairs.insert(*idx, AdapterPair::new(b0, a0, cfg.rank, scaling)?);
    }

    Ok(InitOutcome {
        pairs,
        rescale_reports,
        surgery,
        fallback_layers,
        singular_values,
        per_layer_inner,
    })
}

fn vanilla_pair(layer: &LayerWeights, cfg: &InitConfig, seed: u64) -> Result<AdapterPair> {
    let std = 1.0 / (layer.d_in() as f64).sqrt();
    let mut rng = seeds::rng(seed, "vanilla-a", 0);
    let a = DenseMatrix::from_fn(cfg.rank, layer.d_in(), |_, _| {
        rng.sample::<f64, _>(StandardNormal) * std
    });
    AdapterPair::new(
        DenseMatrix::zeros(layer.d_out(), cfg.rank),
        a,
        cfg.rank,
        cfg.scaling(),
    )
}

/// Standard LoRA initialization: `A` Gaussian with std `1/sqrt(d_in)`,
/// `B = 0`. No rescaling and no absorption needed since `BA = 0`.
pub fn vanilla_init(model: &DenseModel, cfg: &InitConfig) -> Result<InitOutcome> {
    cfg.validate()?;
    let mut pairs = AdapterSet::new();
    for idx in model.target_layers() {
        let layer = &model.layers()[idx];
        pairs.insert(
            idx,
            vanilla_pair(layer, cfg, seeds::derive(cfg.seed, "vanilla-init", idx as u64))?,
        );
    }
    Ok(InitOutcome {
        pairs,
        rescale_reports: BTreeMap::new(),
        surgery: None,
        fallback_layers: Vec::new(),
        singular_values: BTreeMap::new(),
        per_layer_inner: BTreeMap::new(),
    })
}

/// Orthonormal DST-II basis matrix of size `n`: column `k` samples the
/// `k`-th lowest-frequency basis function.
pub fn dst_ii_basis(n: usize) -> DenseMatrix {
    let nf = n as f64;
    DenseMatrix::from_fn(n, n, |i, j| {
        let scale = if j + 1 == n {
            (1.0 / nf).sqrt()
        } else {
            (2.0 / nf).sqrt()
        };
        scale * (std::f64::consts::PI * (j as f64 + 1.0) * (2.0 * i as f64 + 1.0) / (2.0 * nf)).sin()
    })
}

/// Deterministic orthogonal-basis initialization: factors from the lowest
/// `r` DST-II basis functions, then the same Stage-4 rescaling as every
/// other non-vanilla method.
pub fn loram_init(model: &DenseModel, cfg: &InitConfig) -> Result<InitOutcome> {
    cfg.validate()?;
    let scaling = cfg.scaling();
    let mut pairs = AdapterSet::new();
    let mut rescale_reports = BTreeMap::new();
    for idx in model.target_layers() {
        let layer = &model.layers()[idx];
        if cfg.rank > layer.d_out().min(layer.d_in()) {
            return Err(SliceError::RankTooLarge {
                requested: cfg.rank,
                max: layer.d_out().min(layer.d_in()),
                rows: layer.d_out(),
                cols: layer.d_in(),
            });
        }
        let phi_b = dst_ii_basis(layer.d_out()).columns(0, cfg.rank);
        let phi_a = dst_ii_basis(layer.d_in()).columns(0, cfg.rank).transpose();
        let (b0, a0, report) = magnitude_rescale(&phi_b, &phi_a, &layer.w0)?;
        rescale_reports.insert(idx, report);
        pairs.insert(idx, AdapterPair::new(b0, a0, cfg.rank, scaling)?);
    }
    Ok(InitOutcome {
        pairs,
        rescale_reports,
        surgery: None,
        fallback_layers: Vec::new(),
        singular_values: BTreeMap::new(),
        per_layer_inner: BTreeMap::new(),
    })
}

/// Absorb a non-zero initialization into the base weight:
/// `W_base = W0 - s·B₀A₀`, so attaching the pair afterwards reproduces the
/// original effective weight exactly.
pub fn absorb(layer: &LayerWeights, pair: &AdapterPair) -> Result<LayerWeights> {
    pair.check_host_shape(layer.d_out(), layer.d_in())?;
    let update = matmul(&pair.b, &pair.a)?;
    let w_base = layer.w0.sub(&update.scale(pair.scaling))?;
    LayerWeights::new(w_base, layer.bias.clone(), layer.target)
}

/// Absorb every pair of an adapter set, returning the adjusted model.
pub fn absorb_all(model: &DenseModel, pairs: &AdapterSet) -> Result<DenseModel> {
    let mut weights = Vec::with_capacity(model.layers().len());
    for (idx, layer) in model.layers().iter().enumerate() {
        match pairs.get(&idx) {
            None => weights.push(layer.w0.clone()),
            Some(pair) => weights.push(absorb(layer, pair)?.w0),
        }
    }
    model.with_base_weights(weights)
}

/// Fold trained adapters into the base: `W = W_base + s·BA`; the result
/// becomes the next stage's frozen base.
pub fn merge_all(model: &DenseModel, pairs: &AdapterSet) -> Result<DenseModel> {
    let weights = model.effective_weights(pairs)?;
    model.with_base_weights(weights)
}

/// Label of an initialization method, carried through run artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMethod {
    Slice { c: f64 },
    LoraGa,
    Vanilla,
    Loram,
}

impl InitMethod {
    pub fn name(&self) -> String {
        match self {
            InitMethod::Slice { c } => format!("slice(c={c})"),
            InitMethod::LoraGa => "lora_ga".into(),
            InitMethod::Vanilla => "vanilla".into(),
            InitMethod::Loram => "loram".into(),
        }
    }
}
