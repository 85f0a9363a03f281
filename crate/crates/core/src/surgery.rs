//! Gradient reconciliation: the parameterized PCGrad projection
//!
//! ```text
//! G̃ = G_cur - c * min(<G_cur, G_prev>_F, 0) / ||G_prev||_F^2 * G_prev
//! ```
//!
//! At `c = 1` this is standard PCGrad; at `c = 0` no correction is applied.
//! The `min(., 0)` gate keeps the correction active only under conflict
//! (negative inner product); otherwise the current gradient passes through
//! bit-exactly.

use crate::error::{Result, SliceError};
use crate::gradients::GradientSet;
use crate::linalg::{frobenius_inner, frobenius_norm_sq, kahan_sum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientScope {
    /// One scalar coefficient from the concatenation of all per-layer
    /// gradients, applied to every layer.
    Global,
    /// Independent coefficient per layer.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurgeryConfig {
    /// Projection strength in [0, 1].
    pub c: f64,
    pub coefficient_scope: CoefficientScope,
}

impl SurgeryConfig {
    pub fn global(c: f64) -> Self {
        SurgeryConfig {
            c,
            coefficient_scope: CoefficientScope::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.c) {
            return Err(SliceError::InvalidConfig(format!(
                "surgery coefficient c = {} outside [0, 1]",
                self.c
            )));
        }
        Ok(())
    }
}

/// Diagnostics of one projection, logged per stage by the harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub inner_product: f64,
    pub prev_norm_sq: f64,
    /// The scalar multiplier actually applied to `G_prev` (0 when inactive).
    pub coefficient: f64,
    pub cosine_before: f64,
    pub cosine_after: f64,
    pub active: bool,
}

fn global_inner(a: &GradientSet, b: &GradientSet) -> Result<f64> {
    let mut terms = Vec::with_capacity(a.per_layer.len());
    for (idx, ga) in &a.per_layer {
        let gb = b.per_layer.get(idx).ok_or(SliceError::InvalidConfig(format!(
            "gradient sets disagree on layer {idx}"
        )))?;
        terms.push(frobenius_inner(ga, gb)?);
    }
    Ok(kahan_sum(terms.into_iter()))
}

fn global_norm_sq(a: &GradientSet) -> f64 {
    kahan_sum(a.per_layer.values().map(frobenius_norm_sq))
}

fn check_compatible(g_cur: &GradientSet, g_prev: &GradientSet) -> Result<()> {
    if g_cur.per_layer.len() != g_prev.per_layer.len() {
        return Err(SliceError::InvalidConfig(format!(
            "gradient sets cover {} vs {} layers",
            g_cur.per_layer.len(),
            g_prev.per_layer.len()
        )));
    }
    for (idx, gc) in &g_cur.per_layer {
        let gp = g_prev
            .per_layer
            .get(idx)
            .ok_or(SliceError::InvalidConfig(format!(
                "gradient sets disagree on layer {idx}"
            )))?;
        if gc.shape() != gp.shape() {
            return Err(SliceError::ShapeMismatch {
                expected_rows: gc.rows(),
                expected_cols: gc.cols(),
                got_rows: gp.rows(),
                got_cols: gp.cols(),
            });
        }
    }
    Ok(())
}

/// Project `g_cur` against `g_prev` under `cfg`, returning the reconciled
/// gradient set and a diagnostics report (for global scope; per-layer scope
/// reports the concatenated view).
pub fn pcgrad_project_with_report(
    g_cur: &GradientSet,
    g_prev: &GradientSet,
    cfg: &SurgeryConfig,
) -> Result<(GradientSet, SurgeryReport)> {
    cfg.validate()?;
    check_compatible(g_cur, g_prev)?;

    let inner = global_inner(g_cur, g_prev)?;
    let prev_norm_sq = global_norm_sq(g_prev);
    let cur_norm = global_norm_sq(g_cur).sqrt();
    let prev_norm = prev_norm_sq.sqrt();
    let cosine_of = |inner: f64| {
        if cur_norm > 0.0 && prev_norm > 0.0 {
            inner / (cur_norm * prev_norm)
        } else {
            0.0
        }
    };

    let projected = match cfg.coefficient_scope {
        CoefficientScope::Global => {
            // A zero G_prev forces a zero inner product, so the inactive
            // branch below also covers it; no division happens.
            if cfg.c == 0.0 || inner >= 0.0 {
                g_cur.clone()
            } else {
                let coefficient = cfg.c * inner / prev_norm_sq;
                apply(g_cur, g_prev, |_| coefficient)?
            }
        }
        CoefficientScope::PerLayer => {
            if cfg.c == 0.0 {
                g_cur.clone()
            } else {
                let mut coeffs = std::collections::BTreeMap::new();
                for (idx, gc) in &g_cur.per_layer {
                    let gp = &g_prev.per_layer[idx];
                    let inner_l = frobenius_inner(gc, gp)?;
                    let norm_l = frobenius_norm_sq(gp);
                    let coeff = if inner_l < 0.0 {
                        cfg.c * inner_l / norm_l
                    } else {
                        0.0
                    };
                    coeffs.insert(*idx, coeff);
                }
                apply_per_layer(g_cur, g_prev, &coeffs)?
            }
        }
    };

    let after_inner = global_inner(&projected, g_prev)?;
    let active = cfg.c > 0.0 && inner < 0.0;
    let report = SurgeryReport {
        inner_product: inner,
        prev_norm_sq,
        coefficient: if active && cfg.coefficient_scope == CoefficientScope::Global {
            cfg.c * inner / prev_norm_sq
        } else {
            0.0
        },
        cosine_before: cosine_of(inner),
        cosine_after: cosine_of(after_inner),
        active,
    };
    Ok((projected, report))
}

/// Projection without the diagnostics report.
pub fn pcgrad_project(
    g_cur: &GradientSet,
    g_prev: &GradientSet,
    cfg: &SurgeryConfig,
) -> Result<GradientSet> {
    pcgrad_project_with_report(g_cur, g_prev, cfg).map(|(g, _)| g)
}

fn apply(
    g_cur: &GradientSet,
    g_prev: &GradientSet,
    coeff: impl Fn(usize) -> f64,
) -> Result<GradientSet> {
    let mut per_layer = std::collections::BTreeMap::new();
    for (idx, gc) in &g_cur.per_layer {
        let gp = &g_prev.per_layer[idx];
        per_layer.insert(*idx, gc.sub_scaled(coeff(*idx), gp)?);
    }
    Ok(GradientSet {
        per_layer,
        accumulation_steps: g_cur.accumulation_steps,
        batch_size: g_cur.batch_size,
        source: g_cur.source,
    })
}

fn apply_per_layer(
    g_cur: &GradientSet,
    g_prev: &GradientSet,
    coeffs: &std::collections::BTreeMap<usize, f64>,
) -> Result<GradientSet> {
    apply(g_cur, g_prev, |idx| coeffs[&idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::GradientSource;
    use crate::linalg::DenseMatrix;
    use std::collections::BTreeMap;

    fn set(layers: Vec<DenseMatrix>) -> GradientSet {
        GradientSet {
            per_layer: layers.into_iter().enumerate().collect::<BTreeMap<_, _>>(),
            accumulation_steps: 1,
            batch_size: 1,
            source: GradientSource::CurrentTask,
        }
    }

    fn m(rows: usize, cols: usize, e: &[f64]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, e.to_vec()).unwrap()
    }

    #[test]
    fn c_zero_returns_input_bit_exactly() {
        let g_cur = set(vec![m(2, 2, &[1.0, 2.0, 3.0, 4.0])]);
        let g_prev = set(vec![m(2, 2, &[-1.0, -2.0, -3.0, -4.0])]);
        let out = pcgrad_project(&g_cur, &g_prev, &SurgeryConfig::global(0.0)).unwrap();
        assert_eq!(out.per_layer, g_cur.per_layer);
    }

    #[test]
    fn antiparallel_full_projection_cancels() {
        let g_cur = set(vec![m(2, 2, &[1.0, 2.0, 3.0, 4.0])]);
        let g_prev = set(vec![m(2, 2, &[-1.0, -2.0, -3.0, -4.0])]);
        let out = pcgrad_project(&g_cur, &g_prev, &SurgeryConfig::global(1.0)).unwrap();
        assert!(out.per_layer[&0].max_abs() < 1e-12);
    }

    #[test]
    fn hand_worked_projection() {
        let g_cur = set(vec![m(2, 2, &[1.0, 2.0, 3.0, 4.0])]);
        let g_prev = set(vec![m(2, 2, &[0.0, -1.0, -1.0, 0.0])]);
        let (out, report) =
            pcgrad_project_with_report(&g_cur, &g_prev, &SurgeryConfig::global(1.0)).unwrap();
        assert_eq!(report.inner_product, -5.0);
        assert_eq!(report.prev_norm_sq, 2.0);
        let got = &out.per_layer[&0];
        let expected = m(2, 2, &[1.0, -0.5, 0.5, 4.0]);
        assert!(got.sub(&expected).unwrap().max_abs() < 1e-12);
        let after = frobenius_inner(got, &g_prev.per_layer[&0]).unwrap();
        assert!(after.abs() < 1e-12, "post-surgery inner {after}");
    }

    #[test]
    fn non_conflicting_inputs_pass_through() {
        let g_cur = set(vec![m(1, 2, &[1.0, 0.5])]);
        let g_prev = set(vec![m(1, 2, &[1.0, 1.0])]);
        let out = pcgrad_project(&g_cur, &g_prev, &SurgeryConfig::global(1.0)).unwrap();
        assert_eq!(out.per_layer, g_cur.per_layer);
    }

    #[test]
    fn zero_prev_gradient_is_noop_not_an_error() {
        let g_cur = set(vec![m(1, 2, &[1.0, 0.5])]);
        let g_prev = set(vec![m(1, 2, &[0.0, 0.0])]);
        let (out, report) =
            pcgrad_project_with_report(&g_cur, &g_prev, &SurgeryConfig::global(1.0)).unwrap();
        assert_eq!(out.per_layer, g_cur.per_layer);
        assert!(!report.active);
    }

    #[test]
    fn interpolation_identity_for_partial_c() {
        let g_cur = set(vec![m(2, 2, &[1.0, 2.0, 3.0, 4.0])]);
        let g_prev = set(vec![m(2, 2, &[0.0, -1.0, -1.0, 0.0])]);
        for c in [0.25, 0.5, 0.75] {
            let out = pcgrad_project(&g_cur, &g_prev, &SurgeryConfig::global(c)).unwrap();
            let after = frobenius_inner(&out.per_layer[&0], &g_prev.per_layer[&0]).unwrap();
            let expected = (1.0 - c) * -5.0;
            assert!(
                (after - expected).abs() <= 1e-10 * expected.abs(),
                "c={c}: {after} vs {expected}"
            );
        }
    }

    #[test]
    fn projection_at_full_strength_is_idempotent() {
        let g_cur = set(vec![m(2, 2, &[1.0, 2.0, 3.0, 4.0])]);
        let g_prev = set(vec![m(2, 2, &[0.0, -1.0, -1.0, 0.0])]);
        let cfg = SurgeryConfig::global(1.0);
        let once = pcgrad_project(&g_cur, &g_prev, &cfg).unwrap();
        let twice = pcgrad_project(&once, &g_prev, &cfg).unwrap();
        assert_eq!(once.per_layer, twice.per_layer);
    }

    #[test]
    fn global_scope_couples_layers() {
        // Layer 0 conflicts, layer 1 aligns; the global coefficient still
        // touches layer 1, the per-layer one does not.
        let g_cur = set(vec![m(1, 2, &[1.0, 0.0]), m(1, 2, &[1.0, 0.0])]);
        let g_prev = set(vec![m(1, 2, &[-2.0, 0.0]), m(1, 2, &[0.5, 0.0])]);
        let global = pcgrad_project(&g_cur, &g_prev, &SurgeryConfig::global(1.0)).unwrap();
        assert_ne!(global.per_layer[&1], g_cur.per_layer[&1]);
        let per_layer_cfg = SurgeryConfig {
            c: 1.0,
            coefficient_scope: CoefficientScope::PerLayer,
        };
        let per_layer = pcgrad_project(&g_cur, &g_prev, &per_layer_cfg).unwrap();
        assert_eq!(per_layer.per_layer[&1], g_cur.per_layer[&1]);
        // And in per-layer scope, layer 0 becomes orthogonal to its own prev.
        let after =
            frobenius_inner(&per_layer.per_layer[&0], &g_prev.per_layer[&0]).unwrap();
        assert!(after.abs() < 1e-12);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let g_cur = set(vec![m(1, 2, &[1.0, 0.0])]);
        let mut g_prev = set(vec![m(1, 2, &[1.0, 0.0])]);
        g_prev.per_layer.insert(7, m(1, 2, &[0.0, 0.0]));
        assert!(pcgrad_project(&g_cur, &g_prev, &SurgeryConfig::global(1.0)).is_err());
        let g_bad_shape = set(vec![m(2, 1, &[1.0, 0.0])]);
        assert!(pcgrad_project(&g_cur, &g_bad_shape, &SurgeryConfig::global(1.0)).is_err());
    }

    #[test]
    fn invalid_c_is_rejected() {
        let g = set(vec![m(1, 1, &[1.0])]);
        assert!(pcgrad_project(&g, &g, &SurgeryConfig::global(1.5)).is_err());
        assert!(pcgrad_project(&g, &g, &SurgeryConfig::global(-0.1)).is_err());
    }
}
