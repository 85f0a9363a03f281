//! Desk-scale dense models: frozen base weights with optional low-rank
//! adapters attached per target layer.
//!
//! The base weights never change after construction; training mutates only
//! adapter factors. Gradients are always taken with respect to the
//! effective per-layer weight `W = W0 + s·BA` and attributed to the layer.

use crate::error::{Result, SliceError};
use crate::init::AdapterPair;
use crate::linalg::{matmul, matvec, DenseMatrix};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One labeled example: `(input, target)`.
pub type Example = (Vec<f64>, Vec<f64>);

/// Adapters keyed by target-layer index.
pub type AdapterSet = BTreeMap<usize, AdapterPair>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MeanSquaredError,
    SoftmaxCrossEntropy,
}

/// Frozen base weights of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w0: DenseMatrix,
    pub bias: Option<Vec<f64>>,
    pub target: bool,
}

impl LayerWeights {
    pub fn new(w0: DenseMatrix, bias: Option<Vec<f64>>, target: bool) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w0.rows() {
                return Err(SliceError::InvalidConfig(format!(
                    "bias length {} does not match layer output dim {}",
                    b.len(),
                    w0.rows()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(SliceError::InvalidConfig("non-finite bias entry".into()));
            }
        }
        Ok(LayerWeights { w0, bias, target })
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }
}

/// A stack of dense layers with an activation between layers (none after
/// the last) and a fixed loss kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseModel {
    layers: Vec<LayerWeights>,
    activation: Activation,
    loss_kind: LossKind,
}

impl DenseModel {
    pub fn new(
        layers: Vec<LayerWeights>,
        activation: Activation,
        loss_kind: LossKind,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(SliceError::InvalidConfig("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(SliceError::InvalidConfig(format!(
                    "layer dims do not chain: {}x{} feeds {}x{}",
                    pair[0].d_out(),
                    pair[0].d_in(),
                    pair[1].d_out(),
                    pair[1].d_in()
                )));
            }
        }
        Ok(DenseModel {
            layers,
            activation,
            loss_kind,
        })
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Indices of layers that receive adapters.
    pub fn target_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.target)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replace base weights, keeping bias/target/activation/loss unchanged.
    pub fn with_base_weights(&self, weights: Vec<DenseMatrix>) -> Result<DenseModel> {
        if weights.len() != self.layers.len() {
            return Err(SliceError::InvalidConfig(format!(
                "expected {} weight matrices, got {}",
                self.layers.len(),
                weights.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(weights)
            .map(|(layer, w0)| {
                if w0.shape() != layer.w0.shape() {
                    return Err(SliceError::ShapeMismatch {
                        expected_rows: layer.w0.rows(),
                        expected_cols: layer.w0.cols(),
                        got_rows: w0.rows(),
                        got_cols: w0.cols(),
                    });
                }
                Ok(LayerWeights {
                    w0,
                    bias: layer.bias.clone(),
                    target: layer.target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseModel {
            layers,
            activation: self.activation,
            loss_kind: self.loss_kind,
        })
    }

    /// Per-layer effective weights `W0 + s·BA` under the given adapters.
    pub fn effective_weights(&self, adapters: &AdapterSet) -> Result<Vec<DenseMatrix>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            match adapters.get(&idx) {
                None => out.push(layer.w0.clone()),
                Some(pair) => {
                    pair.check_host_shape(layer.d_out(), layer.d_in())?;
                    let update = matmul(&pair.b, &pair.a)?;
                    out.push(layer.w0.add(&update.scale(pair.scaling))?);
                }
            }
        }
        Ok(out)
    }

    fn forward_through(
        &self,
        effective: &[DenseMatrix],
        input: &[f64],
    ) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(SliceError::DimensionMismatch {
                left_rows: self.input_dim(),
                left_cols: 1,
                right_rows: input.len(),
                right_cols: 1,
            });
        }
        let last = self.layers.len() - 1;
        let mut x = input.to_vec();
        for (idx, (layer, w)) in self.layers.iter().zip(effective).enumerate() {
            let mut z = matvec(w, &x)?;
            if let Some(bias) = &layer.bias {
                for (zi, bi) in z.iter_mut().zip(bias) {
                    *zi += bi;
                }
            }
            x = if idx < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z
            };
        }
        Ok(x)
    }

    /// Forward pass with adapters attached.
    pub fn forward(&self, adapters: &AdapterSet, input: &[f64]) -> Result<Vec<f64>> {
        let effective = self.effective_weights(adapters)?;
        self.forward_through(&effective, input)
    }

    /// Forward pass of the bare base model.
    pub fn forward_base(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(&AdapterSet::new(), input)
    }

    /// Mean per-example loss over a batch.
    pub fn loss(&self, adapters: &AdapterSet, batch: &[Example]) -> Result<f64> {
        let effective = self.effective_weights(adapters)?;
        self.loss_through(&effective, batch)
    }

    fn loss_through(&self, effective: &[DenseMatrix], batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(SliceError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let d_out = self.output_dim() as f64;
        let mut total = 0.0;
        for (input, target) in batch {
            let y = self.forward_through(effective, input)?;
            if target.len() != y.len() {
                return Err(SliceError::DimensionMismatch {
                    left_rows: y.len(),
                    left_cols: 1,
                    right_rows: target.len(),
                    right_cols: 1,
                });
            }
            match self.loss_kind {
                LossKind::MeanSquaredError => {
                    let sq: f64 = y
                        .iter()
                        .zip(target)
                        .map(|(yi, ti)| (yi - ti) * (yi - ti))
                        .sum();
                    total += sq / d_out;
                }
                LossKind::SoftmaxCrossEntropy => {
                    let log_p = log_softmax(&y);
                    let ce: f64 = target.iter().zip(&log_p).map(|(t, lp)| -t * lp).sum();
                    total += ce;
                }
            }
        }
        Ok(total / n)
    }

    /// Exact backpropagated `∂loss/∂W` for every layer, as a map over
    /// target-layer indices. Evaluated at the effective weights.
    pub fn layer_gradients(
        &self,
        adapters: &AdapterSet,
        batch: &[Example],
    ) -> Result<BTreeMap<usize, DenseMatrix>> {
        let effective = self.effective_weights(adapters)?;
        self.layer_gradients_through(&effective, batch)
    }

    pub(crate) fn layer_gradients_through(
        &self,
        effective: &[DenseMatrix],
        batch: &[Example],
    ) -> Result<BTreeMap<usize, DenseMatrix>> {
        if batch.is_empty() {
            return Err(SliceError::EmptyBatch);
        }
        let n_layers = self.layers.len();
        let last = n_layers - 1;
        let n = batch.len() as f64;
        let d_out = self.output_dim() as f64;

        let mut grads: Vec<DenseMatrix> = self
            .layers
            .iter()
            .map(|l| DenseMatrix::zeros(l.d_out(), l.d_in()))
            .collect();

        for (input, target) in batch {
            if input.len() != self.input_dim() {
                return Err(SliceError::DimensionMismatch {
                    left_rows: self.input_dim(),
                    left_cols: 1,
                    right_rows: input.len(),
                    right_cols: 1,
                });
            }
            // Forward, keeping layer inputs and preactivations.
            let mut layer_inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
            let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
            let mut x = input.clone();
            for (idx, (layer, w)) in self.layers.iter().zip(effective).enumerate() {
                layer_inputs.push(x.clone());
                let mut z = matvec(w, &x)?;
                if let Some(bias) = &layer.bias {
                    for (zi, bi) in z.iter_mut().zip(bias) {
                        *zi += bi;
                    }
                }
                preacts.push(z.clone());
                x = if idx < last {
                    z.iter().map(|&v| self.activation.apply(v)).collect()
                } else {
                    z
                };
            }
            let y = &x;
            if target.len() != y.len() {
                return Err(SliceError::DimensionMismatch {
                    left_rows: y.len(),
                    left_cols: 1,
                    right_rows: target.len(),
                    right_cols: 1,
                });
            }

            // dL/dy for this example, already carrying the batch mean factor.
            let mut delta: Vec<f64> = match self.loss_kind {
                LossKind::MeanSquaredError => y
                    .iter()
                    .zip(target)
                    .map(|(yi, ti)| 2.0 * (yi - ti) / (n * d_out))
                    .collect(),
                LossKind::SoftmaxCrossEntropy => {
                    let p = softmax(y);
                    let t_sum: f64 = target.iter().sum();
                    p.iter()
                        .zip(target)
                        .map(|(pi, ti)| (pi * t_sum - ti) / n)
                        .collect()
                }
            };

            for idx in (0..n_layers).rev() {
                let x_in = &layer_inputs[idx];
                let g = &mut grads[idx];
                for (r, dr) in delta.iter().enumerate() {
                    if *dr == 0.0 {
                        continue;
                    }
                    for (c, xc) in x_in.iter().enumerate() {
                        let cur = g.get(r, c);
                        g.set(r, c, cur + dr * xc);
                    }
                }
                if idx > 0 {
                    let back = matvec(&effective[idx].transpose(), &delta)?;
                    delta = back
                        .iter()
                        .zip(&preacts[idx - 1])
                        .map(|(b, z)| b * self.activation.derivative(*z))
                        .collect();
                }
            }
        }

        Ok(self
            .target_layers()
            .into_iter()
            .map(|idx| (idx, grads[idx].clone()))
            .collect())
    }
}

/// Frozen Gaussian base model: one layer per adjacent pair of `dims`,
/// weights N(0, std^2) drawn from a named sub-seed of `seed`, zero bias
/// when `bias` is set.
pub fn gaussian_base_model(
    dims: &[usize],
    activation: Activation,
    loss_kind: LossKind,
    bias: bool,
    targets: &[bool],
    std: f64,
    seed: u64,
) -> Result<DenseModel> {
    use rand::Rng;
    if dims.len() < 2 {
        return Err(SliceError::InvalidConfig(
            "model needs at least [in, out] dims".into(),
        ));
    }
    if targets.len() != dims.len() - 1 {
        return Err(SliceError::InvalidConfig(format!(
            "target mask covers {} layers, dims describe {}",
            targets.len(),
            dims.len() - 1
        )));
    }
    let mut rng = crate::seeds::rng(seed, "base-model", 0);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (pair, &target) in dims.windows(2).zip(targets) {
        let (d_in, d_out) = (pair[0], pair[1]);
        let w = DenseMatrix::from_fn(d_out, d_in, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * std
        });
        let b = bias.then(|| vec![0.0; d_out]);
        layers.push(LayerWeights::new(w, b, target)?);
    }
    DenseModel::new(layers, activation, loss_kind)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|&v| v - max - log_sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_layer(w: DenseMatrix) -> LayerWeights {
        LayerWeights::new(w, None, true).unwrap()
    }

    fn single_layer_model(w: DenseMatrix, loss: LossKind) -> DenseModel {
        DenseModel::new(vec![linear_layer(w)], Activation::Identity, loss).unwrap()
    }

    #[test]
    fn identity_layer_is_identity_map() {
        let model = single_layer_model(DenseMatrix::identity(3), LossKind::MeanSquaredError);
        let x = vec![0.5, -1.0, 2.0];
        assert_eq!(model.forward_base(&x).unwrap(), x);
    }

    #[test]
    fn linear_layer_applies_weight_and_bias() {
        let w = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let layer = LayerWeights::new(w, Some(vec![10.0, 20.0]), true).unwrap();
        let model =
            DenseModel::new(vec![layer], Activation::Identity, LossKind::MeanSquaredError)
                .unwrap();
        let y = model.forward_base(&[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![13.0, 27.0]);
    }

    #[test]
    fn zero_b_adapter_is_noop() {
        let w = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let model = single_layer_model(w, LossKind::MeanSquaredError);
        let pair = AdapterPair::new(
            DenseMatrix::zeros(2, 1),
            DenseMatrix::new(1, 2, vec![0.3, -0.4]).unwrap(),
            1,
            0.5,
        )
        .unwrap();
        let adapters: AdapterSet = [(0usize, pair)].into_iter().collect();
        let x = vec![0.7, -0.2];
        assert_eq!(
            model.forward(&adapters, &x).unwrap(),
            model.forward_base(&x).unwrap()
        );
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let model = single_layer_model(DenseMatrix::identity(3), LossKind::MeanSquaredError);
        assert!(model.forward_base(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_perfect_predictions_are_zero() {
        let model = single_layer_model(DenseMatrix::identity(2), LossKind::MeanSquaredError);
        let batch = vec![(vec![1.0, 2.0], vec![1.0, 2.0])];
        assert_eq!(model.loss(&AdapterSet::new(), &batch).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_example_scalar() {
        // Scalar output, prediction 2, target 0 -> loss 4.
        let model = single_layer_model(
            DenseMatrix::new(1, 1, vec![2.0]).unwrap(),
            LossKind::MeanSquaredError,
        );
        let batch = vec![(vec![1.0], vec![0.0])];
        assert_relative_eq!(model.loss(&AdapterSet::new(), &batch).unwrap(), 4.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in [2usize, 4, 7] {
            let model = single_layer_model(
                DenseMatrix::zeros(c, c),
                LossKind::SoftmaxCrossEntropy,
            );
            let mut target = vec![0.0; c];
            target[1] = 1.0;
            let batch = vec![(vec![1.0; c], target)];
            assert_relative_eq!(
                model.loss(&AdapterSet::new(), &batch).unwrap(),
                (c as f64).ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn loss_rejects_empty_batch() {
        let model = single_layer_model(DenseMatrix::identity(2), LossKind::MeanSquaredError);
        assert!(matches!(
            model.loss(&AdapterSet::new(), &[]),
            Err(SliceError::EmptyBatch)
        ));
    }

    #[test]
    fn linear_mse_gradient_closed_form() {
        // One linear layer, one example: grad = (2/d_out) * (Wx - t) * x^T.
        let w = DenseMatrix::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap();
        let model = single_layer_model(w.clone(), LossKind::MeanSquaredError);
        let x = vec![1.0, -2.0, 0.5];
        let t = vec![0.3, -0.7];
        let grads = model
            .layer_gradients(&AdapterSet::new(), &[(x.clone(), t.clone())])
            .unwrap();
        let y = model.forward_base(&x).unwrap();
        let g = &grads[&0];
        for r in 0..2 {
            for c in 0..3 {
                let expected = 2.0 / 2.0 * (y[r] - t[r]) * x[c];
                assert_relative_eq!(g.get(r, c), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let model = single_layer_model(DenseMatrix::identity(2), LossKind::MeanSquaredError);
        let batch = vec![(vec![1.0, -1.0], vec![1.0, -1.0])];
        let grads = model.layer_gradients(&AdapterSet::new(), &batch).unwrap();
        assert!(grads[&0].entries().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for (activation, loss) in [
            (Activation::Tanh, LossKind::MeanSquaredError),
            (Activation::Identity, LossKind::MeanSquaredError),
            (Activation::Tanh, LossKind::SoftmaxCrossEntropy),
        ] {
            let dims = [4usize, 5, 3];
            let mut layers = Vec::new();
            for w in dims.windows(2) {
                let m = DenseMatrix::from_fn(w[1], w[0], |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.7
                });
                layers.push(LayerWeights::new(m, None, true).unwrap());
            }
            let model = DenseModel::new(layers, activation, loss).unwrap();
            let mut batch = Vec::new();
            for _ in 0..3 {
                let x: Vec<f64> = (0..4)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let t: Vec<f64> = match loss {
                    LossKind::MeanSquaredError => (0..3)
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect(),
                    LossKind::SoftmaxCrossEntropy => {
                        let mut t = vec![0.0; 3];
                        t[rng.random_range(0..3)] = 1.0;
                        t
                    }
                };
                batch.push((x, t));
            }
            let grads = model.layer_gradients(&AdapterSet::new(), &batch).unwrap();
            let eps = 1e-5;
            for (idx, g) in &grads {
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let perturbed = |delta: f64| {
                            let mut weights: Vec<DenseMatrix> =
                                model.layers().iter().map(|l| l.w0.clone()).collect();
                            let cur = weights[*idx].get(r, c);
                            weights[*idx].set(r, c, cur + delta);
                            let m = model.with_base_weights(weights).unwrap();
                            m.loss(&AdapterSet::new(), &batch).unwrap()
                        };
                        let fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                        let got = g.get(r, c);
                        let tol = 1e-4 * fd.abs().max(got.abs()) + 1e-7;
                        assert!(
                            (fd - got).abs() <= tol,
                            "layer {idx} ({r},{c}): fd {fd} vs grad {got}"
                        );
                    }
                }
            }
        }
    }
}
