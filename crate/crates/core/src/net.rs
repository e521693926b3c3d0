//! Softmax head and two-layer (FC1 → ReLU → FC2) network with exact
//! cross-entropy gradients and per-entry freeze masks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{validate_label, FeatureSet};
use crate::model::Network;
use crate::optim::{sgd_step, OptimizerState, TrainConfig};
use crate::rng::{stream, stream_rng};
use crate::scalar::{Scalar, dot};

/// Dense affine map with a per-entry freeze mask.
///
/// Row `r` only reads the first `row_width[r]` inputs; the stored entries
/// past that width are exactly zero and frozen. Expanded base rows keep
/// their original width, so their outputs are computed with the same
/// floating-point operations as before expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    rows: usize,
    cols: usize,
    weights: Vec<F>,
    bias: Option<Vec<F>>,
    frozen: Vec<bool>,
    bias_frozen: Vec<bool>,
    row_width: Vec<usize>,
}

/// Gradient with the same layout as a [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<F> {
    pub weights: Vec<F>,
    pub bias: Option<Vec<F>>,
}

impl<F: Scalar> LayerGrad<F> {
    pub fn zeros_like(layer: &Linear<F>) -> Self {
        Self {
            weights: vec![F::zero(); layer.weights.len()],
            bias: layer.bias.as_ref().map(|b| vec![F::zero(); b.len()]),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter().flatten())
            .all(|&g| g == F::zero())
    }

    fn scale(&mut self, s: F) {
        for g in self.weights.iter_mut().chain(self.bias.iter_mut().flatten()) {
            *g = *g * s;
        }
    }

    fn mask_frozen(&mut self, layer: &Linear<F>) {
        for (g, &f) in self.weights.iter_mut().zip(&layer.frozen) {
            if f {
                *g = F::zero();
            }
        }
        if let Some(b) = self.bias.as_mut() {
            for (g, &f) in b.iter_mut().zip(&layer.bias_frozen) {
                if f {
                    *g = F::zero();
                }
            }
        }
    }
}

/// Uniform Glorot bound `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn glorot_row<F: Scalar, R: Rng + ?Sized>(cols: usize, bound: f64, rng: &mut R) -> Vec<F> {
    (0..cols)
        .map(|_| F::of(rng.random_range(-bound..=bound)))
        .collect()
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(rows: usize, cols: usize, bias: bool) -> Self {
        Self {
            rows,
            cols,
            weights: vec![F::zero(); rows * cols],
            bias: bias.then(|| vec![F::zero(); rows]),
            frozen: vec![false; rows * cols],
            bias_frozen: vec![false; if bias { rows } else { 0 }],
            row_width: vec![cols; rows],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, bias: bool, rng: &mut R) -> Self {
        let mut layer = Self::zeros(rows, cols, bias);
        let bound = glorot_bound(cols, rows);
        for r in 0..rows {
            let row = glorot_row(cols, bound, rng);
            layer.weights[r * cols..(r + 1) * cols].copy_from_slice(&row);
        }
        layer
    }

    pub fn from_rows(rows: Vec<Vec<F>>, bias: Option<Vec<F>>) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(Error::InvalidModel("empty weight matrix".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: r.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != rows.len() {
                return Err(Error::DimensionMismatch {
                    expected: rows.len(),
                    found: b.len(),
                });
            }
        }
        let mut layer = Self::zeros(rows.len(), cols, bias.is_some());
        layer.weights = rows.into_iter().flatten().collect();
        layer.bias = bias;
        layer.check_finite()?;
        Ok(layer)
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self
            .weights
            .iter()
            .chain(self.bias.iter().flatten())
            .all(|w| w.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel("non-finite weight".into()))
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_width(&self, r: usize) -> usize {
        self.row_width[r]
    }

    pub fn bias(&self) -> Option<&[F]> {
        self.bias.as_deref()
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn is_frozen(&self, r: usize, c: usize) -> bool {
        self.frozen[r * self.cols + c]
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn bias_frozen_mask(&self) -> &[bool] {
        &self.bias_frozen
    }

    pub fn row_frozen(&self, r: usize) -> bool {
        self.frozen[r * self.cols..(r + 1) * self.cols]
            .iter()
            .all(|&f| f)
            && self.bias_frozen.get(r).copied().unwrap_or(true)
    }

    pub fn set_frozen_all(&mut self, frozen: bool) {
        for r in 0..self.rows {
            self.set_row_frozen(r, frozen);
        }
    }

    /// Freeze or unfreeze row `r`; entries past the row width stay frozen.
    pub fn set_row_frozen(&mut self, r: usize, frozen: bool) {
        let width = self.row_width[r];
        for c in 0..self.cols {
            self.frozen[r * self.cols + c] = frozen || c >= width;
        }
        if let Some(f) = self.bias_frozen.get_mut(r) {
            *f = frozen;
        }
    }

    pub(crate) fn set_masks(
        &mut self,
        frozen: Vec<bool>,
        bias_frozen: Vec<bool>,
        row_width: Vec<usize>,
    ) -> Result<()> {
        if frozen.len() != self.weights.len()
            || bias_frozen.len() != self.bias.as_ref().map_or(0, Vec::len)
            || row_width.len() != self.rows
        {
            return Err(Error::InvalidModel("mask shape mismatch".into()));
        }
        for (r, &w) in row_width.iter().enumerate() {
            if w > self.cols {
                return Err(Error::InvalidModel("row width exceeds columns".into()));
            }
            for c in w..self.cols {
                let i = r * self.cols + c;
                if self.weights[i] != F::zero() || !frozen[i] {
                    return Err(Error::InvalidModel(
                        "entries past a row's width must be frozen zeros".into(),
                    ));
                }
            }
        }
        self.frozen = frozen;
        self.bias_frozen = bias_frozen;
        self.row_width = row_width;
        Ok(())
    }

    /// Append trainable rows reading every column.
    pub(crate) fn push_rows(&mut self, rows: Vec<Vec<F>>) {
        for row in rows {
            debug_assert_eq!(row.len(), self.cols);
            self.weights.extend(row);
            self.frozen.extend(std::iter::repeat_n(false, self.cols));
            if let Some(b) = self.bias.as_mut() {
                b.push(F::zero());
                self.bias_frozen.push(false);
            }
            self.row_width.push(self.cols);
            self.rows += 1;
        }
    }

    /// Widen by `extra` columns. Existing rows keep their width; the new
    /// entries are frozen zeros.
    pub(crate) fn push_columns(&mut self, extra: usize) {
        let new_cols = self.cols + extra;
        let mut weights = Vec::with_capacity(self.rows * new_cols);
        let mut frozen = Vec::with_capacity(self.rows * new_cols);
        for r in 0..self.rows {
            weights.extend_from_slice(self.row(r));
            weights.extend(std::iter::repeat_n(F::zero(), extra));
            frozen.extend_from_slice(&self.frozen[r * self.cols..(r + 1) * self.cols]);
            frozen.extend(std::iter::repeat_n(true, extra));
        }
        self.weights = weights;
        self.frozen = frozen;
        self.cols = new_cols;
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let w = self.row_width[r];
                let z = dot(&self.row(r)[..w], &x[..w]);
                match &self.bias {
                    Some(b) => z + b[r],
                    None => z,
                }
            })
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.frozen.iter().chain(&self.bias_frozen).filter(|f| !**f).count()
    }

    fn gather_into(&self, values: &[F], bias: Option<&[F]>, out: &mut Vec<F>) {
        out.extend(
            values
                .iter()
                .zip(&self.frozen)
                .filter(|(_, f)| !**f)
                .map(|(v, _)| *v),
        );
        if let Some(b) = bias {
            out.extend(b.iter().zip(&self.bias_frozen).filter(|(_, f)| !**f).map(|(v, _)| *v));
        }
    }

    pub(crate) fn gather_params(&self, out: &mut Vec<F>) {
        self.gather_into(&self.weights, self.bias.as_deref(), out);
    }

    pub(crate) fn gather_grad(&self, grad: &LayerGrad<F>, out: &mut Vec<F>) {
        self.gather_into(&grad.weights, grad.bias.as_deref(), out);
    }

    /// Write trainable entries from `values`, returning how many were used.
    pub(crate) fn scatter_params(&mut self, values: &[F]) -> usize {
        let mut it = values.iter();
        for (w, f) in self.weights.iter_mut().zip(&self.frozen) {
            if !*f {
                *w = *it.next().expect("enough trainable values");
            }
        }
        if let Some(b) = self.bias.as_mut() {
            for (w, f) in b.iter_mut().zip(&self.bias_frozen) {
                if !*f {
                    *w = *it.next().expect("enough trainable values");
                }
            }
        }
        values.len() - it.len()
    }

    /// Accumulate `dout ⊗ input` into `grad`; returns `Wᵀ dout` when asked.
    fn backward(&self, input: &[F], dout: &[F], grad: &mut LayerGrad<F>, want_input_grad: bool) -> Option<Vec<F>> {
        let mut dinput = want_input_grad.then(|| vec![F::zero(); self.cols]);
        for (r, &d) in dout.iter().enumerate() {
            let w = self.row_width[r];
            let base = r * self.cols;
            for (g, &x) in grad.weights[base..base + w].iter_mut().zip(&input[..w]) {
                *g = *g + d * x;
            }
            if let Some(b) = grad.bias.as_mut() {
                b[r] = b[r] + d;
            }
            if let Some(di) = dinput.as_mut() {
                for (x, &wv) in di[..w].iter_mut().zip(&self.weights[base..base + w]) {
                    *x = *x + d * wv;
                }
            }
        }
        dinput
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln softmax(logits)[target]` without forming the probabilities.
pub fn cross_entropy<F: Scalar>(logits: &[F], target: usize) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
    lse - logits[target]
}

/// Index of the largest entry; first wins on ties.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub inputs: Vec<Vec<F>>,
    pub targets: Vec<usize>,
}

impl<F: Scalar> Batch<F> {
    pub fn new(inputs: Vec<Vec<F>>, targets: Vec<usize>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                found: targets.len(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn check(&self, dims: usize, classes: usize) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs.len(),
                found: self.targets.len(),
            });
        }
        if self.inputs.is_empty() {
            return Err(Error::EmptySet);
        }
        if let Some(v) = self.inputs.iter().find(|v| v.len() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: v.len(),
            });
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Config(format!("target index {t} out of range for {classes} classes")));
        }
        Ok(())
    }
}

fn check_labels(labels: &[String]) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        validate_label(l)?;
        if labels[..i].contains(l) {
            return Err(Error::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

/// Linear classification layer with one row per label.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead<F> {
    labels: Vec<String>,
    layer: Linear<F>,
}

impl<F: Scalar> SoftmaxHead<F> {
    pub fn new(labels: Vec<String>, layer: Linear<F>) -> Result<Self> {
        check_labels(&labels)?;
        if labels.len() != layer.rows() {
            return Err(Error::DimensionMismatch {
                expected: layer.rows(),
                found: labels.len(),
            });
        }
        Ok(Self { labels, layer })
    }

    /// Glorot-initialised head.
    pub fn init(labels: Vec<String>, in_dims: usize, bias: bool, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, stream::INIT);
        let layer = Linear::glorot(labels.len(), in_dims, bias, &mut rng);
        Self::new(labels, layer)
    }

    pub fn from_rows(labels: Vec<String>, rows: Vec<Vec<F>>, bias: Option<Vec<F>>) -> Result<Self> {
        Self::new(labels, Linear::from_rows(rows, bias)?)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn in_dims(&self) -> usize {
        self.layer.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn layer(&self) -> &Linear<F> {
        &self.layer
    }

    pub(crate) fn layer_mut(&mut self) -> &mut Linear<F> {
        &mut self.layer
    }

    pub(crate) fn labels_mut(&mut self) -> &mut Vec<String> {
        &mut self.labels
    }

    /// Number of leading rows that are entirely frozen.
    pub fn frozen_rows(&self) -> usize {
        (0..self.layer.rows())
            .take_while(|&r| self.layer.row_frozen(r))
            .count()
    }

    /// Freeze exactly the first `n` rows.
    pub fn set_frozen_rows(&mut self, n: usize) -> Result<()> {
        if n > self.classes() {
            return Err(Error::Config(format!("cannot freeze {n} of {} rows", self.classes())));
        }
        for r in 0..self.classes() {
            self.layer.set_row_frozen(r, r < n);
        }
        Ok(())
    }

    pub fn logits(&self, v: &[F]) -> Result<Vec<F>> {
        if v.len() != self.in_dims() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dims(),
                found: v.len(),
            });
        }
        Ok(self.layer.forward(v))
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch<F>) -> Result<F> {
        batch.check(self.in_dims(), self.classes())?;
        let total: F = batch
            .inputs
            .iter()
            .zip(&batch.targets)
            .map(|(v, &t)| cross_entropy(&self.layer.forward(v), t))
            .sum();
        Ok(total / F::of(batch.len() as f64))
    }

    /// Gradient of the mean cross-entropy; frozen entries are exactly zero.
    pub fn ce_grad(&self, batch: &Batch<F>) -> Result<LayerGrad<F>> {
        batch.check(self.in_dims(), self.classes())?;
        let mut grad = LayerGrad::zeros_like(&self.layer);
        for (v, &t) in batch.inputs.iter().zip(&batch.targets) {
            let mut d = softmax(&self.layer.forward(v));
            d[t] = d[t] - F::one();
            self.layer.backward(v, &d, &mut grad, false);
        }
        grad.scale(F::of(batch.len() as f64).recip());
        grad.mask_frozen(&self.layer);
        Ok(grad)
    }

    pub fn trainable_count(&self) -> usize {
        self.layer.trainable_count()
    }
}

/// Free-function form of [`SoftmaxHead::logits`].
pub fn head_logits<F: Scalar>(head: &SoftmaxHead<F>, v: &[F]) -> Result<Vec<F>> {
    head.logits(v)
}

/// Free-function form of [`SoftmaxHead::ce_grad`].
pub fn ce_grad_head<F: Scalar>(head: &SoftmaxHead<F>, batch: &Batch<F>) -> Result<LayerGrad<F>> {
    head.ce_grad(batch)
}

/// FC1 → ReLU → FC2 classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet<F> {
    fc1: Linear<F>,
    fc2: SoftmaxHead<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerGrad<F> {
    pub fc1: LayerGrad<F>,
    pub fc2: LayerGrad<F>,
}

impl<F: Scalar> TwoLayerGrad<F> {
    pub fn is_zero(&self) -> bool {
        self.fc1.is_zero() && self.fc2.is_zero()
    }
}

impl<F: Scalar> TwoLayerNet<F> {
    pub fn new(fc1: Linear<F>, fc2: SoftmaxHead<F>) -> Result<Self> {
        if fc2.in_dims() != fc1.rows() {
            return Err(Error::DimensionMismatch {
                expected: fc1.rows(),
                found: fc2.in_dims(),
            });
        }
        Ok(Self { fc1, fc2 })
    }

    /// Glorot-initialised network `input → hidden → labels.len()`.
    pub fn init(input: usize, hidden: usize, labels: Vec<String>, bias: bool, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let mut rng = stream_rng(seed, stream::INIT);
        let fc1 = Linear::glorot(hidden, input, bias, &mut rng);
        let fc2 = Linear::glorot(labels.len(), hidden, bias, &mut rng);
        Self::new(fc1, SoftmaxHead::new(labels, fc2)?)
    }

    pub fn fc1(&self) -> &Linear<F> {
        &self.fc1
    }

    pub fn fc2(&self) -> &SoftmaxHead<F> {
        &self.fc2
    }

    pub(crate) fn fc1_mut(&mut self) -> &mut Linear<F> {
        &mut self.fc1
    }

    pub(crate) fn fc2_mut(&mut self) -> &mut SoftmaxHead<F> {
        &mut self.fc2
    }

    pub fn labels(&self) -> &[String] {
        self.fc2.labels()
    }

    pub fn input_dims(&self) -> usize {
        self.fc1.cols()
    }

    pub fn hidden_dims(&self) -> usize {
        self.fc1.rows()
    }

    pub fn classes(&self) -> usize {
        self.fc2.classes()
    }

    pub fn set_frozen_all(&mut self, frozen: bool) {
        self.fc1.set_frozen_all(frozen);
        self.fc2.layer.set_frozen_all(frozen);
    }

    pub fn forward(&self, v: &[F]) -> Result<(Vec<F>, Vec<F>)> {
        if v.len() != self.input_dims() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dims(),
                found: v.len(),
            });
        }
        let hidden: Vec<F> = self.fc1.forward(v).into_iter().map(|z| z.max(F::zero())).collect();
        let logits = self.fc2.layer.forward(&hidden);
        Ok((hidden, logits))
    }

    pub fn logits(&self, v: &[F]) -> Result<Vec<F>> {
        self.forward(v).map(|(_, z)| z)
    }

    pub fn loss(&self, batch: &Batch<F>) -> Result<F> {
        batch.check(self.input_dims(), self.classes())?;
        let mut total = F::zero();
        for (v, &t) in batch.inputs.iter().zip(&batch.targets) {
            total = total + cross_entropy(&self.logits(v)?, t);
        }
        Ok(total / F::of(batch.len() as f64))
    }

    pub(crate) fn zero_grad(&self) -> TwoLayerGrad<F> {
        TwoLayerGrad {
            fc1: LayerGrad::zeros_like(&self.fc1),
            fc2: LayerGrad::zeros_like(&self.fc2.layer),
        }
    }

    /// Backpropagate an arbitrary logit gradient for one input.
    pub(crate) fn accumulate(&self, v: &[F], hidden: &[F], dlogits: &[F], grad: &mut TwoLayerGrad<F>, fc1_trainable: bool) {
        let dhidden = self.fc2.layer.backward(hidden, dlogits, &mut grad.fc2, fc1_trainable);
        if let Some(mut dh) = dhidden {
            for (d, &h) in dh.iter_mut().zip(hidden) {
                if h <= F::zero() {
                    *d = F::zero();
                }
            }
            self.fc1.backward(v, &dh, &mut grad.fc1, false);
        }
    }

    pub(crate) fn finish_grad(&self, grad: &mut TwoLayerGrad<F>, batch_len: usize) {
        let s = F::of(batch_len as f64).recip();
        grad.fc1.scale(s);
        grad.fc2.scale(s);
        grad.fc1.mask_frozen(&self.fc1);
        grad.fc2.mask_frozen(&self.fc2.layer);
    }

    /// Exact backprop gradient of the mean cross-entropy.
    pub fn ce_grad(&self, batch: &Batch<F>) -> Result<TwoLayerGrad<F>> {
        batch.check(self.input_dims(), self.classes())?;
        let mut grad = self.zero_grad();
        let fc1_trainable = self.fc1.trainable_count() > 0;
        for (v, &t) in batch.inputs.iter().zip(&batch.targets) {
            let (hidden, logits) = self.forward(v)?;
            let mut d = softmax(&logits);
            d[t] = d[t] - F::one();
            self.accumulate(v, &hidden, &d, &mut grad, fc1_trainable);
        }
        self.finish_grad(&mut grad, batch.len());
        Ok(grad)
    }

    pub fn trainable_count(&self) -> usize {
        self.fc1.trainable_count() + self.fc2.trainable_count()
    }

    pub fn trainable_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.trainable_count());
        self.fc1.gather_params(&mut out);
        self.fc2.layer.gather_params(&mut out);
        out
    }

    pub fn set_trainable_params(&mut self, values: &[F]) {
        assert_eq!(values.len(), self.trainable_count(), "trainable parameter count");
        let used = self.fc1.scatter_params(values);
        self.fc2.layer.scatter_params(&values[used..]);
    }

    pub fn flatten_grad(&self, grad: &TwoLayerGrad<F>) -> Vec<F> {
        let mut out = Vec::with_capacity(self.trainable_count());
        self.fc1.gather_grad(&grad.fc1, &mut out);
        self.fc2.layer.gather_grad(&grad.fc2, &mut out);
        out
    }
}

pub fn two_layer_forward<F: Scalar>(net: &TwoLayerNet<F>, v: &[F]) -> Result<(Vec<F>, Vec<F>)> {
    net.forward(v)
}

pub fn ce_grad_two_layer<F: Scalar>(net: &TwoLayerNet<F>, batch: &Batch<F>) -> Result<TwoLayerGrad<F>> {
    net.ce_grad(batch)
}

/// Train a fresh two-layer network on `features` with momentum SGD over
/// shuffled mini-batches of `batch_per_class × classes` records.
pub fn train_base<F: Scalar>(
    features: &FeatureSet<F>,
    hidden: usize,
    labels: &[String],
    cfg: &TrainConfig,
) -> Result<TwoLayerNet<F>> {
    cfg.validate()?;
    let (inputs, targets) = encode(features, labels)?;
    let net = TwoLayerNet::init(features.dims(), hidden, labels.to_vec(), false, cfg.seed)?;
    match fit(Network::TwoLayer(net), &inputs, &targets, cfg)? {
        Network::TwoLayer(net) => Ok(net),
        Network::Head(_) => unreachable!("training keeps the architecture"),
    }
}

/// Same recipe as [`train_base`] for a single softmax layer on the raw
/// features.
pub fn train_head<F: Scalar>(features: &FeatureSet<F>, labels: &[String], cfg: &TrainConfig) -> Result<SoftmaxHead<F>> {
    cfg.validate()?;
    let (inputs, targets) = encode(features, labels)?;
    let head = SoftmaxHead::init(labels.to_vec(), features.dims(), false, cfg.seed)?;
    match fit(Network::Head(head), &inputs, &targets, cfg)? {
        Network::Head(head) => Ok(head),
        Network::TwoLayer(_) => unreachable!("training keeps the architecture"),
    }
}

fn encode<F: Scalar>(features: &FeatureSet<F>, labels: &[String]) -> Result<(Vec<Vec<F>>, Vec<usize>)> {
    if labels.len() < 2 {
        return Err(Error::Config("base training needs at least two labels".into()));
    }
    check_labels(labels)?;
    let mut inputs = Vec::with_capacity(features.len());
    let mut targets = Vec::with_capacity(features.len());
    for r in features.records() {
        let t = labels
            .iter()
            .position(|l| *l == r.label)
            .ok_or_else(|| Error::UnknownLabel(r.label.clone()))?;
        inputs.push(r.values.clone());
        targets.push(t);
    }
    for (i, l) in labels.iter().enumerate() {
        if !targets.contains(&i) {
            return Err(Error::Config(format!("label `{l}` has no samples")));
        }
    }
    Ok((inputs, targets))
}

/// Momentum SGD on cross-entropy over reshuffled passes of the data.
fn fit<F: Scalar>(mut net: Network<F>, inputs: &[Vec<F>], targets: &[usize], cfg: &TrainConfig) -> Result<Network<F>> {
    let mut order_rng = stream_rng(cfg.seed, stream::SHUFFLE);
    let mut mask_rng = stream_rng(cfg.seed, stream::MASK);
    let mut state = OptimizerState::new(net.trainable_count());
    let batch_size = (cfg.batch_per_class * net.labels().len()).min(inputs.len());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len();
    let mut running = F::zero();
    for iter in 0..cfg.iters {
        let mut idx = Vec::with_capacity(batch_size);
        while idx.len() < batch_size {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = Batch {
            inputs: idx.iter().map(|&i| inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| targets[i]).collect(),
        };
        let grad = net.ce_grad_flat(&batch)?;
        let mut params = net.trainable_params();
        sgd_step(&mut params, &mut state, &grad, cfg, &mut mask_rng);
        net.set_trainable_params(&params);
        if cfg.verbose {
            running = running + net.loss(&batch)?;
            if (iter + 1) % 100 == 0 {
                println!("iter {} loss {:.6}", iter + 1, running.as_f64() / 100.0);
                running = F::zero();
            }
        }
    }
    if net.trainable_params().iter().any(|w| !w.is_finite()) {
        return Err(Error::Numerical("training diverged".into()));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let head = SoftmaxHead::<f64>::from_rows(labels(3), vec![vec![0.0; 4]; 3], None).unwrap();
        assert_eq!(head.logits(&[1.0, -2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_head_logits() {
        let head = SoftmaxHead::from_rows(labels(2), vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        let ln2 = 2f64.ln();
        assert_eq!(head_logits(&head, &[ln2, 0.0]).unwrap(), vec![ln2, 0.0]);
        assert!(head.logits(&[1.0]).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert_relative_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = softmax(&[1000.0f64, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1e8f64, -1e8, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn head_grad_hand_case() {
        let head = SoftmaxHead::from_rows(labels(2), vec![vec![0.0, 0.0]; 2], None).unwrap();
        let batch = Batch::new(vec![vec![1.0, 0.0]], vec![0]).unwrap();
        let g = ce_grad_head(&head, &batch).unwrap();
        assert_eq!(g.weights, vec![-0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn head_grad_vanishes_at_saturated_optimum() {
        let head = SoftmaxHead::from_rows(labels(2), vec![vec![1000.0], vec![-1000.0]], None).unwrap();
        let batch = Batch::new(vec![vec![1.0]], vec![0]).unwrap();
        assert!(head.ce_grad(&batch).unwrap().is_zero());
    }

    #[test]
    fn frozen_rows_get_zero_grad() {
        let mut head = SoftmaxHead::<f64>::init(labels(3), 2, true, 1).unwrap();
        head.set_frozen_rows(2).unwrap();
        assert_eq!(head.frozen_rows(), 2);
        let batch = Batch::new(vec![vec![0.3, -0.2], vec![1.0, 2.0]], vec![0, 2]).unwrap();
        let g = head.ce_grad(&batch).unwrap();
        assert!(g.weights[..4].iter().all(|&x| x == 0.0));
        assert_eq!(g.bias.as_ref().unwrap()[..2], [0.0, 0.0]);
        assert!(g.weights[4..].iter().any(|&x| x != 0.0));
        assert_eq!(head.trainable_count(), 3);
    }

    #[test]
    fn batch_validation() {
        let head = SoftmaxHead::<f64>::init(labels(2), 2, false, 1).unwrap();
        assert!(Batch::<f64>::new(vec![vec![0.0, 0.0]], vec![]).is_err());
        let bad_target = Batch::new(vec![vec![0.0, 0.0]], vec![2]).unwrap();
        assert!(head.ce_grad(&bad_target).is_err());
        let bad_dims = Batch::new(vec![vec![0.0]], vec![0]).unwrap();
        assert!(head.ce_grad(&bad_dims).is_err());
    }

    #[test]
    fn two_layer_zero_fc1_yields_zero_logits() {
        let fc1 = Linear::<f64>::zeros(3, 2, false);
        let fc2 = SoftmaxHead::init(labels(2), 3, false, 0).unwrap();
        let net = TwoLayerNet::new(fc1, fc2).unwrap();
        let (h, z) = two_layer_forward(&net, &[1.0, 2.0]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(z, vec![0.0; 2]);
    }

    #[test]
    fn two_layer_rectifier_zeroes_negative() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let fc1 = Linear::from_rows(eye.clone(), None).unwrap();
        let fc2 = SoftmaxHead::from_rows(labels(2), eye, None).unwrap();
        let net = TwoLayerNet::new(fc1, fc2).unwrap();
        assert_eq!(net.logits(&[-1.5, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn fully_frozen_net_has_zero_grad() {
        let mut net = TwoLayerNet::<f64>::init(4, 3, labels(2), true, 5).unwrap();
        net.set_frozen_all(true);
        let batch = Batch::new(vec![vec![0.1, 0.2, 0.3, 0.4]], vec![1]).unwrap();
        assert!(net.ce_grad(&batch).unwrap().is_zero());
        assert_eq!(net.trainable_count(), 0);
    }

    #[test]
    fn param_gather_scatter_round_trip() {
        let mut net = TwoLayerNet::<f64>::init(3, 4, labels(2), true, 9).unwrap();
        net.fc2_mut().set_frozen_rows(1).unwrap();
        let before = net.clone();
        let p = net.trainable_params();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 + 1);
        net.set_trainable_params(&p);
        assert_eq!(net, before);
    }

    #[test]
    fn train_base_rejects_single_label() {
        let mut set = FeatureSet::<f64>::new(1).unwrap();
        set.push("a", vec![1.0]).unwrap();
        let err = train_base(&set, 4, &["a".to_string()], &TrainConfig::base());
        assert!(err.is_err());
        let err = train_base(&set, 4, &["a".to_string(), "b".to_string()], &TrainConfig::base());
        assert!(err.is_err(), "label b has no samples");
    }
}
