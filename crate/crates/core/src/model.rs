//! Small differentiable models standing in for a segmentation network.
//!
//! Parameters live in one flat vector; [`ToyModel::layout`] maps each layer
//! to its index range. Losses are data terms only: the ℓ2 weight-decay
//! coefficient contributes `λ·w` to the gradient and nothing to the loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::{Error, ParamVector, Result};

/// Smoothing constant of the soft-Dice loss.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LogisticClassifier,
    MlpSoftdiceSegmenter,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::LinearRegression,
        ModelKind::LogisticClassifier,
        ModelKind::MlpSoftdiceSegmenter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LinearRegression => "linear-regression",
            ModelKind::LogisticClassifier => "logistic-classifier",
            ModelKind::MlpSoftdiceSegmenter => "mlp-softdice-segmenter",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ModelKind::LinearRegression => 0,
            ModelKind::LogisticClassifier => 1,
            ModelKind::MlpSoftdiceSegmenter => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        ModelKind::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-regression" | "linear" => Ok(ModelKind::LinearRegression),
            "logistic-classifier" | "classifier" => Ok(ModelKind::LogisticClassifier),
            "mlp-softdice-segmenter" | "segmenter" => Ok(ModelKind::MlpSoftdiceSegmenter),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// One contiguous block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
    /// Inputs feeding each unit; zero for bias blocks.
    pub fan_in: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Hidden width; only used by the segmenter.
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub weight_decay: f64,
}

/// Held-out evaluation of a parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

impl ToyModel {
    pub fn linear_regression(input_dim: usize) -> Self {
        ToyModel {
            kind: ModelKind::LinearRegression,
            input_dim,
            hidden_dim: 0,
            output_dim: 1,
            weight_decay: 0.0,
        }
    }

    pub fn logistic_classifier(input_dim: usize, classes: usize) -> Self {
        ToyModel {
            kind: ModelKind::LogisticClassifier,
            input_dim,
            hidden_dim: 0,
            output_dim: classes,
            weight_decay: 0.0,
        }
    }

    /// Per-pixel mask predictor: `pixels -> hidden (tanh) -> pixels (sigmoid)`.
    pub fn segmenter(pixels: usize, hidden_dim: usize) -> Self {
        ToyModel {
            kind: ModelKind::MlpSoftdiceSegmenter,
            input_dim: pixels,
            hidden_dim,
            output_dim: pixels,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = match self.kind {
            ModelKind::LinearRegression => self.input_dim >= 1 && self.output_dim == 1,
            ModelKind::LogisticClassifier => self.input_dim >= 1 && self.output_dim >= 2,
            ModelKind::MlpSoftdiceSegmenter => self.input_dim >= 1 && self.hidden_dim >= 1 && self.output_dim >= 1,
        };
        if !dims_ok {
            return Err(Error::InvalidConfig(format!(
                "inconsistent shape for {}: input {}, hidden {}, output {}",
                self.kind, self.input_dim, self.hidden_dim, self.output_dim
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::new();
        let mut offset = 0;
        let mut push = |name, len, fan_in| {
            spans.push(LayerSpan {
                name,
                offset,
                len,
                fan_in,
            });
            offset += len;
        };
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticClassifier => {
                push("weights", self.output_dim * self.input_dim, self.input_dim);
                push("bias", self.output_dim, 0);
            }
            ModelKind::MlpSoftdiceSegmenter => {
                push("hidden.weights", self.hidden_dim * self.input_dim, self.input_dim);
                push("hidden.bias", self.hidden_dim, 0);
                push("output.weights", self.output_dim * self.hidden_dim, self.hidden_dim);
                push("output.bias", self.output_dim, 0);
            }
        }
        spans
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }

    /// Mean data loss over the batch.
    pub fn loss(&self, w: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check(w, batch)?;
        let mut scratch = Vec::new();
        Ok(self.accumulate(w.as_slice(), batch, None, &mut scratch))
    }

    /// Gradient of [`ToyModel::loss`] plus the decay term `λ·w`.
    pub fn gradient(&self, w: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        let (_, grad) = self.loss_and_gradient(w.as_slice(), batch)?;
        ParamVector::from_vec(grad).map_err(|_| Error::Diverged { iteration: 0 })
    }

    pub(crate) fn loss_and_gradient(&self, w: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.check_raw(w.len(), batch)?;
        let mut grad = vec![0.0; w.len()];
        let mut scratch = Vec::new();
        let loss = self.accumulate(w, batch, Some(&mut grad), &mut scratch);
        if self.weight_decay != 0.0 {
            for (g, &wi) in grad.iter_mut().zip(w) {
                *g += self.weight_decay * wi;
            }
        }
        Ok((loss, grad))
    }

    /// Model output for one input: regression value, class probabilities or
    /// per-pixel mask probabilities.
    pub fn predict(&self, w: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        w.ensure_len(self.param_count())?;
        if input.len() != self.input_dim {
            return Err(Error::mismatch(self.input_dim, input.len()));
        }
        let w = w.as_slice();
        Ok(match self.kind {
            ModelKind::LinearRegression => vec![self.affine(w, input)[0]],
            ModelKind::LogisticClassifier => softmax(&self.affine(w, input)),
            ModelKind::MlpSoftdiceSegmenter => {
                let mut hidden = Vec::new();
                let mut out = Vec::new();
                self.mlp_forward(w, input, &mut hidden, &mut out);
                out
            }
        })
    }

    /// Held-out loss and the kind's evaluation metric: MSE for regression,
    /// accuracy for the classifier, mean soft-Dice score for the segmenter.
    pub fn evaluate(&self, w: &ParamVector, data: &Dataset) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation dataset"));
        }
        let mut loss_sum = 0.0;
        let mut metric_sum = 0.0;
        for ex in data.examples() {
            let out = self.predict(w, &ex.input)?;
            if ex.target.len() != self.output_dim {
                return Err(Error::mismatch(self.output_dim, ex.target.len()));
            }
            match self.kind {
                ModelKind::LinearRegression => {
                    let r = out[0] - ex.target[0];
                    loss_sum += r * r;
                    metric_sum += r * r;
                }
                ModelKind::LogisticClassifier => {
                    loss_sum -= ex
                        .target
                        .iter()
                        .zip(&out)
                        .map(|(g, p)| g * p.max(f64::MIN_POSITIVE).ln())
                        .sum::<f64>();
                    if argmax(&out) == argmax(&ex.target) {
                        metric_sum += 1.0;
                    }
                }
                ModelKind::MlpSoftdiceSegmenter => {
                    let l = soft_dice_loss(&out, &ex.target, DICE_SMOOTHING);
                    loss_sum += l;
                    metric_sum += 1.0 - l;
                }
            }
        }
        let n = data.len() as f64;
        Ok(Evaluation {
            loss: loss_sum / n,
            metric: metric_sum / n,
        })
    }

    /// Whether larger evaluation metrics are better for this kind.
    pub fn higher_is_better(&self) -> bool {
        !matches!(self.kind, ModelKind::LinearRegression)
    }

    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            ModelKind::LinearRegression => "mse",
            ModelKind::LogisticClassifier => "accuracy",
            ModelKind::MlpSoftdiceSegmenter => "mean_soft_dice",
        }
    }

    fn check(&self, w: &ParamVector, batch: &Batch) -> Result<()> {
        self.check_raw(w.len(), batch)
    }

    fn check_raw(&self, w_len: usize, batch: &Batch) -> Result<()> {
        let expected = self.param_count();
        if w_len != expected {
            return Err(Error::mismatch(expected, w_len));
        }
        if batch.input_dim() != self.input_dim {
            return Err(Error::mismatch(self.input_dim, batch.input_dim()));
        }
        if batch.target_dim() != self.output_dim {
            return Err(Error::mismatch(self.output_dim, batch.target_dim()));
        }
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if self.kind != ModelKind::LinearRegression && batch.targets().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidArgument(
                "targets must lie in [0, 1] for this model kind".into(),
            ));
        }
        Ok(())
    }

    fn affine(&self, w: &[f64], input: &[f64]) -> Vec<f64> {
        let (d, o) = (self.input_dim, self.output_dim);
        let (weights, bias) = w.split_at(o * d);
        (0..o)
            .map(|r| dot(&weights[r * d..(r + 1) * d], input) + bias[r])
            .collect()
    }

    fn mlp_forward(&self, w: &[f64], input: &[f64], hidden: &mut Vec<f64>, out: &mut Vec<f64>) {
        let (d, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let (w1, rest) = w.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(o * h);
        hidden.clear();
        hidden.extend((0..h).map(|r| (dot(&w1[r * d..(r + 1) * d], input) + b1[r]).tanh()));
        out.clear();
        out.extend((0..o).map(|r| sigmoid(dot(&w2[r * h..(r + 1) * h], hidden) + b2[r])));
    }

    /// Mean batch loss; when `grad` is given, adds the data-term gradient.
    fn accumulate(&self, w: &[f64], batch: &Batch, mut grad: Option<&mut Vec<f64>>, scratch: &mut Vec<f64>) -> f64 {
        let b = batch.len();
        let scale = 1.0 / b as f64;
        let (d, o) = (self.input_dim, self.output_dim);
        let mut total = 0.0;
        for k in 0..b {
            let x = batch.input(k);
            let y = batch.target(k);
            match self.kind {
                ModelKind::LinearRegression => {
                    let r = self.affine(w, x)[0] - y[0];
                    total += r * r;
                    if let Some(g) = grad.as_deref_mut() {
                        let c = 2.0 * r * scale;
                        for (gi, xi) in g[..d].iter_mut().zip(x) {
                            *gi += c * xi;
                        }
                        g[d] += c;
                    }
                }
                ModelKind::LogisticClassifier => {
                    let z = self.affine(w, x);
                    let lse = log_sum_exp(&z);
                    let mass: f64 = y.iter().sum();
                    total -= y.iter().zip(&z).map(|(g, zi)| g * (zi - lse)).sum::<f64>();
                    if let Some(g) = grad.as_deref_mut() {
                        let (gw, gb) = g.split_at_mut(o * d);
                        for c in 0..o {
                            let dz = ((z[c] - lse).exp() * mass - y[c]) * scale;
                            for (gi, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                                *gi += dz * xi;
                            }
                            gb[c] += dz;
                        }
                    }
                }
                ModelKind::MlpSoftdiceSegmenter => {
                    let mut hidden = Vec::new();
                    self.mlp_forward(w, x, &mut hidden, scratch);
                    let p = &*scratch;
                    total += soft_dice_loss(p, y, DICE_SMOOTHING);
                    if let Some(g) = grad.as_deref_mut() {
                        self.mlp_backward(w, x, &hidden, p, y, scale, g);
                    }
                }
            }
        }
        total * scale
    }

    #[allow(clippy::too_many_arguments)]
    fn mlp_backward(&self, w: &[f64], x: &[f64], hidden: &[f64], p: &[f64], y: &[f64], scale: f64, g: &mut [f64]) {
        let (d, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let mut dz = vec![0.0; o];
        soft_dice_grad(p, y, DICE_SMOOTHING, &mut dz);
        for (dzi, pi) in dz.iter_mut().zip(p) {
            *dzi *= pi * (1.0 - pi) * scale;
        }
        let w2 = &w[h * d + h..h * d + h + o * h];
        let (gw1, rest) = g.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(o * h);
        let mut dh = vec![0.0; h];
        for r in 0..o {
            let row = &w2[r * h..(r + 1) * h];
            for j in 0..h {
                gw2[r * h + j] += dz[r] * hidden[j];
                dh[j] += row[j] * dz[r];
            }
            gb2[r] += dz[r];
        }
        for j in 0..h {
            let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
            for (gi, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                *gi += da * xi;
            }
            gb1[j] += da;
        }
    }
}

/// `1 − (2·Σ p·g + δ) / (Σ p² + Σ g² + δ)`.
pub fn soft_dice_loss(pred: &[f64], target: &[f64], smoothing: f64) -> f64 {
    let (num, den) = dice_terms(pred, target, smoothing);
    1.0 - num / den
}

/// Gradient of [`soft_dice_loss`] with respect to the predictions.
pub fn soft_dice_grad(pred: &[f64], target: &[f64], smoothing: f64, out: &mut [f64]) {
    let (num, den) = dice_terms(pred, target, smoothing);
    let den2 = den * den;
    for ((o, &p), &g) in out.iter_mut().zip(pred).zip(target) {
        *o = -(2.0 * g * den - 2.0 * p * num) / den2;
    }
}

fn dice_terms(pred: &[f64], target: &[f64], smoothing: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&p, &g) in pred.iter().zip(target) {
        inter += p * g;
        pp += p * p;
        gg += g * g;
    }
    (2.0 * inter + smoothing, pp + gg + smoothing)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Batch;

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let p = vec![1.0; 16];
        assert!(soft_dice_loss(&p, &p, DICE_SMOOTHING).abs() < 1e-15);
    }

    #[test]
    fn dice_disjoint_prediction() {
        // p = 0, g = 1: 1 − 1/(n + 1)
        for n in [1usize, 4, 36] {
            let l = soft_dice_loss(&vec![0.0; n], &vec![1.0; n], 1.0);
            assert!((l - (1.0 - 1.0 / (n as f64 + 1.0))).abs() < 1e-15);
        }
    }

    #[test]
    fn dice_empty_masks_are_defined() {
        assert_eq!(soft_dice_loss(&[0.0; 4], &[0.0; 4], 1.0), 0.0);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ToyModel::linear_regression(8).param_count(), 9);
        assert_eq!(ToyModel::logistic_classifier(8, 3).param_count(), 27);
        assert_eq!(ToyModel::segmenter(64, 16).param_count(), 64 * 16 + 16 + 16 * 64 + 64);
        let spans = ToyModel::segmenter(4, 2).layout();
        assert_eq!(spans.last().unwrap().range().end, 4 * 2 + 2 + 2 * 4 + 4);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(
            "mlp-softdice-segmenter".parse::<ModelKind>().unwrap(),
            ModelKind::MlpSoftdiceSegmenter
        );
        assert!(matches!("resnet".parse::<ModelKind>(), Err(Error::UnknownKind(_))));
    }

    #[test]
    fn loss_rejects_wrong_length() {
        let m = ToyModel::linear_regression(2);
        let batch = Batch::new(vec![1.0, 2.0], vec![3.0], 2, 1).unwrap();
        let err = m.loss(&ParamVector::zeros(2), &batch).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, actual: 2 }));
    }

    #[test]
    fn mask_targets_outside_unit_interval_rejected() {
        let m = ToyModel::segmenter(2, 1);
        let batch = Batch::new(vec![0.0, 0.0], vec![1.5, 0.0], 2, 2).unwrap();
        assert!(m.loss(&ParamVector::zeros(m.param_count()), &batch).is_err());
    }

    #[test]
    fn decay_only_gradient_at_zero_loss() {
        // y = 2x with w = (2, 0): residual zero, gradient is λ·w.
        let m = ToyModel::linear_regression(1).with_weight_decay(1e-2);
        let batch = Batch::new(vec![1.0, -3.0], vec![2.0, -6.0], 1, 1).unwrap();
        let w = ParamVector::from_vec(vec![2.0, 0.0]).unwrap();
        assert_eq!(m.loss(&w, &batch).unwrap(), 0.0);
        let g = m.gradient(&w, &batch).unwrap();
        assert_eq!(g.as_slice(), &[1e-2 * 2.0, 0.0]);
    }
}
