//! Examples, batches and procedurally generated datasets.

use serde::{Deserialize, Serialize};

use crate::model::{ModelKind, ToyModel};
use crate::rng::{self, Purpose, StreamRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Row-major batch of `len` inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    input_dim: usize,
    target_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, input_dim: usize, target_dim: usize) -> Result<Self> {
        if input_dim == 0 || target_dim == 0 {
            return Err(Error::InvalidArgument("zero-width batch".into()));
        }
        if inputs.len() % input_dim != 0 || targets.len() % target_dim != 0 {
            return Err(Error::InvalidArgument("ragged batch buffers".into()));
        }
        let n = inputs.len() / input_dim;
        if targets.len() / target_dim != n {
            return Err(Error::mismatch(n, targets.len() / target_dim));
        }
        Ok(Batch {
            inputs,
            targets,
            input_dim,
            target_dim,
        })
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut dims = None;
        for ex in examples {
            let (d, t) = *dims.get_or_insert((ex.input.len(), ex.target.len()));
            if ex.input.len() != d {
                return Err(Error::mismatch(d, ex.input.len()));
            }
            if ex.target.len() != t {
                return Err(Error::mismatch(t, ex.target.len()));
            }
            inputs.extend_from_slice(&ex.input);
            targets.extend_from_slice(&ex.target);
        }
        let (d, t) = dims.ok_or(Error::Empty("batch"))?;
        Batch::new(inputs, targets, d, t)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.input_dim..(k + 1) * self.input_dim]
    }

    pub fn target(&self, k: usize) -> &[f64] {
        &self.targets[k * self.target_dim..(k + 1) * self.target_dim]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: ModelKind,
    input_dim: usize,
    target_dim: usize,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(kind: ModelKind, input_dim: usize, target_dim: usize, examples: Vec<Example>) -> Result<Self> {
        for ex in &examples {
            if ex.input.len() != input_dim {
                return Err(Error::mismatch(input_dim, ex.input.len()));
            }
            if ex.target.len() != target_dim {
                return Err(Error::mismatch(target_dim, ex.target.len()));
            }
        }
        Ok(Dataset {
            kind,
            input_dim,
            target_dim,
            examples,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Examples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("example index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { examples, ..*self })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::from_examples(indices.iter().map(|&i| &self.examples[i]))
    }

    /// Applies `shift` to every input (targets untouched).
    pub fn shifted(mut self, shift: FeatureShift) -> Self {
        if !shift.is_identity() {
            for ex in &mut self.examples {
                for x in &mut ex.input {
                    *x = shift.apply(*x);
                }
            }
        }
        self
    }
}

/// Affine intensity distortion `x ↦ scale·x + offset`, mimicking
/// site-specific acquisition differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureShift {
    pub scale: f64,
    pub offset: f64,
}

impl FeatureShift {
    pub const IDENTITY: FeatureShift = FeatureShift {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.offset
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.offset == 0.0
    }

    /// Random shift whose spread grows with `strength`; zero strength is the identity.
    pub fn random(strength: f64, rng: &mut StreamRng) -> Self {
        if strength == 0.0 {
            return Self::IDENTITY;
        }
        FeatureShift {
            scale: (0.5 * strength * rng::standard_normal(rng)).exp(),
            offset: strength * rng::standard_normal(rng),
        }
    }
}

impl Default for FeatureShift {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Generator {
    Linear { weights: Vec<f64>, bias: f64 },
    Blobs { centers: Vec<Vec<f64>> },
    Disks { side: usize },
}

/// A synthetic learning problem: fixed generating parameters from which
/// any number of example sets can be drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    kind: ModelKind,
    input_dim: usize,
    target_dim: usize,
    noise: f64,
    generator: Generator,
}

impl SynthTask {
    pub const DEFAULT_FEATURES: usize = 8;
    pub const DEFAULT_CLASSES: usize = 3;
    pub const DEFAULT_SIDE: usize = 8;

    /// Task with default dimensions for `kind`.
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        match kind {
            ModelKind::LinearRegression => Self::linear(Self::DEFAULT_FEATURES, 0.1, seed),
            ModelKind::LogisticClassifier => Self::blobs(Self::DEFAULT_FEATURES, Self::DEFAULT_CLASSES, 1.0, seed),
            ModelKind::MlpSoftdiceSegmenter => Self::disks(Self::DEFAULT_SIDE, 0.5),
        }
    }

    /// `y = w·x + b + noise·N(0,1)` with `x ~ N(0, I)`.
    pub fn linear(features: usize, noise: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::DataTask, &[]);
        let weights = (0..features).map(|_| rng::standard_normal(&mut rng)).collect();
        let bias = 0.5 * rng::standard_normal(&mut rng);
        SynthTask {
            kind: ModelKind::LinearRegression,
            input_dim: features,
            target_dim: 1,
            noise,
            generator: Generator::Linear { weights, bias },
        }
    }

    /// Gaussian class clusters with unit-variance spread `noise` around
    /// centers drawn from `N(0, 1.5²·I)`.
    pub fn blobs(features: usize, classes: usize, noise: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::DataTask, &[]);
        let centers = (0..classes)
            .map(|_| (0..features).map(|_| 1.5 * rng::standard_normal(&mut rng)).collect())
            .collect();
        SynthTask {
            kind: ModelKind::LogisticClassifier,
            input_dim: features,
            target_dim: classes,
            noise,
            generator: Generator::Blobs { centers },
        }
    }

    /// `side × side` images holding one bright disk over Gaussian noise; the
    /// target is the disk mask.
    pub fn disks(side: usize, noise: f64) -> Self {
        SynthTask {
            kind: ModelKind::MlpSoftdiceSegmenter,
            input_dim: side * side,
            target_dim: side * side,
            noise,
            generator: Generator::Disks { side },
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    /// Generating weights and bias of a linear task.
    pub fn generating_weights(&self) -> Option<(&[f64], f64)> {
        match &self.generator {
            Generator::Linear { weights, bias } => Some((weights, *bias)),
            _ => None,
        }
    }

    /// A model shaped for this task. `hidden` is used by the segmenter only.
    pub fn model(&self, hidden: usize) -> ToyModel {
        match self.kind {
            ModelKind::LinearRegression => ToyModel::linear_regression(self.input_dim),
            ModelKind::LogisticClassifier => ToyModel::logistic_classifier(self.input_dim, self.target_dim),
            ModelKind::MlpSoftdiceSegmenter => ToyModel::segmenter(self.input_dim, hidden),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Empty("synthetic dataset size"));
        }
        let mut rng = rng::stream(seed, Purpose::DataSample, &[]);
        let examples = (0..n).map(|_| self.draw(&mut rng)).collect();
        Dataset::new(self.kind, self.input_dim, self.target_dim, examples)
    }

    fn draw(&self, rng: &mut StreamRng) -> Example {
        match &self.generator {
            Generator::Linear { weights, bias } => {
                let input: Vec<f64> = weights.iter().map(|_| rng::standard_normal(rng)).collect();
                let clean: f64 = weights.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + bias;
                let y = if self.noise > 0.0 {
                    clean + self.noise * rng::standard_normal(rng)
                } else {
                    clean
                };
                Example { input, target: vec![y] }
            }
            Generator::Blobs { centers } => {
                let label = (rng::open_unit(rng) * centers.len() as f64) as usize;
                let label = label.min(centers.len() - 1);
                let input = centers[label]
                    .iter()
                    .map(|c| c + self.noise * rng::standard_normal(rng))
                    .collect();
                let mut target = vec![0.0; centers.len()];
                target[label] = 1.0;
                Example { input, target }
            }
            Generator::Disks { side } => {
                let s = *side as f64;
                let cx = 1.0 + rng::open_unit(rng) * (s - 3.0);
                let cy = 1.0 + rng::open_unit(rng) * (s - 3.0);
                let r = 1.0 + rng::open_unit(rng) * (0.25 * s);
                let mut input = Vec::with_capacity(side * side);
                let mut target = Vec::with_capacity(side * side);
                for row in 0..*side {
                    for col in 0..*side {
                        let dx = col as f64 + 0.5 - cx;
                        let dy = row as f64 + 0.5 - cy;
                        let inside = if dx * dx + dy * dy <= r * r { 1.0 } else { 0.0 };
                        target.push(inside);
                        input.push(inside + self.noise * rng::standard_normal(rng));
                    }
                }
                Example { input, target }
            }
        }
    }
}

/// Dataset of `n` examples from the default task of `kind`, fully
/// determined by `seed`.
pub fn synth_dataset(kind: ModelKind, seed: u64, n: usize) -> Result<Dataset> {
    SynthTask::new(kind, seed).sample(n, seed)
}
