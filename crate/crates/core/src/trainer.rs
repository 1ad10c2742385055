//! Client-side local training with Adam.
//!
//! One call to [`local_training`] is one federated round on one client:
//! start from the broadcast model, run `N_local = ⌊N_c / B⌋ · epochs` Adam
//! iterations over locally shuffled batches, and gate the resulting model
//! difference through the client's privacy policy.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::ToyModel;
use crate::privacy::PrivacyPolicy;
use crate::{Error, Moments, ParamVector, Result, SparseDelta};

/// How Adam moments are handled across federated rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumMode {
    /// Zero m, v and the step counter at the start of every round.
    Restart,
    /// Keep the client's own optimizer state between rounds.
    BaselineM,
    /// Start each round from server-aggregated moments and upload the
    /// moment differences alongside the parameters.
    MAggregation,
}

impl MomentumMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MomentumMode::Restart => "restart",
            MomentumMode::BaselineM => "baseline_m",
            MomentumMode::MAggregation => "m_aggregation",
        }
    }
}

impl fmt::Display for MomentumMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MomentumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restart" => Ok(MomentumMode::Restart),
            "baseline_m" => Ok(MomentumMode::BaselineM),
            "m_aggregation" => Ok(MomentumMode::MAggregation),
            other => Err(Error::InvalidConfig(format!("unknown momentum mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub momentum: MomentumMode,
}

impl Default for TrainerConfig {
    /// Learning rate 1e-4, batch size 1, β₁ = 0.9, β₂ = 0.999, two local epochs.
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            local_epochs: 2,
            batch_size: 1,
            momentum: MomentumMode::Restart,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// η_l = η·√(1 − β₂^l) / (1 − β₁^l).
    pub fn bias_corrected_rate(&self, step: u64) -> f64 {
        let l = step as i32;
        self.learning_rate * (1.0 - self.beta2.powi(l)).sqrt() / (1.0 - self.beta1.powi(l))
    }

    /// Batches per epoch for `n` local examples; the remainder is dropped.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size.min(n).max(1)
    }

    pub fn local_iterations(&self, n: usize) -> u64 {
        self.batches_per_epoch(n) as u64 * u64::from(self.local_epochs)
    }
}

/// Adam state of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub moments: Moments,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(len: usize) -> Self {
        OptimizerState {
            moments: Moments::zeros(len),
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = OptimizerState::zeros(self.moments.len());
    }

    pub fn is_zero(&self) -> bool {
        self.step == 0 && self.moments.m.iter().all(|&x| x == 0.0) && self.moments.v.iter().all(|&x| x == 0.0)
    }

    /// One Adam iteration on `w` with gradient `g`.
    pub fn adam_step(&mut self, cfg: &TrainerConfig, w: &mut [f64], g: &[f64]) {
        self.step += 1;
        let rate = cfg.bias_corrected_rate(self.step);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let m = self.moments.m.as_mut_slice();
        let v = self.moments.v.as_mut_slice();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= rate * m[i] / (v[i].sqrt() + cfg.epsilon);
        }
    }
}

/// What a client uploads after one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelUpdate {
    pub delta: SparseDelta,
    pub n_local: u64,
    /// Moment differences; present in momentum-aggregation mode only.
    pub momentum_delta: Option<Moments>,
    /// Mean batch loss over the local iterations.
    pub train_loss: f64,
    /// The svt gate ran out of candidates before releasing its quota.
    pub exhausted: bool,
}

/// Element-wise `w_end − w_start`.
pub fn federated_gradient(w_end: &ParamVector, w_start: &ParamVector) -> Result<ParamVector> {
    w_end.difference(w_start)
}

/// Result of running Adam over a number of local epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub iterations: u64,
    pub mean_loss: f64,
}

/// Runs `epochs` passes of shuffled mini-batch Adam over `data`, updating
/// `w` and `state` in place. Each epoch reshuffles with `shuffle_rng`.
pub fn run_epochs<R: RngCore + ?Sized>(
    model: &ToyModel,
    w: &mut ParamVector,
    data: &Dataset,
    cfg: &TrainerConfig,
    state: &mut OptimizerState,
    epochs: u32,
    shuffle_rng: &mut R,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Empty("local dataset"));
    }
    w.ensure_len(model.param_count())?;
    state.moments.m.ensure_len(w.len())?;
    let batch = cfg.batch_size.min(data.len());
    let per_epoch = cfg.batches_per_epoch(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut iterations = 0u64;
    let mut loss_sum = 0.0;
    for _ in 0..epochs {
        order.shuffle(shuffle_rng);
        for chunk in order.chunks_exact(batch).take(per_epoch) {
            let b = data.batch(chunk)?;
            let (loss, grad) = model.loss_and_gradient(w.as_slice(), &b)?;
            iterations += 1;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { iteration: iterations });
            }
            loss_sum += loss;
            state.adam_step(cfg, w.as_mut_slice(), &grad);
        }
    }
    if w.ensure_finite().is_err() {
        return Err(Error::Diverged { iteration: iterations });
    }
    Ok(EpochStats {
        iterations,
        mean_loss: if iterations > 0 {
            loss_sum / iterations as f64
        } else {
            0.0
        },
    })
}

/// What the server hands a client at the start of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    pub w: ParamVector,
    pub moments: Option<Moments>,
}

/// One federated round on one client.
///
/// `state` is the client's persistent optimizer state; how it is prepared
/// depends on `cfg.momentum`. Shuffling draws from `shuffle_rng`, the
/// privacy gate from `noise_rng`.
#[allow(clippy::too_many_arguments)]
pub fn local_training<R1, R2>(
    model: &ToyModel,
    broadcast: &Broadcast,
    data: &Dataset,
    cfg: &TrainerConfig,
    state: &mut OptimizerState,
    gate: &PrivacyPolicy,
    shuffle_rng: &mut R1,
    noise_rng: &mut R2,
) -> Result<ModelUpdate>
where
    R1: RngCore + ?Sized,
    R2: RngCore + ?Sized,
{
    if data.is_empty() {
        return Err(Error::Empty("local dataset"));
    }
    let dim = model.param_count();
    broadcast.w.ensure_len(dim)?;
    if state.moments.len() != dim {
        return Err(Error::mismatch(dim, state.moments.len()));
    }
    match cfg.momentum {
        MomentumMode::Restart => state.reset(),
        MomentumMode::BaselineM => {}
        MomentumMode::MAggregation => {
            let global = broadcast
                .moments
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("momentum aggregation needs broadcast moments".into()))?;
            global.m.ensure_len(dim)?;
            global.v.ensure_len(dim)?;
            state.moments.m = global.m.clone();
            // Averaging can leave rounding-level negatives.
            state.moments.v = ParamVector::from_vec(global.v.iter().map(|x| x.max(0.0)).collect())?;
        }
    }
    let start_moments = (cfg.momentum == MomentumMode::MAggregation).then(|| state.moments.clone());

    let mut w = broadcast.w.clone();
    let stats = run_epochs(model, &mut w, data, cfg, state, cfg.local_epochs, shuffle_rng)?;
    let n_local = stats.iterations;
    if n_local == 0 {
        return Err(Error::Empty("local iterations"));
    }

    let delta = federated_gradient(&w, &broadcast.w)?;
    let release = gate.apply(&delta, n_local, noise_rng)?;
    let momentum_delta = match start_moments {
        Some(start) => Some(Moments {
            m: state.moments.m.difference(&start.m)?,
            v: state.moments.v.difference(&start.v)?,
        }),
        None => None,
    };
    Ok(ModelUpdate {
        delta: release.delta,
        n_local,
        momentum_delta,
        train_loss: stats.mean_loss,
        exhausted: release.exhausted,
    })
}

/// Non-federated training on one dataset, in segments of
/// `cfg.local_epochs` epochs.
///
/// The optimizer follows `cfg.momentum` between segments (restart zeroes
/// it, the other modes keep it) and each segment is committed as
/// `w + (w_end − w)`, the same arithmetic a parameter server applies. The
/// shuffle stream of segment `r` is keyed like client 0's stream in round
/// `r`.
pub fn centralized_training(
    model: &ToyModel,
    w0: &ParamVector,
    data: &Dataset,
    cfg: &TrainerConfig,
    segments: u32,
    shuffle_seed: u64,
) -> Result<ParamVector> {
    cfg.validate()?;
    let mut w = w0.clone();
    let mut state = OptimizerState::zeros(model.param_count());
    for segment in 1..=segments {
        if cfg.momentum == MomentumMode::Restart {
            state.reset();
        }
        let mut rng = crate::rng::stream(shuffle_seed, crate::rng::Purpose::Shuffle, &[0, u64::from(segment)]);
        let mut end = w.clone();
        run_epochs(model, &mut end, data, cfg, &mut state, cfg.local_epochs, &mut rng)?;
        let delta = federated_gradient(&end, &w)?;
        for (x, d) in w.as_mut_slice().iter_mut().zip(delta.iter()) {
            *x += d;
        }
    }
    Ok(w)
}
