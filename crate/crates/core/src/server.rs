//! Server-side global model and round aggregation.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::Client;
use crate::model::ToyModel;
use crate::rng::{self, Purpose};
use crate::trainer::{Broadcast, ModelUpdate};
use crate::{Error, Moments, ParamVector, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Contributions weighted by their local iteration counts.
    Weighted,
    /// Plain mean of the client models.
    Simple,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::Weighted => "weighted",
            AggregationMode::Simple => "simple",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(AggregationMode::Weighted),
            "simple" => Ok(AggregationMode::Simple),
            other => Err(Error::InvalidConfig(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

/// Normaliser for sparse contributions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Σ_k N_k over all clients; unreleased entries count as zero.
    #[default]
    Global,
    /// Only the clients that released a given index share its weight.
    PerIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub w: ParamVector,
    pub round: u32,
    /// Aggregated Adam moments (momentum-aggregation mode only).
    pub moments: Option<Moments>,
    pub mode: AggregationMode,
    pub denominator: Denominator,
}

impl GlobalState {
    pub fn new(w: ParamVector, mode: AggregationMode) -> Self {
        GlobalState {
            w,
            round: 0,
            moments: None,
            mode,
            denominator: Denominator::Global,
        }
    }

    /// Enables momentum aggregation, starting from zero moments.
    pub fn with_moments(mut self) -> Self {
        self.moments = Some(Moments::zeros(self.w.len()));
        self
    }

    pub fn with_denominator(mut self, denominator: Denominator) -> Self {
        self.denominator = denominator;
        self
    }

    pub fn broadcast(&self) -> Broadcast {
        Broadcast {
            w: self.w.clone(),
            moments: self.moments.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundContribution {
    pub client_id: u32,
    pub update: ModelUpdate,
}

/// Seeded He-uniform initialisation: weights in `±√(6/fan_in)`, zero biases.
pub fn init_params(model: &ToyModel, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, Purpose::Init, &[]);
    let mut w = vec![0.0; model.param_count()];
    for span in model.layout() {
        if span.fan_in == 0 {
            continue;
        }
        let bound = (6.0 / span.fan_in as f64).sqrt();
        for x in &mut w[span.range()] {
            *x = bound * (2.0 * rng::open_unit(&mut rng) - 1.0);
        }
    }
    ParamVector::from_vec(w).expect("finite initialisation")
}

/// Folds one round of contributions into the global model.
///
/// Weighted mode computes `W + Σ_k (N_k / Σ_j N_j)·ΔW_k`; simple mode uses
/// `1/K` for every client. Sums run over ascending client id, so the
/// result does not depend on the order of `contributions`. Indices no
/// client released are left bit-identical.
pub fn aggregate(state: &GlobalState, contributions: &[RoundContribution]) -> Result<GlobalState> {
    if contributions.is_empty() {
        return Err(Error::Empty("round contributions"));
    }
    let dim = state.w.len();
    let mut seen = HashSet::new();
    for c in contributions {
        if !seen.insert(c.client_id) {
            return Err(Error::DuplicateClient(c.client_id));
        }
        if c.update.n_local == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} reported zero local iterations",
                c.client_id
            )));
        }
        if c.update.delta.dim() != dim {
            return Err(Error::mismatch(dim, c.update.delta.dim()));
        }
    }
    let mut ordered: Vec<&RoundContribution> = contributions.iter().collect();
    ordered.sort_by_key(|c| c.client_id);

    let count = ordered.len() as u64;
    let total: u64 = ordered.iter().map(|c| c.update.n_local).sum();
    let share = |n: u64, denom_n: u64, denom_k: u64| match state.mode {
        AggregationMode::Weighted => n as f64 / denom_n as f64,
        AggregationMode::Simple => 1.0 / denom_k as f64,
    };

    let per_index = match state.denominator {
        Denominator::Global => None,
        Denominator::PerIndex => {
            let mut n_sum = vec![0u64; dim];
            let mut k_sum = vec![0u64; dim];
            for c in &ordered {
                for i in c.update.delta.indices() {
                    n_sum[i as usize] += c.update.n_local;
                    k_sum[i as usize] += 1;
                }
            }
            Some((n_sum, k_sum))
        }
    };

    let mut acc: Vec<Option<f64>> = vec![None; dim];
    for c in &ordered {
        let n = c.update.n_local;
        for &(i, v) in c.update.delta.entries() {
            let i = i as usize;
            let weight = match &per_index {
                None => share(n, total, count),
                Some((n_sum, k_sum)) => share(n, n_sum[i], k_sum[i]),
            };
            let term = weight * v;
            acc[i] = Some(match acc[i] {
                None => term,
                Some(sum) => sum + term,
            });
        }
    }

    let mut w = state.w.clone();
    {
        let values = w.as_mut_slice();
        for (x, a) in values.iter_mut().zip(&acc) {
            if let Some(a) = a {
                *x += a;
            }
        }
    }
    w.ensure_finite()?;

    let moments = match &state.moments {
        None => None,
        Some(current) => {
            let mut m = current.m.clone();
            let mut v = current.v.clone();
            let mut m_acc: Option<Vec<f64>> = None;
            let mut v_acc: Option<Vec<f64>> = None;
            for c in &ordered {
                let md = c.update.momentum_delta.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "client {} sent no momentum delta in momentum-aggregation mode",
                        c.client_id
                    ))
                })?;
                md.m.ensure_len(dim)?;
                md.v.ensure_len(dim)?;
                let weight = share(c.update.n_local, total, count);
                accumulate_dense(&mut m_acc, &md.m, weight);
                accumulate_dense(&mut v_acc, &md.v, weight);
            }
            for (x, a) in m.as_mut_slice().iter_mut().zip(m_acc.unwrap_or_default()) {
                *x += a;
            }
            for (x, a) in v.as_mut_slice().iter_mut().zip(v_acc.unwrap_or_default()) {
                *x += a;
            }
            m.ensure_finite()?;
            v.ensure_finite()?;
            Some(Moments { m, v })
        }
    };

    Ok(GlobalState {
        w,
        round: state.round + 1,
        moments,
        mode: state.mode,
        denominator: state.denominator,
    })
}

fn accumulate_dense(acc: &mut Option<Vec<f64>>, delta: &ParamVector, weight: f64) {
    match acc {
        None => *acc = Some(delta.iter().map(|d| weight * d).collect()),
        Some(sum) => {
            for (s, d) in sum.iter_mut().zip(delta.iter()) {
                *s += weight * d;
            }
        }
    }
}

/// Everything known about a finished round.
pub struct RoundReport<'a> {
    pub state: &'a GlobalState,
    pub contributions: &'a [RoundContribution],
}

/// Runs `rounds` synchronous rounds in-process: broadcast, train every
/// client (in parallel threads), aggregate, then hand the round to
/// `observer`. A failing client aborts the run.
pub fn run_rounds<F>(
    mut state: GlobalState,
    clients: &mut [Client],
    rounds: u32,
    mut observer: F,
) -> Result<GlobalState>
where
    F: FnMut(&RoundReport<'_>) -> Result<()>,
{
    if clients.is_empty() {
        return Err(Error::Empty("client set"));
    }
    for _ in 0..rounds {
        let round = state.round + 1;
        let broadcast = state.broadcast();
        let results: Vec<Result<RoundContribution>> = std::thread::scope(|scope| {
            let handles: Vec<_> = clients
                .iter_mut()
                .map(|client| {
                    let broadcast = &broadcast;
                    scope.spawn(move || {
                        client.train_round(round, broadcast).map(|update| RoundContribution {
                            client_id: client.id(),
                            update,
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        });
        let contributions = results.into_iter().collect::<Result<Vec<_>>>()?;
        state = aggregate(&state, &contributions)?;
        observer(&RoundReport {
            state: &state,
            contributions: &contributions,
        })?;
    }
    Ok(state)
}
