//! Client-side release gate for model differences.
//!
//! Three modes: `off` uploads the full difference, `selective` uploads the
//! clipped components whose magnitude exceeds a percentile threshold, and
//! `svt` runs the sparse vector technique: noisy threshold comparisons on
//! clipped components followed by noisy, clipped answers.

use std::fmt;
use std::str::FromStr;

use rand::distr::Distribution;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::rng::open_unit;
use crate::{Error, ParamVector, Result, SparseDelta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrivacyMode {
    Off,
    Selective,
    Svt,
}

impl fmt::Display for PrivacyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrivacyMode::Off => "off",
            PrivacyMode::Selective => "selective",
            PrivacyMode::Svt => "svt",
        })
    }
}

impl FromStr for PrivacyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(PrivacyMode::Off),
            "selective" => Ok(PrivacyMode::Selective),
            "svt" => Ok(PrivacyMode::Svt),
            other => Err(Error::InvalidConfig(format!("unknown privacy mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyPolicy {
    pub mode: PrivacyMode,
    /// Fraction of components to release, in (0, 1].
    pub fraction: f64,
    /// Clip bound γ; may be infinite outside svt mode.
    pub clip: f64,
    /// Sensitivity s; defaults to 2γ.
    pub sensitivity: Option<f64>,
    /// Threshold percentile of |ΔW|; defaults to the rank that keeps
    /// `fraction` of the components.
    pub tau_percentile: Option<f64>,
    /// ε₁, budget of the threshold comparisons.
    pub epsilon_query: f64,
    /// ε₂, budget of the noisy threshold; defaults to (2qs)^{2/3}·ε₁.
    pub epsilon_threshold: Option<f64>,
    /// ε₃, budget of the released answers.
    pub epsilon_answer: f64,
}

impl Default for PrivacyPolicy {
    fn default() -> Self {
        PrivacyPolicy::off()
    }
}

/// Outcome of gating one model difference.
#[derive(Clone, Debug, PartialEq)]
pub struct Release {
    pub delta: SparseDelta,
    /// Number of components the policy asked for.
    pub requested: usize,
    /// Candidates examined (svt mode) before stopping.
    pub examined: usize,
    /// Set when svt ran out of candidates before `requested` acceptances.
    pub exhausted: bool,
}

impl PrivacyPolicy {
    pub fn off() -> Self {
        PrivacyPolicy {
            mode: PrivacyMode::Off,
            fraction: 1.0,
            clip: f64::INFINITY,
            sensitivity: None,
            tau_percentile: None,
            epsilon_query: f64::INFINITY,
            epsilon_threshold: None,
            epsilon_answer: f64::INFINITY,
        }
    }

    pub fn selective(fraction: f64, clip: f64) -> Self {
        PrivacyPolicy {
            mode: PrivacyMode::Selective,
            fraction,
            clip,
            ..PrivacyPolicy::off()
        }
    }

    pub fn svt(fraction: f64, clip: f64, epsilon_query: f64, epsilon_answer: f64) -> Self {
        PrivacyPolicy {
            mode: PrivacyMode::Svt,
            fraction,
            clip,
            epsilon_query,
            epsilon_answer,
            ..PrivacyPolicy::off()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("release fraction must be in (0, 1], got {}", self.fraction));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip bound must be positive, got {}", self.clip));
        }
        if let Some(p) = self.tau_percentile {
            if !(0.0..100.0).contains(&p) {
                return bad(format!("threshold percentile must be in [0, 100), got {p}"));
            }
        }
        if self.mode == PrivacyMode::Svt {
            let s = self.sensitivity();
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("svt needs a finite positive sensitivity, got {s}"));
            }
            for (name, eps) in [
                ("epsilon_query", self.epsilon_query),
                ("epsilon_threshold", self.epsilon_threshold()),
                ("epsilon_answer", self.epsilon_answer),
            ] {
                if !(eps > 0.0) {
                    return bad(format!("{name} must be positive, got {eps}"));
                }
            }
        }
        Ok(())
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity.unwrap_or(2.0 * self.clip)
    }

    pub fn epsilon_threshold(&self) -> f64 {
        self.epsilon_threshold
            .unwrap_or_else(|| derived_threshold_budget(self.fraction, self.sensitivity(), self.epsilon_query))
    }

    /// ⌊q·P⌋ components, at least one.
    pub fn release_count(&self, dim: usize) -> usize {
        // The small slack keeps products such as 0.29·100 from flooring to 28.
        let count = (self.fraction * dim as f64 + 1e-9).floor() as usize;
        count.clamp(1, dim.max(1))
    }

    /// Gates `delta`, the model difference accumulated over `n_local`
    /// iterations.
    pub fn apply<R: RngCore + ?Sized>(&self, delta: &ParamVector, n_local: u64, rng: &mut R) -> Result<Release> {
        match self.mode {
            PrivacyMode::Off => Ok(Release {
                delta: SparseDelta::from_dense(delta),
                requested: delta.len(),
                examined: delta.len(),
                exhausted: false,
            }),
            PrivacyMode::Selective => selective_release(delta, self),
            PrivacyMode::Svt => svt_release(delta, n_local, self, rng),
        }
    }
}

/// ε₂ = (2·q·s)^{2/3}·ε₁.
pub fn derived_threshold_budget(fraction: f64, sensitivity: f64, epsilon_query: f64) -> f64 {
    (2.0 * fraction * sensitivity).powf(2.0 / 3.0) * epsilon_query
}

/// Total per-round budget ε₁ + ε₂ + ε₃ of an svt policy.
pub fn privacy_cost(policy: &PrivacyPolicy) -> Result<f64> {
    if policy.mode != PrivacyMode::Svt {
        return Err(Error::WrongMode { expected: "svt" });
    }
    Ok(policy.epsilon_query + policy.epsilon_threshold() + policy.epsilon_answer)
}

pub fn clip(x: f64, bound: f64) -> f64 {
    x.max(-bound).min(bound)
}

/// Nearest-rank percentile of `|values|`; percentile 0 gives the minimum.
pub fn select_threshold(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("threshold input"));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in [0, 100], got {percentile}"
        )));
    }
    let sorted = sorted_magnitudes(values);
    let rank = (percentile * sorted.len() as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn sorted_magnitudes(values: &[f64]) -> Vec<f64> {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    mags
}

/// Threshold such that at most `count` magnitudes lie strictly above it.
/// `None` when every component is to be kept.
fn rank_threshold(sorted: &[f64], count: usize) -> Option<f64> {
    (count < sorted.len()).then(|| sorted[sorted.len() - count - 1])
}

fn magnitude_threshold(values: &[f64], policy: &PrivacyPolicy, count: usize) -> Result<Option<f64>> {
    match policy.tau_percentile {
        Some(p) => select_threshold(values, p).map(Some),
        None => Ok(rank_threshold(&sorted_magnitudes(values), count)),
    }
}

/// Releases the clipped components with `|w_i| > τ`. No noise is added.
///
/// Components tied with τ stay private, so at most ⌊q·P⌋ are released.
pub fn selective_release(delta: &ParamVector, policy: &PrivacyPolicy) -> Result<Release> {
    let dim = delta.len();
    if dim == 0 {
        return Err(Error::Empty("model difference"));
    }
    let requested = policy.release_count(dim);
    let tau = magnitude_threshold(delta.as_slice(), policy, requested)?;
    let entries = delta
        .iter()
        .enumerate()
        .filter(|(_, w)| tau.map_or(true, |t| w.abs() > t))
        .map(|(i, &w)| (i as u32, clip(w, policy.clip)))
        .collect();
    Ok(Release {
        delta: SparseDelta::from_entries(dim, entries)?,
        requested,
        examined: dim,
        exhausted: false,
    })
}

/// Sparse vector technique over the normalised difference `ΔW / n_local`.
///
/// Candidates are drawn uniformly without replacement. The threshold `h`
/// is the percentile of the normalised magnitudes, perturbed once by
/// `Lap(s/ε₂)`. A candidate is accepted when
/// `|clip(w_i, γ)| + Lap(2·c·s/ε₁) ≥ ĥ` (with `c = ⌊q·P⌋`), and released as
/// `clip(w_i + Lap(c·s/ε₃), γ)`, rescaled by `n_local`. If every
/// component has been examined before `c` acceptances the partial release
/// is returned with `exhausted` set.
pub fn svt_release<R: RngCore + ?Sized>(
    delta: &ParamVector,
    n_local: u64,
    policy: &PrivacyPolicy,
    rng: &mut R,
) -> Result<Release> {
    if policy.mode != PrivacyMode::Svt {
        return Err(Error::WrongMode { expected: "svt" });
    }
    policy.validate()?;
    if n_local == 0 {
        return Err(Error::InvalidArgument("n_local must be at least 1".into()));
    }
    let dim = delta.len();
    if dim == 0 {
        return Err(Error::Empty("model difference"));
    }
    let n = n_local as f64;
    let normalised: Vec<f64> = delta.iter().map(|w| w / n).collect();
    let requested = policy.release_count(dim);
    let gamma = policy.clip;
    let s = policy.sensitivity();
    let c = requested as f64;

    let h = match policy.tau_percentile {
        Some(p) => select_threshold(&normalised, p)?,
        None => {
            let sorted = sorted_magnitudes(&normalised);
            sorted[dim.saturating_sub(requested).max(1) - 1]
        }
    };
    let threshold_noise = LaplaceSampler::new(s / policy.epsilon_threshold())?;
    let query_noise = LaplaceSampler::new(2.0 * c * s / policy.epsilon_query)?;
    let answer_noise = LaplaceSampler::new(c * s / policy.epsilon_answer)?;

    let noisy_threshold = h + threshold_noise.sample(rng);
    let mut pool: Vec<u32> = (0..dim as u32).collect();
    let mut released = Vec::with_capacity(requested);
    let mut examined = 0;
    while released.len() < requested && examined < dim {
        // Partial Fisher–Yates: position `examined` receives a uniform pick
        // from the not-yet-examined tail.
        let pick = rng.random_range(examined..dim);
        pool.swap(examined, pick);
        let i = pool[examined] as usize;
        examined += 1;
        let w = normalised[i];
        if clip(w, gamma).abs() + query_noise.sample(rng) >= noisy_threshold {
            let answer = clip(w + answer_noise.sample(rng), gamma);
            released.push((i as u32, answer * n));
        }
    }
    let exhausted = released.len() < requested;
    Ok(Release {
        delta: SparseDelta::from_entries(dim, released)?,
        requested,
        examined,
        exhausted,
    })
}

/// Laplace(0, b) noise by inverse-CDF transform of a 53-bit uniform draw.
///
/// A zero scale yields exactly zero but still consumes one draw, so the
/// stream position does not depend on the scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceSampler {
    scale: f64,
}

impl LaplaceSampler {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Laplace scale must be finite and non-negative, got {scale}"
            )));
        }
        Ok(LaplaceSampler { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl Distribution<f64> for LaplaceSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open_unit(rng);
        if self.scale == 0.0 {
            return 0.0;
        }
        if u < 0.5 {
            self.scale * (2.0 * u).ln()
        } else {
            -self.scale * (2.0 * (1.0 - u)).ln()
        }
    }
}
