//! Experiment configuration: a flat TOML file plus `key=value` overrides.

use std::path::Path;

use fedsim_core::data::SynthTask;
use fedsim_core::model::{ModelKind, ToyModel};
use fedsim_core::privacy::{PrivacyMode, PrivacyPolicy};
use fedsim_core::rng::{self, Purpose};
use fedsim_core::server::{AggregationMode, Denominator};
use fedsim_core::trainer::{MomentumMode, TrainerConfig};
use fedsim_net::Transport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::partition::{PartitionKind, PartitionSpec, DEFAULT_SHARES};
use crate::{Error, Result};

/// Serde through `Display`/`FromStr`, so config files can use the short
/// names every enum accepts.
mod text {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(value: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(value)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(with = "text")]
    pub model: ModelKind,
    /// Input features (regression, classifier).
    pub features: usize,
    pub classes: usize,
    /// Image side length (segmenter).
    pub side: usize,
    /// Hidden units (segmenter).
    pub hidden: usize,
    /// Data noise level; each task has its own default.
    pub data_noise: Option<f64>,
    pub weight_decay: f64,

    pub n_examples: usize,
    pub n_test: usize,
    pub clients: usize,
    pub rounds: u32,
    #[serde(with = "text")]
    pub partition: PartitionKind,
    /// Largest client's fraction of the pool (powerlaw).
    pub max_share: f64,
    /// Client sizes (explicit); empty means the built-in 13-client list.
    pub shares: Vec<usize>,
    /// Strength of the per-client intensity shift; 0 keeps clients IID.
    pub heterogeneity: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub local_epochs: u32,
    pub batch_size: usize,
    #[serde(with = "text")]
    pub momentum: MomentumMode,

    #[serde(with = "text")]
    pub privacy: PrivacyMode,
    pub fraction: f64,
    /// Clip bound γ; unset means no clipping (not allowed for svt).
    pub clip: Option<f64>,
    pub sensitivity: Option<f64>,
    pub tau_percentile: Option<f64>,
    pub epsilon_query: Option<f64>,
    pub epsilon_threshold: Option<f64>,
    pub epsilon_answer: Option<f64>,

    #[serde(with = "text")]
    pub aggregation: AggregationMode,
    pub denominator: Denominator,

    /// Root seed for data, partition, initialisation and shuffling.
    pub seed: u64,
    /// Root seed for privacy noise only.
    pub noise_seed: u64,
    #[serde(with = "text")]
    pub transport: Transport,
    /// Train one client on the whole pool with continuous Adam state.
    pub centralized: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::MlpSoftdiceSegmenter,
            features: SynthTask::DEFAULT_FEATURES,
            classes: SynthTask::DEFAULT_CLASSES,
            side: SynthTask::DEFAULT_SIDE,
            hidden: 16,
            data_noise: None,
            weight_decay: 0.0,
            n_examples: 260,
            n_test: 200,
            clients: 13,
            rounds: 60,
            partition: PartitionKind::Explicit,
            max_share: 77.0 / 242.0,
            shares: Vec::new(),
            heterogeneity: 0.0,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            local_epochs: 2,
            batch_size: 1,
            momentum: MomentumMode::Restart,
            privacy: PrivacyMode::Off,
            fraction: 1.0,
            clip: None,
            sensitivity: None,
            tau_percentile: None,
            epsilon_query: None,
            epsilon_threshold: None,
            epsilon_answer: None,
            aggregation: AggregationMode::Weighted,
            denominator: Denominator::Global,
            seed: 1,
            noise_seed: 2,
            transport: Transport::InProcess,
            centralized: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides`, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg = Self::load_unchecked(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// As [`load`](Self::load) without validation, for sweep bases that
    /// only become consistent once a grid point is applied.
    pub fn load_unchecked(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Copy with `overrides` applied on top.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.n_examples < self.clients {
            return bad(format!(
                "{} examples cannot cover {} clients",
                self.n_examples, self.clients
            ));
        }
        if self.n_test == 0 {
            return bad("n_test must be positive".into());
        }
        if self.heterogeneity < 0.0 || !self.heterogeneity.is_finite() {
            return bad(format!(
                "heterogeneity must be finite and ≥ 0, got {}",
                self.heterogeneity
            ));
        }
        if self.partition == PartitionKind::Explicit && !self.shares.is_empty() && self.shares.len() != self.clients {
            return bad(format!(
                "{} shares listed for {} clients",
                self.shares.len(),
                self.clients
            ));
        }
        if self.partition == PartitionKind::Explicit && self.shares.is_empty() && self.clients != DEFAULT_SHARES.len() {
            return bad(format!(
                "the built-in share list has {} clients; set `shares` for {}",
                DEFAULT_SHARES.len(),
                self.clients
            ));
        }
        if self.privacy == PrivacyMode::Svt {
            for (name, value) in [
                ("clip", self.clip),
                ("epsilon_query", self.epsilon_query),
                ("epsilon_answer", self.epsilon_answer),
            ] {
                if value.is_none() {
                    return bad(format!("svt mode requires `{name}`"));
                }
            }
        }
        self.model()?.validate()?;
        self.trainer().validate()?;
        self.policy().validate()?;
        Ok(())
    }

    pub fn task(&self) -> Result<SynthTask> {
        let task_seed = rng::derive_seed(self.seed, Purpose::DataTask, &[]);
        let task = match self.model {
            ModelKind::LinearRegression => SynthTask::linear(self.features, 0.1, task_seed),
            ModelKind::LogisticClassifier => SynthTask::blobs(self.features, self.classes, 1.0, task_seed),
            ModelKind::MlpSoftdiceSegmenter => {
                if self.side < 3 {
                    return Err(Error::Config(format!("side must be at least 3, got {}", self.side)));
                }
                SynthTask::disks(self.side, 0.5)
            }
        };
        Ok(match self.data_noise {
            Some(noise) => task.with_noise(noise),
            None => task,
        })
    }

    pub fn model(&self) -> Result<ToyModel> {
        Ok(self.task()?.model(self.hidden).with_weight_decay(self.weight_decay))
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
        }
    }

    pub fn policy(&self) -> PrivacyPolicy {
        let clip = self.clip.unwrap_or(f64::INFINITY);
        let mut policy = match self.privacy {
            PrivacyMode::Off => return PrivacyPolicy::off(),
            PrivacyMode::Selective => PrivacyPolicy::selective(self.fraction, clip),
            PrivacyMode::Svt => PrivacyPolicy::svt(
                self.fraction,
                clip,
                self.epsilon_query.unwrap_or(f64::NAN),
                self.epsilon_answer.unwrap_or(f64::NAN),
            ),
        };
        policy.sensitivity = self.sensitivity;
        policy.tau_percentile = self.tau_percentile;
        policy.epsilon_threshold = self.epsilon_threshold;
        policy
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        match self.partition {
            PartitionKind::Balanced => PartitionSpec::Balanced,
            PartitionKind::Powerlaw => PartitionSpec::Powerlaw {
                max_share: self.max_share,
            },
            PartitionKind::Explicit if self.shares.is_empty() => PartitionSpec::Explicit(DEFAULT_SHARES.to_vec()),
            PartitionKind::Explicit => PartitionSpec::Explicit(self.shares.clone()),
        }
    }

    /// Digest of everything that affects the trained model. The transport
    /// is left out: it must not change results.
    pub fn hash(&self) -> u64 {
        let mut canonical = self.clone();
        canonical.transport = Transport::InProcess;
        let json = serde_json::to_vec(&canonical).expect("config serialises");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
    }
}

/// Applies `key=value` pairs. Values are read as TOML (`0.4`, `[3, 5]`,
/// `true`); anything that does not parse is taken as a bare string.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("override `{item}` has an empty key")));
        }
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_owned()),
        };
        table.insert(key.to_owned(), value);
    }
    Ok(())
}
