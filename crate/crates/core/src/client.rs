use crate::data::Dataset;
use crate::model::ToyModel;
use crate::privacy::PrivacyPolicy;
use crate::rng::{self, Purpose};
use crate::trainer::{local_training, Broadcast, ModelUpdate, OptimizerState, TrainerConfig};
use crate::{Error, Result};

/// Root seeds for a client's random streams.
///
/// Streams are keyed by `(seed, client id, round)`; the noise seed is kept
/// apart so privacy noise can change without touching the data order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientSeeds {
    pub shuffle: u64,
    pub noise: u64,
}

/// A federated client: its private data and persistent optimizer state.
#[derive(Clone, Debug)]
pub struct Client {
    id: u32,
    model: ToyModel,
    data: Dataset,
    trainer: TrainerConfig,
    policy: PrivacyPolicy,
    state: OptimizerState,
    seeds: ClientSeeds,
}

impl Client {
    pub fn new(
        id: u32,
        model: ToyModel,
        data: Dataset,
        trainer: TrainerConfig,
        policy: PrivacyPolicy,
        seeds: ClientSeeds,
    ) -> Result<Self> {
        model.validate()?;
        trainer.validate()?;
        policy.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("client dataset"));
        }
        if data.input_dim() != model.input_dim {
            return Err(Error::mismatch(model.input_dim, data.input_dim()));
        }
        let state = OptimizerState::zeros(model.param_count());
        Ok(Client {
            id,
            model,
            data,
            trainer,
            policy,
            state,
            seeds,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn n_examples(&self) -> usize {
        self.data.len()
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.state
    }

    /// Runs local training for `round` from the broadcast model.
    pub fn train_round(&mut self, round: u32, broadcast: &Broadcast) -> Result<ModelUpdate> {
        let tags = [u64::from(self.id), u64::from(round)];
        let mut shuffle = rng::stream(self.seeds.shuffle, Purpose::Shuffle, &tags);
        let mut noise = rng::stream(self.seeds.noise, Purpose::PrivacyNoise, &tags);
        local_training(
            &self.model,
            broadcast,
            &self.data,
            &self.trainer,
            &mut self.state,
            &self.policy,
            &mut shuffle,
            &mut noise,
        )
    }
}
