//! One experiment from config to metrics, summary and checkpoint.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use fedsim_core::client::{Client, ClientSeeds};
use fedsim_core::data::{Dataset, FeatureShift};
use fedsim_core::model::Evaluation;
use fedsim_core::privacy::{privacy_cost, PrivacyMode, PrivacyPolicy};
use fedsim_core::rng::{self, Purpose};
use fedsim_core::server::{init_params, GlobalState};
use fedsim_core::snapshot::Checkpoint;
use fedsim_core::trainer::MomentumMode;
use fedsim_net::run_federation;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::partition::{make_partition, Partition};
use crate::Result;

pub const METRICS_HEADER: [&str; 11] = [
    "round",
    "metric",
    "eval_metric",
    "eval_loss",
    "mean_train_loss",
    "released_params",
    "released_fraction",
    "exhausted_clients",
    "epsilon_round",
    "epsilon_total",
    "client_losses",
];

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    pub eval_metric: f64,
    pub eval_loss: f64,
    pub mean_train_loss: f64,
    /// Non-zero entries uploaded this round, summed over clients.
    pub released_params: usize,
    /// `released_params / (K·P)`.
    pub released_fraction: f64,
    pub exhausted_clients: usize,
    /// Per-client privacy cost of this round; infinite without svt.
    pub epsilon_round: f64,
    /// Sequential composition over the rounds so far.
    pub epsilon_total: f64,
    pub client_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub round: u32,
    pub metric: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub model: String,
    pub metric: &'static str,
    pub higher_is_better: bool,
    pub param_count: usize,
    pub client_shares: Vec<usize>,
    pub rounds_completed: u32,
    pub initial: EvalPoint,
    #[serde(rename = "final")]
    pub last: EvalPoint,
    pub best: EvalPoint,
    pub released_params_total: usize,
    pub exhausted_events: usize,
    pub epsilon_per_round: f64,
    pub epsilon_total: f64,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub state: GlobalState,
    pub partition: Partition,
}

impl RunOutcome {
    pub fn final_metric(&self) -> f64 {
        self.summary.last.metric
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.state.round,
            config_hash: self.summary.config.hash(),
            w: self.state.w.clone(),
            moments: self.state.moments.clone(),
        }
    }

    pub fn metrics_csv(&self) -> Vec<u8> {
        metrics_csv(self.summary.metric, &self.records)
    }

    /// Writes `metrics.csv`, `summary.json` and `checkpoint.bin` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let json = serde_json::to_string_pretty(&self.summary)?;
        std::fs::write(dir.join("summary.json"), json + "\n")?;
        self.checkpoint().save(dir.join("checkpoint.bin"))?;
        Ok(())
    }
}

/// Renders records with a fixed header. Floats use the shortest
/// representation that reads back to the same bits.
pub fn metrics_csv(metric: &str, records: &[RoundRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in records {
        let mut losses = String::new();
        for (i, l) in r.client_losses.iter().enumerate() {
            if i > 0 {
                losses.push(';');
            }
            let _ = write!(losses, "{l}");
        }
        w.write_record([
            r.round.to_string(),
            metric.to_owned(),
            r.eval_metric.to_string(),
            r.eval_loss.to_string(),
            r.mean_train_loss.to_string(),
            r.released_params.to_string(),
            r.released_fraction.to_string(),
            r.exhausted_clients.to_string(),
            r.epsilon_round.to_string(),
            r.epsilon_total.to_string(),
            losses,
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Client datasets, the held-out set and the partition for `cfg`.
pub struct Population {
    pub partition: Partition,
    pub client_data: Vec<Dataset>,
    pub test: Dataset,
}

pub fn build_population(cfg: &ExperimentConfig) -> Result<Population> {
    let task = cfg.task()?;
    let pool = task.sample(cfg.n_examples, rng::derive_seed(cfg.seed, Purpose::DataSample, &[0]))?;
    let test = task.sample(cfg.n_test, rng::derive_seed(cfg.seed, Purpose::DataSample, &[1]))?;
    let partition = make_partition(cfg.n_examples, cfg.clients, &cfg.partition_spec(), cfg.seed)?;
    let client_data = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let shift = FeatureShift::random(
                cfg.heterogeneity,
                &mut rng::stream(cfg.seed, Purpose::FeatureShift, &[k as u64]),
            );
            Ok(pool.subset(idx)?.shifted(shift))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Population {
        partition,
        client_data,
        test,
    })
}

fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = &parts[0];
    let examples = parts.iter().flat_map(|d| d.examples().iter().cloned()).collect();
    Ok(Dataset::new(
        first.kind(),
        first.input_dim(),
        first.target_dim(),
        examples,
    )?)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let model = cfg.model()?;
    let population = build_population(cfg)?;
    let mut trainer = cfg.trainer();
    let mut policy = cfg.policy();
    let seeds = ClientSeeds {
        shuffle: cfg.seed,
        noise: cfg.noise_seed,
    };

    let mut clients = if cfg.centralized {
        trainer.momentum = MomentumMode::BaselineM;
        policy = PrivacyPolicy::off();
        let all = concat(&population.client_data)?;
        vec![Client::new(
            0,
            model.clone(),
            all,
            trainer.clone(),
            policy.clone(),
            seeds,
        )?]
    } else {
        population
            .client_data
            .iter()
            .enumerate()
            .map(|(k, data)| {
                Client::new(
                    k as u32,
                    model.clone(),
                    data.clone(),
                    trainer.clone(),
                    policy.clone(),
                    seeds,
                )
            })
            .collect::<fedsim_core::Result<Vec<_>>>()?
    };

    let w0 = init_params(&model, rng::derive_seed(cfg.seed, Purpose::Init, &[]));
    let mut state = GlobalState::new(w0, cfg.aggregation).with_denominator(cfg.denominator);
    if trainer.momentum == MomentumMode::MAggregation {
        state = state.with_moments();
    }

    let epsilon_round = match policy.mode {
        PrivacyMode::Svt => privacy_cost(&policy)?,
        _ => f64::INFINITY,
    };
    let initial = model.evaluate(&state.w, &population.test)?;
    let p = model.param_count();
    let k = clients.len();

    let mut records = Vec::with_capacity(cfg.rounds as usize);
    let final_state = run_federation(&cfg.transport, state, &mut clients, cfg.rounds, |report| {
        let Evaluation { loss, metric } = model.evaluate(&report.state.w, &population.test)?;
        let losses: Vec<f64> = report.contributions.iter().map(|c| c.update.train_loss).collect();
        let released: usize = report.contributions.iter().map(|c| c.update.delta.nnz()).sum();
        let round = report.state.round;
        records.push(RoundRecord {
            round,
            eval_metric: metric,
            eval_loss: loss,
            mean_train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            released_params: released,
            released_fraction: released as f64 / (k * p) as f64,
            exhausted_clients: report.contributions.iter().filter(|c| c.update.exhausted).count(),
            epsilon_round,
            epsilon_total: epsilon_round * f64::from(round),
            client_losses: losses,
        });
        log::info!("round {round}: {} = {metric:.4}", model.metric_name());
        Ok(())
    })?;

    let point = |r: &RoundRecord| EvalPoint {
        round: r.round,
        metric: r.eval_metric,
        loss: r.eval_loss,
    };
    let initial = EvalPoint {
        round: 0,
        metric: initial.metric,
        loss: initial.loss,
    };
    let last = records.last().map(point).unwrap_or_else(|| initial.clone());
    let better = |a: f64, b: f64| if model.higher_is_better() { a > b } else { a < b };
    let best = records.iter().fold(initial.clone(), |best, r| {
        if better(r.eval_metric, best.metric) {
            point(r)
        } else {
            best
        }
    });

    let summary = RunSummary {
        config_hash: format!("{:016x}", cfg.hash()),
        model: cfg.model.to_string(),
        metric: model.metric_name(),
        higher_is_better: model.higher_is_better(),
        param_count: p,
        client_shares: if cfg.centralized {
            vec![cfg.n_examples]
        } else {
            population.partition.client_shares.clone()
        },
        rounds_completed: final_state.round,
        initial,
        last,
        best,
        released_params_total: records.iter().map(|r| r.released_params).sum(),
        exhausted_events: records.iter().map(|r| r.exhausted_clients).sum(),
        epsilon_per_round: epsilon_round,
        epsilon_total: epsilon_round * f64::from(final_state.round),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(RunOutcome {
        records,
        summary,
        state: final_state,
        partition: population.partition,
    })
}
