use std::fs;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ExperimentConfig, Selection, Timing};
use super::eval::evaluate_global;
use super::select::{select_class_cover, select_random};
use crate::algorithms::{
    local_round, normalize_momentum, Broadcast, ClientUpdate, LocalOutcome, ServerRule, ServerState,
};
use crate::data::{partition, ClientShard, LabeledDataset};
use crate::distill::TeacherSnapshot;
use crate::error::{Error, Result};
use crate::nn::{LossKind, ParamVector};
use crate::personalize::{calibrate, evaluate_personalized};
use crate::rng::{self, TAG_INIT, TAG_LOCAL, TAG_PERSONALIZE, TAG_SELECT};

/// Attempts of plain rejection sampling before class-cover selection falls
/// back to swap search.
pub const COVER_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub selected_clients: Vec<usize>,
    pub global_acc: f64,
    pub global_loss: f64,
    pub mean_train_loss: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationSummary {
    pub per_client_acc: Vec<f64>,
    pub mean_acc: f64,
    /// Mean over clients of the global model's accuracy on each local test split.
    pub global_mean_local_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundMetrics>,
    /// Mean global accuracy over the last 10 rounds.
    pub final_acc: f64,
    pub personalization: Option<PersonalizationSummary>,
    pub dropped_samples: usize,
    pub version: String,
    pub final_params: ParamVector,
}

/// Everything that happened in one round, for callers that inspect the
/// trajectory rather than just the metrics.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    /// Server momentum `m_t` at the start of the round.
    pub momentum_before: ParamVector,
    pub updates: Vec<ClientUpdate>,
    /// Local iteration count per selected client.
    pub iterations: Vec<usize>,
    /// Raw mini-batch gradients per selected client, when recording is on.
    pub gradients: Vec<Vec<ParamVector>>,
}

/// Round-by-round federated training over a fixed partition.
pub struct Simulation {
    cfg: ExperimentConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    shards: Vec<ClientShard>,
    label_sets: Vec<Vec<usize>>,
    dropped: usize,
    state: ServerState,
    server_rule: ServerRule,
    pool: Option<rayon::ThreadPool>,
    record_gradients: bool,
}

pub fn load_datasets(source: &DatasetSource) -> Result<(LabeledDataset, LabeledDataset)> {
    match source {
        DatasetSource::Synthetic {
            spec,
            train_per_class,
            test_per_class,
        } => spec.train_test(*train_per_class, *test_per_class),
        DatasetSource::Files { train, test } => Ok((
            LabeledDataset::read_from(fs::File::open(train)?)?,
            LabeledDataset::read_from(fs::File::open(test)?)?,
        )),
    }
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let (train, test) = load_datasets(&cfg.dataset)?;
        Self::with_data(cfg, train, test)
    }

    pub fn with_data(
        cfg: ExperimentConfig,
        train: LabeledDataset,
        test: LabeledDataset,
    ) -> Result<Self> {
        cfg.validate()?;
        for ds in [&train, &test] {
            if ds.dim() != cfg.model.input_dim || ds.num_classes() != cfg.model.num_classes {
                return Err(Error::config("dataset shape does not match the model"));
            }
        }
        let part = partition(&train, &cfg.partition)?;
        let label_sets = part
            .shards
            .iter()
            .map(|s| s.train_labels(train.labels()))
            .collect();
        let init = cfg.model.init(&mut rng::stream(cfg.seed, &[TAG_INIT]));
        let state = ServerState::new(init, cfg.server)?;
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Simulation {
            server_rule: cfg.algorithm.rules().1,
            cfg,
            train,
            test,
            shards: part.shards,
            label_sets,
            dropped: part.dropped,
            state,
            pool,
            record_gradients: false,
        })
    }

    /// Keep every client's raw mini-batch gradients in [`RoundOutcome`].
    pub fn record_gradients(mut self, on: bool) -> Self {
        self.record_gradients = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn train_set(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    pub fn dropped_samples(&self) -> usize {
        self.dropped
    }

    fn select(&self, round: usize) -> Result<Vec<usize>> {
        let mut rng = rng::stream(self.cfg.seed, &[TAG_SELECT, round as u64]);
        match self.cfg.selection {
            Selection::Random => Ok(select_random(
                self.shards.len(),
                self.cfg.participation,
                &mut rng,
            )),
            Selection::ClassCover => select_class_cover(
                &self.label_sets,
                self.cfg.model.num_classes,
                self.cfg.participation,
                &mut rng,
                COVER_RETRIES,
            ),
        }
    }

    /// Runs one communication round: select, train locally, aggregate,
    /// evaluate.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let round = self.state.round + 1;
        let clock = Instant::now();
        let selected = self.select(round)?;

        let cfg = &self.cfg;
        let theta = &self.state.params;
        let momentum = &self.state.momentum;
        let teacher = match cfg.local.loss.kind {
            LossKind::Combined => Some(TeacherSnapshot::new(
                theta.clone(),
                cfg.model.clone(),
                cfg.local.loss.tau,
            )?),
            LossKind::Ce => None,
        };
        let record = self.record_gradients;
        let job = |&id: &usize| -> Result<(LocalOutcome, Vec<ParamVector>)> {
            let shard = &self.shards[id];
            let h = cfg.local.iterations(shard.train().len());
            let mbar = if cfg.local.rule.uses_global_momentum() {
                normalize_momentum(momentum, cfg.server.beta_local, h)
            } else {
                momentum.zeros_like()
            };
            let rng = rng::stream(cfg.seed, &[TAG_LOCAL, round as u64, id as u64]);
            let mut log = Vec::new();
            let out = local_round(
                &cfg.model,
                Broadcast {
                    round,
                    params: theta,
                    momentum: &mbar,
                    lr: cfg.server.lr,
                },
                shard,
                &self.train,
                &cfg.local,
                teacher.as_ref(),
                rng,
                record.then_some(&mut log),
            )?;
            Ok((out, log))
        };
        let results: Vec<Result<(LocalOutcome, Vec<ParamVector>)>> = match &self.pool {
            Some(pool) => pool.install(|| selected.par_iter().map(job).collect()),
            None => selected.iter().map(job).collect(),
        };

        let mut updates = Vec::with_capacity(selected.len());
        let mut iterations = Vec::with_capacity(selected.len());
        let mut gradients = Vec::new();
        let mut loss_sum = 0.0;
        for r in results {
            let (out, log) = r?;
            loss_sum += out.mean_loss;
            iterations.push(out.iterations);
            updates.push(out.update);
            if record {
                gradients.push(log);
            }
        }
        log::debug!("round {round}: local iterations {iterations:?}");

        let momentum_before = self.state.momentum.clone();
        self.state = self.server_rule.apply(&self.state, &updates)?;
        let (global_acc, global_loss) =
            evaluate_global(&self.state.params, &self.cfg.model, &self.test)?;
        let elapsed_ms = match self.cfg.timing {
            Timing::Off => 0,
            Timing::Wall => clock.elapsed().as_millis() as u64,
        };
        Ok(RoundOutcome {
            metrics: RoundMetrics {
                round,
                mean_train_loss: loss_sum / selected.len() as f64,
                selected_clients: selected,
                global_acc,
                global_loss,
                elapsed_ms,
            },
            momentum_before,
            updates,
            iterations,
            gradients,
        })
    }

    /// Calibrates the head of the current global model for every client and
    /// compares local-test accuracy against the uncalibrated model.
    pub fn personalize(&self) -> Result<Option<PersonalizationSummary>> {
        let Some(pc) = &self.cfg.personalization else {
            return Ok(None);
        };
        let theta = &self.state.params;
        let job = |shard: &ClientShard| {
            let rng = rng::stream(self.cfg.seed, &[TAG_PERSONALIZE, shard.client_id as u64]);
            calibrate(theta, &self.cfg.model, shard, &self.train, pc, rng)
        };
        let results: Vec<Result<ParamVector>> = match &self.pool {
            Some(pool) => pool.install(|| self.shards.par_iter().map(job).collect()),
            None => self.shards.iter().map(job).collect(),
        };
        let personal = results.into_iter().collect::<Result<Vec<_>>>()?;
        let tuned = evaluate_personalized(&self.shards, &personal, &self.cfg.model, &self.train)?;
        let global = evaluate_personalized(
            &self.shards,
            &vec![theta.clone(); self.shards.len()],
            &self.cfg.model,
            &self.train,
        )?;
        Ok(Some(PersonalizationSummary {
            per_client_acc: tuned.per_client_acc,
            mean_acc: tuned.mean_acc,
            global_mean_local_acc: global.mean_acc,
        }))
    }
}

/// Mean of the last (up to) 10 rounds' global accuracy.
pub fn final_accuracy(rounds: &[RoundMetrics]) -> f64 {
    let tail = &rounds[rounds.len().saturating_sub(10)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|r| r.global_acc).sum::<f64>() / tail.len() as f64
}

fn finish(sim: Simulation, rounds: Vec<RoundMetrics>) -> Result<RunRecord> {
    let personalization = sim.personalize()?;
    Ok(RunRecord {
        final_acc: final_accuracy(&rounds),
        rounds,
        personalization,
        dropped_samples: sim.dropped,
        version: env!("CARGO_PKG_VERSION").to_string(),
        final_params: sim.state.params,
        config: sim.cfg,
    })
}

/// Runs `cfg.rounds` rounds and, when configured, personalization.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let mut sim = Simulation::new(cfg.clone())?;
    if sim.dropped > 0 {
        log::warn!(
            "{} training samples dropped by the partitioner",
            sim.dropped
        );
    }
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let out = sim.step()?;
        log::info!(
            "round {} acc {:.4} loss {:.4}",
            out.metrics.round,
            out.metrics.global_acc,
            out.metrics.global_loss
        );
        rounds.push(out.metrics);
    }
    finish(sim, rounds)
}

/// One grid point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lr: f64,
    pub beta: f64,
    pub record: RunRecord,
}

/// Runs the learning-rate × momentum grid. Algorithms without server
/// momentum only sweep the learning rate. Each point writes to its own
/// `lr<η>_beta<β>` subdirectory of the configured output directory.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let betas = if cfg.algorithm.uses_beta() {
        cfg.sweep_beta.clone()
    } else {
        vec![cfg.server.beta_global]
    };
    let mut out = Vec::new();
    for &lr in &cfg.sweep_lr {
        for &beta in &betas {
            let mut point = cfg.clone();
            point.server.lr = lr;
            point.server.beta_global = beta;
            point.server.beta_local = beta;
            point.out_dir = cfg.out_dir.join(format!("lr{lr}_beta{beta}"));
            let record = run_experiment(&point)?;
            out.push(SweepPoint { lr, beta, record });
        }
    }
    Ok(out)
}
