//! Round orchestration: broadcast, local training, compression, upload,
//! aggregation, evaluation.
//!
//! Client work inside a round runs in parallel. Every client draws from a
//! stream seeded by `(master seed, client id, round)` and updates are folded
//! in client-id order, so results match a sequential run bit for bit.

mod config;

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DatasetSpec, ModelChoice, SimConfig};

use crate::aggregate::{self, ClientUpdate, GlobalState};
use crate::baseline::{self, RoundTrip, DENSE_HEADER_LEN};
use crate::codec;
use crate::data::{self, LabeledDataset, Partition};
use crate::error::{ConfigError, Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::sampler::{self, RoundContext};
use crate::seed::{self, domain};
use crate::sparsify::ResidualStore;

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: usize,
    pub participants: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub bytes_uploaded: u64,
    pub cumulative_bytes: u64,
    pub compression_ratio: f64,
}

/// Per-participant detail of one round.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: usize,
    pub weight: u64,
    /// Local model minus the broadcast model.
    pub raw_delta: ParamVector,
    /// Residual the client held before this round.
    pub residual_before: ParamVector,
    pub upload: RoundTrip,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub downlink_bytes: u64,
    pub clients: Vec<ClientReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub total_bytes: u64,
    pub downlink_bytes: u64,
    pub total_participants: usize,
    /// Mean of the per-round ratios.
    pub mean_compression_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub label: String,
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
}

/// Live simulation state.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    spec: ModelSpec,
    train: LabeledDataset,
    test: LabeledDataset,
    partition: Partition,
    global: GlobalState,
    residuals: ResidualStore,
    cumulative_bytes: u64,
    downlink_bytes: u64,
}

/// Loads or generates the train and test sets described by `config`.
pub fn load_datasets(config: &SimConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &config.dataset {
        DatasetSpec::Synthetic {
            samples,
            test_samples,
            features,
            classes,
            separation,
        } => {
            let seed = seed::derive(config.seed, &[domain::DATA]);
            let all = data::synth_classification(
                samples + test_samples,
                *features,
                *classes,
                *separation,
                seed,
            )?;
            if *test_samples == 0 {
                return Err(ConfigError::InvalidValue {
                    key: "test_samples".into(),
                    message: "must be >= 1".into(),
                }
                .into());
            }
            all.split_tail(*test_samples)
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_subset,
            test_subset,
        } => {
            config.check_files()?;
            let train = data::load_idx_pair(
                train_images,
                train_labels,
                *train_subset,
                seed::derive(config.seed, &[domain::DATA]),
            )?;
            let test = data::load_idx_pair(
                test_images,
                test_labels,
                *test_subset,
                seed::derive(config.seed, &[domain::TEST]),
            )?;
            if train.dim() != test.dim() {
                return Err(Error::DimensionMismatch {
                    expected: train.dim(),
                    got: test.dim(),
                });
            }
            Ok((train, test))
        }
    }
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(&config)?;
        Self::with_data(config, train, test)
    }

    /// Builds a simulation over caller-supplied data; `config.dataset` is
    /// ignored.
    pub fn with_data(
        config: SimConfig,
        train: LabeledDataset,
        test: LabeledDataset,
    ) -> Result<Self> {
        config.validate()?;
        let num_classes = train.num_classes().max(test.num_classes());
        let spec = ModelSpec {
            kind: config.model.kind,
            input_dim: train.dim(),
            hidden_dim: config.model.hidden,
            num_classes,
        };
        spec.validate()?;
        if config.clients > train.len() {
            return Err(ConfigError::InvalidValue {
                key: "clients".into(),
                message: format!(
                    "{} clients but only {} training samples",
                    config.clients,
                    train.len()
                ),
            }
            .into());
        }
        let partition = data::partition_iid(
            train.len(),
            config.clients,
            seed::derive(config.seed, &[domain::PARTITION]),
        )?;
        let params = spec.init_params(seed::derive(config.seed, &[domain::INIT]));
        let global = GlobalState::new(params, spec)?;
        let residuals = ResidualStore::new(config.clients, spec.param_count());
        Ok(Self {
            config,
            spec,
            train,
            test,
            partition,
            global,
            residuals,
            cumulative_bytes: 0,
            downlink_bytes: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model_spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn global(&self) -> &GlobalState {
        &self.global
    }

    pub fn residuals(&self) -> &ResidualStore {
        &self.residuals
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn train_set(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    /// Seed for a client's local shuffling in round `t`.
    pub fn train_seed(&self, client: usize, t: usize) -> u64 {
        seed::derive(self.config.seed, &[domain::TRAIN, client as u64, t as u64])
    }

    fn compress_seed(&self, client: usize, t: usize) -> u64 {
        seed::derive(
            self.config.seed,
            &[domain::COMPRESS, client as u64, t as u64],
        )
    }

    pub fn round_context(&self, t: usize) -> RoundContext {
        RoundContext {
            t,
            num_clients: self.config.clients,
            seed: self.config.seed,
        }
    }

    fn client_step(
        &self,
        client: usize,
        t: usize,
        broadcast: &ParamVector,
    ) -> Result<ClientReport> {
        let indices = self.partition.client(client);
        let local = model::local_train(
            broadcast,
            &self.spec,
            &self.train,
            indices,
            &self.config.train,
            self.train_seed(client, t),
        )?;
        let raw_delta = local.sub(broadcast)?;
        let weight = indices.len() as u64;
        let residual_before = self.residuals.get(client).clone();
        let upload = baseline::pipeline_roundtrip(
            &self.config.pipeline,
            &raw_delta,
            &residual_before,
            &self.spec.layer_ranges(),
            u32::try_from(weight).unwrap_or(u32::MAX),
            self.compress_seed(client, t),
        )?;
        Ok(ClientReport {
            client_id: client,
            weight,
            raw_delta,
            residual_before,
            upload,
        })
    }

    /// Runs the next round (`t` = rounds completed so far).
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.global.round;
        let participants = sampler::sample_clients(&self.config.sampling, &self.round_context(t));
        let broadcast = aggregate::broadcast(&self.global);
        let n = broadcast.len();

        let clients: Vec<ClientReport> = participants
            .par_iter()
            .map(|&c| self.client_step(c, t, &broadcast))
            .collect::<Result<_>>()?;

        let updates: Vec<ClientUpdate> = clients
            .iter()
            .map(|c| ClientUpdate {
                client_id: c.client_id,
                weight: c.weight,
                delta: c.upload.received.clone(),
            })
            .collect();
        self.global = aggregate::aggregate(&self.global, &updates)?;
        if self.config.pipeline.keeps_residual() {
            for c in &clients {
                self.residuals.set(c.client_id, c.upload.residual.clone())?;
            }
        }

        let bytes_uploaded: u64 = clients.iter().map(|c| c.upload.bytes() as u64).sum();
        self.cumulative_bytes += bytes_uploaded;
        let downlink = (clients.len() * (DENSE_HEADER_LEN + 4 * n)) as u64;
        self.downlink_bytes += downlink;

        let eval = model::evaluate(&self.global.params, &self.spec, &self.test)?;
        let metrics = RoundMetrics {
            t,
            participants: clients.len(),
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            bytes_uploaded,
            cumulative_bytes: self.cumulative_bytes,
            compression_ratio: codec::compression_ratio(
                n * clients.len(),
                bytes_uploaded.max(1) as usize,
            )?,
        };
        info!(
            "round {t}: {} clients, acc {:.4}, loss {:.4}, {} bytes",
            metrics.participants, metrics.test_accuracy, metrics.test_loss, bytes_uploaded
        );
        debug!("round {t} participants {participants:?}");
        Ok(RoundReport {
            metrics,
            downlink_bytes: downlink,
            clients,
        })
    }

    /// Runs all remaining rounds and summarizes them.
    pub fn run(mut self) -> Result<SimOutcome> {
        let mut metrics = Vec::with_capacity(self.config.rounds);
        while self.global.round < self.config.rounds {
            metrics.push(self.run_round()?.metrics);
        }
        let summary = summarize(&metrics, self.downlink_bytes);
        Ok(SimOutcome {
            label: self.config.label(),
            metrics,
            summary,
        })
    }
}

fn summarize(metrics: &[RoundMetrics], downlink_bytes: u64) -> Summary {
    let last = metrics.last();
    Summary {
        rounds: metrics.len(),
        final_accuracy: last.map_or(0.0, |m| m.test_accuracy),
        final_loss: last.map_or(0.0, |m| m.test_loss),
        total_bytes: last.map_or(0, |m| m.cumulative_bytes),
        downlink_bytes,
        total_participants: metrics.iter().map(|m| m.participants).sum(),
        mean_compression_ratio: if metrics.is_empty() {
            0.0
        } else {
            metrics.iter().map(|m| m.compression_ratio).sum::<f64>() / metrics.len() as f64
        },
    }
}

/// Runs every round of `config` and writes the metrics CSV when
/// `config.output` is set.
pub fn run_simulation(config: &SimConfig) -> Result<SimOutcome> {
    let outcome = Simulation::new(config.clone())?.run()?;
    if let Some(path) = &config.output {
        write_metrics_csv(path, &outcome.metrics)?;
    }
    Ok(outcome)
}

pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Runs aligned round by round.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<SimOutcome>,
}

fn same_experiment(a: &SimConfig, b: &SimConfig) -> std::result::Result<(), String> {
    if a.dataset != b.dataset {
        return Err("datasets differ".into());
    }
    if a.model != b.model {
        return Err("models differ".into());
    }
    if a.rounds != b.rounds {
        return Err(format!("rounds differ ({} vs {})", a.rounds, b.rounds));
    }
    if a.clients != b.clients {
        return Err("client counts differ".into());
    }
    if a.seed != b.seed {
        return Err("seeds differ".into());
    }
    if a.train != b.train {
        return Err("local training settings differ".into());
    }
    Ok(())
}

/// Runs configs that differ only in pipeline and sampling.
pub fn compare_runs(configs: &[SimConfig]) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(ConfigError::Invalid("comparison needs at least two configs".into()).into());
    }
    for c in &configs[1..] {
        same_experiment(&configs[0], c)
            .map_err(|m| ConfigError::Invalid(format!("{}: {m}", c.label())))?;
    }
    let runs = configs
        .iter()
        .map(|c| Simulation::new(c.clone())?.run())
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { runs })
}

impl Comparison {
    pub fn rounds(&self) -> usize {
        self.runs.iter().map(|r| r.metrics.len()).max().unwrap_or(0)
    }

    /// Header plus one row per round: `t`, then participants, accuracy,
    /// uploaded bytes, and compression ratio for each run.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["t".to_string()];
        for r in &self.runs {
            for col in [
                "participants",
                "test_accuracy",
                "bytes_uploaded",
                "compression_ratio",
            ] {
                header.push(format!("{}.{col}", r.label));
            }
        }
        let rows = (0..self.rounds())
            .map(|t| {
                let mut row = vec![t.to_string()];
                for r in &self.runs {
                    match r.metrics.get(t) {
                        Some(m) => row.extend([
                            m.participants.to_string(),
                            m.test_accuracy.to_string(),
                            m.bytes_uploaded.to_string(),
                            m.compression_ratio.to_string(),
                        ]),
                        None => row.extend(std::iter::repeat_n(String::new(), 4)),
                    }
                }
                row
            })
            .collect();
        (header, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (header, rows) = self.table();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(&header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Final accuracy and compression per run, as aligned text.
    pub fn summary_table(&self) -> String {
        let width = self
            .runs
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!(
            "{:<width$}  {:>9}  {:>14}  {:>11}\n",
            "run", "final_acc", "uploaded_bytes", "mean_ratio"
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.4}  {:>14}  {:>11.2}",
                r.label,
                r.summary.final_accuracy,
                r.summary.total_bytes,
                r.summary.mean_compression_ratio
            );
        }
        s
    }
}
