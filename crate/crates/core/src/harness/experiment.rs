//! Builds a simulation from an [`ExperimentConfig`] and runs the round loop.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, TaskData};
use super::metrics::{write_metrics, RoundMetrics, TaskRoundMetrics};
use crate::client::{ClientState, GradReport};
use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::server::{run_round, LossWeights, WeightingStrategy};
use crate::taskgen::{generate_world, ingest_dataset, sample_dataset, LocalDataset};

/// Environment variable overriding the client worker count (0 = automatic).
pub const THREADS_ENV: &str = "FEDGRADNORM_THREADS";

// Stream offsets keep initialization draws apart from the world's streams.
const SHARED_INIT_STREAM: u64 = 1 << 32;
const HEAD_INIT_STREAM: u64 = 2 << 32;

/// Initial state of a simulation, before any round.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub clients: Vec<ClientState>,
    pub shared: ParamVector,
}

impl Simulation {
    /// Hash of the initial shared parameters and heads.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.shared.values() {
            v.to_bits().hash(&mut h);
        }
        for c in &self.clients {
            for v in c.head().values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates (or loads) every client's data and draws the initial network
/// parameters. Deterministic in `cfg.seed`.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let synthetic = cfg.task_data.contains(&TaskData::Synthetic);
    let world = if synthetic {
        Some(generate_world(
            cfg.world.input_dim,
            cfg.world.repr_dim,
            &cfg.tasks,
            cfg.world.noise_std,
            cfg.seed,
        )?)
    } else {
        None
    };

    let mut clients = Vec::with_capacity(cfg.num_tasks());
    for (i, ((task, head_spec), source)) in cfg
        .tasks
        .iter()
        .zip(&cfg.head_specs)
        .zip(&cfg.task_data)
        .enumerate()
    {
        let mut task = task.clone();
        let data: LocalDataset = match source {
            TaskData::Synthetic => {
                sample_dataset(world.as_ref().expect("built above"), &task, cfg.seed)?
            }
            TaskData::File { path, schema } => {
                let data = ingest_dataset(path, schema)?;
                task.samples = data.len();
                data
            }
        };
        if data.inputs().cols() != cfg.shared_spec.input_width() {
            return Err(Error::Config(format!(
                "task {i}: data has {} features, shared network takes {}",
                data.inputs().cols(),
                cfg.shared_spec.input_width()
            )));
        }
        let head = ParamVector::glorot(
            head_spec,
            &mut init_rng(cfg.seed, HEAD_INIT_STREAM + i as u64),
        );
        let client_seed = cfg
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(i as u64);
        clients.push(ClientState::new(
            i,
            task,
            data,
            head_spec.clone(),
            head,
            client_seed,
        )?);
    }

    let first_tail = cfg.shared_spec.num_layers() - cfg.tail_layers;
    let shared = ParamVector::glorot(
        &cfg.shared_spec,
        &mut init_rng(cfg.seed, SHARED_INIT_STREAM),
    )
    .with_tail(first_tail)?;
    Ok(Simulation { clients, shared })
}

/// Worker count after applying [`THREADS_ENV`].
pub fn effective_threads(configured: usize) -> usize {
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(n) => n,
        None => configured,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub strategy: WeightingStrategy,
    pub metrics: Vec<RoundMetrics>,
    pub initial_losses: Vec<f64>,
    pub init_fingerprint: u64,
}

fn divergence(round: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(detail) => Error::Divergence { round, detail },
        other => other,
    }
}

/// Runs the full protocol on an already-built simulation.
pub fn run_simulation(cfg: &ExperimentConfig, mut sim: Simulation) -> Result<RunOutcome> {
    cfg.validate()?;
    let local = cfg.local_config();
    let server = cfg.server_config();
    let init_fingerprint = sim.fingerprint();
    let shared_spec = &cfg.shared_spec;

    let mut initial_losses = Vec::with_capacity(sim.clients.len());
    for c in &mut sim.clients {
        let f0 = c
            .set_initial_loss(shared_spec, &sim.shared)
            .map_err(|e| divergence(0, e))?;
        initial_losses.push(f0);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_threads(cfg.threads))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let n = sim.clients.len();
    let mut weights = LossWeights::uniform(n);
    let mut shared = sim.shared;
    let mut clients = sim.clients;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let broadcast = &shared;
        // Results come back in client order regardless of scheduling.
        let reports: Vec<GradReport> = pool
            .install(|| {
                clients
                    .par_iter_mut()
                    .map(|c| c.local_round(broadcast, shared_spec, &local))
                    .collect::<Result<Vec<_>>>()
            })
            .map_err(|e| divergence(round, e))?;

        let (next_shared, next_weights, server_metrics) =
            run_round(cfg.strategy, &shared, &reports, &weights, &server)
                .map_err(|e| divergence(round, e))?;

        let p = next_weights.as_slice();
        let objective = reports
            .iter()
            .zip(p)
            .map(|(r, w)| w * r.raw_loss)
            .sum::<f64>()
            / n as f64;
        let t = &server_metrics.targets;
        let row = RoundMetrics {
            round,
            fgrad: server_metrics.fgrad,
            objective,
            tasks: (0..n)
                .map(|i| TaskRoundMetrics {
                    raw_loss: reports[i].raw_loss,
                    inverse_rate: reports[i].inverse_rate,
                    rel_rate: t.rel_rates[i],
                    weight: p[i],
                    actual_norm: t.weighted_norms[i],
                    target_norm: t.targets[i],
                })
                .collect(),
        };
        if !row.is_finite() || next_shared.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                round,
                detail: "non-finite round metrics or shared parameters".into(),
            });
        }
        debug!("round {round}: objective {objective:.6e}, weights {p:?}");
        metrics.push(row);
        shared = next_shared;
        weights = next_weights;
    }
    Ok(RunOutcome {
        strategy: cfg.strategy,
        metrics,
        initial_losses,
        init_fingerprint,
    })
}

/// Builds the simulation, runs every round and writes the metrics CSV when
/// `cfg.output` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let sim = build_simulation(cfg)?;
    let outcome = run_simulation(cfg, sim)?;
    if let Some(path) = &cfg.output {
        write_metrics(&outcome.metrics, cfg.num_tasks(), path)?;
        info!(
            "wrote {} rounds to {}",
            outcome.metrics.len(),
            path.display()
        );
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskComparison {
    pub task_id: usize,
    pub initial_loss: f64,
    pub fedgradnorm_final: f64,
    pub equal_final: f64,
    /// First round whose loss is below half the initial loss.
    pub fedgradnorm_half_round: Option<usize>,
    pub equal_half_round: Option<usize>,
}

impl TaskComparison {
    pub fn fedgradnorm_normalized(&self) -> f64 {
        self.fedgradnorm_final / self.initial_loss
    }

    pub fn equal_normalized(&self) -> f64 {
        self.equal_final / self.initial_loss
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub tasks: Vec<TaskComparison>,
    pub fedgradnorm: RunOutcome,
    pub equal: RunOutcome,
}

impl Comparison {
    /// Largest `F_K / F_0` over tasks, for each arm.
    pub fn worst_normalized(&self) -> (f64, f64) {
        let worst = |f: fn(&TaskComparison) -> f64| {
            self.tasks.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
        };
        (
            worst(TaskComparison::fedgradnorm_normalized),
            worst(TaskComparison::equal_normalized),
        )
    }
}

fn half_round(metrics: &[RoundMetrics], task: usize, f0: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|m| m.tasks[task].raw_loss < 0.5 * f0)
        .map(|m| m.round)
}

/// Runs both weighting strategies from the same world and initialization.
pub fn compare_strategies(cfg: &ExperimentConfig) -> Result<Comparison> {
    let sim = build_simulation(cfg)?;
    let arm = |strategy| {
        let mut c = cfg.clone();
        c.strategy = strategy;
        c.output = None;
        run_simulation(&c, sim.clone())
    };
    let fedgradnorm = arm(WeightingStrategy::FedGradNorm)?;
    let equal = arm(WeightingStrategy::Equal)?;
    if fedgradnorm.init_fingerprint != equal.init_fingerprint {
        return Err(Error::invalid(
            "strategy arms started from different initializations",
        ));
    }
    let last = |o: &RunOutcome, i: usize| {
        o.metrics
            .last()
            .map_or(o.initial_losses[i], |m| m.tasks[i].raw_loss)
    };
    let tasks = (0..cfg.num_tasks())
        .map(|i| {
            let f0 = fedgradnorm.initial_losses[i];
            TaskComparison {
                task_id: i,
                initial_loss: f0,
                fedgradnorm_final: last(&fedgradnorm, i),
                equal_final: last(&equal, i),
                fedgradnorm_half_round: half_round(&fedgradnorm.metrics, i, f0),
                equal_half_round: half_round(&equal.metrics, i, f0),
            }
        })
        .collect();
    Ok(Comparison {
        tasks,
        fedgradnorm,
        equal,
    })
}
