use std::collections::BTreeSet;
use std::thread;
use std::time::Instant;

use log::{debug, info};

use super::{
    aggregate, ClientNode, ClientUpdate, FedError, FederationConfig, FederationMask, Transport,
};
use crate::data::{samples, DataSpec, LabeledImage, Shard};
use crate::metrics::{best_round, ClientEval, RoundReport};
use crate::nn::{evaluate, Architecture, ParamSet};
use crate::rng::{mix64, CounterRng};
use crate::wire::{dir, net, quantize, Dtype};

/// Clients taking part in `round`, ascending. Ids run from 1 to K.
///
/// With `C = 1` every client takes part; otherwise `ceil(C * K)` ids are drawn
/// by a shuffle seeded from the run seed and the round.
pub fn select_clients(cfg: &FederationConfig, round: u32) -> Vec<u32> {
    let mut ids: Vec<u32> = (1..=cfg.clients as u32).collect();
    let m = cfg.clients_per_round();
    if m == ids.len() {
        return ids;
    }
    CounterRng::new(cfg.seed ^ mix64(0x5E1E_C700_0000_0000 | round as u64)).shuffle(&mut ids);
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    /// Number of completed rounds; 0 for the initial model.
    pub round: u32,
    /// Full parameter set.
    pub params: ParamSet,
    /// Round-0 values of the non-federated entries.
    pub frozen: ParamSet,
}

impl GlobalModel {
    pub fn initial(arch: &Architecture, seed: u64, mask: &FederationMask) -> Result<Self, FedError> {
        let params = arch.init_params(seed);
        let frozen = params.select(mask.frozen_names().iter().map(String::as_str))?;
        Ok(Self { round: 0, params, frozen })
    }

    /// Federated entries, as sent to clients.
    pub fn broadcast(&self, mask: &FederationMask) -> Result<ParamSet, FedError> {
        Ok(self.params.select(mask.names().iter().map(String::as_str))?)
    }

    /// Whether every non-federated entry still equals its round-0 value bit for bit.
    pub fn frozen_intact(&self) -> bool {
        self.frozen
            .iter()
            .all(|(name, t)| self.params.get(name).is_some_and(|p| p.bit_eq(t)))
    }
}

/// Moves parameters between the orchestrator and the clients.
pub trait Exchange {
    /// Delivers the federated entries of the global model to `participants`
    /// and returns their updates for `round`. Fails with
    /// [`FedError::RoundTimeout`] when a participant does not answer in time.
    fn exchange(&mut self, round: u32, participants: &[u32], global: &ParamSet) -> Result<Vec<ClientUpdate>, FedError>;

    /// Publishes the final model after the last round.
    fn finish(&mut self, rounds_done: u32, global: &ParamSet) -> Result<(), FedError>;

    /// Tells clients that the run stopped early. Best effort.
    fn abort(&mut self, _round: u32, _reason: &str) {}
}

/// In-process transport. Clients of a round train on parallel threads.
///
/// Parameters pass through [`quantize`] at the configured wire dtype in both
/// directions, so results match the file and socket transports.
pub struct SimExchange {
    nodes: Vec<ClientNode>,
    dtype: Dtype,
    offline: BTreeSet<u32>,
}

impl SimExchange {
    pub fn new(nodes: Vec<ClientNode>, dtype: Dtype) -> Self {
        Self {
            nodes,
            dtype,
            offline: BTreeSet::new(),
        }
    }

    /// An offline client never answers; rounds that select it time out.
    pub fn set_offline(&mut self, client_id: u32, offline: bool) {
        if offline {
            self.offline.insert(client_id);
        } else {
            self.offline.remove(&client_id);
        }
    }
}

impl Exchange for SimExchange {
    fn exchange(&mut self, round: u32, participants: &[u32], global: &ParamSet) -> Result<Vec<ClientUpdate>, FedError> {
        let missing: Vec<u32> = participants
            .iter()
            .copied()
            .filter(|id| self.offline.contains(id) || !self.nodes.iter().any(|n| n.id == *id))
            .collect();
        if !missing.is_empty() {
            return Err(FedError::RoundTimeout { round, missing });
        }
        let broadcast = quantize(global, self.dtype)?;
        let dtype = self.dtype;
        let nodes: Vec<&ClientNode> = self.nodes.iter().filter(|n| participants.contains(&n.id)).collect();
        let results: Vec<Result<ClientUpdate, FedError>> = thread::scope(|s| {
            let handles: Vec<_> = nodes
                .iter()
                .map(|node| {
                    let broadcast = &broadcast;
                    s.spawn(move || {
                        let mut update = node.handle_round(round, broadcast)?;
                        update.params = quantize(&update.params, dtype)?;
                        Ok(update)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        });
        results.into_iter().collect()
    }

    fn finish(&mut self, _rounds_done: u32, _global: &ParamSet) -> Result<(), FedError> {
        Ok(())
    }
}

/// Scores a global model on every client's splits and the external set.
#[derive(Debug, Clone)]
pub struct Evaluator {
    arch: Architecture,
    shards: Vec<Shard>,
    external: Vec<LabeledImage>,
}

impl Evaluator {
    pub fn new(arch: Architecture, shards: Vec<Shard>, external: Vec<LabeledImage>) -> Self {
        Self { arch, shards, external }
    }

    pub fn clients(&self, params: &ParamSet) -> Result<Vec<ClientEval>, FedError> {
        thread::scope(|s| {
            let handles: Vec<_> = self
                .shards
                .iter()
                .map(|shard| {
                    s.spawn(move || -> Result<ClientEval, FedError> {
                        Ok(ClientEval {
                            client_id: shard.client_id,
                            train: evaluate(&self.arch, params, samples(&shard.train))?,
                            test: evaluate(&self.arch, params, samples(&shard.test))?,
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        })
    }

    /// `None` when there is no external set.
    pub fn external(&self, params: &ParamSet) -> Result<Option<crate::nn::Metrics>, FedError> {
        if self.external.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(&self.arch, params, samples(&self.external))?))
    }
}

/// One communication round: broadcast, wait for every selected client,
/// aggregate, and write the aggregate into the federated entries.
///
/// On any error the caller's `global` is untouched.
pub fn run_round<E: Exchange + ?Sized>(
    global: &GlobalModel,
    exchange: &mut E,
    cfg: &FederationConfig,
    mask: &FederationMask,
    evaluator: Option<&Evaluator>,
) -> Result<(GlobalModel, RoundReport), FedError> {
    let started = Instant::now();
    let round = global.round + 1;
    let participants = select_clients(cfg, round);
    let broadcast = global.broadcast(mask)?;

    let updates = exchange.exchange(round, &participants, &broadcast)?;
    let mut ids: Vec<u32> = updates.iter().map(|u| u.client_id).collect();
    ids.sort_unstable();
    if ids != participants {
        return Err(FedError::ProtocolViolation(format!(
            "round {round}: expected updates from {participants:?}, got {ids:?}"
        )));
    }
    for u in &updates {
        if u.round != round {
            return Err(FedError::ProtocolViolation(format!(
                "client {} answered round {round} with an update for round {}",
                u.client_id, u.round
            )));
        }
        if !u.params.same_layout(&broadcast) {
            return Err(FedError::ProtocolViolation(format!(
                "client {} sent entries outside the federation mask",
                u.client_id
            )));
        }
    }

    let averaged = aggregate(&updates, cfg.aggregation)?;
    let next = GlobalModel {
        round,
        params: global.params.with_overrides(&averaged)?,
        frozen: global.frozen.clone(),
    };
    debug_assert!(next.frozen_intact());

    let (clients, external) = match evaluator {
        Some(ev) if cfg.eval_each_round => (ev.clients(&next.params)?, ev.external(&next.params)?),
        _ => (Vec::new(), None),
    };
    let report = RoundReport {
        round,
        participants,
        clients,
        external,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok((next, report))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    /// Earliest round with the highest mean client test accuracy.
    pub best_round: Option<u32>,
    pub best_mean_accuracy: Option<f64>,
    pub initial: GlobalModel,
    pub final_global: GlobalModel,
}

/// A configured federation over fixed client data.
#[derive(Debug, Clone)]
pub struct Federation {
    cfg: FederationConfig,
    arch: Architecture,
    mask: FederationMask,
    shards: Vec<Shard>,
    external: Vec<LabeledImage>,
}

impl Federation {
    /// `shards[i]` must belong to client `i + 1`.
    pub fn new(cfg: FederationConfig, shards: Vec<Shard>, external: Vec<LabeledImage>) -> Result<Self, FedError> {
        cfg.validate()?;
        if shards.len() != cfg.clients {
            return Err(FedError::Precondition(format!(
                "{} clients configured but {} shards given",
                cfg.clients,
                shards.len()
            )));
        }
        for (i, shard) in shards.iter().enumerate() {
            if shard.client_id != i as u32 + 1 {
                return Err(FedError::Precondition(format!(
                    "shard {i} belongs to client {}, expected {}",
                    shard.client_id,
                    i + 1
                )));
            }
            if shard.train.is_empty() {
                return Err(FedError::EmptyInput(format!("client {} has no training data", shard.client_id)));
            }
        }
        let arch = Architecture::inspection_cnn();
        let mask = FederationMask::new(cfg.mask, &arch);
        Ok(Self {
            cfg,
            arch,
            mask,
            shards,
            external,
        })
    }

    pub fn from_spec(cfg: FederationConfig, spec: &DataSpec) -> Result<Self, FedError> {
        cfg.validate()?;
        if spec.clients.len() != cfg.clients {
            return Err(FedError::Precondition(format!(
                "{} clients configured but data for {}",
                cfg.clients,
                spec.clients.len()
            )));
        }
        let (shards, external) = spec.build()?;
        Self::new(cfg, shards, external)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn mask(&self) -> &FederationMask {
        &self.mask
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn external(&self) -> &[LabeledImage] {
        &self.external
    }

    pub fn initial_global(&self) -> Result<GlobalModel, FedError> {
        GlobalModel::initial(&self.arch, self.cfg.seed, &self.mask)
    }

    pub fn client_node(&self, client_id: u32) -> Option<ClientNode> {
        let shard = self.shards.iter().find(|s| s.client_id == client_id)?;
        Some(ClientNode::new(
            client_id,
            shard.train.clone(),
            self.cfg.clone(),
            self.arch.clone(),
        ))
    }

    pub fn client_nodes(&self) -> Vec<ClientNode> {
        self.shards
            .iter()
            .filter_map(|s| self.client_node(s.client_id))
            .collect()
    }

    pub fn evaluator(&self) -> Evaluator {
        Evaluator::new(self.arch.clone(), self.shards.clone(), self.external.clone())
    }

    /// Runs all configured rounds over `exchange`.
    ///
    /// `on_round` sees each new global model and its report; an error from it
    /// stops the run.
    pub fn run<E, F>(&self, exchange: &mut E, mut on_round: F) -> Result<ExperimentOutcome, FedError>
    where
        E: Exchange + ?Sized,
        F: FnMut(&GlobalModel, &RoundReport) -> Result<(), FedError>,
    {
        let evaluator = self.evaluator();
        let initial = self.initial_global()?;
        let mut global = initial.clone();
        let mut reports = Vec::with_capacity(self.cfg.rounds as usize);
        for _ in 0..self.cfg.rounds {
            let step = run_round(&global, exchange, &self.cfg, &self.mask, Some(&evaluator))
                .and_then(|(next, report)| on_round(&next, &report).map(|()| (next, report)));
            let (next, report) = match step {
                Ok(v) => v,
                Err(e) => {
                    exchange.abort(global.round + 1, &e.to_string());
                    return Err(e);
                }
            };
            match report.mean_test_accuracy() {
                Some(acc) => info!("round {}: mean test accuracy {acc:.4}", report.round),
                None => info!("round {} done", report.round),
            }
            global = next;
            reports.push(report);
        }
        exchange.finish(global.round, &global.broadcast(&self.mask)?)?;
        let best = best_round(&reports);
        Ok(ExperimentOutcome {
            reports,
            best_round: best.map(|b| b.0),
            best_mean_accuracy: best.map(|b| b.1),
            initial,
            final_global: global,
        })
    }
}

/// Builds the data, starts the configured transport with in-process clients,
/// and runs every round.
pub fn run_experiment(cfg: &FederationConfig, spec: &DataSpec) -> Result<ExperimentOutcome, FedError> {
    run_experiment_with(cfg, spec, |_, _| Ok(()))
}

/// [`run_experiment`] with a per-round callback.
pub fn run_experiment_with<F>(cfg: &FederationConfig, spec: &DataSpec, on_round: F) -> Result<ExperimentOutcome, FedError>
where
    F: FnMut(&GlobalModel, &RoundReport) -> Result<(), FedError>,
{
    let fed = Federation::from_spec(cfg.clone(), spec)?;
    match &cfg.transport {
        Transport::Sim => {
            let mut exchange = SimExchange::new(fed.client_nodes(), cfg.wire_dtype);
            fed.run(&mut exchange, on_round)
        }
        Transport::Dir(path) => {
            let mut exchange = dir::DirExchange::create(path, cfg)?;
            thread::scope(|s| {
                let clients: Vec<_> = fed
                    .client_nodes()
                    .into_iter()
                    .map(|node| s.spawn(move || dir::run_client(path, &node)))
                    .collect();
                let outcome = fed.run(&mut exchange, on_round);
                join_clients(outcome, clients)
            })
        }
        Transport::Net(address) => {
            let server = net::NetServer::bind(address)?;
            let local = server.local_addr()?.to_string();
            thread::scope(|s| {
                let clients: Vec<_> = fed
                    .client_nodes()
                    .into_iter()
                    .map(|node| {
                        let local = local.clone();
                        s.spawn(move || net::join(&local, &node))
                    })
                    .collect();
                let outcome = server
                    .accept_clients(cfg)
                    .and_then(|mut exchange| fed.run(&mut exchange, on_round));
                join_clients(outcome, clients)
            })
        }
    }
}

fn join_clients(
    outcome: Result<ExperimentOutcome, FedError>,
    clients: Vec<thread::ScopedJoinHandle<'_, Result<(), FedError>>>,
) -> Result<ExperimentOutcome, FedError> {
    let mut client_error = None;
    for handle in clients {
        if let Err(e) = handle.join().expect("client thread panicked") {
            debug!("client stopped with error: {e}");
            client_error.get_or_insert(e);
        }
    }
    let outcome = outcome?;
    match client_error {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}
