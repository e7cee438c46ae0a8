use std::path::PathBuf;
use std::time::Duration;

use super::FedError;
use crate::nn::{Architecture, ParamGroup};
use crate::wire::Dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// One full-batch gradient step per client per round.
    FedSgd,
    /// Several local epochs of mini-batch SGD per round.
    FedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Unweighted mean of client parameters.
    PlainMean,
    /// Mean weighted by local sample counts.
    #[default]
    SampleWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Federate every parameter.
    #[default]
    All,
    /// Federate the dense head only; the convolution stack stays at its initial values.
    ClassifierOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Every client starts from `init_params(seed)`.
    #[default]
    CommonSeed,
    /// In round 1 each client draws its federated entries from its own seed,
    /// see [`independent_seed`].
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// Whole local training set as one batch.
    Full,
    Size(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Sim,
    Dir(PathBuf),
    Net(String),
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::FedSgd => "fedsgd",
            Self::FedAvg => "fedavg",
        }
    }
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Self::PlainMean => "mean",
            Self::SampleWeighted => "weighted",
        }
    }
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::ClassifierOnly => "classifier",
        }
    }
}

impl InitPolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::CommonSeed => "common",
            Self::Independent => "independent",
        }
    }
}

impl BatchSize {
    pub fn name(self) -> String {
        match self {
            Self::Full => "full".into(),
            Self::Size(b) => b.to_string(),
        }
    }
}

/// Per-client initialization seed under [`InitPolicy::Independent`].
pub fn independent_seed(seed: u64, client_id: u32) -> u64 {
    seed ^ crate::rng::mix64(0x1D1D_0000_0000 | client_id as u64)
}

/// Names exchanged and aggregated each round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationMask {
    mode: MaskMode,
    names: Vec<String>,
    frozen: Vec<String>,
}

impl FederationMask {
    pub fn new(mode: MaskMode, arch: &Architecture) -> Self {
        let (names, frozen) = match mode {
            MaskMode::All => (arch.param_names(), Vec::new()),
            MaskMode::ClassifierOnly => (
                arch.group_names(ParamGroup::Classifier),
                arch.group_names(ParamGroup::Feature),
            ),
        };
        Self { mode, names, frozen }
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    /// Federated names in canonical order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Names that never leave the client and never change.
    pub fn frozen_names(&self) -> &[String] {
        &self.frozen
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: BatchSize,
    pub lr: f64,
    /// Fraction of clients selected per round, in (0, 1].
    pub client_fraction: f64,
    pub aggregation: Aggregation,
    pub mask: MaskMode,
    pub init: InitPolicy,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub transport: Transport,
    pub round_timeout: Duration,
    pub eval_each_round: bool,
    pub wire_dtype: Dtype,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 3,
            rounds: 20,
            local_epochs: 5,
            batch_size: BatchSize::Size(16),
            lr: 0.05,
            client_fraction: 1.0,
            aggregation: Aggregation::SampleWeighted,
            mask: MaskMode::All,
            init: InitPolicy::CommonSeed,
            algorithm: Algorithm::FedAvg,
            seed: 42,
            transport: Transport::Sim,
            round_timeout: Duration::from_secs(300),
            eval_each_round: true,
            wire_dtype: Dtype::F32,
        }
    }
}

impl FederationConfig {
    /// Switches to FedSGD: one epoch over the whole local set.
    pub fn into_fedsgd(mut self) -> Self {
        self.algorithm = Algorithm::FedSgd;
        self.local_epochs = 1;
        self.batch_size = BatchSize::Full;
        self
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let fail = |msg: String| Err(FedError::Precondition(msg));
        if self.clients == 0 {
            return fail("at least one client is required".into());
        }
        if u32::try_from(self.clients).is_err() {
            return fail(format!("{} clients is too many", self.clients));
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local epochs must be at least 1".into());
        }
        if self.batch_size == BatchSize::Size(0) {
            return fail("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return fail(format!("client fraction must lie in (0, 1], got {}", self.client_fraction));
        }
        if self.round_timeout.is_zero() {
            return fail("round timeout must be positive".into());
        }
        if self.algorithm == Algorithm::FedSgd && (self.local_epochs != 1 || self.batch_size != BatchSize::Full) {
            return fail("FedSGD requires one local epoch over the full local batch".into());
        }
        Ok(())
    }

    /// Number of clients taking part in each round: `ceil(C * K)`.
    pub fn clients_per_round(&self) -> usize {
        ((self.client_fraction * self.clients as f64).ceil() as usize).clamp(1, self.clients)
    }
}
