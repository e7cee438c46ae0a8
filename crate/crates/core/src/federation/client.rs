use super::{
    independent_seed, BatchSize, ClientUpdate, FedError, FederationConfig, FederationMask, InitPolicy, MaskMode,
};
use crate::data::{LabeledImage, SIDE};
use crate::nn::{loss_and_grad, loss_and_grad_head, Architecture, Batch, ParamSet};
use crate::rng::{client_round_seed, CounterRng};

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTraining {
    pub update: ClientUpdate,
    /// Full parameter set after training, including non-federated entries.
    pub local_params: ParamSet,
    /// Mean mini-batch loss over the last local epoch.
    pub last_epoch_loss: f64,
}

/// Runs `cfg.local_epochs` epochs of mini-batch SGD from `init`.
///
/// Batches are drawn from a shuffle seeded by `client_round_seed(cfg.seed,
/// client_id, round)`; when one batch covers the whole set the natural order is
/// kept. Entries outside `mask` are never written.
pub fn local_train(
    arch: &Architecture,
    data: &[LabeledImage],
    init: &ParamSet,
    cfg: &FederationConfig,
    mask: &FederationMask,
    client_id: u32,
    round: u32,
) -> Result<LocalTraining, FedError> {
    if data.is_empty() {
        return Err(FedError::EmptyInput(format!("client {client_id} has no training data")));
    }
    arch.check(init)?;
    let n = data.len();
    let batch = match cfg.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) => b.min(n),
    };
    if batch == 0 {
        return Err(FedError::Precondition("batch size must be at least 1".into()));
    }
    let trainable: Vec<bool> = init.names().map(|name| mask.contains(name)).collect();
    let head_only = mask.mode() == MaskMode::ClassifierOnly;

    let mut rng = CounterRng::new(client_round_seed(cfg.seed, client_id, round));
    let mut params = init.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_epoch_loss = 0.0;
    for _ in 0..cfg.local_epochs {
        if batch < n {
            rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let b = Batch::from_samples(SIDE, chunk.iter().map(|&i| data[i].sample()))?;
            let (loss, grads) = if head_only {
                loss_and_grad_head(arch, &params, &b)?
            } else {
                loss_and_grad(arch, &params, &b)?
            };
            for (i, &train) in trainable.iter().enumerate() {
                if !train {
                    continue;
                }
                let g = grads.tensor(i).data();
                for (w, &gv) in params.tensor_mut(i).data_mut().iter_mut().zip(g) {
                    *w -= cfg.lr * gv;
                }
            }
            epoch_loss += loss;
            batches += 1;
        }
        last_epoch_loss = epoch_loss / batches as f64;
    }

    let update = ClientUpdate {
        client_id,
        round,
        params: params.select(mask.names().iter().map(String::as_str))?,
        n_k: n as u64,
        local_epochs_run: cfg.local_epochs,
    };
    Ok(LocalTraining {
        update,
        local_params: params,
        last_epoch_loss,
    })
}

/// Client side of the round protocol, shared by every transport.
///
/// A client knows the common seed, so it rebuilds the non-federated entries
/// locally and only needs the federated entries from the server.
#[derive(Debug, Clone)]
pub struct ClientNode {
    pub id: u32,
    arch: Architecture,
    cfg: FederationConfig,
    mask: FederationMask,
    train: Vec<LabeledImage>,
    base: ParamSet,
}

impl ClientNode {
    pub fn new(id: u32, train: Vec<LabeledImage>, cfg: FederationConfig, arch: Architecture) -> Self {
        let mask = FederationMask::new(cfg.mask, &arch);
        let base = arch.init_params(cfg.seed);
        Self {
            id,
            arch,
            cfg,
            mask,
            train,
            base,
        }
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    /// Full parameters this client trains from in `round`.
    pub fn start_params(&self, round: u32, broadcast: &ParamSet) -> Result<ParamSet, FedError> {
        if round == 1 && self.cfg.init == InitPolicy::Independent {
            let own = self.arch.init_params(independent_seed(self.cfg.seed, self.id));
            let federated = own.select(self.mask.names().iter().map(String::as_str))?;
            return Ok(self.base.with_overrides(&federated)?);
        }
        let expected = self.base.select(self.mask.names().iter().map(String::as_str))?;
        if !expected.same_layout(broadcast) {
            return Err(FedError::ProtocolViolation(format!(
                "client {}: broadcast for round {round} does not match the federation mask",
                self.id
            )));
        }
        Ok(self.base.with_overrides(broadcast)?)
    }

    pub fn handle_round(&self, round: u32, broadcast: &ParamSet) -> Result<ClientUpdate, FedError> {
        let start = self.start_params(round, broadcast)?;
        Ok(local_train(&self.arch, &self.train, &start, &self.cfg, &self.mask, self.id, round)?.update)
    }

    /// Whether this client is selected in `round`.
    pub fn selected_in(&self, round: u32) -> bool {
        super::select_clients(&self.cfg, round).contains(&self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_client_shard, ClientDataSpec};
    use crate::data::samples;
    use crate::nn::sgd_apply;

    fn shard(id: u32) -> Vec<LabeledImage> {
        generate_client_shard(&ClientDataSpec::default_for(id, 1).unwrap(), 0.8)
            .unwrap()
            .train
    }

    #[test]
    fn full_batch_single_epoch_is_one_gd_step() {
        let arch = Architecture::inspection_cnn();
        let data: Vec<_> = shard(1).into_iter().take(30).collect();
        let cfg = FederationConfig::default().into_fedsgd();
        let mask = FederationMask::new(MaskMode::All, &arch);
        let init = arch.init_params(3);
        let out = local_train(&arch, &data, &init, &cfg, &mask, 1, 1).unwrap();
        let batch = Batch::from_samples(SIDE, samples(&data)).unwrap();
        let (_, g) = loss_and_grad(&arch, &init, &batch).unwrap();
        let expected = sgd_apply(&init, &g, cfg.lr).unwrap();
        assert!(out.local_params.bit_eq(&expected));
        assert!(out.update.params.bit_eq(&expected));
        assert_eq!(out.update.n_k, 30);
    }

    #[test]
    fn classifier_only_leaves_features_untouched() {
        let arch = Architecture::inspection_cnn();
        let data: Vec<_> = shard(2).into_iter().take(40).collect();
        let cfg = FederationConfig {
            local_epochs: 3,
            mask: MaskMode::ClassifierOnly,
            ..Default::default()
        };
        let mask = FederationMask::new(MaskMode::ClassifierOnly, &arch);
        let init = arch.init_params(3);
        let out = local_train(&arch, &data, &init, &cfg, &mask, 2, 1).unwrap();
        for name in mask.frozen_names() {
            assert!(out.local_params.get(name).unwrap().bit_eq(init.get(name).unwrap()));
        }
        assert!(!out.local_params.get("fc1.weight").unwrap().bit_eq(init.get("fc1.weight").unwrap()));
        let names: Vec<_> = out.update.params.names().collect();
        assert_eq!(names, vec!["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]);
    }

    #[test]
    fn local_training_is_deterministic() {
        let arch = Architecture::inspection_cnn();
        let data = shard(3);
        let cfg = FederationConfig {
            local_epochs: 2,
            ..Default::default()
        };
        let mask = FederationMask::new(MaskMode::All, &arch);
        let init = arch.init_params(9);
        let a = local_train(&arch, &data, &init, &cfg, &mask, 3, 4).unwrap();
        let b = local_train(&arch, &data, &init, &cfg, &mask, 3, 4).unwrap();
        assert!(a.update.params.bit_eq(&b.update.params));
        assert_eq!(a.update, b.update);
        let c = local_train(&arch, &data, &init, &cfg, &mask, 3, 5).unwrap();
        assert!(!a.update.params.bit_eq(&c.update.params));
    }

    #[test]
    fn empty_data_rejected() {
        let arch = Architecture::inspection_cnn();
        let mask = FederationMask::new(MaskMode::All, &arch);
        let r = local_train(&arch, &[], &arch.zeros(), &FederationConfig::default(), &mask, 1, 1);
        assert!(matches!(r, Err(FedError::EmptyInput(_))));
    }

    #[test]
    fn independent_init_differs_per_client_in_round_one_only() {
        let arch = Architecture::inspection_cnn();
        let cfg = FederationConfig {
            init: InitPolicy::Independent,
            ..Default::default()
        };
        let a = ClientNode::new(1, shard(1), cfg.clone(), arch.clone());
        let b = ClientNode::new(2, shard(2), cfg.clone(), arch.clone());
        let broadcast = arch.init_params(cfg.seed);
        let (sa, sb) = (a.start_params(1, &broadcast).unwrap(), b.start_params(1, &broadcast).unwrap());
        assert!(!sa.bit_eq(&sb));
        let (sa, sb) = (a.start_params(2, &broadcast).unwrap(), b.start_params(2, &broadcast).unwrap());
        assert!(sa.bit_eq(&sb));
    }
}
