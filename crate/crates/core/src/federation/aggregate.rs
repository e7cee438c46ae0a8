use std::collections::HashSet;

use super::{Aggregation, FedError};
use crate::nn::ParamSet;

/// A client's trained parameters for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u32,
    /// Federated entries only, in canonical order.
    pub params: ParamSet,
    /// Number of local training samples.
    pub n_k: u64,
    pub local_epochs_run: u32,
}

/// Averages client parameters elementwise.
///
/// `PlainMean` uses weight `1/K`, `SampleWeighted` uses `n_k / n`. Updates are
/// accumulated in ascending `client_id` order, so the result is bit-identical
/// for any input order. The sum is evaluated as `w_1 + sum_k c_k (w_k - w_1)`,
/// equal to `sum_k c_k w_k` because the weights sum to one, which makes
/// averaging identical updates exact.
pub fn aggregate(updates: &[ClientUpdate], mode: Aggregation) -> Result<ParamSet, FedError> {
    let first = updates
        .first()
        .ok_or_else(|| FedError::Precondition("aggregation needs at least one update".into()))?;
    let mut seen = HashSet::new();
    for u in updates {
        if u.round != first.round {
            return Err(FedError::ProtocolViolation(format!(
                "updates from rounds {} and {} mixed",
                first.round, u.round
            )));
        }
        if !seen.insert(u.client_id) {
            return Err(FedError::ProtocolViolation(format!("duplicate update from client {}", u.client_id)));
        }
        if !u.params.same_layout(&first.params) {
            return Err(FedError::ProtocolViolation(format!(
                "client {} sent a different parameter layout",
                u.client_id
            )));
        }
        if u.n_k == 0 {
            return Err(FedError::ProtocolViolation(format!("client {} reported zero samples", u.client_id)));
        }
    }

    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);

    let coefficients: Vec<f64> = match mode {
        Aggregation::PlainMean => vec![1.0 / sorted.len() as f64; sorted.len()],
        Aggregation::SampleWeighted => {
            let n: u64 = sorted.iter().map(|u| u.n_k).sum();
            sorted.iter().map(|u| u.n_k as f64 / n as f64).collect()
        }
    };
    let total: f64 = coefficients.iter().sum();
    assert!((total - 1.0).abs() < 1e-12, "aggregation weights sum to {total}");

    let anchor = &sorted[0].params;
    let mut out = anchor.clone();
    for (u, &c) in sorted.iter().zip(&coefficients).skip(1) {
        for i in 0..out.len() {
            let base = anchor.tensor(i).data();
            let w = u.params.tensor(i).data();
            for ((acc, &b), &v) in out.tensor_mut(i).data_mut().iter_mut().zip(base).zip(w) {
                *acc += c * (v - b);
            }
        }
    }
    Ok(out)
}
