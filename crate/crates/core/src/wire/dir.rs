//! Shared-directory transport.
//!
//! ```text
//! global_r{R}.fedw        server: federated entries after round R (R = 0 is the initial model)
//! client{C}_r{R}.fedw     client C: update for round R
//! client{C}_r{R}.nk       client C: local sample count, decimal
//! client{C}_r{R}.done     zero-length marker, written last
//! abort                   server: run stopped, reason as text
//! ```
//!
//! Every file is written under a `.tmp` name and renamed into place, so a
//! reader never sees a partial file.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::debug;

use super::{decode_params, encode_params, Dtype, ErrorCode, WireError};
use crate::federation::{ClientNode, ClientUpdate, Exchange, FedError, FederationConfig};
use crate::nn::ParamSet;

const POLL: Duration = Duration::from_millis(5);
pub const ABORT_FILE: &str = "abort";

pub fn global_file(round: u32) -> String {
    format!("global_r{round}.fedw")
}

pub fn update_file(client_id: u32, round: u32) -> String {
    format!("client{client_id}_r{round}.fedw")
}

pub fn count_file(client_id: u32, round: u32) -> String {
    format!("client{client_id}_r{round}.nk")
}

pub fn marker_file(client_id: u32, round: u32) -> String {
    format!("client{client_id}_r{round}.done")
}

fn io_error(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> FedError {
    let context = context.into();
    move |source| FedError::Io { context, source }
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), FedError> {
    let tmp = dir.join(format!("{name}.tmp"));
    let target = dir.join(name);
    fs::write(&tmp, bytes).map_err(io_error(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, &target).map_err(io_error(format!("renaming to {}", target.display())))
}

fn is_protocol_file(name: &str) -> bool {
    let stem = name.strip_suffix(".tmp").unwrap_or(name);
    if stem == ABORT_FILE {
        return true;
    }
    let numbered = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if let Some(r) = stem.strip_prefix("global_r").and_then(|s| s.strip_suffix(".fedw")) {
        return numbered(r);
    }
    let Some(rest) = stem.strip_prefix("client") else {
        return false;
    };
    let Some((c, tail)) = rest.split_once("_r") else {
        return false;
    };
    let Some((r, ext)) = tail.split_once('.') else {
        return false;
    };
    numbered(c) && numbered(r) && matches!(ext, "fedw" | "nk" | "done")
}

/// Server side of the directory transport.
#[derive(Debug)]
pub struct DirExchange {
    path: PathBuf,
    timeout: Duration,
    dtype: Dtype,
    local_epochs: u32,
}

impl DirExchange {
    /// Creates `path` if needed and removes protocol files left by earlier runs.
    /// Other files are left alone.
    pub fn create(path: &Path, cfg: &FederationConfig) -> Result<Self, FedError> {
        fs::create_dir_all(path).map_err(io_error(format!("creating {}", path.display())))?;
        let entries = fs::read_dir(path).map_err(io_error(format!("listing {}", path.display())))?;
        for entry in entries {
            let entry = entry.map_err(io_error(format!("listing {}", path.display())))?;
            let name = entry.file_name();
            if name.to_str().is_some_and(is_protocol_file) {
                fs::remove_file(entry.path()).map_err(io_error(format!("removing {}", entry.path().display())))?;
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            timeout: cfg.round_timeout,
            dtype: cfg.wire_dtype,
            local_epochs: cfg.local_epochs,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_update(&self, client_id: u32, round: u32) -> Result<ClientUpdate, FedError> {
        let blob_path = self.path.join(update_file(client_id, round));
        let bytes = fs::read(&blob_path).map_err(io_error(format!("reading {}", blob_path.display())))?;
        let params = decode_params(&bytes).map_err(|e| e.in_file(&blob_path))?;
        let nk_path = self.path.join(count_file(client_id, round));
        let text = fs::read_to_string(&nk_path).map_err(io_error(format!("reading {}", nk_path.display())))?;
        let n_k = text
            .trim()
            .parse()
            .map_err(|e| WireError::Malformed(format!("sample count {text:?}: {e}")).in_file(&nk_path))?;
        Ok(ClientUpdate {
            client_id,
            round,
            params,
            n_k,
            local_epochs_run: self.local_epochs,
        })
    }
}

impl Exchange for DirExchange {
    fn exchange(&mut self, round: u32, participants: &[u32], global: &ParamSet) -> Result<Vec<ClientUpdate>, FedError> {
        write_atomic(&self.path, &global_file(round - 1), &encode_params(global, self.dtype)?)?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let missing: Vec<u32> = participants
                .iter()
                .copied()
                .filter(|&c| !self.path.join(marker_file(c, round)).exists())
                .collect();
            if missing.is_empty() {
                break;
            }
            if Instant::now() >= deadline {
                return Err(FedError::RoundTimeout { round, missing });
            }
            thread::sleep(POLL);
        }
        debug!("round {round}: all {} markers present", participants.len());
        participants.iter().map(|&c| self.read_update(c, round)).collect()
    }

    fn finish(&mut self, rounds_done: u32, global: &ParamSet) -> Result<(), FedError> {
        write_atomic(&self.path, &global_file(rounds_done), &encode_params(global, self.dtype)?)
    }

    fn abort(&mut self, round: u32, reason: &str) {
        let _ = write_atomic(&self.path, ABORT_FILE, format!("round {round}: {reason}").as_bytes());
    }
}

/// Client loop: for every round this client is selected in, waits for the
/// previous global model, trains, and publishes the update.
pub fn run_client(path: &Path, node: &ClientNode) -> Result<(), FedError> {
    let cfg = node.config();
    for round in 1..=cfg.rounds {
        if !node.selected_in(round) {
            continue;
        }
        let global_path = path.join(global_file(round - 1));
        let deadline = Instant::now() + cfg.round_timeout;
        while !global_path.exists() {
            let abort = path.join(ABORT_FILE);
            if abort.exists() {
                let reason = fs::read_to_string(&abort).unwrap_or_default();
                return Err(FedError::Remote {
                    code: ErrorCode::Aborted as u16,
                    reason,
                });
            }
            if Instant::now() >= deadline {
                return Err(FedError::RoundTimeout {
                    round,
                    missing: Vec::new(),
                });
            }
            thread::sleep(POLL);
        }
        let bytes = fs::read(&global_path).map_err(io_error(format!("reading {}", global_path.display())))?;
        let broadcast = decode_params(&bytes).map_err(|e| e.in_file(&global_path))?;
        let update = node.handle_round(round, &broadcast)?;
        write_atomic(path, &update_file(node.id, round), &encode_params(&update.params, cfg.wire_dtype)?)?;
        write_atomic(path, &count_file(node.id, round), update.n_k.to_string().as_bytes())?;
        write_atomic(path, &marker_file(node.id, round), &[])?;
    }
    Ok(())
}
