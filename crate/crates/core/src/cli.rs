//! Subcommands of the `fedinspect` executable.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, TransportKind};
use crate::federation::{
    run_experiment_with, ExperimentOutcome, FedError, Federation, GlobalModel, MaskMode,
};
use crate::metrics::{
    checkpoint, checkpoint_path, confusion_file, emit_csv, external_confusion_file, fmt6, read_confusion,
    read_external_csv, read_rounds_csv, MetricsError, RoundReport, Summary, CHECKPOINT_DIR, EXTERNAL_CSV,
    INIT_CHECKPOINT, ROUNDS_CSV, SUMMARY_FILE,
};
use crate::nn::{Architecture, ParamGroup, NUM_CLASSES};
use crate::wire::{decode_params, encode_params, net, Dtype};

#[derive(Debug, Parser)]
#[command(name = "fedinspect", version, about = "Federated training of a small inspection CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a whole federation in this process (transport sim or dir).
    Simulate { config: PathBuf },
    /// Run the server of a networked federation (transport net).
    Serve { config: PathBuf },
    /// Join a networked federation as one client.
    Join { config: PathBuf, client_id: u32 },
    /// Print and check the results of a finished run.
    Report { out_dir: PathBuf },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Federation(#[from] FedError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report found {0} inconsistencies")]
    Inconsistent(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config } => cmd_simulate(&config).map(|_| ()),
        Command::Serve { config } => cmd_serve(&config).map(|_| ()),
        Command::Join { config, client_id } => cmd_join(&config, client_id),
        Command::Report { out_dir } => cmd_report(&out_dir, out),
    }
}

fn load_for(path: &Path, allowed: &[TransportKind], command: &str) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(path)?;
    if !allowed.contains(&cfg.transport) {
        let names: Vec<_> = allowed.iter().map(|t| t.name()).collect();
        return Err(ConfigError::Invalid(format!(
            "`{command}` needs transport {}, config has {}",
            names.join(" or "),
            cfg.transport.name()
        ))
        .into());
    }
    Ok(cfg)
}

pub fn cmd_simulate(config: &Path) -> Result<ExperimentOutcome, CliError> {
    let cfg = load_for(config, &[TransportKind::Sim, TransportKind::Dir], "simulate")?;
    let spec = cfg.data_spec()?;
    record_run(&cfg, |on_round| Ok(run_experiment_with(&cfg.federation(), &spec, on_round)?))
}

pub fn cmd_serve(config: &Path) -> Result<ExperimentOutcome, CliError> {
    let cfg = load_for(config, &[TransportKind::Net], "serve")?;
    let fed_cfg = cfg.federation();
    let fed = Federation::from_spec(fed_cfg.clone(), &cfg.data_spec()?)?;
    let server = net::NetServer::bind(&cfg.net_address)?;
    info!("listening on {}", server.local_addr()?);
    record_run(&cfg, |on_round| {
        let mut exchange = server.accept_clients(&fed_cfg)?;
        Ok(fed.run(&mut exchange, on_round)?)
    })
}

pub fn cmd_join(config: &Path, client_id: u32) -> Result<(), CliError> {
    let cfg = load_for(config, &[TransportKind::Net], "join")?;
    if !(1..=cfg.clients as u32).contains(&client_id) {
        return Err(ConfigError::Invalid(format!("client id must be in 1..={}, got {client_id}", cfg.clients)).into());
    }
    let fed = Federation::from_spec(cfg.federation(), &cfg.data_spec()?)?;
    let node = fed.client_node(client_id).expect("id checked above");
    net::join(&cfg.net_address, &node)?;
    Ok(())
}

fn is_owned_output(name: &str) -> bool {
    [ROUNDS_CSV, EXTERNAL_CSV, SUMMARY_FILE, INIT_CHECKPOINT].contains(&name)
        || (name.starts_with("confusion_r") && name.ends_with(".csv"))
}

/// Removes files a previous run left in `out_dir`, so a re-run yields the same tree.
fn prepare_out_dir(out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for entry in fs::read_dir(out_dir).map_err(io_err(out_dir))? {
        let entry = entry.map_err(io_err(out_dir))?;
        if entry.file_name().to_str().is_some_and(is_owned_output) {
            fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
        }
    }
    let checkpoints = out_dir.join(CHECKPOINT_DIR);
    if checkpoints.exists() {
        fs::remove_dir_all(&checkpoints).map_err(io_err(&checkpoints))?;
    }
    Ok(())
}

type OnRound<'a> = &'a mut dyn FnMut(&GlobalModel, &RoundReport) -> Result<(), FedError>;

/// Runs `run` while writing checkpoints, then writes CSVs and the summary.
fn record_run<F>(cfg: &RunConfig, run: F) -> Result<ExperimentOutcome, CliError>
where
    F: FnOnce(OnRound<'_>) -> Result<ExperimentOutcome, CliError>,
{
    let out_dir = &cfg.out_dir;
    prepare_out_dir(out_dir)?;
    let arch = Architecture::inspection_cnn();
    let init = arch.init_params(cfg.seed);
    let init_path = out_dir.join(INIT_CHECKPOINT);
    fs::write(&init_path, encode_params(&init, Dtype::F64).map_err(FedError::from)?).map_err(io_err(&init_path))?;

    let checkpoints = out_dir.join(CHECKPOINT_DIR);
    let mut on_round = |g: &GlobalModel, _: &RoundReport| -> Result<(), FedError> {
        checkpoint(g, &checkpoints).map_err(|e| FedError::Io {
            context: "writing checkpoint".into(),
            source: std::io::Error::other(e.to_string()),
        })?;
        Ok(())
    };
    let outcome = run(&mut on_round)?;
    emit_csv(&outcome.reports, out_dir)?;
    summary(cfg, &outcome).write(out_dir)?;
    Ok(outcome)
}

fn summary(cfg: &RunConfig, outcome: &ExperimentOutcome) -> Summary {
    let mut s = Summary::new();
    s.push("clients", cfg.clients);
    s.push("rounds", outcome.reports.len());
    s.push("local_epochs", cfg.local_epochs);
    s.push("batch_size", cfg.batch_size.name());
    s.push("lr", cfg.lr);
    s.push("algorithm", cfg.algorithm.name());
    s.push("aggregation", cfg.aggregation.name());
    s.push("mask", cfg.mask.name());
    s.push("init", cfg.init.name());
    s.push("seed", cfg.seed);
    s.push("client_fraction", cfg.client_fraction);
    s.push("split_ratio", cfg.split_ratio);
    let na = || "n/a".to_string();
    s.push("best_round", outcome.best_round.map_or_else(na, |r| r.to_string()));
    s.push("best_mean_test_accuracy", outcome.best_mean_accuracy.map_or_else(na, fmt6));
    let last = outcome.reports.last();
    s.push(
        "final_mean_test_accuracy",
        last.and_then(RoundReport::mean_test_accuracy).map_or_else(na, fmt6),
    );
    s.push(
        "final_external_accuracy",
        last.and_then(|r| r.external.as_ref()).map_or_else(na, |m| fmt6(m.accuracy)),
    );
    if cfg.mask == MaskMode::ClassifierOnly {
        s.push("frozen_features_intact", outcome.final_global.frozen_intact());
    }
    s
}

fn trace(m: &[[u64; NUM_CLASSES]; NUM_CLASSES]) -> u64 {
    (0..NUM_CLASSES).map(|i| m[i][i]).sum()
}

fn total(m: &[[u64; NUM_CLASSES]; NUM_CLASSES]) -> u64 {
    m.iter().flatten().sum()
}

/// Checks one confusion file against a reported accuracy; returns its total.
fn check_confusion(path: &Path, accuracy: f64, issues: &mut Vec<String>) -> Option<u64> {
    let m = match read_confusion(path) {
        Ok(m) => m,
        Err(e) => {
            issues.push(e.to_string());
            return None;
        }
    };
    let n = total(&m);
    if n == 0 {
        issues.push(format!("{}: empty confusion matrix", path.display()));
        return None;
    }
    let expected = fmt6(trace(&m) as f64 / n as f64);
    if expected != fmt6(accuracy) {
        issues.push(format!(
            "{}: accuracy {} does not match confusion trace/total {expected}",
            path.display(),
            fmt6(accuracy)
        ));
    }
    Some(n)
}

fn check_total(seen: &mut BTreeMap<String, u64>, key: String, n: u64, round: u32, issues: &mut Vec<String>) {
    match seen.get(&key) {
        Some(&first) if first != n => {
            issues.push(format!("round {round}: {key} confusion total {n} differs from {first}"))
        }
        Some(_) => {}
        None => {
            seen.insert(key, n);
        }
    }
}

/// Prints a per-round table and checks the run directory for consistency.
pub fn cmd_report(out_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let summary = Summary::read(out_dir)?;
    let rows = read_rounds_csv(&out_dir.join(ROUNDS_CSV))?;
    let external = read_external_csv(&out_dir.join(EXTERNAL_CSV))?;
    let mut issues = Vec::new();

    // round -> client -> test accuracy
    let mut test: BTreeMap<u32, BTreeMap<u32, f64>> = BTreeMap::new();
    let mut train_seen: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for row in &rows {
        if !(0.0..=1.0).contains(&row.accuracy) {
            issues.push(format!("round {} client {}: accuracy {} out of range", row.round, row.client_id, row.accuracy));
        }
        let dup = match row.split.as_str() {
            "test" => test.entry(row.round).or_default().insert(row.client_id, row.accuracy).is_some(),
            "train" => train_seen.insert((row.round, row.client_id), row.accuracy).is_some(),
            other => {
                issues.push(format!("round {}: unknown split {other:?}", row.round));
                false
            }
        };
        if dup {
            issues.push(format!("round {} client {}: duplicate {} row", row.round, row.client_id, row.split));
        }
    }

    let mut totals = BTreeMap::new();
    for (&round, clients) in &test {
        for (&client, &acc) in clients {
            if !train_seen.contains_key(&(round, client)) {
                issues.push(format!("round {round} client {client}: train row missing"));
            }
            let path = out_dir.join(confusion_file(round, client));
            if let Some(n) = check_confusion(&path, acc, &mut issues) {
                check_total(&mut totals, format!("client {client}"), n, round, &mut issues);
            }
        }
    }
    let external: BTreeMap<u32, f64> = external.into_iter().map(|(r, _, acc)| (r, acc)).collect();
    for (&round, &acc) in &external {
        let path = out_dir.join(external_confusion_file(round));
        if let Some(n) = check_confusion(&path, acc, &mut issues) {
            check_total(&mut totals, "external".into(), n, round, &mut issues);
        }
    }

    let rounds: Vec<u32> = test.keys().copied().collect();
    if rounds != (1..=rounds.len() as u32).collect::<Vec<_>>() {
        issues.push(format!("rounds are not consecutive from 1: {rounds:?}"));
    }
    if summary.get("rounds") != Some(rounds.len().to_string().as_str()) {
        issues.push(format!(
            "summary lists {:?} rounds, CSV has {}",
            summary.get("rounds").unwrap_or("none"),
            rounds.len()
        ));
    }
    let checkpoints = out_dir.join(CHECKPOINT_DIR);
    for &round in &rounds {
        if !checkpoint_path(&checkpoints, round).exists() {
            issues.push(format!("checkpoint for round {round} missing"));
        }
    }

    let client_ids: Vec<u32> = {
        let mut ids: Vec<u32> = test.values().flat_map(|c| c.keys().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let write = |out: &mut dyn Write, line: String| -> Result<(), CliError> {
        writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))
    };
    let mut header = format!("{:>5}", "round");
    for id in &client_ids {
        header.push_str(&format!("  {:>9}", format!("c{id}_test")));
    }
    header.push_str(&format!("  {:>9}  {:>9}", "mean_test", "external"));
    write(out, header)?;
    let mut best: Option<(u32, f64)> = None;
    for (&round, clients) in &test {
        let mut line = format!("{round:>5}");
        for id in &client_ids {
            match clients.get(id) {
                Some(acc) => line.push_str(&format!("  {:>9}", fmt6(*acc))),
                None => line.push_str(&format!("  {:>9}", "-")),
            }
        }
        let mean = clients.values().sum::<f64>() / clients.len() as f64;
        if best.map_or(true, |(_, b)| mean > b) {
            best = Some((round, mean));
        }
        let ext = external.get(&round).map_or_else(|| "-".to_string(), |a| fmt6(*a));
        line.push_str(&format!("  {:>9}  {:>9}", fmt6(mean), ext));
        write(out, line)?;
    }
    match best {
        Some((round, mean)) => write(out, format!("best round: {round} (mean test accuracy {})", fmt6(mean)))?,
        None => write(out, "best round: none".into())?,
    }

    if summary.get("mask") == Some(MaskMode::ClassifierOnly.name()) {
        let intact = frozen_check(out_dir, &rounds, &mut issues);
        write(
            out,
            format!("frozen feature layers: {}", if intact { "intact" } else { "CHANGED" }),
        )?;
    }

    if issues.is_empty() {
        write(out, "consistency: ok".into())?;
        Ok(())
    } else {
        for issue in &issues {
            write(out, format!("inconsistent: {issue}"))?;
        }
        Err(CliError::Inconsistent(issues.len()))
    }
}

/// Compares feature-group entries of every checkpoint with the initial model.
fn frozen_check(out_dir: &Path, rounds: &[u32], issues: &mut Vec<String>) -> bool {
    let arch = Architecture::inspection_cnn();
    let names = arch.group_names(ParamGroup::Feature);
    let load = |path: PathBuf| -> Result<_, String> {
        let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        decode_params(&bytes).map_err(|e| e.in_file(&path).to_string())
    };
    let init = match load(out_dir.join(INIT_CHECKPOINT)) {
        Ok(p) => p,
        Err(e) => {
            issues.push(e);
            return false;
        }
    };
    let mut intact = true;
    for &round in rounds {
        let params = match load(checkpoint_path(&out_dir.join(CHECKPOINT_DIR), round)) {
            Ok(p) => p,
            Err(e) => {
                issues.push(e);
                intact = false;
                continue;
            }
        };
        for name in &names {
            let same = matches!((params.get(name), init.get(name)), (Some(a), Some(b)) if a.bit_eq(b));
            if !same {
                issues.push(format!("round {round}: frozen entry {name} changed"));
                intact = false;
            }
        }
    }
    intact
}
