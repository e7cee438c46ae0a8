//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Lines go straight to the stderr handle so they show up even when the test
//! harness captures output.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use fedinspect::cli::{cmd_join, cmd_serve, cmd_simulate, CliError};
use fedinspect::data::{samples, Class, DataSpec, LabeledImage, Shard};
use fedinspect::federation::{
    local_train, run_experiment, Aggregation, FedError, Federation, FederationConfig, FederationMask, InitPolicy,
    MaskMode, SimExchange,
};
use fedinspect::metrics::{rounds_to_reach, RoundReport};
use fedinspect::nn::{evaluate, Architecture, Metrics, ParamSet, Tensor};
use fedinspect::rng::CounterRng;
use fedinspect::wire::{blob_len, decode_frame, decode_params, encode_frame, encode_params, Dtype, Message};

use common::{centralized_gd_step, free_port, gradient_check, snapshot, tree_difference};

const TREND_SEEDS: [u64; 3] = [1, 2, 3];
const THRESHOLD: f64 = 0.9;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2}: {} {name} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

fn fmt_rounds(r: Option<u32>, cap: u32) -> String {
    r.map_or_else(|| format!(">{cap}"), |r| r.to_string())
}

/// Rounds needed to reach the threshold, treating "never" as `cap + 1`.
fn reach(reports: &[RoundReport], cap: u32) -> (Option<u32>, u32) {
    let r = rounds_to_reach(reports, THRESHOLD);
    (r, r.unwrap_or(cap + 1))
}

#[test]
fn criterion_01_fedsgd_equals_centralized_gd() {
    let started = Instant::now();
    let arch = Architecture::inspection_cnn();
    let (full, _) = DataSpec::default_for(3, 11, 0.8).unwrap().build().unwrap();
    let mut worst = 0.0f64;
    for sizes in [&[40usize, 25, 15][..], &[40, 25][..]] {
        let shards: Vec<Shard> = full
            .iter()
            .zip(sizes)
            .map(|(s, &n)| Shard {
                client_id: s.client_id,
                train: s.train[..n].to_vec(),
                test: s.test[..5].to_vec(),
            })
            .collect();
        let pooled: Vec<LabeledImage> = shards.iter().flat_map(|s| s.train.clone()).collect();
        let cfg = FederationConfig {
            clients: sizes.len(),
            rounds: 1,
            aggregation: Aggregation::SampleWeighted,
            eval_each_round: false,
            wire_dtype: Dtype::F64,
            ..Default::default()
        }
        .into_fedsgd();
        let fed = Federation::new(cfg.clone(), shards, Vec::new()).unwrap();
        let mut exchange = SimExchange::new(fed.client_nodes(), Dtype::F64);
        let out = fed.run(&mut exchange, |_, _| Ok(())).unwrap();
        let expected = centralized_gd_step(&arch, &out.initial.params, &pooled, cfg.lr);
        worst = worst.max(out.final_global.params.max_abs_diff(&expected).unwrap());
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        "FedSGD round equals centralized full-batch GD step",
        worst <= 1e-10 && secs < 5.0,
        &format!("max |diff| {worst:.2e}, {secs:.2}s"),
    );
}

#[test]
fn criterion_02_gradient_check() {
    let started = Instant::now();
    let checks: Vec<_> = (0..20).map(|i| gradient_check(5000 + i, 40)).collect();
    let worst = checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    let coords: usize = checks.iter().map(|c| c.coordinates).sum();
    let narrowed: usize = checks.iter().map(|c| c.narrowed).sum();
    let secs = started.elapsed().as_secs_f64();
    verdict(
        2,
        "analytic gradients match central differences over 20 draws",
        worst < 1e-6 && secs < 30.0,
        &format!("max relative error {worst:.2e} over {coords} coordinates, {narrowed} near a kink, {secs:.2}s"),
    );
}

#[test]
fn criterion_03_common_init_converges_faster() {
    let started = Instant::now();
    let cap = 25;
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in TREND_SEEDS {
        let spec = DataSpec::default_for(3, seed, 0.8).unwrap();
        let rounds = |init| {
            let cfg = FederationConfig {
                rounds: cap,
                init,
                seed,
                ..Default::default()
            };
            reach(&run_experiment(&cfg, &spec).unwrap().reports, cap)
        };
        let (common, common_n) = rounds(InitPolicy::CommonSeed);
        let (independent, independent_n) = rounds(InitPolicy::Independent);
        if common_n < independent_n {
            wins += 1;
        }
        detail.push(format!(
            "seed {seed}: common {} vs independent {}",
            fmt_rounds(common, cap),
            fmt_rounds(independent, cap)
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    detail.push(format!("{secs:.0}s"));
    verdict(
        3,
        "common-seed init reaches 90% in fewer rounds (majority of 3 seeds)",
        wins >= 2 && secs < 600.0,
        &detail.join("; "),
    );
}

#[test]
fn criterion_04_local_epochs_reduce_rounds() {
    let started = Instant::now();
    let cap = 30;
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in TREND_SEEDS {
        let spec = DataSpec::default_for(3, seed, 0.8).unwrap();
        let fedavg = FederationConfig {
            rounds: cap,
            local_epochs: 5,
            seed,
            ..Default::default()
        };
        let fedsgd = fedavg.clone().into_fedsgd();
        let (e5, e5_n) = reach(&run_experiment(&fedavg, &spec).unwrap().reports, cap);
        let (e1, e1_n) = reach(&run_experiment(&fedsgd, &spec).unwrap().reports, cap);
        ok &= e5.is_some() && e5_n <= e1_n;
        detail.push(format!("seed {seed}: E=5 {} vs FedSGD {}", fmt_rounds(e5, cap), fmt_rounds(e1, cap)));
    }
    let secs = started.elapsed().as_secs_f64();
    detail.push(format!("{secs:.0}s"));
    verdict(
        4,
        "E=5 reaches 90% in no more rounds than FedSGD (3 seeds)",
        ok && secs < 600.0,
        &detail.join("; "),
    );
}

fn not_okay(shard: &Shard) -> Vec<LabeledImage> {
    shard.test.iter().filter(|s| s.label == Class::NotOkay).cloned().collect()
}

fn accuracy(arch: &Architecture, params: &ParamSet, data: &[LabeledImage]) -> f64 {
    evaluate(arch, params, samples(data)).unwrap().accuracy
}

#[test]
fn criterion_05_cross_client_generalization() {
    let started = Instant::now();
    let seed = 42;
    let arch = Architecture::inspection_cnn();
    let spec = DataSpec::default_for(3, seed, 0.8).unwrap();
    let (shards, _) = spec.build().unwrap();
    let cfg = FederationConfig {
        rounds: 20,
        seed,
        ..Default::default()
    };
    let global = run_experiment(&cfg, &spec).unwrap().final_global.params;

    let single_cfg = FederationConfig {
        clients: 1,
        rounds: 1,
        local_epochs: 30,
        seed,
        ..Default::default()
    };
    let mask = FederationMask::new(MaskMode::All, &arch);
    let mut ok = true;
    let mut detail = Vec::new();
    for owner in &shards {
        let single = local_train(&arch, &owner.train, &arch.init_params(seed), &single_cfg, &mask, owner.client_id, 1)
            .unwrap()
            .local_params;
        for foreign in shards.iter().filter(|s| s.client_id != owner.client_id) {
            let subset = not_okay(foreign);
            let g = accuracy(&arch, &global, &subset);
            let s = accuracy(&arch, &single, &subset);
            ok &= g > s;
            detail.push(format!(
                "c{} defects: global {g:.3} vs c{}-only {s:.3}",
                foreign.client_id, owner.client_id
            ));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    detail.push(format!("{secs:.0}s"));
    verdict(
        5,
        "global model beats every single-client model on foreign NOT_OKAY subsets",
        ok && secs < 600.0,
        &detail.join("; "),
    );
}

#[test]
fn criterion_06_classifier_only_freeze() {
    let cfg = FederationConfig {
        rounds: 15,
        mask: MaskMode::ClassifierOnly,
        eval_each_round: false,
        ..Default::default()
    };
    let spec = DataSpec::default_for(3, 42, 0.8).unwrap();
    let fed = Federation::from_spec(cfg, &spec).unwrap();
    let mut exchange = SimExchange::new(fed.client_nodes(), Dtype::F32);
    let mut every_round = true;
    let out = fed
        .run(&mut exchange, |g, _| {
            every_round &= g.frozen_intact();
            Ok(())
        })
        .unwrap();
    let arch = fed.arch();
    let features = fed.mask().frozen_names();
    let r0 = out.initial.params.select(features.iter().map(String::as_str)).unwrap();
    let r15 = out.final_global.params.select(features.iter().map(String::as_str)).unwrap();
    let bytes_equal = encode_params(&r0, Dtype::F64).unwrap() == encode_params(&r15, Dtype::F64).unwrap();
    let head_changed = !out.final_global.params.bit_eq(&out.initial.params);

    let full = arch.init_params(1);
    let masked = out.final_global.broadcast(fed.mask()).unwrap();
    let sizes: Vec<(usize, usize)> = [Dtype::F32, Dtype::F64]
        .into_iter()
        .map(|d| (blob_len(&masked, d), blob_len(&full, d)))
        .collect();
    let smaller = sizes.iter().all(|(m, f)| m < f);
    verdict(
        6,
        "classifier-only run keeps feature layers frozen; masked blob is smaller",
        every_round && bytes_equal && head_changed && smaller && out.final_global.round == 15,
        &format!(
            "frozen every round {every_round}, round 15 bytes equal {bytes_equal}, blob F32 {} < {} bytes",
            sizes[0].0, sizes[0].1
        ),
    );
}

fn write_config(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

fn join_with_retry(config: &Path, client_id: u32) -> Result<(), CliError> {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        match cmd_join(config, client_id) {
            Err(CliError::Federation(FedError::Connect { .. })) if Instant::now() < deadline => {
                thread::sleep(Duration::from_millis(20))
            }
            other => return other,
        }
    }
}

#[test]
fn criterion_07_transport_equivalence() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let base = "rounds = 4\nlocal_epochs = 2\nseed = 7\nround_timeout_s = 60\n";
    let root = tmp.path();

    let sim_cfg = root.join("sim.cfg");
    write_config(&sim_cfg, &format!("{base}transport = sim\nout_dir = {}\n", root.join("sim").display()));
    cmd_simulate(&sim_cfg).unwrap();

    let dir_cfg = root.join("dir.cfg");
    write_config(
        &dir_cfg,
        &format!(
            "{base}transport = dir\ndir_path = {}\nout_dir = {}\n",
            root.join("shared").display(),
            root.join("dir").display()
        ),
    );
    cmd_simulate(&dir_cfg).unwrap();

    let net_cfg = root.join("net.cfg");
    write_config(
        &net_cfg,
        &format!(
            "{base}transport = net\nnet_address = 127.0.0.1:{}\nout_dir = {}\n",
            free_port(),
            root.join("net").display()
        ),
    );
    thread::scope(|s| {
        let server = s.spawn(|| cmd_serve(&net_cfg).map(|_| ()));
        let clients: Vec<_> = (1..=3).map(|id| s.spawn({
            let net_cfg = &net_cfg;
            move || join_with_retry(net_cfg, id)
        })).collect();
        for c in clients {
            c.join().unwrap().unwrap();
        }
        server.join().unwrap().unwrap();
    });

    let sim = snapshot(&root.join("sim"));
    let dir = snapshot(&root.join("dir"));
    let net = snapshot(&root.join("net"));
    let diff = tree_difference(&sim, &dir).or_else(|| tree_difference(&sim, &net));
    let secs = started.elapsed().as_secs_f64();
    verdict(
        7,
        "SIM, DIR and NET runs write byte-identical outputs",
        diff.is_none() && sim.contains_key("checkpoints/global_r4.fedw") && secs < 300.0,
        &format!("{} files compared, {secs:.1}s{}", sim.len(), diff.map(|d| format!(", {d}")).unwrap_or_default()),
    );
}

fn random_params(rng: &mut CounterRng) -> ParamSet {
    let n = rng.below(6) as usize;
    let specials = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY, -0.0, f64::MIN_POSITIVE / 4.0, f64::MAX];
    let entries = (0..n)
        .map(|i| {
            let len = 1 + rng.below(20) as usize;
            let name: String = (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect();
            let dims: Vec<usize> = (0..1 + rng.below(4)).map(|_| 1 + rng.below(5) as usize).collect();
            let count = dims.iter().product();
            let data = (0..count)
                .map(|_| match rng.below(10) {
                    0 => specials[rng.below(specials.len() as u64) as usize],
                    1 => f64::from_bits(rng.next_u64()),
                    _ => rng.normal() * 10.0,
                })
                .collect();
            (format!("{name}.{i}"), Tensor::new(dims, data).unwrap())
        })
        .collect();
    ParamSet::new(entries).unwrap()
}

fn mutate(rng: &mut CounterRng, valid: &[u8]) -> Vec<u8> {
    let mut b = valid.to_vec();
    match rng.below(5) {
        0 => b.truncate(rng.below(b.len() as u64) as usize),
        1 => {
            let i = rng.below(b.len() as u64) as usize;
            b[i] ^= 1 + rng.below(255) as u8;
        }
        2 => {
            let i = rng.below(b.len() as u64 + 1) as usize;
            b.insert(i, rng.below(256) as u8);
        }
        3 => b.extend((0..1 + rng.below(8)).map(|_| rng.below(256) as u8)),
        _ => b = (0..rng.below(64)).map(|_| rng.below(256) as u8).collect(),
    }
    b
}

#[test]
fn criterion_08_codec_round_trip_and_fuzz() {
    let mut rng = CounterRng::new(0xC0DEC);
    let mut round_trips = 0;
    for _ in 0..1000 {
        let p = random_params(&mut rng);
        let blob = encode_params(&p, Dtype::F64).unwrap();
        if blob.len() == blob_len(&p, Dtype::F64) && decode_params(&blob).unwrap().bit_eq(&p) {
            round_trips += 1;
        }
    }

    // A blob must decode only when intact. A frame decoder reads one frame off
    // the front of a stream, so a mutated buffer may only decode to the
    // original message, consuming exactly the original frame bytes; that
    // happens when the mutation merely appended data.
    let mut typed = 0;
    let mut accepted = 0;
    let mut panics = 0;
    let cases = 5000;
    for i in 0..cases {
        let p = random_params(&mut rng);
        let dtype = if i % 2 == 0 { Dtype::F32 } else { Dtype::F64 };
        let blob = encode_params(&p, dtype).unwrap();
        let msg = Message::update(3, 1, 10, &blob);
        let frame = encode_frame(&msg).unwrap();
        let bad_blob = mutate(&mut rng, &blob);
        let bad_frame = mutate(&mut rng, &frame);
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let blob_rejected = decode_params(&bad_blob).is_err();
            let frame_ok = match decode_frame(&bad_frame) {
                Err(_) => true,
                Ok((m, used)) => m == msg && bad_frame[..used] == frame[..],
            };
            (blob_rejected, frame_ok)
        }));
        match outcome {
            Ok((a, b)) => {
                typed += a as usize + b as usize;
                accepted += !a as usize + !b as usize;
            }
            Err(_) => panics += 1,
        }
    }
    verdict(
        8,
        "codec round-trips bit-exactly and rejects malformed input",
        round_trips == 1000 && panics == 0 && accepted == 0,
        &format!("{round_trips}/1000 round-trips, {typed}/{} fuzz cases handled, {accepted} wrongly accepted, {panics} panics", 2 * cases),
    );
}

#[test]
fn criterion_09_confusion_fixture_accuracy() {
    let confusion = [[2850, 0, 1, 0], [0, 0, 0, 0], [2, 0, 218, 0], [0, 0, 0, 0]];
    let m = Metrics::from_confusion(confusion, 0.0);
    verdict(
        9,
        "confusion fixture accuracy is 0.99902",
        (m.accuracy - 0.99902).abs() <= 1e-5 && m.total() == 3071,
        &format!("accuracy {:.6} over {} samples", m.accuracy, m.total()),
    );
}

#[test]
fn criterion_10_simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let body = "rounds = 5\nmask = classifier\nseed = 3\n";
    let cfg_a = root.join("a.cfg");
    let cfg_b = root.join("b.cfg");
    write_config(&cfg_a, &format!("{body}out_dir = {}\n", root.join("a").display()));
    write_config(&cfg_b, &format!("{body}out_dir = {}\n", root.join("b").display()));
    cmd_simulate(&cfg_a).unwrap();
    let first = snapshot(&root.join("a"));
    cmd_simulate(&cfg_b).unwrap();
    cmd_simulate(&cfg_a).unwrap();
    let diff = tree_difference(&first, &snapshot(&root.join("b")))
        .or_else(|| tree_difference(&first, &snapshot(&root.join("a"))));
    verdict(
        10,
        "repeated simulate runs give byte-identical output trees",
        diff.is_none() && !first.is_empty(),
        &format!("{} files{}", first.len(), diff.map(|d| format!(", {d}")).unwrap_or_default()),
    );
}
