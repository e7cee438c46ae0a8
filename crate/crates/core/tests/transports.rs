mod common;

use fedinspect::config::RunConfig;
use fedinspect::federation::{run_experiment, ExperimentOutcome, Transport};
use fedinspect::wire::{encode_params, Dtype};

fn outcome(transport: Transport) -> ExperimentOutcome {
    let rc = RunConfig::parse("clients = 3\nrounds = 4\nlocal_epochs = 1\nclient_fraction = 0.5\nseed = 11\nround_timeout_s = 60\n")
        .unwrap();
    let mut cfg = rc.federation();
    cfg.transport = transport;
    run_experiment(&cfg, &rc.data_spec().unwrap()).unwrap()
}

fn global_bytes(o: &ExperimentOutcome) -> Vec<u8> {
    encode_params(&o.final_global.params, Dtype::F64).unwrap()
}

#[test]
fn partial_selection_agrees_across_transports() {
    let sim = outcome(Transport::Sim);
    let participants: Vec<_> = sim.reports.iter().map(|r| r.participants.clone()).collect();
    assert!(participants.iter().all(|p| p.len() == 2));
    assert!(participants.windows(2).any(|w| w[0] != w[1]), "{participants:?}");

    let tmp = tempfile::tempdir().unwrap();
    let dir = outcome(Transport::Dir(tmp.path().to_path_buf()));
    let net = outcome(Transport::Net(format!("127.0.0.1:{}", common::free_port())));
    for other in [&dir, &net] {
        assert_eq!(other.reports, sim.reports);
        assert_eq!(global_bytes(other), global_bytes(&sim));
    }
}
