use mixfed::config::{ChurnAction, ChurnStep, ScenarioConfig};
use mixfed::experiments::run_learning;
use mixfed::sim::{SimOptions, Simulation};
use mixfed_core::metrics::digest;
use mixfed_core::node::{NodeEvent, Trigger};
use mixfed_core::{Nanos, NodeId};

fn cfg(overrides: &[&str]) -> ScenarioConfig {
    ScenarioConfig::default().with_overrides(overrides).unwrap()
}

#[test]
fn seeded_runs_are_identical() {
    let c = cfg(&["learn.rounds=3"]);
    let a = run_learning(&c).unwrap();
    let b = run_learning(&c).unwrap();
    assert!(a.finished);
    assert_eq!(a.rounds, b.rounds);
    assert_eq!(a.log.events(), b.log.events());
    assert_eq!(a.rtts, b.rtts);

    let other = run_learning(&cfg(&["learn.rounds=3", "transport.seed=43"])).unwrap();
    assert_ne!(a.log.events(), other.log.events());
}

#[test]
fn wire_traffic_is_uniform() {
    let run = run_learning(&cfg(&["learn.rounds=2"])).unwrap();
    assert!(run.log.uniform_length(1024));
    assert!(run.log.per_link_monotone());
    // Every node sends at the same constant rate, learning or not.
    let secs = run.sim_time.as_secs_f64();
    for n in 0..6 {
        let rate = run.log.bytes_from(NodeId(n)) as f64 / secs;
        assert!((rate - 1024.0 / 0.005).abs() / (1024.0 / 0.005) < 0.1, "node {n}: {rate}");
    }
}

#[test]
fn a_payload_is_delivered_and_acknowledged() {
    let mut sim = Simulation::new(&cfg(&[]), SimOptions::default()).unwrap();
    sim.run_until(Nanos::from_millis(200));
    let body = b"hello through the mix".to_vec();
    sim.send_payload(NodeId(0), NodeId(3), body.clone(), 7).unwrap();
    let mut delivered = None;
    let mut acked = None;
    sim.run_while(Nanos::from_secs(10), |s| {
        for e in s.take_events() {
            match e.event {
                NodeEvent::Delivered { digest: d, .. } if e.node == NodeId(3) => delivered = Some(d),
                NodeEvent::Acked { rtt, tag: 7 } if e.node == NodeId(0) => acked = Some(rtt),
                _ => {}
            }
        }
        acked.is_some()
    });
    assert_eq!(delivered, Some(digest(&body)));
    let rtt = acked.expect("ack arrives").as_secs_f64();
    // At least two link latencies; well under the retry timeout.
    assert!(rtt > 0.01 && rtt < 2.0, "{rtt}");
}

#[test]
fn lossy_links_are_recovered_by_retransmission() {
    let c = cfg(&["learn.rounds=3", "transport.loss=0.02", "overlay.retry_timeout_s=2"]);
    let mut sim = Simulation::new(&c, SimOptions { learn: true, ..SimOptions::default() }).unwrap();
    assert!(sim.run_learning());
    let retrans: u64 = sim.statuses().iter().map(|(s, _)| s.router.retransmissions).sum();
    assert!(retrans > 0);
}

#[test]
fn every_round_completes_with_full_coverage_by_default() {
    let run = run_learning(&cfg(&["learn.rounds=3"])).unwrap();
    assert_eq!(run.rounds.len(), 18);
    for r in &run.rounds {
        assert_eq!(r.trigger, Trigger::Complete);
        assert_eq!(r.coverage.covered_fraction, 1.0);
        assert_eq!(r.expected_peers, 5);
    }
    // Full coverage means every node ends the round with the same model.
    for s in run.summaries() {
        assert_eq!(s.aggregated_variance, 0.0);
    }
}

#[test]
fn killed_node_is_detected_and_learning_continues() {
    let mut c = cfg(&["learn.rounds=6"]);
    c.churn = vec![ChurnStep {
        at_round: 3,
        action: ChurnAction::Kill,
        node_id: Some(5),
    }];
    let run = run_learning(&c).unwrap();
    assert!(run.finished);
    let departures: Vec<_> = run
        .events
        .iter()
        .filter_map(|e| match &e.event {
            NodeEvent::Departed(d) => Some((e.node, e.t, d.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(departures.len(), 5, "every survivor notices");
    assert!(departures.iter().all(|(_, _, d)| d == &vec![NodeId(5)]));
    let last = run.rounds.iter().filter(|r| r.epoch == 5).collect::<Vec<_>>();
    assert_eq!(last.len(), 5);
    assert!(last.iter().all(|r| r.expected_peers == 4 && r.node != NodeId(5)));
}

#[test]
fn joining_node_is_announced_and_trains() {
    let mut c = cfg(&["learn.rounds=6", "learn.partition_slots=7"]);
    c.churn = vec![ChurnStep {
        at_round: 3,
        action: ChurnAction::Add,
        node_id: None,
    }];
    let run = run_learning(&c).unwrap();
    assert!(run.finished);
    let joins = run
        .events
        .iter()
        .filter(|e| matches!(e.event, NodeEvent::Joined(NodeId(6))))
        .count();
    assert_eq!(joins, 6);
    let joiner: Vec<_> = run.rounds.iter().filter(|r| r.node == NodeId(6)).collect();
    assert!(!joiner.is_empty());
    assert!(joiner.iter().all(|r| r.epoch >= 3));
}

#[test]
fn redeploy_applies_only_newer_versions() {
    let c = cfg(&[]);
    let mut sim = Simulation::new(&c, SimOptions::default()).unwrap();
    sim.run_until(Nanos::from_secs(2));
    let mut next = c.with_overrides(&["mix.mu_s=0.01", "version=2"]).unwrap().node_config();
    assert_eq!(sim.redeploy(next), 6);
    let before: Vec<u64> = sim.statuses().iter().map(|(s, _)| s.mixer.emitted).collect();
    sim.run_until(Nanos::from_secs(12));
    let after: Vec<u64> = sim.statuses().iter().map(|(s, _)| s.mixer.emitted).collect();
    for (a, b) in after.iter().zip(&before) {
        let rate = (a - b) as f64 / 10.0;
        assert!((rate - 100.0).abs() < 5.0, "{rate}");
    }
    // Replaying an older or equal version is ignored.
    next.version = 2;
    assert_eq!(sim.redeploy(next), 0);
    assert!(sim.statuses().iter().all(|(s, _)| s.config_version == 2));
}
