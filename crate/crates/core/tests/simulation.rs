use rayon::prelude::*;

use tqs_core::analysis::{check_atomicity, estimate_intersection, three_sigma};
use tqs_core::membership::MembershipMode;
use tqs_core::quorum::{self, SystemParams};
use tqs_core::sim::{run, DelayModel, ExperimentConfig, Workload};
use tqs_core::trace::{read_ops, read_snapshots, write_ops, write_snapshots};

fn cyclon_config(seed: u64) -> ExperimentConfig {
    let params = SystemParams { n: 256, c: 0.004, delta: 20.0, beta: 1.5, k: 3 };
    let mut cfg = ExperimentConfig::new(params, 300.0);
    cfg.message_delay = DelayModel::Exponential { mean: 1.0 };
    cfg.membership.mode = MembershipMode::Cyclon;
    cfg.workload = Workload::Periodic { write_period: 8.0, read_rate: 0.3 };
    cfg.seed = seed;
    cfg
}

#[test]
fn csv_round_trip_of_a_real_run() {
    let bundle = run(&cyclon_config(1)).unwrap();
    assert!(!bundle.ops.is_empty());

    let mut buf = Vec::new();
    write_ops(&bundle.ops, &mut buf).unwrap();
    let back = read_ops(buf.as_slice()).unwrap();
    assert_eq!(back, bundle.ops);

    let mut buf = Vec::new();
    write_snapshots(&bundle.snapshots, &mut buf).unwrap();
    assert_eq!(read_snapshots(buf.as_slice()).unwrap(), bundle.snapshots);

    // The checker sees the same thing from disk as from memory.
    assert_eq!(check_atomicity(&back).unwrap(), check_atomicity(&bundle.ops).unwrap());
}

#[test]
fn cyclon_runs_are_deterministic_and_collision_free() {
    let digests: Vec<String> = [7u64, 7, 8].par_iter().map(|s| run(&cyclon_config(*s)).unwrap().digest()).collect();
    assert_eq!(digests[0], digests[1]);
    assert_ne!(digests[0], digests[2]);
    for seed in 0..4 {
        let r = check_atomicity(&run(&cyclon_config(seed)).unwrap().ops).unwrap();
        assert_eq!(r.write_tag_collisions, 0);
    }
}

/// With churn and no writes, the holders of the initial value decay to about
/// q(1-c)^Δ after Δ time units.
#[test]
fn holders_decay_to_the_floor() {
    let params = SystemParams { n: 1000, c: 0.01, delta: 20.0, beta: 1.0, k: 2 };
    let q = quorum::quorum_size(&params).unwrap();
    let floor = quorum::min_uptodate_replicas(q as f64, params.c, params.delta);
    let seeds = 200;
    let counts: Vec<u64> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let mut cfg = ExperimentConfig::new(params, params.delta);
            cfg.stop_when_quiescent = false;
            cfg.seed = s;
            let t = run(&cfg).unwrap();
            t.snapshots.iter().find(|snap| snap.t == params.delta).unwrap().uptodate_count
        })
        .collect();
    let mean = counts.iter().sum::<u64>() as f64 / seeds as f64;
    // Each holder survives independently with probability (1-c)^Δ, near enough.
    let p = floor / q as f64;
    let sigma_mean = (q as f64 * p * (1.0 - p)).sqrt() / (seeds as f64).sqrt();
    assert!((mean - floor).abs() <= 3.0 * sigma_mean, "mean {mean}, floor {floor}, σ {sigma_mean}");
}

#[test]
fn full_quorums_always_intersect() {
    let params = SystemParams { n: 24, c: 0.0, delta: 10.0, beta: 24f64.sqrt(), k: 2 };
    assert_eq!(quorum::quorum_size(&params).unwrap(), 24);
    let mut cfg = ExperimentConfig::new(params, 3_000.0);
    cfg.workload = Workload::Random { ops: 30, write_fraction: 0.5, spread: 50.0 };
    cfg.seed = 3;
    let t = run(&cfg).unwrap();
    let e = estimate_intersection(&t.ops, params.delta);
    assert!(e.pairs > 0);
    assert_eq!(e.fraction, 1.0);
    let r = check_atomicity(&t.ops).unwrap();
    assert_eq!((r.violations_ordering, r.violations_return), (0, 0));
}

#[test]
fn three_sigma_matches_binomial() {
    assert!((three_sigma(0.5, 100) - 0.15).abs() < 1e-12);
    assert!(three_sigma(0.1, 0).is_infinite());
}
