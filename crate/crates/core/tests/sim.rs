use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use trafspread::channel::{discretize, ChannelConfig, ChannelModel};
use trafspread::parallel::Execution;
use trafspread::sim::*;

fn quick(mut c: ScenarioConfig, batch_slots: u64, batches: usize) -> ScenarioConfig {
    c.stopping.batch_slots = batch_slots;
    c.stopping.min_batches = batches;
    c.stopping.max_batches = batches;
    c
}

/// Event-driven FIFO queue on one slotted channel: each file starts in the
/// first slot after both its request and its predecessor's last slot, and
/// drains an i.i.d. rate draw per slot.
fn lindley_delays(model: &ChannelModel, lambda: f64, file_bits: f64, slot_s: f64, files: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf: Vec<f64> = model
        .states()
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.probability;
            Some(*acc)
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        let k = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        model.rate(k)
    };
    let mut t = 0.0;
    let mut free_slot = 0u64;
    let mut out = Vec::with_capacity(files);
    for _ in 0..files {
        t += rng.sample::<f64, _>(Exp1) / lambda;
        let mut remaining = rng.sample::<f64, _>(Exp1) * file_bits;
        let mut slot = free_slot.max((t / slot_s).floor() as u64 + 1);
        loop {
            let r = draw(&mut rng);
            let cap = r * slot_s;
            if r > 0.0 && remaining <= cap {
                out.push(slot as f64 * slot_s + remaining / r - t);
                free_slot = slot + 1;
                break;
            }
            remaining -= cap;
            slot += 1;
        }
    }
    out
}

#[test]
fn single_user_matches_event_driven_queue() {
    let lambda = 0.2;
    let mut c = ScenarioConfig::homogeneous(1, 100.0, lambda);
    c.stopping.relative_half_width = 0.02;
    let sim = run(&c).unwrap();

    let cfg = ChannelConfig::table_one();
    let model = discretize(&cfg, 100.0).unwrap();
    let delays = lindley_delays(&model, lambda, 8e6, cfg.slot_s, 400_000, 99);
    let batch_means: Vec<f64> = delays[4_000..].chunks(19_800).map(|b| b.iter().sum::<f64>() / b.len() as f64).collect();
    let oracle = t_interval(&batch_means, 0.95);
    let gap = (sim.mean_delay_s - oracle.mean).abs();
    assert!(
        gap <= 2.0 * (sim.delay_half_width_s + oracle.half_width),
        "sim {:?} vs event-driven {:?}",
        sim.delay(),
        oracle
    );
}

#[test]
fn light_traffic_delay_is_one_service_time() {
    // ρ ≈ 0.03: M/M/1 sojourn E[S]/(1 − ρ) with E[S] = θ / E[R], plus half a
    // slot waiting for the next slot boundary.
    let lambda = 0.01;
    let cfg = ChannelConfig::table_one();
    let model = discretize(&cfg, 100.0).unwrap();
    let service = 8e6 / model.mean_rate();
    let rho = lambda * service;
    let expected = service / (1.0 - rho) + cfg.slot_s / 2.0;

    let mut c = ScenarioConfig::homogeneous(1, 100.0, lambda);
    c.stopping.relative_half_width = 0.03;
    let r = run(&c).unwrap();
    assert!(r.target_met);
    assert!(
        (r.mean_delay_s - expected).abs() <= 2.0 * r.delay_half_width_s,
        "{:?} vs {expected}",
        r.delay()
    );
}

#[test]
fn littles_law_agrees_with_direct_delay() {
    let r = run(&quick(ScenarioConfig::homogeneous(2, 100.0, 0.15), 1_000_000, 20)).unwrap();
    assert!(r.delay().overlaps(&r.littles_law()), "{:?} vs {:?}", r.delay(), r.littles_law());
    assert!((r.mean_total_queue / 0.3 - r.littles_law_delay_s).abs() < 1e-9 * r.littles_law_delay_s);
}

#[test]
fn equal_seeds_give_identical_reports() {
    let mut c = quick(ScenarioConfig::homogeneous(2, 100.0, 0.2), 200_000, 4);
    c.dispatcher = DispatcherKind::Optimal;
    c.truncation = Some(20);
    let a = run(&c).unwrap();
    let b = run(&c).unwrap();
    assert_eq!(a, b);
    c.execution = Execution::Sequential;
    assert_eq!(run(&c).unwrap(), a);
    c.seed += 1;
    assert_ne!(run(&c).unwrap().mean_delay_s, a.mean_delay_s);
}

#[test]
fn files_are_conserved_and_energy_is_accounted() {
    for d in [DispatcherKind::Jsq, DispatcherKind::LowerBound, DispatcherKind::Heuristic] {
        let mut c = quick(ScenarioConfig::homogeneous(3, 100.0, 0.12), 200_000, 6);
        c.dispatcher = d;
        c.costs.phi_j_per_mb = 1.5;
        let r = run(&c).unwrap();
        for u in 0..3 {
            assert_eq!(r.files_generated[u], r.files_completed[u] + r.files_in_system[u], "{d:?} user {u}");
        }
        let rerouted: f64 = r.reroute_rates.iter().flatten().sum::<f64>() * r.measured_time_s;
        assert!((r.rerouting_energy_j - 1.5 * rerouted).abs() < 1e-6, "{d:?}");
        assert!(
            (r.rerouting_power_w * r.measured_time_s - r.rerouting_energy_j).abs() < 1e-9 * r.rerouting_energy_j.max(1.0),
            "{d:?}"
        );
        for j in 0..3 {
            assert_eq!(r.reroute_rates[j][j], 0.0);
        }
    }
}

#[test]
fn no_reroute_spends_no_energy() {
    let mut c = quick(ScenarioConfig::homogeneous(2, 100.0, 0.2), 200_000, 4);
    c.dispatcher = DispatcherKind::Jsq;
    c.local_link_congested = true;
    let r = run(&c).unwrap();
    assert_eq!(r.rerouting_power_w, 0.0);
    assert!(r.reroute_rates.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn jsq_beats_no_reroute() {
    let mut c = ScenarioConfig::homogeneous(2, 100.0, 0.2);
    c.stopping.relative_half_width = 0.03;
    let none = run(&c).unwrap();
    c.dispatcher = DispatcherKind::Jsq;
    let jsq = run(&c).unwrap();
    assert!(jsq.delay().upper() < none.delay().lower(), "{:?} vs {:?}", jsq.delay(), none.delay());
}

#[test]
fn prohibitive_weight_never_reroutes() {
    let mut c = quick(ScenarioConfig::homogeneous(2, 100.0, 0.2), 500_000, 8);
    c.dispatcher = DispatcherKind::Optimal;
    c.truncation = Some(30);
    let rows = measure_tradeoff(&c, &[0.0, 1e6]).unwrap();
    assert!(rows[0].1.rerouting_power_w > 0.05);
    assert!(rows[1].1.rerouting_power_w < 0.01 * rows[0].1.rerouting_power_w);
}

#[test]
fn rerouting_stays_inside_clusters() {
    let mut c = quick(ScenarioConfig::homogeneous(4, 90.0, 0.12), 300_000, 4);
    c.dispatcher = DispatcherKind::Jsq;
    c.cluster = Some(ClusterSpec {
        groups: Some(vec![vec![0, 3], vec![1, 2]]),
        ..Default::default()
    });
    let r = run(&c).unwrap();
    let inside = |a: usize, b: usize| (a == 0 || a == 3) == (b == 0 || b == 3);
    for (j, row) in r.reroute_rates.iter().enumerate() {
        for (i, &x) in row.iter().enumerate() {
            if !inside(j, i) {
                assert_eq!(x, 0.0, "{j} -> {i}");
            }
        }
    }
    assert!(r.reroute_rates[0][3] > 0.0 && r.reroute_rates[1][2] > 0.0);
    assert_eq!(r.alpha.len(), 2);
    let total: f64 = r.alpha.iter().sum();
    assert!(total <= 1.0 + 1e-12);
}

#[test]
fn overload_is_reported_as_instability() {
    let mut c = quick(ScenarioConfig::homogeneous(2, 100.0, 0.6), 500_000, 2);
    c.max_backlog = 200;
    match run(&c) {
        Err(trafspread::Error::Unstable { offered_load, .. }) => assert!(offered_load > 1.0),
        other => panic!("{other:?}"),
    }
}
