use allpairs_core::app::StageCostModel;
use allpairs_core::cluster::{AppConfig, Mode, NodeConfig, RunConfig};
use allpairs_core::model::{efficiency, t_gpu, StageCosts};
use allpairs_core::runtime::{
    find_lane_overlap, read_trace, run, write_trace, RunMetrics, RunOutput,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(preset: &str, n: usize, p: usize, device: usize, host: usize) -> RunConfig {
    RunConfig::new(
        AppConfig::synthetic(n, Some(preset)),
        vec![NodeConfig::uniform(1, device, host)],
    )
    .with_nodes(p)
}

fn go(c: &RunConfig) -> RunOutput {
    run(c).unwrap_or_else(|e| panic!("run failed: {e}"))
}

fn without_wall(m: &RunMetrics) -> RunMetrics {
    let mut m = m.clone();
    m.wall_s = 0.0;
    m
}

#[test]
fn same_seed_same_run() {
    let mut c = cfg("bioinformatics", 96, 4, 8, 24);
    c.runtime.profile = true;
    c.runtime.keep_results = true;
    c.seed = 17;
    let a = go(&c);
    let b = go(&c);
    assert_eq!(a.trace, b.trace);
    assert_eq!(
        without_wall(&a.metrics).to_json(),
        without_wall(&b.metrics).to_json()
    );

    c.seed = 18;
    let other = go(&c);
    assert_ne!(a.trace, other.trace);
}

#[test]
fn lanes_never_overlap() {
    for (p, devices) in [(1, 1), (3, 2)] {
        let mut c = RunConfig::new(
            AppConfig::synthetic(80, Some("forensics")),
            vec![NodeConfig::uniform(devices, 6, 20)],
        )
        .with_nodes(p);
        c.runtime.profile = true;
        let out = go(&c);
        assert!(!out.trace.is_empty());
        assert_eq!(find_lane_overlap(&out.trace), None);
        for e in &out.trace {
            assert!(e.end_ns >= e.start_ns);
            if e.label == "compare" {
                assert!(e.j.is_some_and(|j| e.i < j));
            }
        }
    }
}

#[test]
fn real_lanes_never_overlap() {
    let mut c = cfg("bioinformatics", 24, 2, 4, 8);
    c.mode = Mode::Real;
    c.runtime.time_scale = 0.0;
    c.runtime.profile = true;
    let out = go(&c);
    assert!(!out.trace.is_empty());
    assert_eq!(find_lane_overlap(&out.trace), None);
}

#[test]
fn leases_are_returned() {
    for (device, host, job_limit) in [(2, 1, 1), (3, 2, 0), (5, 40, 16)] {
        let mut c = cfg("microscopy", 40, 3, device, host);
        c.scheduler.job_limit = job_limit;
        let m = go(&c).metrics;
        assert_eq!(m.unquiescent_tiers, 0, "device {device} host {host}");
        assert_eq!(m.write_through_violations, 0);
        assert_eq!(m.comparisons, m.pairs);
        for node in &m.nodes {
            assert!(node.device.occupancy <= node.device.capacity);
            assert!(node.host.occupancy <= node.host.capacity);
        }
    }
}

#[test]
fn real_and_sim_agree() {
    let mut c = cfg("forensics", 40, 2, 48, 48);
    c.runtime.keep_results = true;
    let sim = go(&c).metrics;
    c.mode = Mode::Real;
    c.runtime.time_scale = 0.0;
    let real = go(&c).metrics;
    assert_eq!(sim.results, real.results);
    assert_eq!(sim.pairs, real.pairs);
    assert_eq!(sim.comparisons, real.comparisons);
    // With every item fitting in both tiers each node loads what it touches once.
    assert!(sim.loads <= 2 * 40 && real.loads <= 2 * 40);
    assert!(sim.r >= 1.0 && real.r >= 1.0);
}

#[test]
fn io_accounting() {
    for (n, p, host) in [(64, 1, 64), (64, 1, 8), (100, 4, 10)] {
        let m = go(&cfg("forensics", n, p, 4, host)).metrics;
        let raw = StageCostModel::forensics().raw_bytes.unwrap();
        assert_eq!(m.io_bytes, m.loads * raw);
        assert_eq!(m.r, m.loads as f64 / n as f64);
        assert!(m.r >= 1.0);
        assert_eq!(m.nodes.iter().map(|x| x.loads).sum::<u64>(), m.loads);
        assert_eq!(m.nodes.iter().map(|x| x.io_bytes).sum::<u64>(), m.io_bytes);
        assert!((m.io_usage_bps - m.io_bytes as f64 / m.makespan_s).abs() < 1e-6 * m.io_usage_bps);
    }
}

#[test]
fn transfers_hide_behind_compute() {
    let m = go(&cfg("forensics", 128, 1, 16, 128)).metrics;
    let busy = m.device_busy_s();
    assert!(busy > 0.0);
    assert!(
        m.makespan_s <= 1.15 * busy,
        "makespan {} vs device busy {busy}",
        m.makespan_s
    );
}

#[test]
fn makespan_respects_the_model() {
    for (n, p, host) in [(128, 1, 128), (128, 1, 16), (200, 4, 40)] {
        let c = cfg("forensics", n, p, 8, host);
        let m = go(&c).metrics;
        let costs = StageCosts::from_model(&StageCostModel::forensics(), c.storage.bandwidth_bps);
        let bound = t_gpu(n as u64, m.r, &costs) / p as f64;
        // Sampled costs jitter around the mean, so allow a few percent.
        assert!(
            m.makespan_s >= 0.95 * bound,
            "n={n} p={p}: {} < {bound}",
            m.makespan_s
        );
        let t_min = m.t_min_s.unwrap();
        assert_eq!(m.efficiency, Some(efficiency(t_min, p, m.makespan_s)));
    }
}

#[test]
fn superlinear_speedup_needs_fewer_loads() {
    let n = 256;
    let one = go(&cfg("forensics", n, 1, 8, 24)).metrics;
    for p in [2, 4, 8] {
        let m = go(&cfg("forensics", n, p, 8, 24)).metrics;
        let speedup = one.makespan_s / m.makespan_s;
        if speedup > p as f64 {
            assert!(
                m.r < one.r,
                "p={p}: speedup {speedup:.2} with R {} vs {}",
                m.r,
                one.r
            );
        }
    }
}

#[test]
fn compares_follow_locality() {
    let mut c = cfg("forensics", 128, 1, 16, 128);
    c.runtime.profile = true;
    let out = go(&c);
    let mut cmp: Vec<_> = out.trace.iter().filter(|e| e.label == "compare").collect();
    cmp.sort_by_key(|e| e.start_ns);
    let keys: Vec<(i64, i64)> = cmp
        .iter()
        .map(|e| (e.i as i64, e.j.unwrap() as i64))
        .collect();
    let dist = |ks: &[(i64, i64)]| -> f64 {
        ks.windows(2)
            .map(|w| ((w[0].0 - w[1].0).abs() + (w[0].1 - w[1].1).abs()) as f64)
            .sum::<f64>()
            / (ks.len() - 1) as f64
    };
    let ordered = dist(&keys);
    let mut shuffled = keys.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let random = dist(&shuffled);
    assert!(
        ordered < 0.5 * random,
        "ordered {ordered:.1} vs shuffled {random:.1}"
    );
}

#[test]
fn metrics_replay_their_config() {
    let mut c = cfg("microscopy", 30, 2, 4, 6);
    c.seed = 5;
    c.cache.h = 2;
    let m = go(&c).metrics;
    assert_eq!(m.config, c);
    let back: RunMetrics = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(back.config, c);
    let replayed = go(&back.config).metrics;
    assert_eq!(replayed.makespan_s, m.makespan_s);
    assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
}

#[test]
fn trace_round_trip() {
    let mut c = cfg("bioinformatics", 20, 2, 4, 8);
    c.runtime.profile = true;
    let out = go(&c);
    let mut buf = Vec::new();
    write_trace(&out.trace, &mut buf).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), out.trace.len());
    assert_eq!(read_trace(&buf[..]).unwrap(), out.trace);
    assert!(read_trace(&b"{not json}\n"[..]).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cfg("forensics", 10, 1, 1, 4);
    assert!(run(&c).is_err(), "one device slot cannot hold a pair");
    c = cfg("forensics", 0, 1, 4, 4);
    assert!(run(&c).is_err());
    c = cfg("nope", 10, 1, 4, 4);
    assert!(run(&c).is_err());
}
