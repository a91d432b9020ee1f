//! End-to-end acceptance suite. Runs every criterion, prints one line per
//! criterion and exits non-zero if any of them fails.
//!
//! Run with `cargo test -p allpairs-core --test acceptance`.

use std::process::ExitCode;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use allpairs_core::app::{checked_compare, load_item, write_fixture_corpus, ItemKey, PairResult};
use allpairs_core::cluster::{AppConfig, Mode, NodeConfig, RunConfig};
use allpairs_core::dist::{default_h_max, run_fetch, CandidatesTable, FetchOutcome, NodeId};
use allpairs_core::harness::slots_for_fraction;
use allpairs_core::model::{efficiency, t_min, StageCosts, N_FORENSICS};
use allpairs_core::runtime::{run, RunMetrics};
use allpairs_core::sched::TaskNode;
use allpairs_core::{app::StageCostModel, ItemData, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn forensics(n: usize, p: usize, device_slots: usize, host_slots: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(
        AppConfig::synthetic(n, Some("forensics")),
        vec![NodeConfig::uniform(1, device_slots, host_slots)],
    )
    .with_nodes(p);
    c.seed = seed;
    c
}

fn metrics(cfg: &RunConfig) -> Result<RunMetrics, String> {
    run(cfg).map(|o| o.metrics).map_err(|e| e.to_string())
}

fn leaf_pairs(n: u32, leaf_block: u32) -> (u64, u64) {
    let mut stack = vec![TaskNode::root(n)];
    let (mut pairs, mut leaves) = (0, 0);
    while let Some(t) = stack.pop() {
        if t.region.is_leaf(leaf_block) {
            pairs += t.region.pair_count();
            leaves += 1;
        } else {
            stack.extend(t.children());
        }
    }
    (pairs, leaves)
}

fn pair_count_identity() -> Outcome {
    let mut detail = Vec::new();
    let mut wrong = Vec::new();
    for (n, expect) in [(256u32, 130_816u64), (2500, 3_123_750), (4980, 12_397_710)] {
        let (pairs, leaves) = leaf_pairs(n, 8);
        if pairs == expect {
            detail.push(format!("n={n}: {pairs} pairs in {leaves} leaves"));
        } else {
            wrong.push(format!("n={n}: {pairs} leaf pairs, expected {expect}"));
        }
    }
    // Every pair of the smallest instance, enumerated leaf by leaf.
    let mut seen = vec![false; 256 * 255 / 2];
    let mut stack = vec![TaskNode::root(256)];
    while let Some(t) = stack.pop() {
        if t.region.is_leaf(8) {
            for (i, j) in t.region.pairs() {
                ensure(i < j, || format!("unordered pair ({i}, {j})"))?;
                let idx = (i.0 as usize) * (511 - i.0 as usize) / 2 + (j.0 - i.0 - 1) as usize;
                ensure(!seen[idx], || format!("pair ({i}, {j}) appears twice"))?;
                seen[idx] = true;
            }
        } else {
            stack.extend(t.children());
        }
    }
    ensure(seen.iter().all(|&b| b), || {
        "n=256: some pair is missing".into()
    })?;
    if !wrong.is_empty() {
        return Err(format!("{} (ok: {})", wrong.join("; "), detail.join("; ")));
    }
    Ok(detail.join("; "))
}

fn random_config(rng: &mut ChaCha8Rng) -> RunConfig {
    let n = rng.gen_range(1..=128usize);
    let p = rng.gen_range(1..=8usize);
    let mut nodes = Vec::new();
    for _ in 0..p {
        let devices = rng.gen_range(1..=2usize);
        let mut node = NodeConfig::uniform(devices, 2, rng.gen_range(1..=n + 2));
        for d in &mut node.devices {
            d.speed = rng.gen_range(0.5..4.0);
            d.capacity = allpairs_core::cache::Capacity::Slots(rng.gen_range(2..=n + 3));
        }
        node.cpu_threads = Some(rng.gen_range(1..=8));
        nodes.push(node);
    }
    let preset = ["forensics", "bioinformatics", "microscopy"][rng.gen_range(0..3)];
    let mut c = RunConfig::new(AppConfig::synthetic(n, Some(preset)), nodes);
    c.seed = rng.gen();
    c.scheduler.leaf_block = [1, 4, 8][rng.gen_range(0..3)];
    c.scheduler.job_limit = [0, 1, 3, 16][rng.gen_range(0..4)];
    c.cache.enabled = rng.gen_bool(0.8);
    c.cache.h = rng.gen_range(0..=3);
    c.runtime.keep_results = true;
    c
}

fn exactly_once() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11_9a125);
    let configs: Vec<RunConfig> = (0..200).map(|_| random_config(&mut rng)).collect();
    let failures = Mutex::new(Vec::new());
    let next = Mutex::new(0usize);
    let workers = thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(4)
        .min(8);
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = {
                    let mut g = next.lock().unwrap();
                    *g += 1;
                    *g - 1
                };
                let Some(cfg) = configs.get(k) else { return };
                if let Err(e) = check_exactly_once(cfg) {
                    failures.lock().unwrap().push(format!("run {k}: {e}"));
                }
            });
        }
    });
    let failures = failures.into_inner().unwrap();
    ensure(failures.is_empty(), || {
        format!(
            "{} of 200 runs failed; first: {}",
            failures.len(),
            failures[0]
        )
    })?;
    Ok("200 randomized runs, every pair exactly once".into())
}

fn check_exactly_once(cfg: &RunConfig) -> Result<(), String> {
    let m = metrics(cfg)?;
    let results = m.results.as_ref().ok_or("results not kept")?;
    ensure(results.len() as u64 == m.pairs, || {
        format!("{} results for {} pairs", results.len(), m.pairs)
    })?;
    for w in results.windows(2) {
        ensure((w[0].left, w[0].right) < (w[1].left, w[1].right), || {
            format!(
                "pair ({}, {}) executed twice or out of order",
                w[1].left, w[1].right
            )
        })?;
    }
    ensure(m.comparisons == m.pairs, || {
        format!("{} comparisons for {} pairs", m.comparisons, m.pairs)
    })?;
    ensure(m.write_through_violations == 0, || {
        "write-through violated".into()
    })?;
    ensure(m.unquiescent_tiers == 0, || {
        "cache tier left pinned slots".into()
    })?;
    let bound = cfg.cache.h as u64 + 2;
    ensure(m.dist.max_messages_per_request <= bound, || {
        format!(
            "{} messages for one request with h={}",
            m.dist.max_messages_per_request, cfg.cache.h
        )
    })
}

fn perfect_reuse() -> Outcome {
    let mut detail = Vec::new();
    for (n, device, host) in [(64, 8, 64), (200, 16, 200), (128, 4, 300)] {
        let m = metrics(&forensics(n, 1, device, host, 3))?;
        ensure(m.r == 1.0, || format!("n={n} host={host}: R = {}", m.r))?;
        ensure(m.loads == n as u64, || format!("n={n}: {} loads", m.loads))?;
        detail.push(format!("n={n} host={host}: R={}", m.r));
    }
    Ok(detail.join("; "))
}

fn cache_trend() -> Outcome {
    let n = 256;
    let fractions = [1.0, 0.5, 0.25, 0.1, 0.05];
    let mut means = Vec::new();
    for f in fractions {
        let mut sum = 0.0;
        for seed in 0..3 {
            let m = metrics(&forensics(n, 1, 16, slots_for_fraction(n, f), seed))?;
            if f == 1.0 {
                ensure(m.r == 1.0, || {
                    format!("seed {seed}: R at full capacity = {}", m.r)
                })?;
            }
            sum += m.r;
        }
        means.push(sum / 3.0);
    }
    for (k, w) in means.windows(2).enumerate() {
        ensure(w[1] >= w[0], || {
            format!(
                "mean R fell from {:.3} to {:.3} going to {} of n",
                w[0],
                w[1],
                fractions[k + 1]
            )
        })?;
    }
    let shown: Vec<String> = fractions
        .iter()
        .zip(&means)
        .map(|(f, r)| format!("{}%:{r:.2}", f * 100.0))
        .collect();
    Ok(format!("mean R {}", shown.join(" ")))
}

fn dist_benefit() -> Outcome {
    let n = 1024;
    let host = slots_for_fraction(n, 0.15);
    let device = slots_for_fraction(n, 0.04);
    let runs: Vec<Result<(f64, RunMetrics, RunMetrics), String>> = thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let t1 = metrics(&forensics(n, 1, device, host, seed))?.makespan_s;
                    let on = metrics(&forensics(n, 8, device, host, seed))?;
                    let mut c = forensics(n, 8, device, host, seed);
                    c.cache.enabled = false;
                    let off = metrics(&c)?;
                    Ok((t1, on, off))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut detail = Vec::new();
    for (seed, r) in runs.into_iter().enumerate() {
        let (t1, on, off) = r?;
        let (s_on, s_off) = (t1 / on.makespan_s, t1 / off.makespan_s);
        ensure(on.loads < off.loads, || {
            format!(
                "seed {seed}: loads {} with vs {} without",
                on.loads, off.loads
            )
        })?;
        ensure(s_on > s_off, || {
            format!("seed {seed}: speedup {s_on:.2} with vs {s_off:.2} without")
        })?;
        ensure(s_on > 8.0, || {
            format!("seed {seed}: speedup {s_on:.2} with the distributed cache")
        })?;
        ensure(on.dist.max_messages_per_request <= 3, || {
            format!("seed {seed}: {} messages", on.dist.max_messages_per_request)
        })?;
        detail.push(format!("{s_on:.2}/{s_off:.2}"));
    }
    Ok(format!("speedup(8) on/off per seed: {}", detail.join(" ")))
}

fn random_tables(rng: &mut ChaCha8Rng, p: usize, h: usize, keys: u32) -> Vec<CandidatesTable> {
    let h_max = default_h_max(h);
    let mut tables: Vec<CandidatesTable> = (0..p)
        .map(|id| CandidatesTable::with_capacity(id as NodeId, p, h, h_max))
        .collect();
    for k in 0..keys {
        let owner = k as usize % p;
        let len = rng.gen_range(0..=h_max);
        let mut list: Vec<NodeId> = (0..len).map(|_| rng.gen_range(0..p) as NodeId).collect();
        list.dedup();
        tables[owner].set_candidates(ItemKey(k), list);
    }
    tables
}

fn message_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = [0usize; 5];
    let payload = ItemData::new(Stage::Preprocessed, vec![7u8; 16]);
    for h in 0..=4usize {
        for t in 0..10_000u64 {
            let p = rng.gen_range(1..=16usize);
            let keys = 8;
            let mut tables = random_tables(&mut rng, p, h, keys);
            let origin = rng.gen_range(0..p) as NodeId;
            let key = ItemKey(rng.gen_range(0..keys));
            let hit_rate = rng.gen_range(0.0..1.0);
            let cached: Vec<bool> = (0..p).map(|_| rng.gen_bool(hit_rate)).collect();
            let (outcome, msgs) = run_fetch(&mut tables, origin, key, t, |node, _| {
                cached[node as usize].then(|| payload.clone())
            });
            ensure(msgs <= h + 2, || format!("h={h} p={p}: {msgs} messages"))?;
            if let FetchOutcome::Data { payload: got, .. } = &outcome {
                ensure(got == &payload, || "payload altered in transit".into())?;
            }
            worst[h] = worst[h].max(msgs);
        }
    }
    Ok(format!(
        "5 x 10^4 traces, max messages for h=0..4: {worst:?}"
    ))
}

fn first_hop() -> Outcome {
    let mut c = forensics(256, 16, 16, 64, 7);
    c.cache.h = 3;
    let m = metrics(&c)?;
    let ratio = m.dist.first_hop_ratio().ok_or("no remote hits")?;
    ensure(ratio >= 0.6, || {
        format!("first-hop ratio {ratio:.3} ({:?})", m.dist.hits_by_hop)
    })?;
    Ok(format!(
        "{:.1}% of {} remote hits at hop 1, by hop {:?}",
        ratio * 100.0,
        m.dist.hits(),
        m.dist.hits_by_hop
    ))
}

fn heterogeneous_balance() -> Outcome {
    let mut c = RunConfig::new(
        AppConfig::synthetic(256, Some("microscopy")),
        vec![NodeConfig::uniform(1, 64, 256)],
    )
    .with_nodes(4);
    c.scheduler.job_limit = 8;
    for (node, speed) in c.nodes.iter_mut().zip([1.0, 2.0, 3.5, 4.5]) {
        node.devices[0].speed = speed;
    }
    let m = metrics(&c)?;
    let finish = m.node_finish_times();
    let earliest = finish.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(earliest >= 0.95 * m.makespan_s, || {
        format!("finish times {finish:?} vs makespan {:.1}", m.makespan_s)
    })?;
    let shares: Vec<u64> = m.nodes.iter().map(|n| n.comparisons).collect();
    Ok(format!(
        "earliest finish at {:.1}% of makespan, comparisons per node {shares:?}",
        earliest / m.makespan_s * 100.0
    ))
}

fn model_arithmetic() -> Outcome {
    let c = StageCosts::from_model(&StageCostModel::forensics(), f64::INFINITY);
    let t = t_min(N_FORENSICS, &c);
    ensure((t - 13_739.6).abs() <= 0.1, || format!("t_min = {t}"))?;
    let e = efficiency(t, 1, t);
    ensure(e == 1.0, || format!("efficiency(t_min, 1, t_min) = {e}"))?;
    Ok(format!("t_min = {t:.3} s, efficiency = {e}"))
}

fn overlap_efficiency() -> Outcome {
    let m = metrics(&forensics(256, 1, 16, 256, 11))?;
    let e = m.efficiency.ok_or("no efficiency")?;
    ensure(e >= 0.85, || format!("efficiency {e:.4}"))?;
    Ok(format!(
        "efficiency {e:.4} (makespan {:.2} s, t_min {:.2} s)",
        m.makespan_s,
        m.t_min_s.unwrap_or(0.0)
    ))
}

fn oracle_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_fixture_corpus(dir.path(), 16, 5).map_err(|e| e.to_string())?;
    let app_cfg = AppConfig::cv(dir.path());
    let (app, storage) = app_cfg.build(0).map_err(|e| e.to_string())?;
    let n = app.descriptor().n as u32;
    ensure(n == 16, || format!("corpus has {n} documents"))?;

    let items: Vec<ItemData> = (0..n)
        .map(|k| {
            let raw = storage
                .read(&app.path_for_key(ItemKey(k)))
                .map_err(|e| e.to_string())?;
            load_item(app.as_ref(), ItemKey(k), &ItemData::raw(raw)).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let mut reference = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (ItemKey(i), ItemKey(j));
            let raw = checked_compare(
                app.as_ref(),
                (a, &items[i as usize]),
                (b, &items[j as usize]),
            )
            .map_err(|e| e.to_string())?;
            reference.push(app.postprocess(a, b, &raw).map_err(|e| e.to_string())?);
        }
    }

    let variants: [(&str, Mode, usize); 3] = [
        ("real 1-node", Mode::Real, 1),
        ("sim 1-node", Mode::Sim, 1),
        ("sim 4-node", Mode::Sim, 4),
    ];
    for (name, mode, p) in variants {
        let mut c =
            RunConfig::new(app_cfg.clone(), vec![NodeConfig::uniform(1, 4, 6)]).with_nodes(p);
        c.mode = mode;
        c.runtime.keep_results = true;
        let m = metrics(&c)?;
        let got = m.results.ok_or("results not kept")?;
        ensure(got.len() == reference.len(), || {
            format!("{name}: {} results", got.len())
        })?;
        for (r, g) in reference.iter().zip(&got) {
            ensure(same(r, g), || {
                format!("{name}: {g:?} differs from reference {r:?}")
            })?;
        }
    }
    Ok(format!(
        "{} pairs identical across reference, real 1-node, sim 1-node, sim 4-node",
        reference.len()
    ))
}

fn same(a: &PairResult, b: &PairResult) -> bool {
    a.left == b.left
        && a.right == b.right
        && (a.value.score - b.value.score).abs() <= 1e-9
        && a.value.matched == b.value.matched
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "pair-count identity",
            budget: Duration::from_secs(1),
            check: pair_count_identity,
        },
        Criterion {
            name: "exactly-once ledger",
            budget: Duration::from_secs(120),
            check: exactly_once,
        },
        Criterion {
            name: "perfect-reuse baseline",
            budget: Duration::from_secs(60),
            check: perfect_reuse,
        },
        Criterion {
            name: "cache-size trend",
            budget: Duration::from_secs(300),
            check: cache_trend,
        },
        Criterion {
            name: "distributed-cache benefit",
            budget: Duration::from_secs(600),
            check: dist_benefit,
        },
        Criterion {
            name: "protocol message bound",
            budget: Duration::from_secs(60),
            check: message_bound,
        },
        Criterion {
            name: "first-hop dominance",
            budget: Duration::from_secs(300),
            check: first_hop,
        },
        Criterion {
            name: "heterogeneous balance",
            budget: Duration::from_secs(300),
            check: heterogeneous_balance,
        },
        Criterion {
            name: "model arithmetic",
            budget: Duration::from_secs(1),
            check: model_arithmetic,
        },
        Criterion {
            name: "overlap efficiency",
            budget: Duration::from_secs(120),
            check: overlap_efficiency,
        },
        Criterion {
            name: "oracle equivalence",
            budget: Duration::from_secs(60),
            check: oracle_equivalence,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = (c.check)();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.budget => {
                Err(format!("{d} (took {took:.1?}, budget {:?})", c.budget))
            }
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS  {:<26} {d} [{took:.2?}]", c.name),
            Err(e) => {
                failed += 1;
                println!("FAIL  {:<26} {e} [{took:.2?}]", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
