use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_allpairs"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"
seed = 4

[app]
kind = "synthetic"
n = 64
preset = "forensics"

[[nodes]]
host = { slots = 64 }
devices = [{ capacity = { slots = 8 } }]
"#;

#[test]
fn run_writes_metrics_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let metrics = dir.path().join("m.json");
    let trace = dir.path().join("t.jsonl");
    ok(bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&metrics)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap());

    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["n"], 64);
    assert_eq!(m["pairs"], 64 * 63 / 2);
    assert_eq!(m["r"], 1.0);
    assert_eq!(m["config"]["seed"], 4);

    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = 0;
    for line in text.lines() {
        let e: serde_json::Value = serde_json::from_str(line).unwrap();
        for field in ["node", "lane", "label", "start_ns", "end_ns", "i"] {
            assert!(e.get(field).is_some(), "missing {field} in {line}");
        }
        lines += 1;
    }
    assert!(lines > 64 * 63 / 2);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = ok(bin()
        .args(["run", "--nodes", "3", "--seed", "9", "--config"])
        .arg(&cfg)
        .output()
        .unwrap());
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["p"], 3);
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["nodes"].as_array().unwrap().len(), 3);
}

#[test]
fn invalid_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &SMALL.replace("slots = 8", "slots = 1"),
    );
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cache slots"), "{err}");

    let garbled = write(dir.path(), "garbled.toml", "[app\n");
    let out = bin()
        .args(["run", "--config"])
        .arg(&garbled)
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = bin()
        .args(["run", "--config", "/does/not/exist.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn sweep_emits_one_row_per_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let csv = dir.path().join("s.csv");
    ok(bin()
        .args([
            "sweep",
            "--sweep",
            "cache_size",
            "--values",
            "1,0.25,0.1",
            "--repeat",
            "2",
            "--config",
        ])
        .arg(&cfg)
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(r.len(), header.len());
    }
    let r_at = |v: &str| -> f64 {
        let rs: Vec<f64> = rows
            .iter()
            .filter(|r| r[col("value")] == v)
            .map(|r| r[col("r")].parse().unwrap())
            .collect();
        rs.iter().sum::<f64>() / rs.len() as f64
    };
    assert_eq!(r_at("1"), 1.0);
    assert!(r_at("1") <= r_at("0.25") && r_at("0.25") <= r_at("0.1"));
}

#[test]
fn node_sweep_pairs_dist_cache_on_and_off() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = ok(bin()
        .args(["sweep", "--sweep", "nodes", "--values", "1,2,4", "--config"])
        .arg(&cfg)
        .output()
        .unwrap());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r.contains(",true,")).count(), 3);
    assert_eq!(rows.iter().filter(|r| r.contains(",false,")).count(), 3);
}

#[test]
fn bad_sweep_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    for args in [
        vec!["--sweep", "h", "--values", ""],
        vec!["--sweep", "h", "--values", "1,x"],
        vec!["--sweep", "colour", "--values", "1"],
    ] {
        let out = bin()
            .arg("sweep")
            .args(&args)
            .arg("--config")
            .arg(&cfg)
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn model_prints_the_lower_bound() {
    let out = ok(bin()
        .args(["model", "--json", "--costs"])
        .arg(configs().join("forensics-costs.toml"))
        .output()
        .unwrap());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let t_min = r["t_min"].as_f64().unwrap();
    assert!((t_min - 13_739.571).abs() < 1e-3, "{t_min}");
    assert_eq!(r["t_gpu"], r["t_min"]);

    let out = ok(bin()
        .args(["model", "--costs"])
        .arg(configs().join("forensics-costs.toml"))
        .output()
        .unwrap());
    assert!(String::from_utf8_lossy(&out.stdout).contains("13739.571"));

    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "c.json",
        r#"{"n": 1, "costs": {"t_parse": 0, "t_preprocess": 0, "t_comparison": 0, "t_postprocess": 0, "file_size": 0, "io_bandwidth": 1}}"#,
    );
    let out = bin().args(["model", "--costs"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_parse() {
    for name in ["forensics-small.toml", "hetero.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        let mut cfg = std::fs::read_to_string(configs().join(name)).unwrap();
        // Shrink the instance so the check stays quick.
        cfg = cfg.replace("n = 256", "n = 48");
        let path = write(dir.path(), name, &cfg);
        ok(bin()
            .args(["run", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&m)
            .output()
            .unwrap());
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn multi_process_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "real.toml",
        &format!(
            "mode = \"real\"\n{}\n[runtime]\ntime_scale = 0.0\n",
            SMALL.replace("n = 64", "n = 40")
        ),
    );
    let peers = (0..3)
        .map(|_| format!("127.0.0.1:{}", free_port()))
        .collect::<Vec<_>>()
        .join(",");
    let children: Vec<_> = (0..3)
        .map(|rank| {
            bin()
                .args([
                    "run",
                    "--keep-results",
                    "--rank",
                    &rank.to_string(),
                    "--peers",
                    &peers,
                    "--config",
                ])
                .arg(&cfg)
                .arg("--out")
                .arg(dir.path().join(format!("m{rank}.json")))
                .stdout(Stdio::null())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for c in children {
        ok(c.wait_with_output().unwrap());
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m0.json")).unwrap())
            .unwrap();
    assert_eq!(m["p"], 3);
    assert_eq!(m["pairs"], 40 * 39 / 2);
    assert_eq!(m["comparisons"], 40 * 39 / 2);
    let results = m["results"].as_array().unwrap();
    assert_eq!(results.len(), 40 * 39 / 2);
    let mut seen = std::collections::HashSet::new();
    for r in results {
        assert!(seen.insert((r["left"].as_u64().unwrap(), r["right"].as_u64().unwrap())));
    }
    assert!(!dir.path().join("m1.json").exists());
}
