use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use allpairs_core::cluster::{Mode, RunConfig};
use allpairs_core::harness::{self, Axis, Sweep};
use allpairs_core::model::ModelInput;
use allpairs_core::runtime::{self, write_trace, RunOutput};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "allpairs",
    version,
    about = "All-pairs compute runtime and experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write its metrics.
    Run(RunArgs),
    /// Repeat an experiment over one axis and write a CSV table.
    Sweep(SweepArgs),
    /// Evaluate the performance model for a cost document.
    Model(ModelArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    /// Replicate the first node section to N nodes.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(p) = self.nodes {
            if p == 0 {
                bail!("--nodes must be at least 1");
            }
            cfg = cfg.with_nodes(p);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// This process's rank in a multi-process cluster.
    #[arg(long, requires = "peers")]
    rank: Option<usize>,
    /// Comma-separated listen addresses, one per rank.
    #[arg(long, value_delimiter = ',', requires = "rank")]
    peers: Vec<String>,
    #[arg(long, default_value_t = 30.0)]
    connect_timeout: f64,
    /// Write a per-lane trace (JSON lines). Turns profiling on.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Metrics output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep every pair result in the metrics document.
    #[arg(long)]
    keep_results: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// One of cache_size, nodes, h, seed.
    #[arg(long)]
    sweep: Axis,
    /// Comma-separated values. Cache sizes are fractions of n.
    #[arg(long)]
    values: String,
    /// Seeds per value.
    #[arg(long, default_value_t = 1)]
    repeat: u64,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Cost document (TOML, or JSON with a .json extension).
    #[arg(long)]
    costs: PathBuf,
    #[arg(long)]
    json: bool,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    if a.trace.is_some() {
        cfg.runtime.profile = true;
    }
    cfg.runtime.keep_results |= a.keep_results;
    let out: RunOutput = match a.rank {
        Some(rank) => {
            if cfg.mode != Mode::Real {
                bail!("--rank needs --mode real");
            }
            if rank >= a.peers.len() {
                bail!("rank {rank} out of range for {} peers", a.peers.len());
            }
            if cfg.p() != a.peers.len() {
                cfg = cfg.with_nodes(a.peers.len());
            }
            let timeout = Duration::from_secs_f64(a.connect_timeout);
            runtime::run_rank(&cfg, rank, &a.peers, timeout)?
        }
        None => runtime::run(&cfg)?,
    };
    if let Some(path) = &a.trace {
        let mut w = output(Some(path))?;
        write_trace(&out.trace, &mut w)?;
        w.flush()?;
    }
    if a.rank.is_some_and(|r| r != 0) {
        return Ok(());
    }
    let m = &out.metrics;
    eprintln!(
        "n={} p={} pairs={} R={:.3} makespan={:.3}s efficiency={}",
        m.n,
        m.p,
        m.pairs,
        m.r,
        m.makespan_s,
        m.efficiency.map_or("-".into(), |e| format!("{e:.4}"))
    );
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{}", m.to_json())?;
    w.flush()?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = a.common.load()?;
    let values = harness::parse_values(&a.values).map_err(Usage)?;
    if a.repeat == 0 {
        return Err(Usage("--repeat must be at least 1").into());
    }
    let plan = Sweep {
        axis: a.sweep,
        values,
        repeats: a.repeat,
    };
    let rows = harness::sweep(&base, &plan)?;
    let mut w = output(a.out.as_deref())?;
    harness::write_csv(&rows, &mut w)?;
    w.flush()?;
    eprintln!("{} rows", rows.len());
    Ok(())
}

fn cmd_model(a: ModelArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.costs)
        .with_context(|| format!("reading {}", a.costs.display()))?;
    let input: ModelInput = if a.costs.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    let r = input.report().map_err(anyhow::Error::msg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
        return Ok(());
    }
    println!("n            {}", r.n);
    println!("p            {}", r.p);
    println!("R            {}", r.r);
    println!("T_gpu        {:.3} s", r.t_gpu);
    println!("T_cpu        {:.3} s", r.t_cpu);
    println!("T_io         {:.3} s", r.t_io);
    println!("T_min        {:.3} s", r.t_min);
    println!("T_min / p    {:.3} s", r.t_min / r.p as f64);
    if let (Some(e), Some(er)) = (r.efficiency, r.efficiency_r_adjusted) {
        println!("efficiency   {e:.4}");
        println!("  at R       {er:.4}");
    }
    Ok(())
}

/// Bad flag values that clap cannot check on its own.
#[derive(Debug)]
struct Usage<E>(E);

impl<E: std::fmt::Display> std::fmt::Display for Usage<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl<E: std::fmt::Debug + std::fmt::Display> std::error::Error for Usage<E> {}

fn main() -> ExitCode {
    let res = match Cli::parse().cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Model(a) => cmd_model(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Usage<&str>>().is_some()
                || e.downcast_ref::<Usage<allpairs_core::cluster::ConfigError>>()
                    .is_some();
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
