use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use polysim_bench::analyze::{self, DEFAULT_SHAPES};
use polysim_bench::config::Config;
use polysim_bench::runner::{self, Lengths, RunError, RunSpec};
use polysim_bench::sched_bench::{self, BenchSpec};
use polysim_core::capacity::{Arch, DEFAULT_PREFILL_CAP};
use polysim_core::scheduler::Policy;
use polysim_core::sim::{self, JsonlDecisionLog};
use polysim_core::workload::{generate_arrivals, assign_slos, write_workload_jsonl, LengthPreset};
use polysim_core::MS;

#[derive(Parser)]
#[command(name = "polysim", version, about = "Multi-SLO LLM serving simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict to one policy.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// Restrict to one architecture (pd or co).
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Absolute request rate (req/s); replaces the rate grid.
    #[arg(long, global = true)]
    rate: Option<f64>,
    #[arg(long, global = true)]
    instances: Option<usize>,
    /// Restrict to one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// All eight length presets at 300k requests.
    #[arg(long, global = true)]
    full: bool,
    /// Also emit SVG charts.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// One simulation; writes the metrics JSON.
    Simulate {
        /// Length preset (defaults to the first configured).
        #[arg(long)]
        preset: Option<String>,
        /// Also write per-token emission times.
        #[arg(long)]
        tokens: bool,
        /// Also write the routing decision log.
        #[arg(long)]
        decisions: bool,
    },
    /// Goodput sweep over rates, policies and seeds.
    Sweep,
    /// Sweep with the tier distribution inverted partway through.
    Burst,
    /// Cost per request against rate.
    Cost,
    /// Goodput against cluster size.
    Servers,
    /// Routing throughput microbenchmark.
    SchedBench {
        #[arg(long, default_value_t = 200_000)]
        decisions: usize,
        /// Server counts to bench.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 10, 20, 50, 100])]
        servers: Vec<usize>,
    },
    /// Capacity and cost curves.
    Analyze {
        /// `p:d` shapes, comma separated.
        #[arg(long, value_delimiter = ',')]
        shapes: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        ttft_ms: u64,
    },
    /// Writes a tiered workload with arrivals as JSONL.
    GenTrace {
        #[arg(long, default_value = "uniform_512_512")]
        preset: String,
        #[arg(long)]
        requests: Option<usize>,
    },
}

#[derive(Debug)]
enum Fail {
    Config(String),
    Invariant(String),
    Other(anyhow::Error),
}

impl From<RunError> for Fail {
    fn from(e: RunError) -> Self {
        if e.is_invariant() {
            Fail::Invariant(e.to_string())
        } else if matches!(e, RunError::Config(_)) {
            Fail::Config(e.to_string())
        } else {
            Fail::Other(e.into())
        }
    }
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        Fail::Other(e)
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Other(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("POLYSIM_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: POLYSIM_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Invariant(m)) => {
            eprintln!("invariant violation: {m}");
            ExitCode::from(3)
        }
        Err(Fail::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(c: &Common) -> Result<Config, Fail> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).map_err(|e| Fail::Config(e.to_string()))?,
        None => Config::default(),
    };
    if c.full {
        cfg.workload.presets = LengthPreset::ALL.iter().map(|p| p.name().to_string()).collect();
        cfg.workload.requests = 300_000;
    }
    if let Some(p) = &c.policy {
        let p = Policy::from_name(p).ok_or_else(|| Fail::Config(format!("unknown policy {p:?}")))?;
        cfg.experiment.policies = vec![p];
    }
    if let Some(a) = &c.arch {
        let a = match a.as_str() {
            "pd" => Arch::Pd,
            "co" => Arch::Co,
            _ => return Err(Fail::Config(format!("unknown architecture {a:?}"))),
        };
        cfg.experiment.archs = vec![a];
    }
    if let Some(r) = c.rate {
        cfg.experiment.rates = vec![r];
    }
    if let Some(n) = c.instances {
        cfg.cluster.instances = n;
    }
    if let Some(s) = c.seed {
        cfg.experiment.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.experiment.out = o.clone();
    }
    cfg.experiment.svg |= c.svg;
    cfg.validate().map_err(|e| Fail::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Fail> {
    let cfg = load_config(&cli.common)?;
    let model = cfg.model.build().map_err(|e| Fail::Config(e.to_string()))?;
    let out = cfg.experiment.out.clone();
    match cli.cmd {
        Cmd::Simulate {
            preset,
            tokens,
            decisions,
        } => simulate(&cfg, &model, &out, preset, tokens, decisions),
        Cmd::Sweep | Cmd::Cost => {
            let prefix = if matches!(cli.cmd, Cmd::Cost) { "cost" } else { "sweep" };
            let lengths = runner::load_lengths(&cfg)?;
            let (_, sweeps, summary) = runner::run_experiment(&cfg, &model, &lengths, cfg.cluster.instances, None)?;
            runner::write_outputs(&out, prefix, &sweeps, &summary, cfg.experiment.svg)?;
            print_summary(&summary);
            Ok(())
        }
        Cmd::Burst => {
            let lengths = runner::load_lengths(&cfg)?;
            let split = Some(cfg.experiment.burst_split);
            let (_, sweeps, summary) = runner::run_experiment(&cfg, &model, &lengths, cfg.cluster.instances, split)?;
            runner::write_outputs(&out, "burst", &sweeps, &summary, cfg.experiment.svg)?;
            print_summary(&summary);
            Ok(())
        }
        Cmd::Servers => servers(&cfg, &model, &out),
        Cmd::SchedBench { decisions, servers } => {
            std::fs::create_dir_all(&out)?;
            let mut reports = Vec::new();
            for n in servers {
                let r = sched_bench::run(
                    &BenchSpec {
                        servers: n,
                        decisions,
                        ..BenchSpec::default()
                    },
                    &model,
                );
                println!(
                    "servers={:<4} decisions/s={:>12.0} p50={}ns p99={}ns p99.9={}ns",
                    r.servers, r.decisions_per_sec, r.p50_ns, r.p99_ns, r.p999_ns
                );
                reports.push(r);
            }
            let json = serde_json::to_string_pretty(&reports).context("serializing bench report")?;
            std::fs::write(out.join("sched_bench.json"), json + "\n")?;
            Ok(())
        }
        Cmd::Analyze { shapes, ttft_ms } => {
            let shapes: Vec<(u64, u64)> = if shapes.is_empty() {
                DEFAULT_SHAPES.to_vec()
            } else {
                shapes
                    .iter()
                    .map(|s| {
                        let (p, d) = s.split_once(':')?;
                        Some((p.parse().ok()?, d.parse().ok()?))
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| Fail::Config("shapes must be p:d pairs".into()))?
            };
            std::fs::create_dir_all(&out)?;
            let path = out.join("curves.csv");
            let mut f = BufWriter::new(File::create(&path)?);
            analyze::analyze(&model, &analyze::default_grid(&shapes, ttft_ms * MS), &mut f)?;
            f.flush()?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Cmd::GenTrace { preset, requests } => {
            let p = LengthPreset::from_name(&preset).ok_or_else(|| Fail::Config(format!("unknown preset {preset:?}")))?;
            let n = requests.unwrap_or(cfg.workload.requests);
            let seed = cfg.experiment.seeds[0];
            let lengths = Lengths::from_preset(p, n, 0x5EED);
            let dist = cfg.workload.distribution().map_err(|e| Fail::Config(e.to_string()))?;
            let rate = match cfg.experiment.rates.first() {
                Some(&r) => r,
                None => runner::capacity_rps(&model, &lengths, &dist, Arch::Co, cfg.cluster.instances, DEFAULT_PREFILL_CAP),
            };
            let reqs = generate_arrivals(assign_slos(&lengths.pairs, &dist, &model, seed), rate, seed)
                .map_err(|e| Fail::Config(e.to_string()))?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{preset}.jsonl"));
            let mut f = BufWriter::new(File::create(&path)?);
            write_workload_jsonl(&reqs, &mut f)?;
            f.flush()?;
            println!("wrote {} ({} requests at {rate:.2} req/s)", path.display(), reqs.len());
            Ok(())
        }
    }
}

fn simulate(cfg: &Config, model: &polysim_core::PerfModel, out: &Path, preset: Option<String>, tokens: bool, decisions: bool) -> Result<(), Fail> {
    let mut lengths = runner::load_lengths(cfg)?;
    let l = match preset {
        Some(name) => {
            let p = LengthPreset::from_name(&name).ok_or_else(|| Fail::Config(format!("unknown preset {name:?}")))?;
            Lengths::from_preset(p, cfg.workload.requests, 0x5EED)
        }
        None => lengths.swap_remove(0),
    };
    let arch = cfg.experiment.archs[0];
    let dist = cfg.workload.distribution().map_err(|e| Fail::Config(e.to_string()))?;
    let rate = match cfg.experiment.rates.first() {
        Some(&r) => r,
        None => 0.8 * runner::capacity_rps(model, &l, &dist, arch, cfg.cluster.instances, DEFAULT_PREFILL_CAP),
    };
    let spec = RunSpec {
        workload: l.name.clone(),
        policy: cfg.experiment.policies[0],
        arch,
        instances: cfg.cluster.instances,
        rate,
        seed: cfg.experiment.seeds[0],
        budget: None,
        burst: None,
    };
    let reqs = runner::build_requests(&l, &dist, model, rate, spec.seed, None)?;
    let mut sc = runner::sim_config_for(cfg, &l, &spec);
    sc.record_tokens = tokens;
    std::fs::create_dir_all(out)?;
    let mut log = if decisions {
        Some(JsonlDecisionLog::new(BufWriter::new(File::create(out.join("decisions.jsonl"))?)))
    } else {
        None
    };
    let res = sim::run_observed(&sc, model, &reqs, log.as_mut().map(|l| l as &mut dyn sim::DecisionObserver));
    let m = res.map_err(|source| {
        Fail::from(RunError::Sim {
            spec: spec.to_string(),
            source,
        })
    })?;
    if let Some(mut l) = log {
        if let Some(e) = l.error.take() {
            return Err(e.into());
        }
        l.into_inner().flush()?;
    }
    if let Some(t) = &m.tokens {
        let mut f = BufWriter::new(File::create(out.join("tokens.csv"))?);
        sim::write_tokens_csv(t, &mut f)?;
        f.flush()?;
    }
    let summary = m.summary();
    let json = serde_json::to_string_pretty(&summary).context("serializing metrics")?;
    std::fs::write(out.join("metrics.json"), json + "\n")?;
    println!(
        "{spec}\nattainment={:.4} goodput={:.2} req/s cost={:.3} instance-s/req",
        summary.attainment,
        summary.goodput_rps,
        summary.cost_per_req
    );
    Ok(())
}

fn servers(cfg: &Config, model: &polysim_core::PerfModel, out: &Path) -> Result<(), Fail> {
    let lengths = runner::load_lengths(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("instances,workload,arch,policy,goodput\n");
    for &n in &cfg.cluster.instances_grid {
        let (_, sweeps, summary) = runner::run_experiment(cfg, model, &lengths, n, None)?;
        runner::write_outputs(out, &format!("servers{n}"), &sweeps, &summary, false)?;
        for g in &summary.groups {
            for (policy, gp) in &g.goodput {
                csv.push_str(&format!("{n},{},{},{policy},{gp:.6}\n", g.workload, g.arch));
            }
        }
        println!("instances={n}");
        print_summary(&summary);
    }
    std::fs::write(out.join("servers.csv"), csv)?;
    Ok(())
}

fn print_summary(s: &runner::Summary) {
    for g in &s.groups {
        println!("{} {}:", g.workload, g.arch);
        for (policy, gp) in &g.goodput {
            let ratio = g.ratio_vs_best_baseline.get(policy).copied().unwrap_or(f64::NAN);
            println!("  {policy:<13} goodput@{:.2}={gp:>10.3} req/s  ratio={ratio:.3}", s.threshold);
        }
        if let Some(sp) = g.polyserve_tier_spread {
            println!("  polyserve tier spread at threshold: {:.1} pp", sp * 100.0);
        }
    }
}
