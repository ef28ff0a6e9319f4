//! Workload construction, the (policy × rate × seed) run matrix, and the
//! sweep CSV / summary JSON outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use polysim_core::capacity::{cost_co, cost_pd, Arch, WorkloadPoint, DEFAULT_PREFILL_CAP};
use polysim_core::perf_model::PerfModel;
use polysim_core::scheduler::Policy;
use polysim_core::sim::{self, goodput_at, RunMetrics, SimConfig, SimError};
use polysim_core::workload::{
    assign_slos, burst_flip, generate_arrivals, load_trace, mean_lengths, LengthPreset, Request, TierDistribution,
};
use polysim_core::SEC;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed ({spec}): {source}")]
    Sim { spec: String, source: SimError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("workload: {0}")]
    Workload(String),
}

impl RunError {
    pub fn is_invariant(&self) -> bool {
        matches!(self, RunError::Sim { source, .. } if source.is_invariant())
    }
}

/// Request lengths plus the statistics the scheduler config needs.
#[derive(Debug, Clone)]
pub struct Lengths {
    pub name: String,
    pub pairs: Vec<(u64, u64)>,
    pub avg_d: u64,
    pub max_d: u64,
}

impl Lengths {
    pub fn new(name: impl Into<String>, pairs: Vec<(u64, u64)>) -> Self {
        let (_, md) = mean_lengths(pairs.iter().copied());
        let max_d = pairs.iter().map(|x| x.1).max().unwrap_or(1);
        Self {
            name: name.into(),
            avg_d: (md.round() as u64).max(1),
            max_d,
            pairs,
        }
    }

    pub fn from_preset(preset: LengthPreset, n: usize, seed: u64) -> Self {
        Self::new(preset.name(), preset.sample(n, seed))
    }
}

/// All length sets the config asks for.
pub fn load_lengths(cfg: &Config) -> Result<Vec<Lengths>, RunError> {
    if let Some(path) = &cfg.workload.trace {
        let mut pairs = load_trace(path, cfg.workload.trace_format).map_err(|e| RunError::Workload(e.to_string()))?;
        pairs.truncate(cfg.workload.requests);
        let name = path.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![Lengths::new(name, pairs)]);
    }
    Ok(cfg
        .workload
        .length_presets()?
        .into_iter()
        .map(|p| Lengths::from_preset(p, cfg.workload.requests, 0x5EED))
        .collect())
}

/// Offline capacity in requests per second: instances divided by the
/// tier-weighted per-request cost at the mean request shape and mean TTFT.
pub fn capacity_rps(model: &PerfModel, lengths: &Lengths, dist: &TierDistribution, arch: Arch, instances: usize, prefill_cap: u64) -> f64 {
    let (mp, md) = mean_lengths(lengths.pairs.iter().copied());
    let ttft = dist.mean_ttft().round() as u64;
    let mut cost = 0.0;
    let mut weight = 0.0;
    for &(tpot, prob) in &dist.tpot_tiers {
        let Ok(w) = WorkloadPoint::new((mp.round() as u64).max(1), (md.round() as u64).max(1), ttft.max(1), tpot) else {
            continue;
        };
        let c = match arch {
            Arch::Pd => cost_pd(model, &w, prefill_cap),
            Arch::Co => cost_co(model, &w),
        };
        if let Ok(c) = c {
            cost += c * prob;
            weight += prob;
        }
    }
    if weight == 0.0 {
        return 0.0;
    }
    instances as f64 * SEC as f64 / (cost / weight)
}

/// Tiered requests with Poisson arrivals. With `burst`, the tier
/// distribution inverts after that fraction of requests.
pub fn build_requests(
    lengths: &Lengths,
    dist: &TierDistribution,
    model: &PerfModel,
    rate: f64,
    seed: u64,
    burst: Option<f64>,
) -> Result<Vec<Request>, RunError> {
    let reqs = match burst {
        None => assign_slos(&lengths.pairs, dist, model, seed),
        Some(frac) => {
            let split = (lengths.pairs.len() as f64 * frac).round() as usize;
            burst_flip(&lengths.pairs, split, dist, &dist.inverted(), model, (seed, seed ^ 0xB0B5))
                .map_err(|e| RunError::Workload(e.to_string()))?
        }
    };
    generate_arrivals(reqs, rate, seed.wrapping_mul(0x9E37_79B9).wrapping_add(17)).map_err(|e| RunError::Workload(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub workload: String,
    pub policy: Policy,
    pub arch: Arch,
    pub instances: usize,
    pub rate: f64,
    pub seed: u64,
    /// Token budget override (the `chunk_static` sweep).
    pub budget: Option<u64>,
    pub burst: Option<f64>,
}

impl std::fmt::Display for RunSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "workload={} policy={} arch={} instances={} rate={:.3} seed={}",
            self.workload,
            self.policy.name(),
            self.arch,
            self.instances,
            self.rate,
            self.seed
        )?;
        if let Some(b) = self.budget {
            write!(f, " budget={b}")?;
        }
        if let Some(b) = self.burst {
            write!(f, " burst={b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub spec: RunSpec,
    pub attainment: f64,
    pub goodput: f64,
    pub cost_per_req: f64,
    pub per_tier: Vec<f64>,
}

pub fn sim_config_for(cfg: &Config, lengths: &Lengths, spec: &RunSpec) -> SimConfig {
    let mut sc = cfg.sim_config(spec.policy, spec.arch, spec.instances, spec.seed, lengths.avg_d, lengths.max_d);
    if let Some(b) = spec.budget {
        sc.sched.token_budget = b;
    }
    sc
}

pub fn run_one(cfg: &Config, model: &PerfModel, lengths: &Lengths, spec: &RunSpec) -> Result<(RunRow, RunMetrics), RunError> {
    let dist = cfg.workload.distribution()?;
    let reqs = build_requests(lengths, &dist, model, spec.rate, spec.seed, spec.burst)?;
    let sc = sim_config_for(cfg, lengths, spec);
    let m = sim::run(&sc, model, &reqs).map_err(|source| RunError::Sim {
        spec: spec.to_string(),
        source,
    })?;
    let row = RunRow {
        spec: spec.clone(),
        attainment: m.attainment,
        goodput: m.goodput_rps,
        cost_per_req: m.cost_per_req,
        per_tier: m.per_tier.iter().map(|t| t.attainment).collect(),
    };
    Ok((row, m))
}

/// Runs every spec in parallel. The first failure aborts with its spec.
pub fn run_matrix(cfg: &Config, model: &PerfModel, lengths: &[Lengths], specs: &[RunSpec]) -> Result<Vec<RunRow>, RunError> {
    specs
        .par_iter()
        .map(|spec| {
            let l = lengths
                .iter()
                .find(|l| l.name == spec.workload)
                .ok_or_else(|| RunError::Workload(format!("unknown workload {}", spec.workload)))?;
            run_one(cfg, model, l, spec).map(|(row, _)| row)
        })
        .collect()
}

/// One rate of a sweep, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub attainment: f64,
    pub goodput: f64,
    pub cost_per_req: f64,
    pub per_tier: Vec<f64>,
    pub budget: Option<u64>,
}

/// Seed-averaged sweep of one (workload, arch, policy). For `chunk_static`
/// the best budget is kept per rate.
pub fn aggregate(rows: &[RunRow]) -> BTreeMap<(String, String, String), Vec<SweepPoint>> {
    // (workload, arch, policy) -> rate bits -> budget -> rows
    type Groups<'a> = BTreeMap<(String, String, String), BTreeMap<u64, BTreeMap<Option<u64>, Vec<&'a RunRow>>>>;
    let mut groups: Groups = BTreeMap::new();
    for r in rows {
        let key = (r.spec.workload.clone(), r.spec.arch.to_string(), r.spec.policy.name().to_string());
        groups
            .entry(key)
            .or_default()
            .entry(r.spec.rate.to_bits())
            .or_default()
            .entry(r.spec.budget)
            .or_default()
            .push(r);
    }
    let mut out = BTreeMap::new();
    for (key, by_rate) in groups {
        let mut points: Vec<SweepPoint> = by_rate
            .into_values()
            .map(|by_budget| {
                by_budget
                    .into_iter()
                    .map(|(budget, rs)| mean_point(&rs, budget))
                    .max_by(|a, b| {
                        a.attainment
                            .total_cmp(&b.attainment)
                            .then(b.cost_per_req.total_cmp(&a.cost_per_req))
                    })
                    .expect("non-empty group")
            })
            .collect();
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        out.insert(key, points);
    }
    out
}

fn mean_point(rs: &[&RunRow], budget: Option<u64>) -> SweepPoint {
    let n = rs.len() as f64;
    let tiers = rs[0].per_tier.len();
    SweepPoint {
        rate: rs[0].spec.rate,
        attainment: rs.iter().map(|r| r.attainment).sum::<f64>() / n,
        goodput: rs.iter().map(|r| r.goodput).sum::<f64>() / n,
        cost_per_req: rs.iter().map(|r| r.cost_per_req).sum::<f64>() / n,
        per_tier: (0..tiers).map(|t| rs.iter().map(|r| r.per_tier[t]).sum::<f64>() / n).collect(),
        budget,
    }
}

pub const SWEEP_HEADER: &str = "rate,attainment,goodput,cost_per_req";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6},{:.6}", p.rate, p.attainment, p.goodput, p.cost_per_req);
    }
    s
}

/// Parses a sweep CSV back into `(rate, attainment)` pairs.
pub fn parse_sweep_csv(text: &str) -> Option<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    if lines.next()? != SWEEP_HEADER {
        return None;
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut it = l.split(',');
            Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub workload: String,
    pub arch: String,
    /// goodput_at(threshold) per policy, computed from the rounded CSV values.
    pub goodput: BTreeMap<String, f64>,
    pub best_baseline: Option<String>,
    /// Policy goodput over the best baseline's.
    pub ratio_vs_best_baseline: BTreeMap<String, f64>,
    /// Tightest-to-loosest tier attainment spread of polyserve at its
    /// highest rate still meeting the threshold.
    pub polyserve_tier_spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub threshold: f64,
    pub groups: Vec<GroupSummary>,
}

fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().unwrap_or(x)
}

pub fn summarize(sweeps: &BTreeMap<(String, String, String), Vec<SweepPoint>>, threshold: f64) -> Summary {
    let mut groups: BTreeMap<(String, String), GroupSummary> = BTreeMap::new();
    for ((wl, arch, policy), points) in sweeps {
        let g = groups.entry((wl.clone(), arch.clone())).or_insert_with(|| GroupSummary {
            workload: wl.clone(),
            arch: arch.clone(),
            goodput: BTreeMap::new(),
            best_baseline: None,
            ratio_vs_best_baseline: BTreeMap::new(),
            polyserve_tier_spread: None,
        });
        let curve: Vec<(f64, f64)> = points.iter().map(|p| (round6(p.rate), round6(p.attainment))).collect();
        g.goodput.insert(policy.clone(), goodput_at(&curve, threshold, true));
        if policy == Policy::Polyserve.name() {
            g.polyserve_tier_spread = points
                .iter()
                .rev()
                .find(|p| p.attainment >= threshold)
                .map(|p| tier_spread(&p.per_tier));
        }
    }
    for g in groups.values_mut() {
        let best = g
            .goodput
            .iter()
            .filter(|(k, _)| k.as_str() != Policy::Polyserve.name())
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, v)| (k.clone(), *v));
        if let Some((name, val)) = best {
            for (k, v) in &g.goodput {
                let r = if val > 0.0 { v / val } else if *v > 0.0 { f64::INFINITY } else { 1.0 };
                g.ratio_vs_best_baseline.insert(k.clone(), r);
            }
            g.best_baseline = Some(name);
        }
    }
    Summary {
        threshold,
        groups: groups.into_values().collect(),
    }
}

/// Max minus min tier attainment.
pub fn tier_spread(per_tier: &[f64]) -> f64 {
    let max = per_tier.iter().copied().fold(f64::MIN, f64::max);
    let min = per_tier.iter().copied().fold(f64::MAX, f64::min);
    if per_tier.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// Writes one sweep CSV per (workload, arch, policy) and the summary JSON.
pub fn write_outputs(
    out: &Path,
    prefix: &str,
    sweeps: &BTreeMap<(String, String, String), Vec<SweepPoint>>,
    summary: &Summary,
    svg: bool,
) -> Result<(), RunError> {
    std::fs::create_dir_all(out)?;
    for ((wl, arch, policy), points) in sweeps {
        let stem = format!("{prefix}_{wl}_{arch}_{policy}");
        std::fs::write(out.join(format!("{stem}.csv")), sweep_csv(points))?;
    }
    if svg {
        let mut by_group: BTreeMap<(String, String), Vec<(String, Vec<(f64, f64)>)>> = BTreeMap::new();
        for ((wl, arch, policy), points) in sweeps {
            by_group
                .entry((wl.clone(), arch.clone()))
                .or_default()
                .push((policy.clone(), points.iter().map(|p| (p.rate, p.attainment)).collect()));
        }
        for ((wl, arch), series) in by_group {
            let title = format!("{wl} {arch}: attainment vs rate");
            std::fs::write(
                out.join(format!("{prefix}_{wl}_{arch}.svg")),
                crate::svg::line_chart(&title, "rate (req/s)", "attainment", &series),
            )?;
        }
    }
    let json = serde_json::to_string_pretty(summary).map_err(std::io::Error::from)?;
    std::fs::write(out.join(format!("{prefix}_summary.json")), json + "\n")?;
    Ok(())
}

/// Sweep matrix for every workload and architecture: rates from the
/// config (absolute, or fractions of computed capacity), every policy and
/// seed, plus the budget grid for `chunk_static`. `chunk_static` is skipped
/// on PD.
pub fn build_specs(cfg: &Config, model: &PerfModel, lengths: &[Lengths], instances: usize, burst: Option<f64>) -> Result<Vec<RunSpec>, RunError> {
    let dist = cfg.workload.distribution()?;
    // Rates are normalised by the capacity of the workload actually served.
    let cap_dist = match burst {
        Some(split) => dist.mixed(&dist.inverted(), 1.0 - split).map_err(|e| RunError::Workload(e.to_string()))?,
        None => dist.clone(),
    };
    let e = &cfg.experiment;
    let mut specs = Vec::new();
    for l in lengths {
        for &arch in &e.archs {
            let rates: Vec<f64> = if e.rates.is_empty() {
                let cap = capacity_rps(model, l, &cap_dist, arch, instances, DEFAULT_PREFILL_CAP);
                if cap <= 0.0 {
                    return Err(RunError::Workload(format!("{}: zero capacity on {arch}", l.name)));
                }
                e.rate_fracs.iter().map(|f| f * cap).collect()
            } else {
                e.rates.clone()
            };
            for &policy in &e.policies {
                if policy == Policy::ChunkStatic && arch == Arch::Pd {
                    continue;
                }
                let budgets: Vec<Option<u64>> = if policy == Policy::ChunkStatic {
                    cfg.scheduler.chunk_budgets.iter().map(|&b| Some(b)).collect()
                } else {
                    vec![None]
                };
                for &rate in &rates {
                    for &seed in &e.seeds {
                        for &budget in &budgets {
                            specs.push(RunSpec {
                                workload: l.name.clone(),
                                policy,
                                arch,
                                instances,
                                rate,
                                seed,
                                budget,
                                burst,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(specs)
}

/// One more rate step, same spacing, for every sweep whose highest rate
/// still meets `threshold`.
pub fn extension_specs(specs: &[RunSpec], sweeps: &BTreeMap<(String, String, String), Vec<SweepPoint>>, threshold: f64) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for ((wl, arch, policy), pts) in sweeps {
        let [.., a, b] = pts.as_slice() else {
            continue;
        };
        if b.attainment < threshold {
            continue;
        }
        let next = 2.0 * b.rate - a.rate;
        out.extend(
            specs
                .iter()
                .filter(|s| s.workload == *wl && s.arch.to_string() == *arch && s.policy.name() == policy && s.rate == b.rate)
                .map(|s| RunSpec { rate: next, ..s.clone() }),
        );
    }
    out
}

/// Runs the matrix and reduces it to per-policy sweeps and a summary.
pub fn run_experiment(
    cfg: &Config,
    model: &PerfModel,
    lengths: &[Lengths],
    instances: usize,
    burst: Option<f64>,
) -> Result<(Vec<RunRow>, BTreeMap<(String, String, String), Vec<SweepPoint>>, Summary), RunError> {
    let threshold = cfg.experiment.threshold;
    let mut specs = build_specs(cfg, model, lengths, instances, burst)?;
    let mut rows = run_matrix(cfg, model, lengths, &specs)?;
    for _ in 0..cfg.experiment.extend_steps {
        let extra = extension_specs(&specs, &aggregate(&rows), threshold);
        if extra.is_empty() {
            break;
        }
        rows.extend(run_matrix(cfg, model, lengths, &extra)?);
        specs.extend(extra);
    }
    let sweeps = aggregate(&rows);
    let summary = summarize(&sweeps, cfg.experiment.threshold);
    Ok((rows, sweeps, summary))
}
