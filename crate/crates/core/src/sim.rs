//! Cluster simulator.
//!
//! Arrivals, queue retries and autoscale checks happen on a fixed tick
//! (1 ms by default). Iterations run back to back at exact microseconds:
//! when one ends, the next starts at the same instant with the residents
//! present then. Steps with nothing to do are skipped, which does not change
//! results.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::io::Write;
use std::ops::Bound::{Excluded, Unbounded};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::{cost_pd_parts, Arch, WorkloadPoint};
use crate::perf_model::PerfModel;
use crate::scheduler::{
    autoscale_tick, form_prefill_batch, polyserve_check, prefill_feasible, prefill_target, route_baseline, route_polyserve,
    route_prefill_pd, Assignment, Candidate, Cluster, ConfigError, Outcome, Policy, PrefillJob, Resident,
    RoutingDecision, ScalingAction, SchedulerConfig, Stage,
};
use crate::workload::Request;
use crate::{Micros, MS, SEC};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Scheduler(#[from] ConfigError),
    #[error("server {server} would hold {kv} KV tokens (capacity {capacity}) at t={now}us")]
    KvOverflow {
        server: usize,
        kv: u64,
        capacity: u64,
        now: Micros,
    },
    #[error("request {rid} (class {class}) resident on server {server} assigned {assignment:?} at t={now}us")]
    Binning {
        rid: u64,
        class: usize,
        server: usize,
        assignment: Assignment,
        now: Micros,
    },
    #[error("requests still in flight at the time limit {now}us")]
    DidNotDrain { now: Micros },
    #[error("conservation violated: {measured} measured != {attained} attained + {violated} violated")]
    Conservation {
        measured: u64,
        attained: u64,
        violated: u64,
    },
}

impl SimError {
    /// True for failures that indicate a scheduler or simulator bug rather
    /// than bad input.
    pub fn is_invariant(&self) -> bool {
        matches!(
            self,
            SimError::KvOverflow { .. }
                | SimError::Binning { .. }
                | SimError::DidNotDrain { .. }
                | SimError::Conservation { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub tick_us: Micros,
    pub instances: usize,
    pub sched: SchedulerConfig,
    /// Prefill servers under a baseline PD policy; derived from the cost
    /// split when unset.
    pub pd_prefill_instances: Option<usize>,
    /// Leading fraction of requests (by arrival) excluded from metrics.
    pub warmup_frac: f64,
    pub max_time_us: Micros,
    pub record_tokens: bool,
    /// Scan every server for binning and KV violations at every step.
    pub check_invariants: bool,
    pub timeline_period_us: Micros,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_us: MS,
            instances: 20,
            sched: SchedulerConfig::default(),
            pd_prefill_instances: None,
            warmup_frac: 0.05,
            max_time_us: 100_000 * SEC,
            record_tokens: false,
            check_invariants: false,
            timeline_period_us: SEC,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.sched.validate()?;
        if self.tick_us == 0 {
            return Err(SimError::Config("tick must be >= 1us".into()));
        }
        if self.instances == 0 {
            return Err(SimError::Config("instance count must be >= 1".into()));
        }
        if self.sched.arch == Arch::Pd && self.instances < 2 {
            return Err(SimError::Config("PD needs at least 2 instances".into()));
        }
        if let Some(k) = self.pd_prefill_instances {
            if k == 0 || k >= self.instances {
                return Err(SimError::Config(format!(
                    "prefill instances {k} must be in [1, {})",
                    self.instances
                )));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(SimError::Config("warm-up fraction must be in [0, 1)".into()));
        }
        if self.timeline_period_us == 0 {
            return Err(SimError::Config("timeline period must be >= 1us".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub request_id: u64,
    pub i: u64,
    pub emit_us: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingEvent {
    pub time_us: Micros,
    pub server: usize,
    pub from: Assignment,
    pub to: Assignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineSample {
    pub time_us: Micros,
    pub server: usize,
    pub assignment: Assignment,
    pub residents: usize,
    pub kv: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub id: u64,
    /// `None` for best-effort requests.
    pub tpot_us: Option<Micros>,
    pub measured: bool,
    pub attained: bool,
    pub first_token_us: Option<Micros>,
    pub finish_us: Micros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierMetrics {
    pub tpot_us: Micros,
    pub measured: u64,
    pub attained: u64,
    pub attainment: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub busy_us: Micros,
    pub assigned_us: Micros,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub submitted: u64,
    /// Tiered requests past the warm-up cutoff.
    pub measured: u64,
    pub attained: u64,
    pub violated: u64,
    pub best_effort: u64,
    pub attainment: f64,
    pub per_tier: Vec<TierMetrics>,
    /// Measured attained requests per second of measured arrival span.
    pub goodput_rps: f64,
    /// Attained requests over the whole run, warm-up included.
    pub attained_total: u64,
    pub makespan_us: Micros,
    /// Billed (non-pool) server time.
    pub instance_us: u128,
    pub cost_per_req: f64,
    pub prefill_instances: Option<usize>,
    pub requests: Vec<RequestOutcome>,
    pub servers: Vec<ServerStats>,
    pub timeline: Vec<TimelineSample>,
    pub scaling_events: Vec<ScalingEvent>,
    pub initial_assignment: Vec<Assignment>,
    pub final_assignment: Vec<Assignment>,
    pub tokens: Option<Vec<TokenRecord>>,
}

/// Headline numbers, the metrics JSON body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub submitted: u64,
    pub measured: u64,
    pub attained: u64,
    pub violated: u64,
    pub best_effort: u64,
    pub attainment: f64,
    pub per_tier: Vec<TierMetrics>,
    pub goodput_rps: f64,
    pub makespan_us: Micros,
    pub instance_seconds: f64,
    pub cost_per_req: f64,
    pub scaling_events: usize,
}

impl RunMetrics {
    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            submitted: self.submitted,
            measured: self.measured,
            attained: self.attained,
            violated: self.violated,
            best_effort: self.best_effort,
            attainment: self.attainment,
            per_tier: self.per_tier.clone(),
            goodput_rps: self.goodput_rps,
            makespan_us: self.makespan_us,
            instance_seconds: self.instance_us as f64 / SEC as f64,
            cost_per_req: self.cost_per_req,
            scaling_events: self.scaling_events.len(),
        }
    }

    /// Replays the scaling log from the initial assignment.
    pub fn replay_scaling(&self) -> Vec<Assignment> {
        let mut a = self.initial_assignment.clone();
        for e in &self.scaling_events {
            a[e.server] = e.to;
        }
        a
    }
}

/// True iff every token `i` was emitted by `arrival + ttft + i·tpot`. An
/// empty list counts as violated.
pub fn dslo_attained(emissions: &[Micros], arrival: Micros, ttft_us: Micros, tpot_us: Micros) -> bool {
    !emissions.is_empty()
        && emissions.iter().enumerate().all(|(i, &e)| {
            e <= arrival
                .saturating_add(ttft_us)
                .saturating_add((i as u64).saturating_mul(tpot_us))
        })
}

/// Largest rate whose attainment reaches `threshold`. With `interpolate`, the
/// crossing towards the next (failing) rate is linearly interpolated.
/// `sweep` is `(rate, attainment)` sorted by rate.
pub fn goodput_at(sweep: &[(f64, f64)], threshold: f64, interpolate: bool) -> f64 {
    let Some(i) = sweep.iter().rposition(|&(_, a)| a >= threshold) else {
        return 0.0;
    };
    let (r0, a0) = sweep[i];
    match sweep.get(i + 1) {
        Some(&(r1, a1)) if interpolate && a1 < threshold => r0 + (a0 - threshold) / (a0 - a1) * (r1 - r0),
        _ => r0,
    }
}

/// Billed instance-seconds per attained request; +∞ when none attained.
pub fn cost_metrics(m: &RunMetrics) -> f64 {
    if m.attained_total == 0 {
        f64::INFINITY
    } else {
        m.instance_us as f64 / SEC as f64 / m.attained_total as f64
    }
}

pub const TOKENS_HEADER: &str = "request_id,i,emit_us";

pub fn write_tokens_csv(tokens: &[TokenRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TOKENS_HEADER}")?;
    for t in tokens {
        writeln!(out, "{},{},{}", t.request_id, t.i, t.emit_us)?;
    }
    Ok(())
}

/// Prefill servers for a fixed PD split, proportional to the prefill share
/// of the per-request cost, tier-weighted over the workload.
pub fn static_prefill_split(model: &PerfModel, requests: &[Request], instances: usize, prefill_cap: u64) -> usize {
    if instances < 2 {
        return instances;
    }
    let (mut pf, mut dc) = (0.0, 0.0);
    let mut by_tier: Vec<(Micros, u64, u64, u64, u64)> = Vec::new();
    for r in requests {
        let key = r.tpot_us();
        let e = match by_tier.iter_mut().find(|e| e.0 == key) {
            Some(e) => e,
            None => {
                by_tier.push((key, 0, 0, 0, 0));
                by_tier.last_mut().unwrap()
            }
        };
        e.1 += 1;
        e.2 += r.p;
        e.3 += r.d_true;
        e.4 += r.ttft_us().min(3600 * SEC);
    }
    for (tpot, n, sp, sd, st) in by_tier {
        let w = WorkloadPoint::new((sp / n).max(1), (sd / n).max(1), (st / n).max(1), tpot);
        if let Ok((a, b)) = w.and_then(|w| cost_pd_parts(model, &w, prefill_cap)) {
            pf += a * n as f64;
            dc += b * n as f64;
        }
    }
    if pf + dc <= 0.0 {
        return instances / 2;
    }
    ((instances as f64 * pf / (pf + dc)).round() as usize).clamp(1, instances - 1)
}

/// What the router saw and decided.
pub struct DecisionContext<'a> {
    pub now: Micros,
    pub cluster: &'a Cluster,
    pub candidate: &'a Candidate,
    pub stage: Stage,
    pub decision: &'a RoutingDecision,
    pub model: &'a PerfModel,
    pub cfg: &'a SchedulerConfig,
}

pub trait DecisionObserver {
    fn on_decision(&mut self, ctx: &DecisionContext<'_>);
}

#[derive(Debug, Serialize)]
struct Evidence {
    server: usize,
    assignment: Assignment,
    feasible: bool,
    load_us: Micros,
}

#[derive(Debug, Serialize)]
struct DecisionRecord<'a> {
    now_us: Micros,
    request_id: u32,
    class: usize,
    stage: &'static str,
    decision: &'a RoutingDecision,
    evidence: Vec<Evidence>,
}

/// Writes one JSON line per routing decision, with per-server feasibility
/// re-evaluated at decision time.
pub struct JsonlDecisionLog<W: Write> {
    out: W,
    pub error: Option<std::io::Error>,
}

impl<W: Write> JsonlDecisionLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> DecisionObserver for JsonlDecisionLog<W> {
    fn on_decision(&mut self, ctx: &DecisionContext<'_>) {
        if self.error.is_some() {
            return;
        }
        let cfg = ctx.cfg;
        let evidence = ctx
            .cluster
            .servers
            .iter()
            .filter_map(|s| {
                let (feasible, load_us) = match (ctx.stage, s.assignment) {
                    (Stage::Prefill, Assignment::Prefill) if cfg.policy == Policy::Polyserve => {
                        let c = prefill_feasible(s, ctx.candidate, ctx.now, ctx.model, cfg, true);
                        (c.feasible, c.completion.saturating_sub(ctx.now))
                    }
                    (Stage::Decode, Assignment::Tier(t)) if cfg.policy == Policy::Polyserve => {
                        let c = polyserve_check(s, ctx.candidate, cfg.class_tpot(t), ctx.now, ctx.model, cfg);
                        (c.feasible(), c.iter_us)
                    }
                    _ => return None,
                };
                Some(Evidence {
                    server: s.id,
                    assignment: s.assignment,
                    feasible,
                    load_us,
                })
            })
            .collect();
        let rec = DecisionRecord {
            now_us: ctx.now,
            request_id: ctx.candidate.rid,
            class: ctx.candidate.class,
            stage: match ctx.stage {
                Stage::Prefill => "prefill",
                Stage::Decode => "decode",
            },
            decision: ctx.decision,
            evidence,
        };
        let res = serde_json::to_writer(&mut self.out, &rec)
            .map_err(std::io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ReqState {
    emitted: u64,
    violated: bool,
    done: bool,
    first_token: Option<Micros>,
    finish: Micros,
}

/// The running iteration of one server.
#[derive(Debug, Clone, Default)]
struct Running {
    /// Residents at iteration start; later admissions sit past this index.
    n_at_start: usize,
    /// Prefill pieces `(rid, tokens)`.
    chunks: Vec<(u32, u64)>,
    start: Micros,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    sched: &'a SchedulerConfig,
    model: &'a PerfModel,
    reqs: &'a [Request],
    cluster: Cluster,
    state: Vec<ReqState>,
    running: Vec<Running>,
    now: Micros,
    next_arrival: usize,
    prefill_q: BTreeSet<(Micros, u32)>,
    class_q: Vec<BTreeSet<(Micros, u32)>>,
    transfers: BinaryHeap<Reverse<(Micros, u32)>>,
    outstanding: usize,
    dirty: bool,
    last_retry: Micros,
    next_autoscale: Micros,
    next_sample: Micros,
    events: Vec<ScalingEvent>,
    billed_since: Vec<Option<Micros>>,
    stats: Vec<ServerStats>,
    timeline: Vec<TimelineSample>,
    tokens: Vec<TokenRecord>,
    observer: Option<&'a mut dyn DecisionObserver>,
}

pub fn run(cfg: &SimConfig, model: &PerfModel, requests: &[Request]) -> Result<RunMetrics, SimError> {
    run_observed(cfg, model, requests, None)
}

/// Runs the workload to completion. `requests` must be sorted by arrival.
pub fn run_observed<'a>(
    cfg: &'a SimConfig,
    model: &'a PerfModel,
    requests: &'a [Request],
    observer: Option<&'a mut dyn DecisionObserver>,
) -> Result<RunMetrics, SimError> {
    cfg.validate()?;
    if !requests.windows(2).all(|w| w[0].arrival_us <= w[1].arrival_us) {
        return Err(SimError::Config("requests must be sorted by arrival".into()));
    }
    if let Some(r) = requests.iter().find(|r| r.p == 0 || r.d_true == 0) {
        return Err(SimError::Config(format!("request {} has an empty prompt or output", r.id)));
    }
    if let Some(r) = requests.iter().find(|r| r.d_true > cfg.sched.max_decode) {
        return Err(SimError::Config(format!(
            "request {} decodes {} tokens, above max_decode {}",
            r.id, r.d_true, cfg.sched.max_decode
        )));
    }
    if requests.len() > u32::MAX as usize {
        return Err(SimError::Config("too many requests".into()));
    }
    let n = cfg.instances;
    let mut prefill_instances = None;
    let cluster = match (cfg.sched.policy, cfg.sched.arch) {
        (Policy::Polyserve, _) => Cluster::pooled(n),
        (_, Arch::Co) => Cluster::fixed(n, 0),
        (_, Arch::Pd) => {
            let k = cfg
                .pd_prefill_instances
                .unwrap_or_else(|| static_prefill_split(model, requests, n, cfg.sched.token_budget));
            prefill_instances = Some(k);
            Cluster::fixed(n, k)
        }
    };
    let billed_since = cluster
        .servers
        .iter()
        .map(|s| s.assignment.is_billed().then_some(0))
        .collect();
    let mut sim = Sim {
        cfg,
        sched: &cfg.sched,
        model,
        reqs: requests,
        cluster,
        state: vec![ReqState::default(); requests.len()],
        running: vec![Running::default(); n],
        now: 0,
        next_arrival: 0,
        prefill_q: BTreeSet::new(),
        class_q: vec![BTreeSet::new(); cfg.sched.n_classes()],
        transfers: BinaryHeap::new(),
        outstanding: requests.len(),
        dirty: true,
        last_retry: 0,
        next_autoscale: 0,
        next_sample: 0,
        events: Vec::new(),
        billed_since,
        stats: vec![ServerStats::default(); n],
        timeline: Vec::new(),
        tokens: Vec::new(),
        observer,
    };
    let initial = sim.cluster.servers.iter().map(|s| s.assignment).collect();
    sim.run()?;
    let mut m = sim.metrics(initial);
    m.prefill_instances = prefill_instances;
    if m.measured != m.attained + m.violated {
        return Err(SimError::Conservation {
            measured: m.measured,
            attained: m.attained,
            violated: m.violated,
        });
    }
    Ok(m)
}

impl<'a> Sim<'a> {
    fn class_of(&self, r: &Request) -> usize {
        r.tier.map_or(self.sched.best_effort_class(), |t| t.id as usize)
    }

    fn ceil_tick(&self, t: Micros) -> Micros {
        t.div_ceil(self.cfg.tick_us) * self.cfg.tick_us
    }

    fn run(&mut self) -> Result<(), SimError> {
        loop {
            self.step()?;
            if self.outstanding == 0 {
                return Ok(());
            }
            let Some(next) = self.next_time() else {
                return Err(SimError::DidNotDrain { now: self.now });
            };
            if next > self.cfg.max_time_us {
                return Err(SimError::DidNotDrain { now: self.now });
            }
            self.now = next;
        }
    }

    fn next_time(&self) -> Option<Micros> {
        let tick = self.cfg.tick_us;
        let mut next: Option<Micros> = None;
        let mut consider = |t: Micros| {
            next = Some(next.map_or(t, |n: Micros| n.min(t)));
        };
        if let Some(r) = self.reqs.get(self.next_arrival) {
            consider(self.ceil_tick(r.arrival_us));
        }
        for s in &self.cluster.servers {
            if let Some(e) = s.busy_until {
                consider(self.ceil_tick(e));
            }
        }
        if let Some(Reverse((t, _))) = self.transfers.peek() {
            consider(self.ceil_tick(*t));
        }
        let queued = !self.prefill_q.is_empty() || self.class_q.iter().any(|q| !q.is_empty());
        let autoscaling = self.sched.policy == Policy::Polyserve
            && self.cluster.servers.iter().any(|s| s.assignment != Assignment::Pool);
        if autoscaling {
            consider(self.next_autoscale);
        }
        if queued {
            consider(self.last_retry + self.sched.autoscale_period_us);
        }
        next.map(|t| t.max(self.now + tick))
    }

    fn step(&mut self) -> Result<(), SimError> {
        let now = self.now;
        // Arrivals.
        while let Some(r) = self.reqs.get(self.next_arrival) {
            if r.arrival_us > now {
                break;
            }
            let rid = self.next_arrival as u32;
            self.next_arrival += 1;
            self.arrive(rid)?;
        }
        // Iteration ends, chained.
        for id in 0..self.cluster.servers.len() {
            while let Some(end) = self.cluster.servers[id].busy_until {
                if end > now {
                    break;
                }
                self.commit(id, end)?;
                self.start(id, end)?;
            }
        }
        // KV transfers.
        while let Some(&Reverse((t, rid))) = self.transfers.peek() {
            if t > now {
                break;
            }
            self.transfers.pop();
            self.to_decode(rid)?;
        }
        // Retries and autoscale.
        let period = self.sched.autoscale_period_us;
        if self.dirty || now >= self.last_retry + period {
            self.retry_queues()?;
            self.last_retry = now;
            self.dirty = false;
        }
        if self.sched.policy == Policy::Polyserve && now >= self.next_autoscale {
            self.autoscale();
            self.next_autoscale = (now / period + 1) * period;
        }
        // Idle servers with work.
        for id in 0..self.cluster.servers.len() {
            if self.cluster.servers[id].is_idle() {
                self.start(id, now)?;
            }
        }
        if self.cfg.check_invariants {
            self.check_invariants()?;
        }
        if now >= self.next_sample {
            for s in &self.cluster.servers {
                self.timeline.push(TimelineSample {
                    time_us: now,
                    server: s.id,
                    assignment: s.assignment,
                    residents: s.residents.len() + s.prefill.len(),
                    kv: s.kv,
                });
            }
            self.next_sample = (now / self.cfg.timeline_period_us + 1) * self.cfg.timeline_period_us;
        }
        Ok(())
    }

    fn candidate(&self, rid: u32, decode: bool) -> Candidate {
        let r = &self.reqs[rid as usize];
        Candidate {
            rid,
            p: r.p,
            class: self.class_of(r),
            tpot_us: r.tpot_us(),
            ttft_deadline: r.token_deadline(0),
            next_deadline: r.token_deadline(if decode { 1 } else { 0 }),
            reserve: self.sched.reserve(r.p),
        }
    }

    fn arrive(&mut self, rid: u32) -> Result<(), SimError> {
        self.dirty = true;
        let r = &self.reqs[rid as usize];
        match (self.sched.policy, self.sched.arch) {
            (Policy::Polyserve, Arch::Pd) => {
                self.prefill_q.insert((r.token_deadline(0), rid));
            }
            (Policy::Polyserve, Arch::Co) => {
                let c = self.class_of(r);
                self.class_q[c].insert((r.token_deadline(0), rid));
            }
            (_, Arch::Pd) => self.route_baseline(rid, Stage::Prefill)?,
            (_, Arch::Co) => self.route_baseline(rid, Stage::Decode)?,
        }
        Ok(())
    }

    fn to_decode(&mut self, rid: u32) -> Result<(), SimError> {
        self.dirty = true;
        if self.sched.policy == Policy::Polyserve {
            let r = &self.reqs[rid as usize];
            let c = self.class_of(r);
            self.class_q[c].insert((r.token_deadline(1), rid));
            Ok(())
        } else {
            self.route_baseline(rid, Stage::Decode)
        }
    }

    fn notify(&mut self, cand: &Candidate, stage: Stage, d: &RoutingDecision) {
        if let Some(obs) = self.observer.as_mut() {
            obs.on_decision(&DecisionContext {
                now: self.now,
                cluster: &self.cluster,
                candidate: cand,
                stage,
                decision: d,
                model: self.model,
                cfg: self.sched,
            });
        }
    }

    fn route_baseline(&mut self, rid: u32, stage: Stage) -> Result<(), SimError> {
        let cand = self.candidate(rid, self.sched.arch == Arch::Pd);
        let d = route_baseline(&self.cluster, &cand, stage, self.now, self.model, self.sched);
        self.notify(&cand, stage, &d);
        match d.outcome {
            Outcome::Assign { server } => {
                let is_prefill = stage == Stage::Prefill;
                self.place(server, &cand, is_prefill, 0, false);
            }
            Outcome::Reject => self.reject(rid),
            _ => unreachable!("baselines always assign"),
        }
        Ok(())
    }

    fn reject(&mut self, rid: u32) {
        let st = &mut self.state[rid as usize];
        st.violated = true;
        st.done = true;
        st.finish = self.now;
        self.outstanding -= 1;
    }

    /// Puts a routed request on a server.
    fn place(&mut self, server: usize, cand: &Candidate, prefill: bool, chunk: u64, polyserve: bool) {
        let r = &self.reqs[cand.rid as usize];
        let s = &mut self.cluster.servers[server];
        if prefill {
            s.prefill.push_back(PrefillJob {
                rid: cand.rid,
                p: r.p,
                left: r.p,
                target: prefill_target(cand, self.sched),
            });
            s.reserved += r.p;
        } else {
            let co = self.sched.arch == Arch::Co;
            let res = Resident {
                rid: cand.rid,
                p: r.p,
                generated: 0,
                class: cand.class,
                tpot_us: cand.tpot_us,
                next_deadline: cand.next_deadline,
                prefill_left: if co { r.p } else { 0 },
                chunk: chunk.max(1),
                reserve: cand.reserve,
            };
            if polyserve {
                s.reserved += res.reserve;
                s.kv += res.footprint();
                s.residents.push(res);
            } else {
                s.waiting.push_back(res);
            }
        }
        s.touch();
        self.dirty = true;
    }

    fn set_assignment(&mut self, id: usize, to: Assignment) {
        let from = self.cluster.servers[id].assignment;
        if from == to {
            return;
        }
        self.cluster.set_assignment(id, to);
        self.events.push(ScalingEvent {
            time_us: self.now,
            server: id,
            from,
            to,
        });
        match (from.is_billed(), to.is_billed()) {
            (false, true) => self.billed_since[id] = Some(self.now),
            (true, false) => {
                if let Some(t) = self.billed_since[id].take() {
                    self.stats[id].assigned_us += self.now - t;
                }
            }
            _ => {}
        }
        self.dirty = true;
    }

    fn apply_polyserve(&mut self, cand: &Candidate, stage: Stage, d: &RoutingDecision) -> bool {
        let prefill = stage == Stage::Prefill;
        match d.outcome {
            Outcome::Queue => return false,
            Outcome::Reject => self.reject(cand.rid),
            Outcome::Assign { server } | Outcome::Promote { server, .. } => {
                self.place(server, cand, prefill, d.chunk, true)
            }
            Outcome::ScaleUpThenAssign { server, .. } => {
                let to = if prefill {
                    Assignment::Prefill
                } else {
                    Assignment::Tier(cand.class)
                };
                self.set_assignment(server, to);
                self.place(server, cand, prefill, d.chunk, true);
            }
        }
        true
    }

    fn retry_queues(&mut self) -> Result<(), SimError> {
        if self.sched.policy != Policy::Polyserve {
            return Ok(());
        }
        let decode = self.sched.arch == Arch::Pd;
        for c in 0..self.class_q.len() {
            // Deadline order; a blocked request lets up to `queue_lookahead`
            // queued requests behind it be tried.
            let mut blocked = 0;
            let mut after: Option<(Micros, u32)> = None;
            loop {
                let next = match after {
                    None => self.class_q[c].first(),
                    Some(k) => self.class_q[c].range((Excluded(k), Unbounded)).next(),
                };
                let Some(&(key, rid)) = next else {
                    break;
                };
                let cand = self.candidate(rid, decode);
                let d = route_polyserve(&self.cluster, &cand, self.now, self.model, self.sched);
                self.notify(&cand, Stage::Decode, &d);
                if self.apply_polyserve(&cand, Stage::Decode, &d) {
                    self.class_q[c].remove(&(key, rid));
                } else {
                    blocked += 1;
                    if blocked > self.sched.queue_lookahead {
                        break;
                    }
                    after = Some((key, rid));
                }
            }
        }
        while let Some(&(key, rid)) = self.prefill_q.first() {
            let cand = self.candidate(rid, false);
            let d = route_prefill_pd(&self.cluster, &cand, self.now, self.model, self.sched);
            self.notify(&cand, Stage::Prefill, &d);
            if !self.apply_polyserve(&cand, Stage::Prefill, &d) {
                break;
            }
            self.prefill_q.remove(&(key, rid));
        }
        Ok(())
    }

    fn autoscale(&mut self) {
        let pending: Vec<bool> = self.class_q.iter().map(|q| !q.is_empty()).collect();
        let actions = autoscale_tick(&self.cluster, &pending, self.sched);
        for a in actions {
            // Earlier actions in the same batch never invalidate later ones:
            // they touch distinct servers.
            self.set_assignment(a.server(), a.target());
            if let ScalingAction::Reassign { .. } = a {
                self.cluster.servers[a.server()].touch();
            }
        }
    }

    fn emit(&mut self, rid: u32, i: u64, at: Micros) {
        let r = &self.reqs[rid as usize];
        let st = &mut self.state[rid as usize];
        debug_assert_eq!(st.emitted, i);
        st.emitted += 1;
        if i == 0 {
            st.first_token = Some(at);
        }
        if at > r.token_deadline(i) {
            st.violated = true;
        }
        if self.cfg.record_tokens {
            self.tokens.push(TokenRecord {
                request_id: r.id,
                i,
                emit_us: at,
            });
        }
    }

    fn finish(&mut self, rid: u32, at: Micros) {
        let st = &mut self.state[rid as usize];
        st.done = true;
        st.finish = at;
        self.outstanding -= 1;
    }

    fn commit(&mut self, id: usize, end: Micros) -> Result<(), SimError> {
        let run = std::mem::take(&mut self.running[id]);
        self.stats[id].busy_us += end - run.start;
        self.stats[id].iterations += 1;
        self.cluster.servers[id].busy_until = None;
        self.dirty = true;
        if self.cluster.servers[id].assignment == Assignment::Prefill {
            // Disaggregated prefill: finished prompts emit their first token
            // and move to decode after the transfer delay.
            let mut finished = Vec::new();
            let s = &mut self.cluster.servers[id];
            s.prefill.retain(|j| {
                if j.left == 0 {
                    finished.push((j.rid, j.p));
                    false
                } else {
                    true
                }
            });
            for &(_, p) in &finished {
                s.reserved -= p;
            }
            s.kv = s.prefill.iter().map(|j| j.p - j.left).sum();
            s.touch();
            for (rid, _) in finished {
                self.emit(rid, 0, end);
                self.transfers.push(Reverse((end + self.sched.kv_transfer_us, rid)));
            }
            return Ok(());
        }
        let mut done = Vec::new();
        let mut first = Vec::new();
        let mut tokens = Vec::new();
        {
            let reqs = self.reqs;
            let s = &mut self.cluster.servers[id];
            for (idx, res) in s.residents.iter_mut().enumerate().take(run.n_at_start) {
                if let Some(&(_, _)) = run.chunks.iter().find(|c| c.0 == res.rid) {
                    if res.prefill_left == 0 {
                        first.push(res.rid);
                        let r = &reqs[res.rid as usize];
                        res.next_deadline = r.token_deadline(1);
                    }
                    continue;
                }
                if res.is_prefilling() {
                    continue;
                }
                res.generated += 1;
                tokens.push((res.rid, res.generated));
                let r = &reqs[res.rid as usize];
                res.next_deadline = r.token_deadline(res.generated + 1);
                if res.generated >= r.d_true {
                    done.push(idx);
                }
            }
        }
        for rid in first {
            self.emit(rid, 0, end);
        }
        for (rid, i) in tokens {
            self.emit(rid, i, end);
        }
        if !done.is_empty() {
            let s = &mut self.cluster.servers[id];
            let mut k = 0;
            let mut finished = Vec::with_capacity(done.len());
            let mut idx = 0;
            s.residents.retain(|r| {
                let keep = !(k < done.len() && done[k] == idx);
                if !keep {
                    k += 1;
                    finished.push((r.rid, r.reserve));
                }
                idx += 1;
                keep
            });
            for &(_, reserve) in &finished {
                s.reserved -= reserve;
            }
            for (rid, _) in finished {
                self.finish(rid, end);
            }
        }
        let s = &mut self.cluster.servers[id];
        s.kv = s.residents.iter().map(|r| r.footprint()).sum();
        s.touch();
        Ok(())
    }

    fn start(&mut self, id: usize, at: Micros) -> Result<(), SimError> {
        let cap = self.model.kv_capacity();
        let sched = self.sched;
        let s = &mut self.cluster.servers[id];
        if !s.is_idle() {
            return Ok(());
        }
        let (tokens, kv, chunk_tokens, chunks) = if s.assignment == Assignment::Prefill {
            let lefts: Vec<u64> = s.prefill.iter().map(|j| j.left).collect();
            let batch = form_prefill_batch(&lefts, sched.token_budget, sched.policy == Policy::Polyserve);
            if batch.is_empty() {
                return Ok(());
            }
            let mut tokens = 0;
            let mut kv = 0;
            let mut chunks = Vec::with_capacity(batch.len());
            for &(i, c) in &batch {
                let j = &mut s.prefill[i];
                kv += j.p - j.left + c;
                j.left -= c;
                tokens += c;
                chunks.push((j.rid, c));
            }
            s.kv = s.prefill.iter().map(|j| j.p - j.left).sum();
            (tokens, kv, tokens, chunks)
        } else {
            // Baseline admission under the memory reservation.
            while let Some(w) = s.waiting.front() {
                if s.reserved + w.reserve > cap {
                    break;
                }
                let w = s.waiting.pop_front().unwrap();
                s.reserved += w.reserve;
                s.residents.push(w);
            }
            let n_dec = s.residents.iter().filter(|r| !r.is_prefilling()).count() as u64;
            let mut chunks: Vec<(u32, u64)> = Vec::new();
            if sched.arch == Arch::Co {
                match sched.policy {
                    Policy::Polyserve => {
                        // The oldest prefill runs its planned chunk; later ones
                        // join while the iteration still fits the tightest
                        // resident TPOT.
                        let limit = s.residents.iter().map(|r| r.tpot_us).min().unwrap_or(0);
                        let mut kv: u64 = s.residents.iter().map(|r| r.footprint()).sum();
                        let mut total = 0;
                        for r in s.residents.iter().filter(|r| r.is_prefilling()) {
                            let c = r.chunk.max(1).min(r.prefill_left);
                            if !chunks.is_empty()
                                && (n_dec + total + c > sched.co_max_batch
                                    || self.model.iteration_time(n_dec + total + c, kv + n_dec + c, total + c) > limit)
                            {
                                break;
                            }
                            chunks.push((r.rid, c));
                            total += c;
                            kv += c;
                        }
                    }
                    Policy::ChunkStatic => {
                        let mut room = sched.token_budget.saturating_sub(n_dec);
                        for r in s.residents.iter().filter(|r| r.is_prefilling()) {
                            if room == 0 {
                                break;
                            }
                            let c = r.prefill_left.min(room);
                            chunks.push((r.rid, c));
                            room -= c;
                        }
                    }
                    Policy::Random | Policy::Minimal => {
                        let mut total = 0;
                        for r in s.residents.iter().filter(|r| r.is_prefilling()) {
                            if total > 0 && total + r.prefill_left > sched.baseline_prefill_cap {
                                break;
                            }
                            chunks.push((r.rid, r.prefill_left));
                            total += r.prefill_left;
                        }
                    }
                }
            }
            if n_dec == 0 && chunks.is_empty() {
                s.touch();
                return Ok(());
            }
            for &(rid, c) in &chunks {
                let r = s.residents.iter_mut().find(|r| r.rid == rid).unwrap();
                r.prefill_left -= c;
            }
            let chunk_tokens: u64 = chunks.iter().map(|c| c.1).sum();
            s.kv = s.residents.iter().map(|r| r.footprint()).sum();
            (n_dec + chunk_tokens, s.kv, chunk_tokens, chunks)
        };
        let n_dec = tokens - chunk_tokens;
        if s.kv + n_dec > cap {
            return Err(SimError::KvOverflow {
                server: id,
                kv: s.kv + n_dec,
                capacity: cap,
                now: at,
            });
        }
        let dur = self.model.iteration_time(tokens, kv, chunk_tokens);
        s.busy_until = Some(at + dur);
        s.touch();
        self.running[id] = Running {
            n_at_start: s.residents.len(),
            chunks,
            start: at,
        };
        Ok(())
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        let cap = self.model.kv_capacity();
        for s in &self.cluster.servers {
            if s.kv > cap {
                return Err(SimError::KvOverflow {
                    server: s.id,
                    kv: s.kv,
                    capacity: cap,
                    now: self.now,
                });
            }
            let tier = match s.assignment {
                Assignment::Tier(t) | Assignment::Pending(t) => t,
                _ => continue,
            };
            let tier_tpot = self.sched.class_tpot(tier);
            if let Some(r) = s.residents.iter().find(|r| r.tpot_us < tier_tpot) {
                return Err(SimError::Binning {
                    rid: self.reqs[r.rid as usize].id,
                    class: r.class,
                    server: s.id,
                    assignment: s.assignment,
                    now: self.now,
                });
            }
        }
        Ok(())
    }

    fn metrics(mut self, initial: Vec<Assignment>) -> RunMetrics {
        let end = self
            .state
            .iter()
            .map(|s| s.finish)
            .max()
            .unwrap_or(0)
            .max(self.now);
        for id in 0..self.stats.len() {
            if let Some(t) = self.billed_since[id].take() {
                self.stats[id].assigned_us += end - t;
            }
        }
        let n = self.reqs.len();
        let cutoff = (self.cfg.warmup_frac * n as f64).ceil() as usize;
        let mut per_tier: Vec<TierMetrics> = self
            .sched
            .tier_tpots
            .iter()
            .map(|&t| TierMetrics {
                tpot_us: t,
                measured: 0,
                attained: 0,
                attainment: 1.0,
            })
            .collect();
        let (mut measured, mut attained, mut violated, mut best_effort, mut attained_total) = (0, 0, 0, 0, 0);
        let mut outcomes = Vec::with_capacity(n);
        for (i, (r, st)) in self.reqs.iter().zip(&self.state).enumerate() {
            let ok = st.done && !st.violated && st.emitted == r.d_true + 1;
            let is_measured = i >= cutoff && r.tier.is_some();
            if r.tier.is_none() {
                best_effort += 1;
            } else if ok {
                attained_total += 1;
            }
            if is_measured {
                measured += 1;
                let t = &mut per_tier[r.tier.unwrap().id as usize];
                t.measured += 1;
                if ok {
                    attained += 1;
                    t.attained += 1;
                } else {
                    violated += 1;
                }
            }
            outcomes.push(RequestOutcome {
                id: r.id,
                tpot_us: r.tier.map(|t| t.tpot_us),
                measured: is_measured,
                attained: ok,
                first_token_us: st.first_token,
                finish_us: st.finish,
            });
        }
        for t in &mut per_tier {
            if t.measured > 0 {
                t.attainment = t.attained as f64 / t.measured as f64;
            }
        }
        let span = match (self.reqs.get(cutoff), self.reqs.last()) {
            (Some(a), Some(b)) => b.arrival_us - a.arrival_us,
            _ => 0,
        };
        let goodput_rps = if span == 0 {
            0.0
        } else {
            attained as f64 / (span as f64 / SEC as f64)
        };
        let instance_us: u128 = self.stats.iter().map(|s| s.assigned_us as u128).sum();
        let mut m = RunMetrics {
            submitted: n as u64,
            measured,
            attained,
            violated,
            best_effort,
            attainment: if measured == 0 {
                1.0
            } else {
                attained as f64 / measured as f64
            },
            per_tier,
            goodput_rps,
            attained_total,
            makespan_us: end,
            instance_us,
            cost_per_req: 0.0,
            prefill_instances: None,
            requests: outcomes,
            servers: self.stats,
            timeline: self.timeline,
            scaling_events: self.events,
            initial_assignment: initial,
            final_assignment: self.cluster.servers.iter().map(|s| s.assignment).collect(),
            tokens: self.cfg.record_tokens.then_some(self.tokens),
        };
        m.cost_per_req = cost_metrics(&m);
        m
    }
}
