//! Routing and autoscaling decisions.
//!
//! Decision functions take an immutable [`Cluster`] view and return a
//! decision; the simulator applies it. Under the `polyserve` policy requests
//! are binned by TPOT tier, routed to the highest-load server that can still
//! meet their deadlines, and tiers grow and shrink one server at a time from
//! a shared pool. The `random`, `minimal` and `chunk_static` baselines ignore
//! tiers.

use std::cell::OnceCell;
use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::Arch;
use crate::perf_model::PerfModel;
use crate::workload::BEST_EFFORT_US;
use crate::{Micros, MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Polyserve,
    Random,
    Minimal,
    ChunkStatic,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Polyserve => "polyserve",
            Policy::Random => "random",
            Policy::Minimal => "minimal",
            Policy::ChunkStatic => "chunk_static",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Policy::Polyserve, Policy::Random, Policy::Minimal, Policy::ChunkStatic]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("token budget must be >= 1")]
    ZeroBudget,
    #[error("average decode length must be >= 1")]
    ZeroAvgDecode,
    #[error("max decode length {max} is below the average {avg}")]
    MaxBelowAvg { max: u64, avg: u64 },
    #[error("tier TPOTs must be non-empty, positive and strictly ascending")]
    BadTiers,
    #[error("autoscale period must be >= 1us")]
    ZeroPeriod,
    #[error("chunk_static is a co-located policy")]
    ChunkOnPd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub arch: Arch,
    /// Prefill token budget: dynamic chunking on PD prefill servers and the
    /// fixed budget of `chunk_static`.
    pub token_budget: u64,
    /// Cap on decode plus prefill tokens in one co-located polyserve
    /// iteration.
    pub co_max_batch: u64,
    /// Cap on whole prompts batched together by the unchunked baselines.
    pub baseline_prefill_cap: u64,
    /// Decode length predictor.
    pub avg_decode: u64,
    /// Upper bound on any decode length; sizes the per-request KV reservation.
    pub max_decode: u64,
    pub autoscale_period_us: Micros,
    pub kv_transfer_us: Micros,
    /// Queued requests tried past a blocked one in the same tier queue.
    pub queue_lookahead: usize,
    /// SLO tier TPOTs, ascending. Best-effort is an extra class after them.
    pub tier_tpots: Vec<Micros>,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Polyserve,
            arch: Arch::Pd,
            token_budget: 1024,
            co_max_batch: 8192,
            baseline_prefill_cap: 8192,
            avg_decode: 512,
            max_decode: 1024,
            autoscale_period_us: 10 * MS,
            kv_transfer_us: 0,
            queue_lookahead: 0,
            tier_tpots: vec![20 * MS, 30 * MS, 50 * MS, 100 * MS],
            seed: 0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.token_budget == 0 || self.co_max_batch == 0 || self.baseline_prefill_cap == 0 {
            return Err(ConfigError::ZeroBudget);
        }
        if self.avg_decode == 0 {
            return Err(ConfigError::ZeroAvgDecode);
        }
        if self.max_decode < self.avg_decode {
            return Err(ConfigError::MaxBelowAvg {
                max: self.max_decode,
                avg: self.avg_decode,
            });
        }
        if self.tier_tpots.is_empty()
            || self.tier_tpots[0] == 0
            || !self.tier_tpots.windows(2).all(|w| w[0] < w[1])
        {
            return Err(ConfigError::BadTiers);
        }
        if self.autoscale_period_us == 0 {
            return Err(ConfigError::ZeroPeriod);
        }
        if self.policy == Policy::ChunkStatic && self.arch == Arch::Pd {
            return Err(ConfigError::ChunkOnPd);
        }
        Ok(())
    }

    /// SLO tiers plus the best-effort class.
    pub fn n_classes(&self) -> usize {
        self.tier_tpots.len() + 1
    }

    pub fn best_effort_class(&self) -> usize {
        self.tier_tpots.len()
    }

    pub fn class_tpot(&self, class: usize) -> Micros {
        self.tier_tpots.get(class).copied().unwrap_or(BEST_EFFORT_US)
    }

    pub fn reserve(&self, p: u64) -> u64 {
        p + self.max_decode
    }
}

/// Predicted decode tokens still to come.
pub fn predicted_remaining(generated: u64, avg_d: u64) -> u64 {
    avg_d.saturating_sub(generated).max(1)
}

/// Chunks for a prompt of `p` tokens under dynamic chunking: full budgets
/// while at least twice the budget remains, then the whole remainder.
pub fn dynamic_chunk_plan(p: u64, budget: u64) -> Vec<u64> {
    assert!(p >= 1 && budget >= 1);
    let mut out = Vec::new();
    let mut rem = p;
    while rem >= 2 * budget {
        out.push(budget);
        rem -= budget;
    }
    out.push(rem);
    out
}

pub fn static_chunk_plan(p: u64, budget: u64) -> Vec<u64> {
    assert!(p >= 1 && budget >= 1);
    let mut out = Vec::new();
    let mut rem = p;
    while rem > 0 {
        let c = rem.min(budget);
        out.push(c);
        rem -= c;
    }
    out
}

/// One prefill iteration over a FIFO of remaining prompt lengths. Returns
/// `(queue index, tokens)` pairs.
///
/// Dynamic: a job at the head that has fewer than two budgets left runs
/// whole, and if that is at least one budget nothing else joins. Otherwise
/// whole jobs are packed while they fit. Static: budget-sized fill with
/// splitting.
pub fn form_prefill_batch(lefts: &[u64], budget: u64, dynamic: bool) -> Vec<(usize, u64)> {
    let mut out = Vec::new();
    let mut tokens = 0u64;
    for (i, &rem) in lefts.iter().enumerate() {
        if rem == 0 {
            continue;
        }
        if dynamic {
            if tokens == 0 {
                if rem >= 2 * budget {
                    out.push((i, budget));
                    break;
                }
                out.push((i, rem));
                tokens = rem;
                if rem >= budget {
                    break;
                }
            } else if tokens + rem <= budget {
                out.push((i, rem));
                tokens += rem;
            } else {
                break;
            }
        } else {
            let take = rem.min(budget - tokens);
            out.push((i, take));
            tokens += take;
            if tokens == budget {
                break;
            }
        }
    }
    out
}

/// Predicted KV totals of a set of decoding requests, each given as
/// `(footprint, predicted remaining)`. At `t` iterations ahead the total is
/// `Σ_{r_i >= t} (f_i + t)`; the total only grows between completions, so
/// every maximum is attained at some `r_j`.
#[derive(Debug, Clone)]
pub struct KvTrajectory {
    r: Vec<u64>,
    suf_f: Vec<u64>,
    /// `max_{j<k} (T(r_j) + r_j)`.
    pre_max_tr: Vec<u64>,
    /// `max_{j<k} T(r_j)`.
    pre_max_t: Vec<u64>,
    /// `max_{j>=k} T(r_j)`.
    suf_max_t: Vec<u64>,
}

impl Default for KvTrajectory {
    fn default() -> Self {
        Self::new([])
    }
}

impl KvTrajectory {
    pub fn new(items: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let mut v: Vec<(u64, u64)> = items.into_iter().map(|(f, r)| (r.max(1), f)).collect();
        v.sort_unstable();
        let n = v.len();
        let r: Vec<u64> = v.iter().map(|x| x.0).collect();
        let mut suf_f = vec![0u64; n + 1];
        for j in (0..n).rev() {
            suf_f[j] = suf_f[j + 1] + v[j].1;
        }
        let mut tr = Self {
            r,
            suf_f,
            pre_max_tr: vec![0; n + 1],
            pre_max_t: vec![0; n + 1],
            suf_max_t: vec![0; n + 1],
        };
        let t: Vec<u64> = (0..n).map(|j| tr.at(tr.r[j])).collect();
        for j in 0..n {
            tr.pre_max_tr[j + 1] = tr.pre_max_tr[j].max(t[j] + tr.r[j]);
            tr.pre_max_t[j + 1] = tr.pre_max_t[j].max(t[j]);
        }
        for j in (0..n).rev() {
            tr.suf_max_t[j] = tr.suf_max_t[j + 1].max(t[j]);
        }
        tr
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Total KV `t` iterations ahead.
    pub fn at(&self, t: u64) -> u64 {
        let k = self.r.partition_point(|&x| x < t);
        self.suf_f[k] + t * (self.r.len() - k) as u64
    }

    pub fn peak(&self) -> u64 {
        self.suf_max_t[0].max(self.suf_f[0])
    }

    /// Maximum total over `[0, t]`.
    pub fn max_upto(&self, t: u64) -> u64 {
        let k = self.r.partition_point(|&x| x <= t);
        self.pre_max_t[k].max(self.at(t)).max(self.suf_f[0])
    }

    /// Sequential `max_upto` for nondecreasing `t`.
    pub fn cursor(&self) -> UptoCursor<'_> {
        UptoCursor {
            traj: self,
            le: 0,
            lt: 0,
        }
    }

    /// Peak including one more request `(f, r)`.
    pub fn peak_with(&self, f: u64, r: u64) -> u64 {
        let r = r.max(1);
        let n = self.r.len();
        let k = self.r.partition_point(|&x| x <= r);
        let k2 = self.r.partition_point(|&x| x < r);
        let before = if k > 0 { self.pre_max_tr[k] + f } else { 0 };
        let after = self.suf_max_t[k];
        let own = f + r + self.suf_f[k2] + r * (n - k2) as u64;
        before.max(after).max(own)
    }
}

/// Walks [`KvTrajectory::max_upto`] forward in amortised constant time.
pub struct UptoCursor<'a> {
    traj: &'a KvTrajectory,
    /// First index with `r > t`.
    le: usize,
    /// First index with `r >= t`.
    lt: usize,
}

impl UptoCursor<'_> {
    /// Same as `max_upto(t)`; `t` must not decrease between calls.
    pub fn max_upto(&mut self, t: u64) -> u64 {
        let r = &self.traj.r;
        while self.le < r.len() && r[self.le] <= t {
            self.le += 1;
        }
        while self.lt < r.len() && r[self.lt] < t {
            self.lt += 1;
        }
        let at = self.traj.suf_f[self.lt] + t * (r.len() - self.lt) as u64;
        self.traj.pre_max_t[self.le].max(at).max(self.traj.suf_f[0])
    }
}

/// Predicted peak KV of `residents` plus a candidate, each as
/// `(footprint, generated)`.
pub fn predict_peak_kv(residents: &[(u64, u64)], candidate: (u64, u64), avg_d: u64) -> u64 {
    KvTrajectory::new(
        residents
            .iter()
            .map(|&(f, g)| (f, predicted_remaining(g, avg_d))),
    )
    .peak_with(candidate.0, predicted_remaining(candidate.1, avg_d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "class")]
pub enum Assignment {
    /// Idle in the shared pool; not billed.
    Pool,
    /// Serving an SLO class.
    Tier(usize),
    /// Closed to admissions, holding only promoted residents.
    Pending(usize),
    /// Disaggregated prefill group.
    Prefill,
    /// Fixed role under a baseline policy.
    Static,
}

impl Assignment {
    pub fn is_billed(&self) -> bool {
        !matches!(self, Assignment::Pool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resident {
    pub rid: u32,
    pub p: u64,
    /// Decode tokens emitted so far (the first token is not counted).
    pub generated: u64,
    pub class: usize,
    pub tpot_us: Micros,
    /// Deadline of the next token this request will emit.
    pub next_deadline: Micros,
    /// Prompt tokens not yet processed (co-located only).
    pub prefill_left: u64,
    /// Planned prefill chunk (co-located polyserve only).
    pub chunk: u64,
    pub reserve: u64,
}

impl Resident {
    pub fn footprint(&self) -> u64 {
        self.p - self.prefill_left + self.generated
    }

    pub fn is_prefilling(&self) -> bool {
        self.prefill_left > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillJob {
    pub rid: u32,
    pub p: u64,
    pub left: u64,
    /// Latest acceptable completion: TTFT deadline minus KV transfer.
    pub target: Micros,
}

#[derive(Debug, Clone, Default)]
struct ServerCache {
    traj: KvTrajectory,
    /// Prefill iterations queued ahead of a new co-located admission.
    ahead_iters: u64,
    ahead_time: Micros,
}

#[derive(Debug, Clone)]
pub struct Server {
    pub id: usize,
    pub assignment: Assignment,
    /// Acquisition order; unique across the cluster, so unique within a tier.
    pub ordinal: u64,
    pub residents: Vec<Resident>,
    /// Baseline local queue, admitted FCFS under the memory reservation.
    pub waiting: VecDeque<Resident>,
    pub prefill: VecDeque<PrefillJob>,
    /// KV tokens currently held.
    pub kv: u64,
    /// Sum of KV reservations of residents and queued prefills.
    pub reserved: u64,
    /// End of the running iteration.
    pub busy_until: Option<Micros>,
    cache: OnceCell<ServerCache>,
}

impl Server {
    pub fn new(id: usize, assignment: Assignment, ordinal: u64) -> Self {
        Self {
            id,
            assignment,
            ordinal,
            residents: Vec::new(),
            waiting: VecDeque::new(),
            prefill: VecDeque::new(),
            kv: 0,
            reserved: 0,
            busy_until: None,
            cache: OnceCell::new(),
        }
    }

    /// Drops cached predictions; call after any mutation.
    pub fn touch(&mut self) {
        self.cache.take();
    }

    pub fn is_idle(&self) -> bool {
        self.busy_until.is_none()
    }

    pub fn is_empty(&self) -> bool {
        self.residents.is_empty() && self.waiting.is_empty() && self.prefill.is_empty()
    }

    pub fn wait(&self, now: Micros) -> Micros {
        self.busy_until.map_or(0, |e| e.saturating_sub(now))
    }

    /// Tightest class among residents.
    pub fn tightest_class(&self) -> Option<usize> {
        self.residents.iter().map(|r| r.class).min()
    }

    fn cache(&self, model: &PerfModel, cfg: &SchedulerConfig) -> &ServerCache {
        self.cache.get_or_init(|| {
            let avg = cfg.avg_decode;
            let traj = KvTrajectory::new(self.residents.iter().map(|r| {
                let f = if r.is_prefilling() { r.p } else { r.footprint() };
                (f, predicted_remaining(r.generated, avg))
            }));
            let n = self.residents.len() as u64;
            let mut t = 0u64;
            let mut time = 0u64;
            let mut cur = traj.cursor();
            for r in self.residents.iter().filter(|r| r.is_prefilling()) {
                let c = r.chunk.max(1);
                let mut left = r.prefill_left;
                while left > 0 {
                    let ck = left.min(c);
                    time += model.iteration_time(n + ck, cur.max_upto(t), ck);
                    left -= ck;
                    t += 1;
                }
            }
            ServerCache {
                traj,
                ahead_iters: t,
                ahead_time: time,
            }
        })
    }

    pub fn trajectory(&self, model: &PerfModel, cfg: &SchedulerConfig) -> &KvTrajectory {
        &self.cache(model, cfg).traj
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub servers: Vec<Server>,
    pub next_ordinal: u64,
}

impl Cluster {
    /// All servers start in the pool (polyserve).
    pub fn pooled(n: usize) -> Self {
        Self {
            servers: (0..n).map(|i| Server::new(i, Assignment::Pool, 0)).collect(),
            next_ordinal: 1,
        }
    }

    /// Fixed roles: the first `n_prefill` servers prefill, the rest serve
    /// decode (or everything, co-located).
    pub fn fixed(n: usize, n_prefill: usize) -> Self {
        Self {
            servers: (0..n)
                .map(|i| {
                    let a = if i < n_prefill {
                        Assignment::Prefill
                    } else {
                        Assignment::Static
                    };
                    Server::new(i, a, i as u64 + 1)
                })
                .collect(),
            next_ordinal: n as u64 + 1,
        }
    }

    pub fn first_pool(&self) -> Option<usize> {
        self.servers
            .iter()
            .find(|s| s.assignment == Assignment::Pool)
            .map(|s| s.id)
    }

    /// Moves a server into `to`, assigning a fresh acquisition ordinal when
    /// it joins a tier or the prefill group.
    pub fn set_assignment(&mut self, id: usize, to: Assignment) {
        let s = &mut self.servers[id];
        if matches!(to, Assignment::Tier(_) | Assignment::Prefill) {
            s.ordinal = self.next_ordinal;
            self.next_ordinal += 1;
        }
        s.assignment = to;
    }

    pub fn apply(&mut self, action: &ScalingAction) {
        match *action {
            ScalingAction::Release { server, .. }
            | ScalingAction::PendingToPool { server }
            | ScalingAction::ReleasePrefill { server } => self.set_assignment(server, Assignment::Pool),
            ScalingAction::ToPending { server, class } => {
                self.set_assignment(server, Assignment::Pending(class))
            }
            ScalingAction::Reassign { server, class } | ScalingAction::ScaleUp { server, class } => {
                self.set_assignment(server, Assignment::Tier(class))
            }
            ScalingAction::ScaleUpPrefill { server } => self.set_assignment(server, Assignment::Prefill),
        }
    }

    /// Server with the highest ordinal among those assigned `a`.
    pub fn last_of(&self, a: Assignment) -> Option<usize> {
        self.servers
            .iter()
            .filter(|s| s.assignment == a)
            .max_by_key(|s| s.ordinal)
            .map(|s| s.id)
    }
}

/// A request as the router sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub rid: u32,
    pub p: u64,
    pub class: usize,
    pub tpot_us: Micros,
    pub ttft_deadline: Micros,
    /// Deadline of the next token it will emit.
    pub next_deadline: Micros,
    pub reserve: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Feasible,
    Memory,
    Tpot,
    Slack,
    Ttft,
    NoPrefillRoom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub verdict: Verdict,
    /// Predicted post-admit iteration time (the load).
    pub iter_us: Micros,
    pub wait_us: Micros,
    /// Planned prefill chunk (co-located only).
    pub chunk: u64,
}

impl Check {
    pub fn feasible(&self) -> bool {
        self.verdict == Verdict::Feasible
    }

    fn fail(verdict: Verdict, iter_us: Micros, wait_us: Micros) -> Self {
        Self {
            verdict,
            iter_us,
            wait_us,
            chunk: 0,
        }
    }
}

/// Admission test for a decoding request on a decode server of TPOT
/// `tier_tpot`: the post-admit iteration at the predicted KV peak fits the
/// tier, and the wait plus one iteration fits the next token's slack. The
/// slack test is waived for a request that would miss its next deadline
/// even on an idle server.
pub fn decode_feasible(
    server: &Server,
    cand: &Candidate,
    tier_tpot: Micros,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
) -> Check {
    let wait = server.wait(now);
    if server.reserved + cand.reserve > model.kv_capacity() {
        return Check::fail(Verdict::Memory, 0, wait);
    }
    let peak = server
        .trajectory(model, cfg)
        .peak_with(cand.p, predicted_remaining(0, cfg.avg_decode));
    if peak > model.kv_capacity() {
        return Check::fail(Verdict::Memory, 0, wait);
    }
    let iter = model.iteration_time(server.residents.len() as u64 + 1, peak, 0);
    if iter > tier_tpot {
        return Check::fail(Verdict::Tpot, iter, wait);
    }
    let doomed = cand.next_deadline < now + model.iteration_time(1, cand.p, 0);
    if !doomed && now + wait + iter > cand.next_deadline {
        return Check::fail(Verdict::Slack, iter, wait);
    }
    Check {
        verdict: Verdict::Feasible,
        iter_us: iter,
        wait_us: wait,
        chunk: 0,
    }
}

/// Whether every prefill iteration of the candidate with chunk `c` fits
/// `tier_tpot`. Iteration time is monotone in KV, so the last full chunk
/// and the tail bound all others.
fn co_prefill_fits(traj: &KvTrajectory, n: u64, t0: u64, p: u64, c: u64, tier_tpot: Micros, model: &PerfModel) -> bool {
    let (full, tail) = (p / c, p % c);
    if full > 0 {
        let k = full - 1;
        if model.iteration_time(n + c, traj.max_upto(t0 + k) + (k + 1) * c, c) > tier_tpot {
            return false;
        }
    }
    tail == 0 || model.iteration_time(n + tail, traj.max_upto(t0 + full) + p, tail) <= tier_tpot
}

/// Total predicted time of the candidate's prefill iterations with chunk `c`.
fn co_prefill_time(traj: &KvTrajectory, n: u64, t0: u64, p: u64, c: u64, model: &PerfModel) -> Micros {
    let mut total = 0;
    let mut done = 0;
    let mut t = t0;
    let mut cur = traj.cursor();
    while done < p {
        let ck = (p - done).min(c);
        total += model.iteration_time(n + ck, cur.max_upto(t) + done + ck, ck);
        done += ck;
        t += 1;
    }
    total
}

/// Admission test for a new request on a co-located server. Every queued
/// prefill runs one chunk per iteration, in admission order, and every
/// resident counts as a decoder. The candidate's chunk is the largest size
/// whose predicted prefill iterations all fit the tier TPOT as resident KV
/// grows; the prefill must also finish by the TTFT deadline (waived when
/// even an idle server could not), and the request must fit as a decoder
/// afterwards.
pub fn admit_co(
    server: &Server,
    cand: &Candidate,
    tier_tpot: Micros,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
) -> Check {
    let wait = server.wait(now);
    let cap = model.kv_capacity();
    if server.reserved + cand.reserve > cap {
        return Check::fail(Verdict::Memory, 0, wait);
    }
    let cache = server.cache(model, cfg);
    let traj = &cache.traj;
    let n = server.residents.len() as u64;
    let peak = traj.peak_with(cand.p, predicted_remaining(0, cfg.avg_decode));
    if peak > cap {
        return Check::fail(Verdict::Memory, 0, wait);
    }
    let iter = model.iteration_time(n + 1, peak, 0);
    if iter > tier_tpot {
        return Check::fail(Verdict::Tpot, iter, wait);
    }
    let room = cfg.co_max_batch.saturating_sub(n).min(cand.p);
    if room == 0 {
        return Check::fail(Verdict::NoPrefillRoom, iter, wait);
    }
    let t0 = cache.ahead_iters;
    let fits = |c: u64| co_prefill_fits(traj, n, t0, cand.p, c, tier_tpot, model);
    let chunk = if fits(room) {
        room
    } else {
        // Largest chunk that fits; the predicate is close to monotone.
        let (mut lo, mut hi) = (0u64, room);
        while lo + 1 < hi {
            let mid = lo + (hi - lo) / 2;
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if lo == 0 && !fits(1) {
            return Check::fail(Verdict::Tpot, iter, wait);
        }
        lo.max(1)
    };
    let ptime = co_prefill_time(traj, n, t0, cand.p, chunk, model);
    let doomed = cand.ttft_deadline < now + model.solo_prefill_time(cand.p);
    if !doomed && now + wait + cache.ahead_time + ptime > cand.ttft_deadline {
        return Check {
            verdict: Verdict::Ttft,
            iter_us: iter,
            wait_us: wait,
            chunk,
        };
    }
    Check {
        verdict: Verdict::Feasible,
        iter_us: iter,
        wait_us: wait,
        chunk,
    }
}

/// The polyserve admission predicate for the configured architecture.
pub fn polyserve_check(
    server: &Server,
    cand: &Candidate,
    tier_tpot: Micros,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
) -> Check {
    match cfg.arch {
        Arch::Pd => decode_feasible(server, cand, tier_tpot, now, model, cfg),
        Arch::Co => admit_co(server, cand, tier_tpot, now, model, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Outcome {
    Assign { server: usize },
    /// Acquire `server` (from the pool or the pending list) for the
    /// candidate's class, then assign.
    ScaleUpThenAssign { server: usize, from_pending: bool },
    Promote { server: usize, class: usize },
    Queue,
    /// Can never be admitted anywhere (reservation exceeds capacity).
    Reject,
}

impl Outcome {
    pub fn server(&self) -> Option<usize> {
        match *self {
            Outcome::Assign { server }
            | Outcome::ScaleUpThenAssign { server, .. }
            | Outcome::Promote { server, .. } => Some(server),
            Outcome::Queue | Outcome::Reject => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub outcome: Outcome,
    pub predicted_iter_us: Micros,
    pub predicted_wait_us: Micros,
    pub chunk: u64,
}

impl RoutingDecision {
    fn queue() -> Self {
        Self {
            outcome: Outcome::Queue,
            predicted_iter_us: 0,
            predicted_wait_us: 0,
            chunk: 0,
        }
    }

    fn reject() -> Self {
        Self {
            outcome: Outcome::Reject,
            ..Self::queue()
        }
    }

    fn with(outcome: Outcome, c: &Check) -> Self {
        Self {
            outcome,
            predicted_iter_us: c.iter_us,
            predicted_wait_us: c.wait_us,
            chunk: c.chunk,
        }
    }
}

/// Argmax-load feasible server among those assigned `a`, ties to the lower
/// ordinal.
pub fn best_in(
    cluster: &Cluster,
    a: Assignment,
    cand: &Candidate,
    tier_tpot: Micros,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
) -> Option<(usize, Check)> {
    let mut best: Option<(usize, u64, Check)> = None;
    for s in cluster.servers.iter().filter(|s| s.assignment == a) {
        let c = polyserve_check(s, cand, tier_tpot, now, model, cfg);
        if !c.feasible() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, ord, b)) => c.iter_us > b.iter_us || (c.iter_us == b.iter_us && s.ordinal < *ord),
        };
        if better {
            best = Some((s.id, s.ordinal, c));
        }
    }
    best.map(|(id, _, c)| (id, c))
}

/// Polyserve routing of a decode (PD) or new (CO) request: the highest-load
/// feasible server of its own class; else a server acquired for the class
/// (a pending-list server holding that class first, then the pool); else,
/// with the pool empty, the highest-load feasible server of a tighter class,
/// scanning from the loosest tighter class; else queue.
pub fn route_polyserve(
    cluster: &Cluster,
    cand: &Candidate,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
) -> RoutingDecision {
    if cand.reserve > model.kv_capacity() {
        return RoutingDecision::reject();
    }
    let home = cand.class;
    let home_tpot = cfg.class_tpot(home);
    if let Some((id, c)) = best_in(cluster, Assignment::Tier(home), cand, home_tpot, now, model, cfg) {
        return RoutingDecision::with(Outcome::Assign { server: id }, &c);
    }
    let mut best_pending: Option<(usize, Check)> = None;
    for s in &cluster.servers {
        if let Assignment::Pending(_) = s.assignment {
            if s.tightest_class() != Some(home) {
                continue;
            }
            let c = polyserve_check(s, cand, home_tpot, now, model, cfg);
            if c.feasible() && best_pending.as_ref().is_none_or(|(_, b)| c.iter_us > b.iter_us) {
                best_pending = Some((s.id, c));
            }
        }
    }
    if let Some((id, c)) = best_pending {
        return RoutingDecision::with(
            Outcome::ScaleUpThenAssign {
                server: id,
                from_pending: true,
            },
            &c,
        );
    }
    if let Some(id) = cluster.first_pool() {
        let c = polyserve_check(&cluster.servers[id], cand, home_tpot, now, model, cfg);
        // An idle server is the best this request can get; deadline misses
        // are accepted here rather than waiting.
        if matches!(c.verdict, Verdict::Feasible | Verdict::Slack | Verdict::Ttft) {
            return RoutingDecision::with(
                Outcome::ScaleUpThenAssign {
                    server: id,
                    from_pending: false,
                },
                &c,
            );
        }
        return RoutingDecision::queue();
    }
    for t in (0..home).rev() {
        if let Some((id, c)) = best_in(cluster, Assignment::Tier(t), cand, cfg.class_tpot(t), now, model, cfg) {
            return RoutingDecision::with(Outcome::Promote { server: id, class: t }, &c);
        }
    }
    RoutingDecision::queue()
}

/// Predicted completion times of a prefill server's queue, optionally with
/// one more job of `extra` tokens appended. Times are absolute.
pub fn prefill_completions(
    server: &Server,
    extra: Option<u64>,
    now: Micros,
    model: &PerfModel,
    budget: u64,
    dynamic: bool,
) -> Vec<Micros> {
    let mut left: Vec<u64> = server.prefill.iter().map(|j| j.left).collect();
    let mut done: Vec<u64> = server.prefill.iter().map(|j| j.p - j.left).collect();
    if let Some(p) = extra {
        left.push(p);
        done.push(0);
    }
    let start = now.max(server.busy_until.unwrap_or(now));
    let mut out = vec![start; left.len()];
    let mut t = start;
    loop {
        let batch = form_prefill_batch(&left, budget, dynamic);
        if batch.is_empty() {
            break;
        }
        let tokens: u64 = batch.iter().map(|x| x.1).sum();
        let kv: u64 = batch.iter().map(|&(i, c)| done[i] + c).sum();
        t += model.iteration_time(tokens, kv, tokens);
        for &(i, c) in &batch {
            left[i] -= c;
            done[i] += c;
            if left[i] == 0 {
                out[i] = t;
            }
        }
    }
    out
}

/// Evaluation of one prefill server for a new prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillCheck {
    pub feasible: bool,
    /// Predicted completion of the candidate (the load).
    pub completion: Micros,
}

/// Latest acceptable prefill completion: the TTFT deadline less the KV
/// transfer and, for tiered requests, one TPOT so the first decode token
/// can wait out a running iteration on its decode server.
pub fn prefill_target(cand: &Candidate, cfg: &SchedulerConfig) -> Micros {
    let margin = if cand.class < cfg.best_effort_class() { cand.tpot_us } else { 0 };
    cand.ttft_deadline.saturating_sub(cfg.kv_transfer_us + margin)
}

/// The candidate finishes by its target and every queued job that was on
/// time stays on time.
pub fn prefill_feasible(
    server: &Server,
    cand: &Candidate,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
    dynamic: bool,
) -> PrefillCheck {
    let with = prefill_completions(server, Some(cand.p), now, model, cfg.token_budget, dynamic);
    let completion = *with.last().expect("candidate appended");
    let target = prefill_target(cand, cfg);
    let mut feasible = completion <= target && server.reserved + cand.p <= model.kv_capacity();
    if feasible && !server.prefill.is_empty() {
        let base = prefill_completions(server, None, now, model, cfg.token_budget, dynamic);
        feasible = server
            .prefill
            .iter()
            .zip(base.iter().zip(&with))
            .all(|(j, (&b, &w))| b > j.target || w <= j.target);
    }
    PrefillCheck {
        feasible,
        completion,
    }
}

/// Polyserve PD prefill routing: the feasible prefill server with the latest
/// predicted completion; else a pool server; else, for a prompt that would
/// be late even alone, the server finishing it earliest; else queue.
pub fn route_prefill_pd(
    cluster: &Cluster,
    cand: &Candidate,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
) -> RoutingDecision {
    if cand.p > model.kv_capacity() {
        return RoutingDecision::reject();
    }
    let mut best: Option<(usize, u64, PrefillCheck)> = None;
    let mut earliest: Option<(usize, Micros)> = None;
    for s in cluster.servers.iter().filter(|s| s.assignment == Assignment::Prefill) {
        let c = prefill_feasible(s, cand, now, model, cfg, true);
        if s.reserved + cand.p <= model.kv_capacity() && earliest.is_none_or(|(_, e)| c.completion < e) {
            earliest = Some((s.id, c.completion));
        }
        if !c.feasible {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, ord, b)) => {
                c.completion > b.completion || (c.completion == b.completion && s.ordinal < *ord)
            }
        };
        if better {
            best = Some((s.id, s.ordinal, c));
        }
    }
    let decision = |outcome, completion: Micros| RoutingDecision {
        outcome,
        predicted_iter_us: completion.saturating_sub(now),
        predicted_wait_us: 0,
        chunk: 0,
    };
    if let Some((id, _, c)) = best {
        return decision(Outcome::Assign { server: id }, c.completion);
    }
    if let Some(id) = cluster.first_pool() {
        let c = prefill_feasible(&cluster.servers[id], cand, now, model, cfg, true);
        return decision(
            Outcome::ScaleUpThenAssign {
                server: id,
                from_pending: false,
            },
            c.completion,
        );
    }
    let target = prefill_target(cand, cfg);
    if target < now + model.solo_prefill_time(cand.p) {
        if let Some((id, e)) = earliest {
            return decision(Outcome::Assign { server: id }, e);
        }
    }
    RoutingDecision::queue()
}

/// Which servers a baseline routes a request to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prefill,
    Decode,
}

fn mix(seed: u64, rid: u32, stage: Stage) -> u64 {
    let mut z = seed ^ ((rid as u64) << 1 | (stage == Stage::Decode) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Post-admit iteration time on a baseline server, counting its local queue.
pub fn baseline_load(server: &Server, cand: &Candidate, model: &PerfModel) -> Micros {
    let n = (server.residents.len() + server.waiting.len()) as u64 + 1;
    let kv = server.kv + server.waiting.iter().map(|r| r.p).sum::<u64>() + cand.p;
    model.iteration_time(n, kv, 0)
}

/// Baseline routing. `random` picks uniformly (seeded per request),
/// `minimal` and `chunk_static` the lowest predicted load. Nothing is
/// binned by tier and every request is assigned.
pub fn route_baseline(
    cluster: &Cluster,
    cand: &Candidate,
    stage: Stage,
    now: Micros,
    model: &PerfModel,
    cfg: &SchedulerConfig,
) -> RoutingDecision {
    let role = match (cfg.arch, stage) {
        (Arch::Pd, Stage::Prefill) => Assignment::Prefill,
        _ => Assignment::Static,
    };
    let limit = match stage {
        Stage::Prefill => cand.p,
        Stage::Decode => cand.reserve,
    };
    if limit > model.kv_capacity() {
        return RoutingDecision::reject();
    }
    let eligible: Vec<&Server> = cluster.servers.iter().filter(|s| s.assignment == role).collect();
    if eligible.is_empty() {
        return RoutingDecision::queue();
    }
    let load = |s: &Server| match stage {
        Stage::Prefill => {
            prefill_completions(s, Some(cand.p), now, model, cfg.token_budget, false)
                .last()
                .copied()
                .unwrap_or(now)
                - now
        }
        Stage::Decode => baseline_load(s, cand, model),
    };
    let chosen = match cfg.policy {
        Policy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, cand.rid, stage));
            eligible[rng.random_range(0..eligible.len())]
        }
        _ => *eligible
            .iter()
            .min_by_key(|s| (load(s), s.id))
            .expect("non-empty"),
    };
    RoutingDecision {
        outcome: Outcome::Assign { server: chosen.id },
        predicted_iter_us: load(chosen),
        predicted_wait_us: chosen.wait(now),
        chunk: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum ScalingAction {
    ScaleUp { server: usize, class: usize },
    ScaleUpPrefill { server: usize },
    Release { server: usize, class: usize },
    ToPending { server: usize, class: usize },
    Reassign { server: usize, class: usize },
    PendingToPool { server: usize },
    ReleasePrefill { server: usize },
}

impl ScalingAction {
    pub fn server(&self) -> usize {
        match *self {
            ScalingAction::ScaleUp { server, .. }
            | ScalingAction::ScaleUpPrefill { server }
            | ScalingAction::Release { server, .. }
            | ScalingAction::ToPending { server, .. }
            | ScalingAction::Reassign { server, .. }
            | ScalingAction::PendingToPool { server }
            | ScalingAction::ReleasePrefill { server } => server,
        }
    }

    pub fn target(&self) -> Assignment {
        match *self {
            ScalingAction::ScaleUp { class, .. } | ScalingAction::Reassign { class, .. } => {
                Assignment::Tier(class)
            }
            ScalingAction::ScaleUpPrefill { .. } => Assignment::Prefill,
            ScalingAction::ToPending { class, .. } => Assignment::Pending(class),
            ScalingAction::Release { .. }
            | ScalingAction::PendingToPool { .. }
            | ScalingAction::ReleasePrefill { .. } => Assignment::Pool,
        }
    }
}

/// Scale-down check. For each class only the most recently acquired server
/// is examined: released to the pool when empty, moved to the pending list
/// when it holds no request of its own class. Pending servers that have
/// drained return to the pool; one whose tightest resident class has queued
/// work rejoins that class. The prefill group releases its last server when
/// it is idle.
pub fn autoscale_tick(cluster: &Cluster, pending_nonempty: &[bool], cfg: &SchedulerConfig) -> Vec<ScalingAction> {
    let mut out = Vec::new();
    for class in 0..cfg.n_classes() {
        let Some(id) = cluster.last_of(Assignment::Tier(class)) else {
            continue;
        };
        let s = &cluster.servers[id];
        if s.is_empty() && s.is_idle() {
            out.push(ScalingAction::Release { server: id, class });
        } else if !s.residents.iter().any(|r| r.class == class) && s.waiting.is_empty() {
            out.push(ScalingAction::ToPending { server: id, class });
        }
    }
    for s in &cluster.servers {
        if let Assignment::Pending(_) = s.assignment {
            if s.is_empty() && s.is_idle() {
                out.push(ScalingAction::PendingToPool { server: s.id });
            } else if let Some(c) = s.tightest_class() {
                if pending_nonempty.get(c).copied().unwrap_or(false) {
                    out.push(ScalingAction::Reassign { server: s.id, class: c });
                }
            }
        }
    }
    if let Some(id) = cluster.last_of(Assignment::Prefill) {
        let s = &cluster.servers[id];
        if s.is_empty() && s.is_idle() {
            out.push(ScalingAction::ReleasePrefill { server: id });
        }
    }
    out
}
