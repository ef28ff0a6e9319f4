//! Closed-form capacity math: the largest batch a serving instance can run
//! under TTFT, TPOT and KV-memory limits, and the per-request serving cost
//! that follows from it, for prefill-decode disaggregated (PD) and
//! co-located (CO) deployments.
//!
//! Strict `<` bounds are evaluated as `<=` on integer batch sizes, since all
//! durations are integer microseconds. Resident KV per decoding request is
//! the mean context `p + d/2`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf_model::PerfModel;
use crate::Micros;

/// Sentinel for "no bound" on TTFT or TPOT.
pub const UNBOUNDED: Micros = Micros::MAX;

/// Default prefill batch cap for disaggregated prefill instances.
pub const DEFAULT_PREFILL_CAP: u64 = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum CapacityError {
    #[error("invalid workload point: {0}")]
    InvalidPoint(String),
    #[error("{arch} {stage} batch is infeasible for p={p}, d={d}, ttft={ttft_us}us, tpot={tpot_us}us")]
    Infeasible {
        arch: Arch,
        stage: &'static str,
        p: u64,
        d: u64,
        ttft_us: Micros,
        tpot_us: Micros,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Pd,
    Co,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Pd => "pd",
            Arch::Co => "co",
        })
    }
}

/// Mean request shape plus its SLO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WorkloadPoint {
    pub p: u64,
    pub d: u64,
    pub ttft_us: Micros,
    pub tpot_us: Micros,
}

impl WorkloadPoint {
    pub fn new(p: u64, d: u64, ttft_us: Micros, tpot_us: Micros) -> Result<Self, CapacityError> {
        if p < 1 || d < 1 {
            return Err(CapacityError::InvalidPoint(format!(
                "p and d must be >= 1 (p={p}, d={d})"
            )));
        }
        if ttft_us == 0 || tpot_us == 0 {
            return Err(CapacityError::InvalidPoint(
                "ttft and tpot must be > 0".into(),
            ));
        }
        Ok(Self {
            p,
            d,
            ttft_us,
            tpot_us,
        })
    }

    fn infeasible(&self, arch: Arch, stage: &'static str) -> CapacityError {
        CapacityError::Infeasible {
            arch,
            stage,
            p: self.p,
            d: self.d,
            ttft_us: self.ttft_us,
            tpot_us: self.tpot_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Tpot,
    Ttft,
    Memory,
    NoneFeasible,
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Binding::Tpot => "tpot",
            Binding::Ttft => "ttft",
            Binding::Memory => "memory",
            Binding::NoneFeasible => "none_feasible",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchLimit {
    pub batch: u64,
    pub binding: Binding,
}

impl BatchLimit {
    const INFEASIBLE: BatchLimit = BatchLimit {
        batch: 0,
        binding: Binding::NoneFeasible,
    };
}

/// Largest `b` in `[1, hi]` with `pred(b)`, for a predicate that is true on
/// a prefix. Returns 0 when `pred(1)` fails.
fn last_true(hi: u64, pred: impl Fn(u64) -> bool) -> u64 {
    if hi == 0 || !pred(1) {
        return 0;
    }
    let (mut lo, mut hi) = (1u64, hi);
    while lo < hi {
        let mid = lo + (hi - lo + 1) / 2;
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Resident KV tokens of `b` decoding requests at mean context `p + d/2`.
pub fn pd_decode_kv(w: &WorkloadPoint, b: u64) -> u64 {
    (b * (2 * w.p + w.d)).div_ceil(2)
}

/// `GEMM(B) + DcAttn(B (p + d/2)) <= TPOT`.
pub fn pd_tpot_ok(model: &PerfModel, w: &WorkloadPoint, b: u64) -> bool {
    model.iteration_time(b, pd_decode_kv(w, b), 0) <= w.tpot_us
}

/// `B (p + d/2) <= C`.
pub fn pd_memory_ok(model: &PerfModel, w: &WorkloadPoint, b: u64) -> bool {
    pd_decode_kv(w, b) <= model.kv_capacity()
}

/// Largest decode batch on a disaggregated decode instance.
pub fn max_decode_batch_pd(model: &PerfModel, w: &WorkloadPoint) -> BatchLimit {
    let c = model.kv_capacity();
    let tpot_max = last_true(c, |b| pd_tpot_ok(model, w, b));
    let mem_max = last_true(c, |b| pd_memory_ok(model, w, b));
    let batch = tpot_max.min(mem_max);
    if batch == 0 {
        return BatchLimit::INFEASIBLE;
    }
    let binding = if !pd_tpot_ok(model, w, batch + 1) {
        Binding::Tpot
    } else {
        Binding::Memory
    };
    BatchLimit { batch, binding }
}

/// Resident KV for a co-located token batch `b`: the decode share's mean
/// context plus one prompt.
pub fn co_kv(w: &WorkloadPoint, b: u64) -> u64 {
    let num = w.d as u128 * (2 * w.p + w.d) as u128 * b as u128;
    let den = 2 * (w.p + w.d) as u128;
    num.div_ceil(den) as u64 + w.p
}

/// `T_iter = GEMM(B) + DcAttn(d/(p+d) B (p + d/2) + p)`.
pub fn co_iter_time(model: &PerfModel, w: &WorkloadPoint, b: u64) -> Micros {
    model.iteration_time(b, co_kv(w, b), 0)
}

pub fn co_tpot_ok(model: &PerfModel, w: &WorkloadPoint, b: u64) -> bool {
    co_iter_time(model, w, b) <= w.tpot_us
}

/// `N_iter * T_iter <= TTFT` with `N_iter = (p + d) / B`.
pub fn co_ttft_ok(model: &PerfModel, w: &WorkloadPoint, b: u64) -> bool {
    if b == 0 {
        return false;
    }
    if w.ttft_us == UNBOUNDED {
        return true;
    }
    let lhs = (w.p + w.d) as u128 * co_iter_time(model, w, b) as u128;
    lhs <= w.ttft_us as u128 * b as u128
}

pub fn co_memory_ok(model: &PerfModel, w: &WorkloadPoint, b: u64) -> bool {
    co_kv(w, b) <= model.kv_capacity()
}

/// Search ceiling for co-located token batches: the decode share of KV per
/// token is at least 3/4, so `2C` always exceeds the memory bound.
pub fn co_search_ceiling(model: &PerfModel) -> u64 {
    2 * model.kv_capacity()
}

/// Largest token batch on a co-located instance. TTFT feasibility is not
/// monotone in `B`, so candidates below the TPOT/memory bound are scanned.
pub fn max_token_batch_co(model: &PerfModel, w: &WorkloadPoint) -> BatchLimit {
    let hi = co_search_ceiling(model);
    let tpot_max = last_true(hi, |b| co_tpot_ok(model, w, b));
    let mem_max = last_true(hi, |b| co_memory_ok(model, w, b));
    let bound = tpot_max.min(mem_max);
    let Some(batch) = (1..=bound).rev().find(|&b| co_ttft_ok(model, w, b)) else {
        return BatchLimit::INFEASIBLE;
    };
    let binding = if batch < bound {
        Binding::Ttft
    } else if tpot_max <= mem_max {
        Binding::Tpot
    } else {
        Binding::Memory
    };
    BatchLimit { batch, binding }
}

/// Prefill batch for a disaggregated prefill instance: the largest token
/// batch up to `cap` whose iteration fits TTFT and memory.
pub fn prefill_batch_limit(model: &PerfModel, w: &WorkloadPoint, cap: u64) -> u64 {
    let hi = cap.min(model.kv_capacity());
    last_true(hi, |b| model.iteration_time(b, b, b) <= w.ttft_us)
}

/// Decode-attention work of one request over its whole decode: `d (p + d/2)`.
fn lifetime_decode_kv(w: &WorkloadPoint) -> u64 {
    (w.d * (2 * w.p + w.d)).div_ceil(2)
}

/// Per-request cost on a disaggregated deployment, in instance·µs:
/// `p GEMM(B_pf)/B_pf + PF(p) + d GEMM(B_dc)/B_dc + DcAttn(d (p + d/2))`.
pub fn cost_pd(model: &PerfModel, w: &WorkloadPoint, prefill_cap: u64) -> Result<f64, CapacityError> {
    let dc = max_decode_batch_pd(model, w);
    if dc.batch == 0 {
        return Err(w.infeasible(Arch::Pd, "decode"));
    }
    let pf = prefill_batch_limit(model, w, prefill_cap);
    if pf == 0 {
        return Err(w.infeasible(Arch::Pd, "prefill"));
    }
    Ok(w.p as f64 * model.gemm_time(pf) / pf as f64
        + model.prefill_attn_time(w.p)
        + w.d as f64 * model.gemm_time(dc.batch) / dc.batch as f64
        + model.decode_attn_time(lifetime_decode_kv(w)))
}

/// The prefill and decode parts of [`cost_pd`], in instance·µs.
pub fn cost_pd_parts(model: &PerfModel, w: &WorkloadPoint, prefill_cap: u64) -> Result<(f64, f64), CapacityError> {
    let total = cost_pd(model, w, prefill_cap)?;
    let pf = prefill_batch_limit(model, w, prefill_cap);
    let prefill = w.p as f64 * model.gemm_time(pf) / pf as f64 + model.prefill_attn_time(w.p);
    Ok((prefill, total - prefill))
}

/// Per-request cost on a co-located deployment, in instance·µs:
/// `(p + d) GEMM(B)/B + PF(p) + DcAttn(d (p + d/2))`.
pub fn cost_co(model: &PerfModel, w: &WorkloadPoint) -> Result<f64, CapacityError> {
    let lim = max_token_batch_co(model, w);
    if lim.batch == 0 {
        return Err(w.infeasible(Arch::Co, "token"));
    }
    Ok((w.p + w.d) as f64 * model.gemm_time(lim.batch) / lim.batch as f64
        + model.prefill_attn_time(w.p)
        + model.decode_attn_time(lifetime_decode_kv(w)))
}

/// One evaluated grid point, both architectures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub point: WorkloadPoint,
    pub pd: BatchLimit,
    pub co: BatchLimit,
    pub cost_pd: Option<f64>,
    pub cost_co: Option<f64>,
}

pub fn sweep_curves(model: &PerfModel, grid: &[WorkloadPoint], prefill_cap: u64) -> Vec<CurvePoint> {
    grid.iter()
        .map(|w| CurvePoint {
            point: *w,
            pd: max_decode_batch_pd(model, w),
            co: max_token_batch_co(model, w),
            cost_pd: cost_pd(model, w, prefill_cap).ok(),
            cost_co: cost_co(model, w).ok(),
        })
        .collect()
}

pub const CURVES_HEADER: &str = "arch,p,d,ttft_us,tpot_us,batch,binding,cost_instance_us";

fn fmt_bound(v: Micros) -> String {
    if v == UNBOUNDED {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

/// Writes two CSV lines per point (`pd` then `co`). Infeasible points carry
/// batch 0 and an empty cost.
pub fn write_curves_csv(points: &[CurvePoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CURVES_HEADER}")?;
    for pt in points {
        let w = &pt.point;
        for (arch, lim, cost) in [(Arch::Pd, pt.pd, pt.cost_pd), (Arch::Co, pt.co, pt.cost_co)] {
            let cost = cost.map(|c| format!("{c:.3}")).unwrap_or_default();
            writeln!(
                out,
                "{arch},{},{},{},{},{},{},{cost}",
                w.p,
                w.d,
                fmt_bound(w.ttft_us),
                fmt_bound(w.tpot_us),
                lim.batch,
                lim.binding
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf_model::AnalyticParams;
    use crate::MS;

    fn model() -> PerfModel {
        PerfModel::default()
    }

    #[test]
    fn pd_anchor_points() {
        let m = model();
        let w40 = WorkloadPoint::new(1000, 4000, 10_000 * MS, 40 * MS).unwrap();
        let w20 = WorkloadPoint::new(1000, 4000, 10_000 * MS, 20 * MS).unwrap();
        let b40 = max_decode_batch_pd(&m, &w40);
        let b20 = max_decode_batch_pd(&m, &w20);
        assert!((100..=200).contains(&b40.batch), "{b40:?}");
        assert!((30..=70).contains(&b20.batch), "{b20:?}");
        assert_eq!(b40.binding, Binding::Tpot);
    }

    #[test]
    fn pd_single_request_violation_is_infeasible() {
        let m = model();
        let t1 = m.iteration_time(1, 3000, 0);
        let w = WorkloadPoint::new(1000, 4000, UNBOUNDED, t1 - 1).unwrap();
        assert_eq!(max_decode_batch_pd(&m, &w), BatchLimit::INFEASIBLE);
    }

    #[test]
    fn co_tpot_below_floor_is_infeasible() {
        let m = model();
        let w = WorkloadPoint::new(100, 100, UNBOUNDED, 12 * MS).unwrap();
        assert_eq!(max_token_batch_co(&m, &w).batch, 0);
        assert!(cost_co(&m, &w).is_err());
    }

    #[test]
    fn co_unbounded_ttft_matches_tpot_memory_only() {
        let m = model();
        let w = WorkloadPoint::new(2000, 500, UNBOUNDED, 60 * MS).unwrap();
        let lim = max_token_batch_co(&m, &w);
        let hi = co_search_ceiling(&m);
        let expect = (1..=hi)
            .take_while(|&b| co_tpot_ok(&m, &w, b) && co_memory_ok(&m, &w, b))
            .last()
            .unwrap();
        assert_eq!(lim.batch, expect);
        assert_ne!(lim.binding, Binding::Ttft);
    }

    #[test]
    fn co_memory_dominated_point() {
        let params = AnalyticParams {
            kv_capacity: 80_000,
            ..AnalyticParams::default()
        };
        let m = PerfModel::analytic(params).unwrap();
        let w = WorkloadPoint::new(8000, 4000, 10_000 * MS, 100 * MS).unwrap();
        let lim = max_token_batch_co(&m, &w);
        assert_eq!(lim.binding, Binding::Memory);
        assert!(co_memory_ok(&m, &w, lim.batch));
        assert!(!co_memory_ok(&m, &w, lim.batch + 1));
        assert!(co_tpot_ok(&m, &w, lim.batch + 1));
    }

    #[test]
    fn cost_pd_degenerate_single_decode_token() {
        let m = model();
        let w = WorkloadPoint::new(500, 1, 1000 * MS, 50 * MS).unwrap();
        let dc = max_decode_batch_pd(&m, &w).batch;
        let pf = prefill_batch_limit(&m, &w, DEFAULT_PREFILL_CAP);
        let want = 500.0 * m.gemm_time(pf) / pf as f64
            + m.prefill_attn_time(500)
            + m.gemm_time(dc) / dc as f64
            + m.decode_attn_time(501); // ceil(500.5)
        assert!((cost_pd(&m, &w, DEFAULT_PREFILL_CAP).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn cost_pd_infeasible_decode() {
        let m = model();
        let w = WorkloadPoint::new(1000, 4000, 1000 * MS, 5 * MS).unwrap();
        assert!(matches!(
            cost_pd(&m, &w, DEFAULT_PREFILL_CAP),
            Err(CapacityError::Infeasible { stage: "decode", .. })
        ));
    }

    #[test]
    fn cost_co_superlinear_in_length_when_attention_dominates() {
        // Attention-heavy model: doubling p and d more than doubles cost.
        let params = AnalyticParams {
            g0_us: 1000.0,
            g1_us: 0.5,
            b_knee: 64,
            d1_us: 0.5,
            pf1_us: 0.0,
            kv_capacity: 100_000_000,
        };
        let m = PerfModel::analytic(params).unwrap();
        let a = WorkloadPoint::new(500, 500, UNBOUNDED, 500 * MS).unwrap();
        let b = WorkloadPoint::new(1000, 1000, UNBOUNDED, 500 * MS).unwrap();
        let ca = cost_co(&m, &a).unwrap();
        let cb = cost_co(&m, &b).unwrap();
        assert!(cb > 2.0 * ca, "{ca} {cb}");
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(WorkloadPoint::new(0, 1, 1, 1).is_err());
        assert!(WorkloadPoint::new(1, 0, 1, 1).is_err());
        assert!(WorkloadPoint::new(1, 1, 0, 1).is_err());
        assert!(WorkloadPoint::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn csv_has_two_lines_per_point_and_empty_cost_when_infeasible() {
        let m = model();
        let grid = [
            WorkloadPoint::new(1000, 4000, 1000 * MS, 40 * MS).unwrap(),
            WorkloadPoint::new(1000, 4000, 1000 * MS, 1 * MS).unwrap(),
        ];
        let pts = sweep_curves(&m, &grid, DEFAULT_PREFILL_CAP);
        assert_eq!(pts.len(), 2);
        let mut buf = Vec::new();
        write_curves_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], CURVES_HEADER);
        assert!(lines[3].starts_with("pd,1000,4000,1000000,1000,0,none_feasible,"));
        assert!(lines[3].ends_with(','));
    }
}
