//! Iteration-time prediction for a serving engine.
//!
//! The predicted quantity is the wall time of one engine iteration as a
//! function of the token batch size (decode tokens plus prefill chunk tokens),
//! the total KV-cache tokens resident on the instance, and the number of
//! prefill tokens in the chunk. Two back-ends exist:
//!
//! - [`AnalyticParams`]: piecewise-linear GEMM cost with a saturation knee,
//!   linear decode attention and a linear prefill-attention term.
//! - [`ProfileTable`]: a profiled `(batch, kv) -> time` grid, bilinearly
//!   interpolated and clamped to the grid edges. The prefill term is still
//!   added analytically.
//!
//! Both are monotone nondecreasing in every argument.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Micros;

#[derive(Debug, Error)]
pub enum PerfModelError {
    #[error("invalid model parameter: {0}")]
    InvalidParams(String),
    #[error("profile table is empty")]
    EmptyTable,
    #[error("profile axes must be strictly increasing ({axis} axis)")]
    UnsortedAxis { axis: &'static str },
    #[error("profile grid has {got} cells, expected {expected}")]
    GridShape { expected: usize, got: usize },
    #[error("profile grid is missing cell (batch_tokens={batch}, kv_tokens={kv})")]
    MissingCell { batch: u64, kv: u64 },
    #[error("profile grid has duplicate cell (batch_tokens={batch}, kv_tokens={kv}) at line {line}")]
    DuplicateCell { batch: u64, kv: u64, line: u64 },
    #[error(
        "profile grid is not monotone: time at (batch_tokens={batch}, kv_tokens={kv}) is {time}us, \
         below its neighbour (batch_tokens={prev_batch}, kv_tokens={prev_kv}) at {prev_time}us"
    )]
    NonMonotone {
        batch: u64,
        kv: u64,
        time: u64,
        prev_batch: u64,
        prev_kv: u64,
        prev_time: u64,
    },
    #[error("profile line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("reading profile: {0}")]
    Io(#[from] std::io::Error),
}

/// Coefficients of the analytic iteration-time model. All times are
/// microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticParams {
    /// Fixed iteration overhead and weight-load floor.
    pub g0_us: f64,
    /// Marginal GEMM cost per batched token above the knee.
    pub g1_us: f64,
    /// GEMM saturation knee in tokens; GEMM time is flat below it.
    pub b_knee: u64,
    /// Decode-attention cost per resident KV token.
    pub d1_us: f64,
    /// Prefill-attention cost per prefill token in the chunk.
    pub pf1_us: f64,
    /// KV-cache token capacity of one serving instance.
    pub kv_capacity: u64,
}

impl Default for AnalyticParams {
    /// Calibrated for an 8B-class model on one large-memory GPU: a lone
    /// request iterates in about 13 ms, a (1000, 4000) decode workload
    /// batches ~180 requests at 40 ms TPOT and ~46 at 20 ms, and the GEMM
    /// knee sits well below a 2048-token batch.
    fn default() -> Self {
        Self {
            g0_us: 13_000.0,
            g1_us: 20.0,
            b_knee: 256,
            d1_us: 0.05,
            pf1_us: 1.0,
            kv_capacity: 1_500_000,
        }
    }
}

impl AnalyticParams {
    pub fn validate(&self) -> Result<(), PerfModelError> {
        let durations = [
            ("g0_us", self.g0_us),
            ("g1_us", self.g1_us),
            ("d1_us", self.d1_us),
            ("pf1_us", self.pf1_us),
        ];
        for (name, v) in durations {
            if !v.is_finite() || v < 0.0 {
                return Err(PerfModelError::InvalidParams(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.b_knee < 1 {
            return Err(PerfModelError::InvalidParams("b_knee must be >= 1".into()));
        }
        if self.kv_capacity < 1 {
            return Err(PerfModelError::InvalidParams(
                "kv_capacity must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `g0 + g1 * max(0, B - knee)`, in microseconds.
    pub fn gemm_time(&self, batch_tokens: u64) -> f64 {
        self.g0_us + self.g1_us * batch_tokens.saturating_sub(self.b_knee) as f64
    }

    /// `d1 * kv`, in microseconds.
    pub fn decode_attn_time(&self, kv_tokens: u64) -> f64 {
        self.d1_us * kv_tokens as f64
    }
}

/// A profiled `(batch_tokens, kv_tokens) -> iteration time` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    batch_axis: Vec<u64>,
    kv_axis: Vec<u64>,
    /// Row-major: `times[b * kv_axis.len() + k]`.
    times: Vec<u64>,
}

impl ProfileTable {
    /// Builds a validated table. `times` is row-major over `batch_axis`.
    pub fn new(
        batch_axis: Vec<u64>,
        kv_axis: Vec<u64>,
        times: Vec<u64>,
    ) -> Result<Self, PerfModelError> {
        if batch_axis.is_empty() || kv_axis.is_empty() {
            return Err(PerfModelError::EmptyTable);
        }
        if !batch_axis.windows(2).all(|w| w[0] < w[1]) {
            return Err(PerfModelError::UnsortedAxis { axis: "batch" });
        }
        if !kv_axis.windows(2).all(|w| w[0] < w[1]) {
            return Err(PerfModelError::UnsortedAxis { axis: "kv" });
        }
        let expected = batch_axis.len() * kv_axis.len();
        if times.len() != expected {
            return Err(PerfModelError::GridShape {
                expected,
                got: times.len(),
            });
        }
        let table = Self {
            batch_axis,
            kv_axis,
            times,
        };
        table.check_monotone()?;
        Ok(table)
    }

    /// Grids `(batch, kv, time, line)` rows that may arrive in any order.
    fn from_rows(rows: Vec<(u64, u64, u64, u64)>) -> Result<Self, PerfModelError> {
        if rows.is_empty() {
            return Err(PerfModelError::EmptyTable);
        }
        let mut cells = BTreeMap::new();
        let mut batches = BTreeSet::new();
        let mut kvs = BTreeSet::new();
        for (batch, kv, time, line) in rows {
            if cells.insert((batch, kv), time).is_some() {
                return Err(PerfModelError::DuplicateCell { batch, kv, line });
            }
            batches.insert(batch);
            kvs.insert(kv);
        }
        let batch_axis: Vec<u64> = batches.into_iter().collect();
        let kv_axis: Vec<u64> = kvs.into_iter().collect();
        let mut times = Vec::with_capacity(batch_axis.len() * kv_axis.len());
        for &batch in &batch_axis {
            for &kv in &kv_axis {
                match cells.get(&(batch, kv)) {
                    Some(&t) => times.push(t),
                    None => return Err(PerfModelError::MissingCell { batch, kv }),
                }
            }
        }
        Self::new(batch_axis, kv_axis, times)
    }

    fn check_monotone(&self) -> Result<(), PerfModelError> {
        for (i, &batch) in self.batch_axis.iter().enumerate() {
            for (j, &kv) in self.kv_axis.iter().enumerate() {
                let time = self.get(i, j);
                let mut neighbours = Vec::with_capacity(2);
                if i > 0 {
                    neighbours.push((i - 1, j));
                }
                if j > 0 {
                    neighbours.push((i, j - 1));
                }
                for (pi, pj) in neighbours {
                    let prev_time = self.get(pi, pj);
                    if time < prev_time {
                        return Err(PerfModelError::NonMonotone {
                            batch,
                            kv,
                            time,
                            prev_batch: self.batch_axis[pi],
                            prev_kv: self.kv_axis[pj],
                            prev_time,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn batch_axis(&self) -> &[u64] {
        &self.batch_axis
    }

    pub fn kv_axis(&self) -> &[u64] {
        &self.kv_axis
    }

    /// Stored time at grid indices `(batch index, kv index)`.
    pub fn get(&self, bi: usize, ki: usize) -> u64 {
        self.times[bi * self.kv_axis.len() + ki]
    }

    pub fn min_time(&self) -> u64 {
        // Monotone along both axes, so the origin cell is the minimum.
        self.times[0]
    }

    /// Bilinear interpolation, clamped to the grid edges.
    pub fn lookup(&self, batch_tokens: u64, kv_tokens: u64) -> f64 {
        let (bi, bt) = locate(&self.batch_axis, batch_tokens);
        let (ki, kt) = locate(&self.kv_axis, kv_tokens);
        let bi1 = (bi + 1).min(self.batch_axis.len() - 1);
        let ki1 = (ki + 1).min(self.kv_axis.len() - 1);
        let v00 = self.get(bi, ki) as f64;
        let v01 = self.get(bi, ki1) as f64;
        let v10 = self.get(bi1, ki) as f64;
        let v11 = self.get(bi1, ki1) as f64;
        let lo = v00 * (1.0 - kt) + v01 * kt;
        let hi = v10 * (1.0 - kt) + v11 * kt;
        lo * (1.0 - bt) + hi * bt
    }
}

/// Segment index and fractional offset of `x` on a sorted axis, clamped.
fn locate(axis: &[u64], x: u64) -> (usize, f64) {
    if x <= axis[0] || axis.len() == 1 {
        return (0, 0.0);
    }
    let last = axis.len() - 1;
    if x >= axis[last] {
        return (last, 0.0);
    }
    // axis[i] <= x < axis[i + 1]
    let i = axis.partition_point(|&a| a <= x) - 1;
    let span = (axis[i + 1] - axis[i]) as f64;
    (i, (x - axis[i]) as f64 / span)
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    batch_tokens: u64,
    kv_tokens: u64,
    iter_time_us: u64,
}

/// Loads a profile CSV with header `batch_tokens,kv_tokens,iter_time_us`.
/// Rows may be unsorted; the grid must be a complete Cartesian product.
pub fn load_profile(path: impl AsRef<Path>) -> Result<ProfileTable, PerfModelError> {
    let file = std::fs::File::open(path)?;
    parse_profile(file)
}

pub fn parse_profile(reader: impl std::io::Read) -> Result<ProfileTable, PerfModelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PerfModelError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["batch_tokens", "kv_tokens", "iter_time_us"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(PerfModelError::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PerfModelError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: ProfileRow = rec.deserialize(Some(&headers)).map_err(|e| {
            PerfModelError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        rows.push((row.batch_tokens, row.kv_tokens, row.iter_time_us, line));
    }
    ProfileTable::from_rows(rows)
}

/// The iteration-time predictor used by the scheduler and the simulator.
#[derive(Debug, Clone, PartialEq)]
pub enum PerfModel {
    Analytic(AnalyticParams),
    Table {
        table: ProfileTable,
        /// Prefill-attention cost per chunk token, added on top of the grid.
        pf1_us: f64,
        kv_capacity: u64,
    },
}

impl Default for PerfModel {
    fn default() -> Self {
        PerfModel::Analytic(AnalyticParams::default())
    }
}

impl PerfModel {
    pub fn analytic(params: AnalyticParams) -> Result<Self, PerfModelError> {
        params.validate()?;
        Ok(PerfModel::Analytic(params))
    }

    pub fn from_table(
        table: ProfileTable,
        pf1_us: f64,
        kv_capacity: u64,
    ) -> Result<Self, PerfModelError> {
        if !pf1_us.is_finite() || pf1_us < 0.0 {
            return Err(PerfModelError::InvalidParams(format!(
                "pf1_us must be finite and >= 0, got {pf1_us}"
            )));
        }
        if kv_capacity < 1 {
            return Err(PerfModelError::InvalidParams(
                "kv_capacity must be >= 1".into(),
            ));
        }
        Ok(PerfModel::Table {
            table,
            pf1_us,
            kv_capacity,
        })
    }

    pub fn kv_capacity(&self) -> u64 {
        match self {
            PerfModel::Analytic(p) => p.kv_capacity,
            PerfModel::Table { kv_capacity, .. } => *kv_capacity,
        }
    }

    /// Predicted iteration time in microseconds; always at least 1.
    pub fn iteration_time(
        &self,
        batch_tokens: u64,
        kv_tokens: u64,
        prefill_chunk_tokens: u64,
    ) -> Micros {
        let t = match self {
            PerfModel::Analytic(p) => {
                p.gemm_time(batch_tokens)
                    + p.decode_attn_time(kv_tokens)
                    + p.pf1_us * prefill_chunk_tokens as f64
            }
            PerfModel::Table { table, pf1_us, .. } => {
                table.lookup(batch_tokens, kv_tokens) + pf1_us * prefill_chunk_tokens as f64
            }
        };
        (t.round() as Micros).max(1)
    }

    /// Batch-dependent part of the iteration, in microseconds.
    pub fn gemm_time(&self, batch_tokens: u64) -> f64 {
        match self {
            PerfModel::Analytic(p) => p.gemm_time(batch_tokens),
            PerfModel::Table { table, .. } => table.lookup(batch_tokens, table.kv_axis[0]),
        }
    }

    /// KV-dependent part of the iteration, in microseconds.
    pub fn decode_attn_time(&self, kv_tokens: u64) -> f64 {
        match self {
            PerfModel::Analytic(p) => p.decode_attn_time(kv_tokens),
            PerfModel::Table { table, .. } => {
                let b0 = table.batch_axis[0];
                table.lookup(b0, kv_tokens) - table.lookup(b0, table.kv_axis[0])
            }
        }
    }

    /// Prefill-attention time for `tokens` prompt tokens, in microseconds.
    pub fn prefill_attn_time(&self, tokens: u64) -> f64 {
        let pf1 = match self {
            PerfModel::Analytic(p) => p.pf1_us,
            PerfModel::Table { pf1_us, .. } => *pf1_us,
        };
        pf1 * tokens as f64
    }

    /// Smallest iteration the model can produce.
    pub fn floor(&self) -> Micros {
        self.iteration_time(0, 0, 0)
    }

    /// Time to prefill a lone `p`-token prompt on an idle instance in one
    /// pass.
    pub fn solo_prefill_time(&self, p: u64) -> Micros {
        self.iteration_time(p, p, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(g0: f64, g1: f64, knee: u64, d1: f64) -> AnalyticParams {
        AnalyticParams {
            g0_us: g0,
            g1_us: g1,
            b_knee: knee,
            d1_us: d1,
            pf1_us: 0.0,
            kv_capacity: 10_000_000,
        }
    }

    #[test]
    fn gemm_time_piecewise() {
        let p = params(10_000.0, 5.0, 256, 0.0);
        assert_eq!(p.gemm_time(0), 10_000.0);
        assert_eq!(p.gemm_time(256), 10_000.0);
        // 10ms + 5us * 1024
        assert_eq!(p.gemm_time(1280), 15_120.0);
        assert!(p.gemm_time(1281) > p.gemm_time(1280));
    }

    #[test]
    fn decode_attn_linear() {
        let p = params(0.0, 0.0, 1, 0.002);
        assert_eq!(p.decode_attn_time(0), 0.0);
        assert!((p.decode_attn_time(1_000_000) - 2_000.0).abs() < 1e-9);
        assert!((p.decode_attn_time(500_000) - 1_000.0).abs() < 1e-9);
    }

    #[test]
    fn default_floor_near_fifteen_ms() {
        let m = PerfModel::default();
        let t = m.iteration_time(1, 1, 0);
        // A lone request with a one-token context, within 15% of 15 ms.
        assert!((12_750..=17_250).contains(&t), "got {t}");
    }

    #[test]
    fn degenerate_floor_matches_params() {
        let p = AnalyticParams::default();
        let m = PerfModel::Analytic(p);
        let want = (p.g0_us + p.d1_us + p.pf1_us).round() as u64;
        assert_eq!(m.iteration_time(1, 1, 1), want);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = AnalyticParams::default();
        p.b_knee = 0;
        assert!(PerfModel::analytic(p).is_err());
        let mut p = AnalyticParams::default();
        p.d1_us = -1.0;
        assert!(PerfModel::analytic(p).is_err());
        let mut p = AnalyticParams::default();
        p.kv_capacity = 0;
        assert!(PerfModel::analytic(p).is_err());
    }

    #[test]
    fn table_single_cell() {
        let t = ProfileTable::new(vec![8], vec![100], vec![20_000]).unwrap();
        let m = PerfModel::from_table(t, 0.0, 1000).unwrap();
        assert_eq!(m.iteration_time(8, 100, 0), 20_000);
        // clamped outside the grid
        assert_eq!(m.iteration_time(1, 1, 0), 20_000);
        assert_eq!(m.iteration_time(1000, 1000, 0), 20_000);
    }

    #[test]
    fn table_linear_midpoint() {
        let t = ProfileTable::new(vec![8, 16], vec![100], vec![20_000, 30_000]).unwrap();
        let m = PerfModel::from_table(t, 0.0, 1000).unwrap();
        assert_eq!(m.iteration_time(12, 100, 0), 25_000);
    }

    #[test]
    fn table_prefill_term_is_added() {
        let t = ProfileTable::new(vec![8], vec![100], vec![20_000]).unwrap();
        let m = PerfModel::from_table(t, 2.0, 1000).unwrap();
        assert_eq!(m.iteration_time(8, 100, 10), 20_020);
    }

    #[test]
    fn table_rejects_empty_and_bad_shapes() {
        assert!(matches!(
            ProfileTable::new(vec![], vec![1], vec![]),
            Err(PerfModelError::EmptyTable)
        ));
        assert!(matches!(
            ProfileTable::new(vec![2, 1], vec![1], vec![1, 2]),
            Err(PerfModelError::UnsortedAxis { .. })
        ));
        assert!(matches!(
            ProfileTable::new(vec![1, 2], vec![1], vec![1]),
            Err(PerfModelError::GridShape { .. })
        ));
    }

    #[test]
    fn parse_unsorted_complete_grid() {
        let csv = "batch_tokens,kv_tokens,iter_time_us\n\
                   16,2000,40\n8,1000,10\n16,1000,30\n8,2000,20\n";
        let t = parse_profile(csv.as_bytes()).unwrap();
        assert_eq!(t.batch_axis(), &[8, 16]);
        assert_eq!(t.kv_axis(), &[1000, 2000]);
        assert_eq!(t.get(1, 1), 40);
    }

    #[test]
    fn parse_reports_missing_cell() {
        let csv = "batch_tokens,kv_tokens,iter_time_us\n8,1000,10\n16,1000,30\n8,2000,20\n";
        match parse_profile(csv.as_bytes()) {
            Err(PerfModelError::MissingCell { batch, kv }) => {
                assert_eq!((batch, kv), (16, 2000));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_reports_non_monotone() {
        let mut csv = String::from("batch_tokens,kv_tokens,iter_time_us\n");
        for (i, b) in [1u64, 2, 3].iter().enumerate() {
            for (j, k) in [10u64, 20, 30].iter().enumerate() {
                let mut t = 100 + 10 * i as u64 + j as u64;
                if i == 2 && j == 2 {
                    t = 50;
                }
                csv.push_str(&format!("{b},{k},{t}\n"));
            }
        }
        match parse_profile(csv.as_bytes()) {
            Err(PerfModelError::NonMonotone { batch, kv, .. }) => assert_eq!((batch, kv), (3, 30)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_reports_bad_line() {
        let csv = "batch_tokens,kv_tokens,iter_time_us\n8,1000,10\n8,x,20\n";
        match parse_profile(csv.as_bytes()) {
            Err(PerfModelError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_wrong_header() {
        let csv = "b,k,t\n1,1,1\n";
        assert!(matches!(
            parse_profile(csv.as_bytes()),
            Err(PerfModelError::Parse { line: 1, .. })
        ));
    }
}
