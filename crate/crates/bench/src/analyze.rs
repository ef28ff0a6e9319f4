//! Capacity and cost curves over a TPOT grid.

use std::io::Write;

use polysim_core::capacity::{sweep_curves, write_curves_csv, WorkloadPoint, DEFAULT_PREFILL_CAP};
use polysim_core::perf_model::PerfModel;
use polysim_core::{Micros, MS};

/// The default curve grid: TPOT from 10 to 100 ms in 5 ms steps, for the
/// `(p, d)` shapes given, at a TTFT of `ttft_us`.
pub fn default_grid(shapes: &[(u64, u64)], ttft_us: Micros) -> Vec<WorkloadPoint> {
    shapes
        .iter()
        .flat_map(|&(p, d)| {
            (2..=20).filter_map(move |k| WorkloadPoint::new(p, d, ttft_us, k * 5 * MS).ok())
        })
        .collect()
}

pub const DEFAULT_SHAPES: [(u64, u64); 2] = [(1000, 4000), (8000, 2000)];

pub fn analyze(model: &PerfModel, grid: &[WorkloadPoint], out: impl Write) -> std::io::Result<()> {
    write_curves_csv(&sweep_curves(model, grid, DEFAULT_PREFILL_CAP), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use polysim_core::capacity::CURVES_HEADER;
    use polysim_core::perf_model::AnalyticParams;

    fn model() -> PerfModel {
        PerfModel::analytic(AnalyticParams::default()).unwrap()
    }

    #[test]
    fn empty_grid_is_header_only() {
        let mut buf = Vec::new();
        analyze(&model(), &[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CURVES_HEADER);
    }

    #[test]
    fn anchor_rows_present() {
        let mut buf = Vec::new();
        analyze(&model(), &default_grid(&[(1000, 4000)], 1000 * MS), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for tpot in ["20000", "40000"] {
            let rows: Vec<&str> = text
                .lines()
                .filter(|l| l.split(',').nth(4) == Some(tpot) && l.contains(",1000,4000,"))
                .collect();
            assert!(rows.iter().any(|l| l.starts_with("pd,")), "{tpot}");
            assert!(rows.iter().any(|l| l.starts_with("co,")), "{tpot}");
        }
    }
}
