//! Request streams: trace ingestion, synthetic length generators, SLO tier
//! assignment with an idle-server achievability filter, and Poisson arrivals.
//!
//! Every generator is a pure function of its inputs and seed.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf_model::PerfModel;
use crate::{Micros, MS, SEC};

/// Nominal SLO of best-effort requests, effectively unbounded.
pub const BEST_EFFORT_US: Micros = 12 * 3600 * SEC;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid tier distribution: {0}")]
    InvalidDistribution(String),
    #[error("arrival rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("split index {split} exceeds workload length {len}")]
    InvalidSplit { split: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An SLO assignment: a TPOT tier plus the request's TTFT. `id` is the
/// tier's position in the tpot-ascending tier set (0 = tightest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SloTier {
    pub id: u8,
    pub ttft_us: Micros,
    pub tpot_us: Micros,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_us: Micros,
    pub p: u64,
    /// True decode length. Only the simulator reads it; schedulers see a
    /// prediction.
    pub d_true: u64,
    /// `None` marks a best-effort request.
    pub tier: Option<SloTier>,
}

impl Request {
    pub fn ttft_us(&self) -> Micros {
        self.tier.map_or(BEST_EFFORT_US, |t| t.ttft_us)
    }

    pub fn tpot_us(&self) -> Micros {
        self.tier.map_or(BEST_EFFORT_US, |t| t.tpot_us)
    }

    /// Deadline of token `i` (token 0 is the first token).
    pub fn token_deadline(&self, i: u64) -> Micros {
        self.arrival_us
            .saturating_add(self.ttft_us())
            .saturating_add(i.saturating_mul(self.tpot_us()))
    }
}

/// Weighted choice over TPOT tiers and, independently, over TTFT values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierDistribution {
    /// `(tpot, probability)`, sorted tpot-ascending.
    pub tpot_tiers: Vec<(Micros, f64)>,
    /// `(ttft, probability)`, sorted ascending.
    pub ttft_choices: Vec<(Micros, f64)>,
}

fn validate_weights(name: &str, items: &[(Micros, f64)]) -> Result<(), WorkloadError> {
    if items.is_empty() {
        return Err(WorkloadError::InvalidDistribution(format!("{name} is empty")));
    }
    if items.iter().any(|&(v, p)| v == 0 || !(p >= 0.0) || !p.is_finite()) {
        return Err(WorkloadError::InvalidDistribution(format!(
            "{name} needs positive values and non-negative probabilities"
        )));
    }
    if !items.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(WorkloadError::InvalidDistribution(format!(
            "{name} values must be unique"
        )));
    }
    let sum: f64 = items.iter().map(|x| x.1).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(WorkloadError::InvalidDistribution(format!(
            "{name} probabilities sum to {sum}"
        )));
    }
    Ok(())
}

impl TierDistribution {
    pub fn new(
        mut tpot_tiers: Vec<(Micros, f64)>,
        mut ttft_choices: Vec<(Micros, f64)>,
    ) -> Result<Self, WorkloadError> {
        tpot_tiers.sort_by_key(|x| x.0);
        ttft_choices.sort_by_key(|x| x.0);
        validate_weights("tpot tiers", &tpot_tiers)?;
        validate_weights("ttft choices", &ttft_choices)?;
        if tpot_tiers.len() > u8::MAX as usize {
            return Err(WorkloadError::InvalidDistribution("too many tiers".into()));
        }
        Ok(Self {
            tpot_tiers,
            ttft_choices,
        })
    }

    /// TPOT tiers 20/30/50/100 ms at 10/20/30/40 %, TTFT uniform over
    /// 300/500/1000 ms.
    pub fn standard() -> Self {
        Self::new(
            vec![(20 * MS, 0.1), (30 * MS, 0.2), (50 * MS, 0.3), (100 * MS, 0.4)],
            vec![
                (300 * MS, 1.0 / 3.0),
                (500 * MS, 1.0 / 3.0),
                (1000 * MS, 1.0 / 3.0),
            ],
        )
        .expect("standard distribution is valid")
    }

    /// Same tiers with the tier probabilities reversed.
    pub fn inverted(&self) -> Self {
        let probs: Vec<f64> = self.tpot_tiers.iter().rev().map(|x| x.1).collect();
        Self {
            tpot_tiers: self
                .tpot_tiers
                .iter()
                .zip(probs)
                .map(|(&(t, _), p)| (t, p))
                .collect(),
            ttft_choices: self.ttft_choices.clone(),
        }
    }

    /// Tier mixture drawing from `other` with probability `w`. Both must
    /// share the same tiers; TTFT choices come from `self`.
    pub fn mixed(&self, other: &Self, w: f64) -> Result<Self, WorkloadError> {
        if self.tier_tpots() != other.tier_tpots() || !(0.0..=1.0).contains(&w) {
            return Err(WorkloadError::InvalidDistribution("mixture needs equal tiers and w in [0, 1]".into()));
        }
        let tiers = self
            .tpot_tiers
            .iter()
            .zip(&other.tpot_tiers)
            .map(|(&(t, a), &(_, b))| (t, (1.0 - w) * a + w * b))
            .collect::<Vec<_>>();
        let sum: f64 = tiers.iter().map(|x| x.1).sum();
        Self::new(tiers.into_iter().map(|(t, p)| (t, p / sum)).collect(), self.ttft_choices.clone())
    }

    pub fn tier_tpots(&self) -> Vec<Micros> {
        self.tpot_tiers.iter().map(|x| x.0).collect()
    }

    pub fn mean_ttft(&self) -> f64 {
        self.ttft_choices.iter().map(|&(t, p)| t as f64 * p).sum()
    }
}

/// Draws an index from `weights[from..]`, renormalised.
fn draw_from(rng: &mut impl Rng, weights: &[(Micros, f64)], from: usize) -> Option<usize> {
    let total: f64 = weights[from..].iter().map(|x| x.1).sum();
    if from >= weights.len() || total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate().skip(from) {
        if u < w.1 {
            return Some(i);
        }
        u -= w.1;
    }
    // Floating-point leftovers land on the last positive weight.
    (from..weights.len()).rev().find(|&i| weights[i].1 > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    LengthsCsv,
    LengthsJsonl,
}

#[derive(Debug, Deserialize)]
struct LengthRow {
    input_len: u64,
    output_len: u64,
}

/// Loads `(input_len, output_len)` pairs in file order. Zero lengths are
/// clamped to 1.
pub fn load_trace(path: impl AsRef<Path>, format: TraceFormat) -> Result<Vec<(u64, u64)>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    match format {
        TraceFormat::LengthsCsv => parse_lengths_csv(file),
        TraceFormat::LengthsJsonl => parse_lengths_jsonl(BufReader::new(file)),
    }
}

pub fn parse_lengths_csv(reader: impl Read) -> Result<Vec<(u64, u64)>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<LengthRow>() {
        let row = row.map_err(|e| WorkloadError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        out.push((row.input_len.max(1), row.output_len.max(1)));
    }
    Ok(out)
}

pub fn parse_lengths_jsonl(reader: impl BufRead) -> Result<Vec<(u64, u64)>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LengthRow = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push((row.input_len.max(1), row.output_len.max(1)));
    }
    Ok(out)
}

/// `n` pairs with each coordinate uniform on `[1, max]`.
pub fn synthesize_uniform(n: usize, max_in: u64, max_out: u64, seed: u64) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (
                rng.random_range(1..=max_in.max(1)),
                rng.random_range(1..=max_out.max(1)),
            )
        })
        .collect()
}

/// Named length generators. The two uniform presets match the synthetic
/// traces exactly; the others sample a piecewise-linear inverse CDF through
/// published 25/50/75/90/95/99th percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPreset {
    Uniform4096_1024,
    Uniform512_512,
    MooncakeConversation,
    MooncakeSynthetic,
    MooncakeToolagent,
    Lmsys,
    Sharegpt,
    Splitwise,
}

const PCTS: [f64; 6] = [0.25, 0.50, 0.75, 0.90, 0.95, 0.99];

impl LengthPreset {
    pub const ALL: [LengthPreset; 8] = [
        LengthPreset::Uniform4096_1024,
        LengthPreset::Uniform512_512,
        LengthPreset::MooncakeConversation,
        LengthPreset::MooncakeSynthetic,
        LengthPreset::MooncakeToolagent,
        LengthPreset::Lmsys,
        LengthPreset::Sharegpt,
        LengthPreset::Splitwise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LengthPreset::Uniform4096_1024 => "uniform_4096_1024",
            LengthPreset::Uniform512_512 => "uniform_512_512",
            LengthPreset::MooncakeConversation => "mooncake_conversation",
            LengthPreset::MooncakeSynthetic => "mooncake_synthetic",
            LengthPreset::MooncakeToolagent => "mooncake_toolagent",
            LengthPreset::Lmsys => "lmsys",
            LengthPreset::Sharegpt => "sharegpt",
            LengthPreset::Splitwise => "splitwise",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Input and output percentile rows.
    fn quantiles(&self) -> ([u64; 6], [u64; 6]) {
        match self {
            LengthPreset::Uniform4096_1024 => (
                [2047, 4093, 6149, 7377, 7785, 8108],
                [510, 1023, 1535, 1843, 1944, 2027],
            ),
            LengthPreset::Uniform512_512 => (
                [255, 511, 768, 921, 973, 1013],
                [256, 511, 768, 922, 973, 1014],
            ),
            LengthPreset::MooncakeConversation => (
                [2320, 6923, 15400, 27571, 39583, 85401],
                [159, 350, 472, 597, 698, 1136],
            ),
            LengthPreset::MooncakeSynthetic => (
                [277, 11587, 23286, 38737, 49009, 66458],
                [10, 68, 250, 390, 522, 768],
            ),
            LengthPreset::MooncakeToolagent => (
                [3228, 6346, 7468, 16818, 26175, 61824],
                [12, 30, 355, 506, 600, 890],
            ),
            LengthPreset::Lmsys => ([12, 28, 82, 301, 430, 750], [39, 140, 338, 512, 519, 853]),
            LengthPreset::Sharegpt => (
                [16, 36, 158, 818, 1613, 3421],
                [131, 280, 445, 682, 846, 1001],
            ),
            LengthPreset::Splitwise => (
                [396, 1019, 1186, 2735, 4083, 4142],
                [85, 130, 395, 425, 451, 601],
            ),
        }
    }

    /// Largest output length the preset can produce.
    pub fn max_output(&self) -> u64 {
        match self {
            LengthPreset::Uniform4096_1024 => 2048,
            LengthPreset::Uniform512_512 => 1024,
            _ => quantile_max(&self.quantiles().1),
        }
    }

    pub fn max_input(&self) -> u64 {
        match self {
            LengthPreset::Uniform4096_1024 => 8192,
            LengthPreset::Uniform512_512 => 1024,
            _ => quantile_max(&self.quantiles().0),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<(u64, u64)> {
        match self {
            LengthPreset::Uniform4096_1024 => synthesize_uniform(n, 8192, 2048, seed),
            LengthPreset::Uniform512_512 => synthesize_uniform(n, 1024, 1024, seed),
            _ => {
                let (qi, qo) = self.quantiles();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| {
                        let a = rng.random::<f64>();
                        let b = rng.random::<f64>();
                        (inverse_cdf(&qi, a), inverse_cdf(&qo, b))
                    })
                    .collect()
            }
        }
    }
}

/// Tail endpoint past the 99th percentile: extend by the 95→99 gap.
fn quantile_max(q: &[u64; 6]) -> u64 {
    q[5] + (q[5] - q[4])
}

fn inverse_cdf(q: &[u64; 6], u: f64) -> u64 {
    let mut xs = vec![0.0];
    xs.extend_from_slice(&PCTS);
    xs.push(1.0);
    let mut ys = vec![1.0];
    ys.extend(q.iter().map(|&v| v as f64));
    ys.push(quantile_max(q) as f64);
    let i = xs.partition_point(|&x| x <= u).clamp(1, xs.len() - 1);
    let t = (u - xs[i - 1]) / (xs[i] - xs[i - 1]);
    let v = ys[i - 1] + t * (ys[i] - ys[i - 1]);
    (v.round() as u64).max(1)
}

/// Whether a lone request on an idle instance can meet `(ttft, tpot)`.
pub fn achievable(model: &PerfModel, p: u64, d: u64, ttft_us: Micros, tpot_us: Micros) -> bool {
    model.solo_prefill_time(p) <= ttft_us && model.iteration_time(1, p + d, 0) <= tpot_us
}

fn assign_range(
    pairs: &[(u64, u64)],
    id_offset: u64,
    dist: &TierDistribution,
    model: &PerfModel,
    seed: u64,
) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(p, d))| {
            let mut tier = draw_from(&mut rng, &dist.tpot_tiers, 0);
            let mut ttft = draw_from(&mut rng, &dist.ttft_choices, 0);
            // Cascade infeasible draws to looser choices.
            while let Some(k) = ttft {
                if model.solo_prefill_time(p) <= dist.ttft_choices[k].0 {
                    break;
                }
                ttft = draw_from(&mut rng, &dist.ttft_choices, k + 1);
            }
            if ttft.is_some() {
                while let Some(t) = tier {
                    if model.iteration_time(1, p + d, 0) <= dist.tpot_tiers[t].0 {
                        break;
                    }
                    tier = draw_from(&mut rng, &dist.tpot_tiers, t + 1);
                }
            }
            let slo = match (tier, ttft) {
                (Some(t), Some(k)) => Some(SloTier {
                    id: t as u8,
                    ttft_us: dist.ttft_choices[k].0,
                    tpot_us: dist.tpot_tiers[t].0,
                }),
                _ => None,
            };
            Request {
                id: id_offset + i as u64,
                arrival_us: 0,
                p,
                d_true: d,
                tier: slo,
            }
        })
        .collect()
}

/// Draws an independent `(ttft, tpot)` for each pair. Draws a lone request
/// could not meet on an idle instance are redrawn from the looser choices;
/// when none remain the request becomes best-effort.
pub fn assign_slos(pairs: &[(u64, u64)], dist: &TierDistribution, model: &PerfModel, seed: u64) -> Vec<Request> {
    assign_range(pairs, 0, dist, model, seed)
}

/// Tiers the first `split` pairs with `dist_a` and the rest with `dist_b`.
pub fn burst_flip(
    pairs: &[(u64, u64)],
    split: usize,
    dist_a: &TierDistribution,
    dist_b: &TierDistribution,
    model: &PerfModel,
    seeds: (u64, u64),
) -> Result<Vec<Request>, WorkloadError> {
    if split > pairs.len() {
        return Err(WorkloadError::InvalidSplit {
            split,
            len: pairs.len(),
        });
    }
    let mut out = assign_range(&pairs[..split], 0, dist_a, model, seeds.0);
    out.extend(assign_range(&pairs[split..], split as u64, dist_b, model, seeds.1));
    Ok(out)
}

/// Fills arrivals from a Poisson process of `rate` requests per second,
/// quantised down to the 1 ms tick. Order is preserved.
pub fn generate_arrivals(mut requests: Vec<Request>, rate: f64, seed: u64) -> Result<Vec<Request>, WorkloadError> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(WorkloadError::InvalidRate(rate));
    }
    let exp = Exp::new(rate).map_err(|_| WorkloadError::InvalidRate(rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0f64;
    for r in &mut requests {
        t += exp.sample(&mut rng);
        let ms = (t * 1000.0).floor() as u64;
        r.arrival_us = ms * MS;
    }
    Ok(requests)
}

/// One line of the workload dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadRecord {
    pub id: u64,
    pub arrival_us: Micros,
    pub p: u64,
    pub d: u64,
    pub tier_ttft_us: Option<Micros>,
    pub tier_tpot_us: Option<Micros>,
}

pub fn write_workload_jsonl(requests: &[Request], mut out: impl Write) -> std::io::Result<()> {
    for r in requests {
        let rec = WorkloadRecord {
            id: r.id,
            arrival_us: r.arrival_us,
            p: r.p,
            d: r.d_true,
            tier_ttft_us: r.tier.map(|t| t.ttft_us),
            tier_tpot_us: r.tier.map(|t| t.tpot_us),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a workload dump, mapping each TPOT back to its tier in `tier_tpots`
/// (tpot-ascending).
pub fn read_workload_jsonl(reader: impl BufRead, tier_tpots: &[Micros]) -> Result<Vec<Request>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i as u64 + 1;
        let rec: WorkloadRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let tier = match (rec.tier_ttft_us, rec.tier_tpot_us) {
            (Some(ttft_us), Some(tpot_us)) => {
                let id = tier_tpots
                    .iter()
                    .position(|&t| t == tpot_us)
                    .ok_or_else(|| WorkloadError::Parse {
                        line: lineno,
                        message: format!("tpot {tpot_us}us is not a configured tier"),
                    })?;
                Some(SloTier {
                    id: id as u8,
                    ttft_us,
                    tpot_us,
                })
            }
            _ => None,
        };
        out.push(Request {
            id: rec.id,
            arrival_us: rec.arrival_us,
            p: rec.p.max(1),
            d_true: rec.d.max(1),
            tier,
        });
    }
    Ok(out)
}

/// Mean prompt and decode lengths.
pub fn mean_lengths(pairs: impl IntoIterator<Item = (u64, u64)>) -> (f64, f64) {
    let (mut n, mut sp, mut sd) = (0u64, 0u64, 0u64);
    for (p, d) in pairs {
        n += 1;
        sp += p;
        sd += d;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (sp as f64 / n as f64, sd as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf_model::AnalyticParams;

    #[test]
    fn csv_trace_roundtrip_rows() {
        let text = "input_len,output_len\n36,280\n16,131\n";
        assert_eq!(
            parse_lengths_csv(text.as_bytes()).unwrap(),
            vec![(36, 280), (16, 131)]
        );
    }

    #[test]
    fn empty_trace_is_empty() {
        assert!(parse_lengths_csv("".as_bytes()).unwrap().is_empty());
        assert!(parse_lengths_jsonl("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn zero_output_is_clamped() {
        let text = "input_len,output_len\n5,0\n";
        assert_eq!(parse_lengths_csv(text.as_bytes()).unwrap(), vec![(5, 1)]);
        let jl = "{\"input_len\": 0, \"output_len\": 0}\n";
        assert_eq!(parse_lengths_jsonl(jl.as_bytes()).unwrap(), vec![(1, 1)]);
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "input_len,output_len\n5,7\nfoo,2\n";
        match parse_lengths_csv(text.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let jl = "{\"input_len\": 1, \"output_len\": 2}\n{\"input_len\": 1}\n";
        match parse_lengths_jsonl(jl.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uniform_is_deterministic_and_bounded() {
        assert!(synthesize_uniform(0, 10, 10, 1).is_empty());
        let a = synthesize_uniform(500, 10, 3, 9);
        assert_eq!(a, synthesize_uniform(500, 10, 3, 9));
        assert!(a.iter().all(|&(p, d)| (1..=10).contains(&p) && (1..=3).contains(&d)));
    }

    #[test]
    fn uniform_mean_within_three_sigma() {
        let n = 100_000;
        let pairs = synthesize_uniform(n, 8192, 2048, 42);
        let (mp, _) = mean_lengths(pairs.iter().copied());
        // Discrete uniform on [1, 8192]: mean 4096.5, sd sqrt((8192^2 - 1) / 12).
        let sd = ((8192f64 * 8192.0 - 1.0) / 12.0).sqrt() / (n as f64).sqrt();
        assert!((mp - 4096.5).abs() < 3.0 * sd, "mean {mp}");
    }

    #[test]
    fn distribution_validation() {
        assert!(TierDistribution::new(vec![(10, 0.5)], vec![(10, 1.0)]).is_err());
        assert!(TierDistribution::new(vec![(10, 0.5), (10, 0.5)], vec![(10, 1.0)]).is_err());
        assert!(TierDistribution::new(vec![(10, 1.5), (20, -0.5)], vec![(10, 1.0)]).is_err());
        let d = TierDistribution::new(vec![(20, 0.5), (10, 0.5)], vec![(10, 1.0)]).unwrap();
        assert_eq!(d.tier_tpots(), vec![10, 20]);
    }

    #[test]
    fn inverted_reverses_probabilities() {
        let d = TierDistribution::standard().inverted();
        let probs: Vec<f64> = d.tpot_tiers.iter().map(|x| x.1).collect();
        assert_eq!(probs, vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!(d.tier_tpots(), TierDistribution::standard().tier_tpots());
    }

    #[test]
    fn half_mixture_is_flat() {
        let s = TierDistribution::standard();
        let m = s.mixed(&s.inverted(), 0.5).unwrap();
        assert!(m.tpot_tiers.iter().all(|x| (x.1 - 0.25).abs() < 1e-12));
        assert_eq!(s.mixed(&s.inverted(), 0.0).unwrap(), s);
        let other = TierDistribution::new(vec![(10, 1.0)], vec![(10, 1.0)]).unwrap();
        assert!(s.mixed(&other, 0.5).is_err());
    }

    #[test]
    fn infeasible_tier_becomes_best_effort() {
        // Lone-request iteration is 25 ms; only a 20 ms tier is offered.
        let params = AnalyticParams {
            g0_us: 25_000.0,
            g1_us: 0.0,
            b_knee: 1,
            d1_us: 0.0,
            pf1_us: 0.0,
            kv_capacity: 1_000_000,
        };
        let model = PerfModel::analytic(params).unwrap();
        let dist = TierDistribution::new(vec![(20 * MS, 1.0)], vec![(1000 * MS, 1.0)]).unwrap();
        let reqs = assign_slos(&[(100, 100)], &dist, &model, 1);
        assert_eq!(reqs[0].tier, None);
    }

    #[test]
    fn infeasible_draw_cascades_to_looser_tier() {
        let params = AnalyticParams {
            g0_us: 25_000.0,
            g1_us: 0.0,
            b_knee: 1,
            d1_us: 0.0,
            pf1_us: 0.0,
            kv_capacity: 1_000_000,
        };
        let model = PerfModel::analytic(params).unwrap();
        let dist = TierDistribution::new(
            vec![(20 * MS, 0.9), (30 * MS, 0.1)],
            vec![(1000 * MS, 1.0)],
        )
        .unwrap();
        let reqs = assign_slos(&vec![(100, 100); 200], &dist, &model, 5);
        assert!(reqs.iter().all(|r| r.tier.unwrap().tpot_us == 30 * MS));
    }

    #[test]
    fn assignment_is_deterministic() {
        let model = PerfModel::default();
        let pairs = synthesize_uniform(1000, 1024, 1024, 3);
        let dist = TierDistribution::standard();
        assert_eq!(
            assign_slos(&pairs, &dist, &model, 11),
            assign_slos(&pairs, &dist, &model, 11)
        );
    }

    #[test]
    fn assigned_tiers_are_achievable() {
        let model = PerfModel::default();
        let pairs = LengthPreset::MooncakeConversation.sample(2000, 3);
        let dist = TierDistribution::standard();
        let tpots = dist.tier_tpots();
        for r in assign_slos(&pairs, &dist, &model, 4) {
            if let Some(t) = r.tier {
                assert!(achievable(&model, r.p, r.d_true, t.ttft_us, t.tpot_us));
                assert_eq!(tpots[t.id as usize], t.tpot_us);
            }
        }
    }

    #[test]
    fn arrivals_rejects_bad_rate() {
        assert!(generate_arrivals(vec![], 0.0, 1).is_err());
        assert!(generate_arrivals(vec![], f64::NAN, 1).is_err());
    }

    #[test]
    fn arrivals_are_quantised_and_ordered() {
        let model = PerfModel::default();
        let reqs = assign_slos(&synthesize_uniform(1000, 100, 100, 1), &TierDistribution::standard(), &model, 1);
        let a = generate_arrivals(reqs.clone(), 50.0, 7).unwrap();
        assert!(a.windows(2).all(|w| w[0].arrival_us <= w[1].arrival_us));
        assert!(a.iter().all(|r| r.arrival_us % MS == 0));
        assert_eq!(a, generate_arrivals(reqs, 50.0, 7).unwrap());
    }

    #[test]
    fn burst_split_rejects_out_of_range() {
        let d = TierDistribution::standard();
        assert!(burst_flip(&[(1, 1)], 2, &d, &d, &PerfModel::default(), (1, 2)).is_err());
    }

    #[test]
    fn preset_quantile_sampler_tracks_median() {
        let pairs = LengthPreset::Sharegpt.sample(20_000, 8);
        let mut ins: Vec<u64> = pairs.iter().map(|x| x.0).collect();
        ins.sort_unstable();
        let med = ins[ins.len() / 2];
        assert!((30..=42).contains(&med), "median {med}");
        assert!(pairs.iter().all(|&(p, d)| p >= 1 && d >= 1));
    }

    #[test]
    fn workload_dump_roundtrip() {
        let model = PerfModel::default();
        let dist = TierDistribution::standard();
        let reqs = generate_arrivals(
            assign_slos(&synthesize_uniform(50, 512, 512, 1), &dist, &model, 2),
            10.0,
            3,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_workload_jsonl(&reqs, &mut buf).unwrap();
        let back = read_workload_jsonl(buf.as_slice(), &dist.tier_tpots()).unwrap();
        assert_eq!(back, reqs);
    }
}
