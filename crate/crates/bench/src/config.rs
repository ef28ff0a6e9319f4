//! Experiment configuration, read from TOML. Every key has a default, so an
//! empty file is a valid config.

use std::path::{Path, PathBuf};

use polysim_core::capacity::Arch;
use polysim_core::perf_model::{load_profile, AnalyticParams, PerfModel};
use polysim_core::scheduler::{Policy, SchedulerConfig};
use polysim_core::sim::SimConfig;
use polysim_core::workload::{LengthPreset, TierDistribution, TraceFormat};
use polysim_core::{Micros, MS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    /// Length generators to run; ignored when `trace` is set.
    pub presets: Vec<String>,
    pub trace: Option<PathBuf>,
    pub trace_format: TraceFormat,
    pub requests: usize,
    pub tier_tpot_ms: Vec<u64>,
    pub tier_probs: Vec<f64>,
    pub ttft_ms: Vec<u64>,
    pub ttft_probs: Vec<f64>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            presets: vec!["uniform_512_512".into(), "uniform_4096_1024".into()],
            trace: None,
            trace_format: TraceFormat::LengthsCsv,
            requests: 10_000,
            tier_tpot_ms: vec![20, 30, 50, 100],
            tier_probs: vec![0.1, 0.2, 0.3, 0.4],
            ttft_ms: vec![300, 500, 1000],
            ttft_probs: vec![1.0 / 3.0; 3],
        }
    }
}

impl WorkloadSection {
    pub fn distribution(&self) -> Result<TierDistribution, ConfigError> {
        if self.tier_tpot_ms.len() != self.tier_probs.len() || self.ttft_ms.len() != self.ttft_probs.len() {
            return Err(ConfigError::Invalid(
                "tier and TTFT value lists must match their probability lists".into(),
            ));
        }
        TierDistribution::new(
            self.tier_tpot_ms.iter().map(|&t| t * MS).zip(self.tier_probs.iter().copied()).collect(),
            self.ttft_ms.iter().map(|&t| t * MS).zip(self.ttft_probs.iter().copied()).collect(),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn length_presets(&self) -> Result<Vec<LengthPreset>, ConfigError> {
        self.presets
            .iter()
            .map(|n| {
                LengthPreset::from_name(n).ok_or_else(|| ConfigError::Invalid(format!("unknown preset {n:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Profile CSV; the analytic model is used when unset.
    pub profile: Option<PathBuf>,
    pub analytic: AnalyticParams,
    /// Prefill attention and capacity for profile tables.
    pub pf1_us: f64,
    pub kv_capacity: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = AnalyticParams::default();
        Self {
            profile: None,
            pf1_us: a.pf1_us,
            kv_capacity: a.kv_capacity,
            analytic: a,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<PerfModel, ConfigError> {
        let r = match &self.profile {
            Some(p) => load_profile(p).and_then(|t| PerfModel::from_table(t, self.pf1_us, self.kv_capacity)),
            None => PerfModel::analytic(self.analytic),
        };
        r.map_err(|e| ConfigError::Invalid(format!("model: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub instances: usize,
    pub tick_us: Micros,
    pub warmup_frac: f64,
    pub pd_prefill_instances: Option<usize>,
    /// Instance counts for the server-scaling preset.
    pub instances_grid: Vec<usize>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            instances: 20,
            tick_us: MS,
            warmup_frac: 0.05,
            pd_prefill_instances: None,
            instances_grid: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub token_budget: u64,
    pub co_max_batch: u64,
    pub baseline_prefill_cap: u64,
    /// Decode length predictor; the workload mean when unset.
    pub avg_decode: Option<u64>,
    pub autoscale_period_ms: u64,
    pub kv_transfer_us: Micros,
    /// Queued requests tried past a blocked one in the same tier queue.
    pub queue_lookahead: usize,
    /// Budgets tried for `chunk_static`; the best per rate is reported.
    pub chunk_budgets: Vec<u64>,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            token_budget: 2048,
            co_max_batch: 8192,
            baseline_prefill_cap: 8192,
            avg_decode: None,
            autoscale_period_ms: 10,
            kv_transfer_us: 0,
            queue_lookahead: 0,
            chunk_budgets: vec![512, 1024, 2048, 4096],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub policies: Vec<Policy>,
    pub archs: Vec<Arch>,
    /// Offered load as fractions of the computed capacity.
    pub rate_fracs: Vec<f64>,
    /// Absolute rates (req/s); override `rate_fracs` when non-empty.
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    /// Extra rate steps appended to a sweep that still meets the threshold
    /// at its highest rate, so goodput is measured at a crossing.
    pub extend_steps: usize,
    /// Fraction of requests after which the tier distribution is inverted.
    pub burst_split: f64,
    pub out: PathBuf,
    pub svg: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            policies: vec![Policy::Polyserve, Policy::Random, Policy::Minimal, Policy::ChunkStatic],
            archs: vec![Arch::Pd, Arch::Co],
            rate_fracs: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2],
            rates: Vec::new(),
            seeds: vec![1, 2, 3],
            threshold: 0.9,
            extend_steps: 8,
            burst_split: 0.5,
            out: PathBuf::from("out"),
            svg: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub workload: WorkloadSection,
    pub model: ModelSection,
    pub cluster: ClusterSection,
    pub scheduler: SchedulerSection,
    pub experiment: ExperimentSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = self.experiment.clone();
        if e.policies.is_empty() {
            return Err(ConfigError::Invalid("policy list is empty".into()));
        }
        if e.archs.is_empty() {
            return Err(ConfigError::Invalid("architecture list is empty".into()));
        }
        let grid = if e.rates.is_empty() { &e.rate_fracs } else { &e.rates };
        if grid.is_empty() || grid.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(ConfigError::Invalid("rate grid must be non-empty and positive".into()));
        }
        if !grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(ConfigError::Invalid("rate grid must be sorted ascending".into()));
        }
        if e.seeds.is_empty() {
            return Err(ConfigError::Invalid("seed list is empty".into()));
        }
        if !(0.0..=1.0).contains(&e.burst_split) {
            return Err(ConfigError::Invalid("burst_split must be in [0, 1]".into()));
        }
        if self.cluster.instances == 0 || self.cluster.tick_us == 0 {
            return Err(ConfigError::Invalid("instances and tick must be >= 1".into()));
        }
        if self.scheduler.chunk_budgets.is_empty() || self.scheduler.chunk_budgets.contains(&0) {
            return Err(ConfigError::Invalid("chunk budgets must be non-empty and >= 1".into()));
        }
        self.workload.distribution()?;
        if self.workload.trace.is_none() {
            self.workload.length_presets()?;
        }
        self.model.build()?;
        Ok(())
    }

    /// Simulator config for one run. `avg_decode` and `max_decode` come from
    /// the workload.
    pub fn sim_config(&self, policy: Policy, arch: Arch, instances: usize, seed: u64, avg_d: u64, max_d: u64) -> SimConfig {
        let s = &self.scheduler;
        SimConfig {
            tick_us: self.cluster.tick_us,
            instances,
            sched: SchedulerConfig {
                policy,
                arch,
                token_budget: s.token_budget,
                co_max_batch: s.co_max_batch,
                baseline_prefill_cap: s.baseline_prefill_cap,
                avg_decode: s.avg_decode.unwrap_or(avg_d).max(1),
                max_decode: max_d.max(s.avg_decode.unwrap_or(avg_d)).max(1),
                autoscale_period_us: s.autoscale_period_ms.max(1) * MS,
                kv_transfer_us: s.kv_transfer_us,
                queue_lookahead: s.queue_lookahead,
                tier_tpots: self.workload.tier_tpot_ms.iter().map(|&t| t * MS).collect(),
                seed,
            },
            pd_prefill_instances: self.cluster.pd_prefill_instances,
            warmup_frac: self.cluster.warmup_frac,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = Config::parse("[cluster]\ninstances = 8\n[experiment]\npolicies = [\"polyserve\"]\n").unwrap();
        assert_eq!(c.cluster.instances, 8);
        assert_eq!(c.experiment.policies, vec![Policy::Polyserve]);
        assert!(Config::parse("[cluster]\ninstancez = 8\n").is_err());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Config::parse("[experiment]\nrate_fracs = [0.5, 0.2]\n").is_err());
        assert!(Config::parse("[experiment]\npolicies = []\n").is_err());
        assert!(Config::parse("[workload]\ntier_probs = [0.5, 0.5, 0.0, 0.1]\n").is_err());
        assert!(Config::parse("[workload]\npresets = [\"nope\"]\n").is_err());
    }
}
