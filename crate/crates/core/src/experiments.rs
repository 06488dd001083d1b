//! Multi-run studies: QPS sweeps, SLO-scale throughput curves and the two
//! ablations, plus their CSV shapes. Runs are independent and execute in
//! parallel; results come back in input order.

use crate::config::RunConfig;
use crate::costmodel::CostProfile;
use crate::engine::{self, EngineError};
use crate::metrics::{aggregate, max_throughput_under_slo, p90_within, MetricsReport, SearchOutcome, Summary};
use crate::types::{Modality, Request, SloConfig, SloError};
use crate::workload::{generate, BurstSpec, DatasetProfile, WorkloadError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Load used to measure light-load latency for the SLO reference.
pub const LIGHT_QPS: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Slo(#[from] SloError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

/// How traces are produced for a given load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dataset: DatasetProfile,
    pub horizon: f64,
    pub seed: u64,
    pub bursts: Vec<BurstSpec>,
}

impl Scenario {
    pub fn new(dataset: DatasetProfile, horizon: f64, seed: u64) -> Self {
        Scenario { dataset, horizon, seed, bursts: Vec::new() }
    }

    /// Alternating bursts: multimodal traffic surges early, text later.
    pub fn bursty(dataset: DatasetProfile, horizon: f64, seed: u64) -> Self {
        let burst = |from: f64, target| BurstSpec {
            start_time: horizon * from,
            duration: horizon * 0.2,
            rate_multiplier: 3.0,
            modality_target: Some(target),
        };
        Scenario { dataset, horizon, seed, bursts: vec![burst(0.15, Modality::Multimodal), burst(0.6, Modality::TextOnly)] }
    }

    pub fn trace(&self, qps: f64) -> Result<Vec<Request>, WorkloadError> {
        self.trace_with_seed(qps, self.seed)
    }

    pub fn trace_with_seed(&self, qps: f64, seed: u64) -> Result<Vec<Request>, WorkloadError> {
        generate(&self.dataset, qps, self.horizon, seed, &self.bursts)
    }
}

pub fn simulate(trace: &[Request], cfg: &RunConfig, prof: &CostProfile, slo: Option<SloConfig>, seed: u64) -> Result<MetricsReport, EngineError> {
    let out = engine::run(trace, cfg, prof, seed)?;
    Ok(aggregate(&out, slo))
}

/// SLO reference: mean normalized latencies of the coupled baseline at
/// light load, times ten, times `scale`.
pub fn calibrate_slo(scenario: &Scenario, prof: &CostProfile, scale: f64) -> Result<SloConfig, ExperimentError> {
    let light = Scenario { bursts: Vec::new(), horizon: scenario.horizon.max(240.0), ..scenario.clone() };
    let trace = light.trace(LIGHT_QPS)?;
    let rep = simulate(&trace, &RunConfig::named("coupled").expect("builtin"), prof, None, scenario.seed)?;
    Ok(SloConfig::new(rep.norm_input.mean, rep.norm_output.mean, scale)?)
}

/// A configuration under a display name.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub config: RunConfig,
}

impl Series {
    pub fn named(name: &str) -> Result<Self, crate::config::ConfigError> {
        Ok(Series { name: name.to_string(), config: RunConfig::named(name)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub series: String,
    pub qps: f64,
    pub completed: usize,
    pub ttft: Summary,
    pub norm_input: Summary,
    pub norm_output: Summary,
    pub throughput_rps: f64,
    pub slo_attainment: f64,
}

impl LatencyRow {
    fn from_report(series: &str, qps: f64, r: &MetricsReport) -> Self {
        LatencyRow {
            series: series.to_string(),
            qps,
            completed: r.completed,
            ttft: r.ttft,
            norm_input: r.norm_input,
            norm_output: r.norm_output,
            throughput_rps: r.throughput_rps,
            slo_attainment: r.slo_attainment,
        }
    }
}

/// Every series at every load, on one trace per load.
pub fn qps_sweep(
    scenario: &Scenario,
    series: &[Series],
    qps: &[f64],
    prof: &CostProfile,
    slo: Option<SloConfig>,
) -> Result<Vec<LatencyRow>, ExperimentError> {
    let traces: Vec<Vec<Request>> = qps.iter().map(|&q| scenario.trace(q)).collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..series.len()).flat_map(|s| (0..qps.len()).map(move |q| (s, q))).collect();
    jobs.par_iter()
        .map(|&(s, q)| {
            let rep = simulate(&traces[q], &series[s].config, prof, slo, scenario.seed)?;
            Ok(LatencyRow::from_report(&series[s].name, qps[q], &rep))
        })
        .collect()
}

/// Highest QPS on the 0.1 grid whose P90 normalized latencies, averaged
/// over `seeds`, stay within `slo`.
pub fn max_qps(
    scenario: &Scenario,
    cfg: &RunConfig,
    prof: &CostProfile,
    slo: &SloConfig,
    range: (f64, f64),
    seeds: &[u64],
) -> Result<SearchOutcome, ExperimentError> {
    let seeds: Vec<u64> = if seeds.is_empty() { vec![scenario.seed] } else { seeds.to_vec() };
    max_throughput_under_slo(range.0, range.1, 0.1, |q| {
        let mut p90_in = 0.0;
        let mut p90_out = 0.0;
        for &s in &seeds {
            let rep = simulate(&scenario.trace_with_seed(q, s)?, cfg, prof, Some(*slo), s)?;
            p90_in += rep.norm_input.p90;
            p90_out += rep.norm_output.p90;
        }
        let k = seeds.len() as f64;
        Ok::<_, ExperimentError>(p90_within(p90_in / k, p90_out / k, slo))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub series: String,
    pub slo_scale: f64,
    pub max_qps: f64,
    pub probes: u32,
    pub lower_bound_failed: bool,
}

/// Max QPS under SLO for every series at every scale of `base`.
pub fn slo_scale_sweep(
    scenario: &Scenario,
    series: &[Series],
    scales: &[f64],
    prof: &CostProfile,
    base: &SloConfig,
    range: (f64, f64),
    seeds: &[u64],
) -> Result<Vec<ThroughputRow>, ExperimentError> {
    let jobs: Vec<(usize, usize)> = (0..series.len()).flat_map(|s| (0..scales.len()).map(move |k| (s, k))).collect();
    jobs.par_iter()
        .map(|&(s, k)| {
            let slo = base.with_scale(scales[k])?;
            let out = max_qps(scenario, &series[s].config, prof, &slo, range, seeds)?;
            Ok(ThroughputRow {
                series: series[s].name.clone(),
                slo_scale: scales[k],
                max_qps: out.qps,
                probes: out.probes,
                lower_bound_failed: out.lower_bound_failed,
            })
        })
        .collect()
}

/// Preemption behaviour of one series at one penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRow {
    pub series: String,
    pub w: f64,
    pub qps: f64,
    pub completed: usize,
    pub ttft: Summary,
    pub forced_preemptions: u64,
    pub opportunistic_preemptions: u64,
    pub migrations: u64,
}

/// Every series at every penalty weight, on the same trace.
pub fn penalty_sweep(
    scenario: &Scenario,
    series: &[Series],
    ws: &[f64],
    qps: f64,
    prof: &CostProfile,
) -> Result<Vec<PenaltyRow>, ExperimentError> {
    let trace = scenario.trace(qps)?;
    let jobs: Vec<(usize, usize)> = (0..series.len()).flat_map(|s| (0..ws.len()).map(move |k| (s, k))).collect();
    jobs.par_iter()
        .map(|&(s, k)| {
            let cfg = RunConfig { w: Some(ws[k]), ..series[s].config.clone() };
            let rep = simulate(&trace, &cfg, prof, None, scenario.seed)?;
            Ok(PenaltyRow {
                series: series[s].name.clone(),
                w: ws[k],
                qps,
                completed: rep.completed,
                ttft: rep.ttft,
                forced_preemptions: rep.counters.forced_preemptions,
                opportunistic_preemptions: rep.counters.opportunistic_preemptions,
                migrations: rep.counters.migrations,
            })
        })
        .collect()
}

pub const LATENCY_COLUMNS: [&str; 12] = [
    "series",
    "qps",
    "completed",
    "mean_ttft",
    "p50_ttft",
    "p90_ttft",
    "p99_ttft",
    "mean_norm_input",
    "p90_norm_input",
    "mean_norm_output",
    "p90_norm_output",
    "throughput_rps",
];

pub const THROUGHPUT_COLUMNS: [&str; 5] = ["series", "slo_scale", "max_qps", "probes", "lower_bound_failed"];

/// Latency-versus-load table; also the shape of the optimization ablation.
pub fn write_latency_csv<W: Write>(rows: &[LatencyRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LATENCY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.qps.to_string(),
            r.completed.to_string(),
            r.ttft.mean.to_string(),
            r.ttft.p50.to_string(),
            r.ttft.p90.to_string(),
            r.ttft.p99.to_string(),
            r.norm_input.mean.to_string(),
            r.norm_input.p90.to_string(),
            r.norm_output.mean.to_string(),
            r.norm_output.p90.to_string(),
            r.throughput_rps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Throughput-versus-SLO-scale table; also the shape of the allocation ablation.
pub fn write_throughput_csv<W: Write>(rows: &[ThroughputRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(THROUGHPUT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.slo_scale.to_string(),
            r.max_qps.to_string(),
            r.probes.to_string(),
            r.lower_bound_failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const PENALTY_COLUMNS: [&str; 8] =
    ["series", "w", "qps", "completed", "mean_ttft", "forced_preemptions", "opportunistic_preemptions", "migrations"];

pub fn write_penalty_csv<W: Write>(rows: &[PenaltyRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PENALTY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.w.to_string(),
            r.qps.to_string(),
            r.completed.to_string(),
            r.ttft.mean.to_string(),
            r.forced_preemptions.to_string(),
            r.opportunistic_preemptions.to_string(),
            r.migrations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const BASELINES: [&str; 3] = ["emp", "static-decoupled", "coupled"];
pub const ALLOCATION_ABLATION: [&str; 4] = ["emp", "emp-static-text", "emp-static-equal", "emp-static-mm"];
pub const OPTIMIZATION_ABLATION: [&str; 3] = ["emp-off", "unicache", "full"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_rows_follow_input_order() {
        let sc = Scenario::new(DatasetProfile::sharegpt4o_like(), 10.0, 1);
        let series = vec![Series::named("emp").unwrap(), Series::named("coupled").unwrap()];
        let rows = qps_sweep(&sc, &series, &[1.0, 2.0], &CostProfile::default_calibration(), None).unwrap();
        let keys: Vec<(&str, f64)> = rows.iter().map(|r| (r.series.as_str(), r.qps)).collect();
        assert_eq!(keys, [("emp", 1.0), ("emp", 2.0), ("coupled", 1.0), ("coupled", 2.0)]);
        let mut buf = Vec::new();
        write_latency_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("series,qps,completed,mean_ttft"));
    }

    #[test]
    fn calibrated_slo_is_positive() {
        let sc = Scenario::new(DatasetProfile::sharegpt4o_like(), 60.0, 2);
        let slo = calibrate_slo(&sc, &CostProfile::default_calibration(), 1.0).unwrap();
        assert!(slo.slo_input() > 0.0 && slo.slo_output() > 0.0);
    }

    #[test]
    fn unbounded_slo_hits_range_top() {
        let sc = Scenario::new(DatasetProfile::sharegpt4o_like(), 10.0, 1);
        let out = max_qps(&sc, &RunConfig::default(), &CostProfile::default_calibration(), &SloConfig::unbounded(), (0.5, 4.0), &[])
            .unwrap();
        assert!((out.qps - 4.0).abs() < 1e-9);
    }
}
