//! Per-run aggregation and the SLO-constrained throughput search.

use crate::cache::CacheStats;
use crate::engine::{AuditRecord, Counters, SimOutput};
use crate::types::{Modality, RequestId, SloConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Bumped whenever a report or CSV column changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary::default();
        }
        v.sort_by(f64::total_cmp);
        Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: nearest_rank(&v, 50.0),
            p90: nearest_rank(&v, 90.0),
            p99: nearest_rank(&v, 99.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: RequestId,
    pub modality: Modality,
    pub ttft: f64,
    /// Seconds to first token per input token.
    pub norm_input: f64,
    /// Decode seconds per output token.
    pub norm_output: f64,
    pub queue_wait: f64,
    pub encode: f64,
    pub migration: f64,
    pub prefill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Set when the run completed no requests; every statistic is then 0.
    pub empty: bool,
    pub completed: usize,
    pub makespan: f64,
    pub ttft: Summary,
    pub norm_input: Summary,
    pub norm_output: Summary,
    pub ttft_text: Summary,
    pub ttft_multimodal: Summary,
    pub throughput_rps: f64,
    pub throughput_tps: f64,
    pub utilization: f64,
    pub slo: Option<SloConfig>,
    /// Fraction of requests meeting both latency targets.
    pub slo_attainment: f64,
    /// P90 of both normalized latencies within target.
    pub meets_slo: bool,
    pub cache: CacheStats,
    pub counters: Counters,
    /// Audit entries by type.
    pub audit_summary: BTreeMap<String, u64>,
    pub requests: Vec<RequestMetrics>,
}

impl MetricsReport {
    pub fn empty(slo: Option<SloConfig>) -> Self {
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            empty: true,
            completed: 0,
            makespan: 0.0,
            ttft: Summary::default(),
            norm_input: Summary::default(),
            norm_output: Summary::default(),
            ttft_text: Summary::default(),
            ttft_multimodal: Summary::default(),
            throughput_rps: 0.0,
            throughput_tps: 0.0,
            utilization: 0.0,
            slo,
            slo_attainment: 0.0,
            meets_slo: false,
            cache: CacheStats::default(),
            counters: Counters::default(),
            audit_summary: BTreeMap::new(),
            requests: Vec::new(),
        }
    }
}

/// Both P90 normalized latencies within their targets.
pub fn p90_within(norm_input_p90: f64, norm_output_p90: f64, slo: &SloConfig) -> bool {
    norm_input_p90 <= slo.slo_input() && norm_output_p90 <= slo.slo_output()
}

pub fn aggregate(out: &SimOutput, slo: Option<SloConfig>) -> MetricsReport {
    if out.records.is_empty() {
        return MetricsReport::empty(slo);
    }
    let requests: Vec<RequestMetrics> = out
        .records
        .iter()
        .map(|r| RequestMetrics {
            id: r.id,
            modality: r.modality,
            ttft: r.ttft(),
            norm_input: r.ttft() / r.total_input_len as f64,
            norm_output: (r.completion_time - r.first_token_time) / r.output_len as f64,
            queue_wait: r.queue_wait,
            encode: r.encode,
            migration: r.migration,
            prefill: r.prefill,
        })
        .collect();
    let of = |m: Option<Modality>| Summary::of(requests.iter().filter(|r| m.is_none_or(|m| r.modality == m)).map(|r| r.ttft));
    let norm_input = Summary::of(requests.iter().map(|r| r.norm_input));
    let norm_output = Summary::of(requests.iter().map(|r| r.norm_output));
    let start = out.records.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
    let span = (out.makespan - start).max(f64::MIN_POSITIVE);
    let tokens: u64 = out.records.iter().map(|r| r.total_input_len + r.output_len).sum();
    let (attainment, meets) = match &slo {
        Some(s) => {
            let ok = requests.iter().filter(|r| r.norm_input <= s.slo_input() && r.norm_output <= s.slo_output()).count();
            (ok as f64 / requests.len() as f64, p90_within(norm_input.p90, norm_output.p90, s))
        }
        None => (1.0, true),
    };
    let mut audit_summary = BTreeMap::new();
    for a in &out.audit {
        let key = match a {
            AuditRecord::Tick(_) => "tick",
            AuditRecord::Scale { .. } => "scale",
            AuditRecord::Rebalance { .. } => "rebalance",
            AuditRecord::Borrow { .. } => "borrow",
        };
        *audit_summary.entry(key.to_string()).or_insert(0) += 1;
    }
    MetricsReport {
        schema_version: SCHEMA_VERSION,
        empty: false,
        completed: requests.len(),
        makespan: out.makespan,
        ttft: of(None),
        norm_input,
        norm_output,
        ttft_text: of(Some(Modality::TextOnly)),
        ttft_multimodal: of(Some(Modality::Multimodal)),
        throughput_rps: requests.len() as f64 / span,
        throughput_tps: tokens as f64 / span,
        utilization: out.utilization(),
        slo,
        slo_attainment: attainment,
        meets_slo: meets,
        cache: out.cache,
        counters: out.counters,
        audit_summary,
        requests,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Highest passing QPS, or 0 when even the lower bound fails.
    pub qps: f64,
    pub probes: u32,
    pub lower_bound_failed: bool,
    pub diagnostic: Option<String>,
}

/// Largest probe count the search may use over `[lo, hi]` at `step`.
pub fn probe_bound(lo: f64, hi: f64, step: f64) -> u32 {
    let range = ((hi - lo) / step).max(1.0);
    range.log2().ceil() as u32 + 2
}

/// Binary search on a `step` grid for the highest QPS in `[lo, hi]` that
/// `passes`. Assumes passing is monotone in load.
pub fn max_throughput_under_slo<E: std::fmt::Display>(
    lo: f64,
    hi: f64,
    step: f64,
    mut passes: impl FnMut(f64) -> Result<bool, E>,
) -> Result<SearchOutcome, E> {
    assert!(step > 0.0 && lo > 0.0 && hi >= lo, "search range must be positive and ordered");
    let grid = |k: i64| k as f64 * step;
    let mut lo_k = (lo / step - 1e-9).ceil() as i64;
    let mut hi_k = (hi / step + 1e-9).floor() as i64;
    let mut probes = 0;
    let mut probe = |k: i64, probes: &mut u32| {
        *probes += 1;
        passes(grid(k))
    };
    if probe(hi_k, &mut probes)? {
        return Ok(SearchOutcome { qps: grid(hi_k), probes, lower_bound_failed: false, diagnostic: None });
    }
    if lo_k == hi_k || !probe(lo_k, &mut probes)? {
        return Ok(SearchOutcome {
            qps: 0.0,
            probes,
            lower_bound_failed: true,
            diagnostic: Some(format!("SLO violated already at {:.1} QPS", grid(lo_k))),
        });
    }
    // lo_k passes, hi_k fails.
    while hi_k - lo_k > 1 {
        let mid = lo_k + (hi_k - lo_k) / 2;
        if probe(mid, &mut probes)? {
            lo_k = mid;
        } else {
            hi_k = mid;
        }
    }
    Ok(SearchOutcome { qps: grid(lo_k), probes, lower_bound_failed: false, diagnostic: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RequestRecord;
    use proptest::prelude::*;

    fn record(id: u64, arrival: f64, first: f64, done: f64, input: u64, output: u64) -> RequestRecord {
        RequestRecord {
            id,
            modality: Modality::TextOnly,
            priority_hint: false,
            group: 0,
            arrival_time: arrival,
            first_token_time: first,
            completion_time: done,
            total_input_len: input,
            output_len: output,
            queue_wait: 0.0,
            encode: 0.0,
            migration: 0.0,
            prefill: first - arrival,
            encoded_tokens: 0,
            prefilled_tokens: input,
            decoded_tokens: output,
            encode_computed: 0,
            prefill_computed: input,
        }
    }

    fn output(records: Vec<RequestRecord>) -> SimOutput {
        let makespan = records.iter().map(|r| r.completion_time).fold(0.0, f64::max);
        SimOutput {
            records,
            counters: Counters::default(),
            cache: CacheStats::default(),
            makespan,
            busy: vec![makespan],
            events: vec![],
            audit: vec![],
        }
    }

    #[test]
    fn normalized_input_latency_is_per_token() {
        let rep = aggregate(&output(vec![record(0, 1.0, 3.0, 5.0, 1000, 4)]), None);
        assert!((rep.requests[0].norm_input - 0.002).abs() < 1e-15);
        assert!((rep.requests[0].norm_output - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_requests_collapse_percentiles() {
        let recs = (0..7).map(|i| record(i, 0.0, 2.0, 3.0, 100, 10)).collect();
        let s = aggregate(&output(recs), None).ttft;
        assert_eq!((s.p50, s.p90, s.p99), (s.mean, s.mean, s.mean));
    }

    #[test]
    fn empty_run_has_marker_and_no_nans() {
        let rep = aggregate(&output(vec![]), Some(SloConfig::new(0.001, 0.02, 1.0).unwrap()));
        assert!(rep.empty);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(!json.contains("NaN"));
        assert!(rep.ttft.mean.is_finite() && rep.throughput_rps == 0.0);
    }

    #[test]
    fn nearest_rank_matches_definition() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 90.0), 9.0);
        assert_eq!(nearest_rank(&v, 99.0), 10.0);
        assert_eq!(nearest_rank(&v, 50.0), 5.0);
        assert_eq!(nearest_rank(&[3.0], 1.0), 3.0);
    }

    #[test]
    fn unbounded_slo_returns_upper_end() {
        let out = max_throughput_under_slo::<String>(0.1, 20.0, 0.1, |_| Ok(true)).unwrap();
        assert!((out.qps - 20.0).abs() < 1e-9);
        assert_eq!(out.probes, 1);
    }

    #[test]
    fn failing_lower_bound_reports_zero() {
        let out = max_throughput_under_slo::<String>(0.5, 20.0, 0.1, |_| Ok(false)).unwrap();
        assert!(out.lower_bound_failed && out.qps == 0.0 && out.diagnostic.is_some());
    }

    proptest! {
        #[test]
        fn search_finds_threshold_within_bound(cut in 1u32..200, hi in 1u32..200) {
            let lo = 0.1;
            let hi = f64::from(hi) / 10.0 + 0.1;
            let cut = f64::from(cut) / 10.0;
            let out = max_throughput_under_slo::<String>(lo, hi, 0.1, |q| Ok(q <= cut + 1e-9)).unwrap();
            prop_assert!(out.probes <= probe_bound(lo, hi, 0.1));
            let expect = if cut >= lo { cut.min(hi) } else { 0.0 };
            prop_assert!((out.qps - expect).abs() < 0.1 + 1e-9, "{} vs {}", out.qps, expect);
            prop_assert!(out.qps <= cut + 1e-9);
        }

        #[test]
        fn percentiles_are_ordered(v in proptest::collection::vec(0.0f64..100.0, 1..200)) {
            let s = Summary::of(v.iter().copied());
            prop_assert!(s.p50 <= s.p90 && s.p90 <= s.p99);
            let max = v.iter().copied().fold(0.0, f64::max);
            prop_assert!(s.p99 <= max && s.mean <= max + 1e-9);
        }
    }
}
